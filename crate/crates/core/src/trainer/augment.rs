//! Two-view augmentation: random resized crop, horizontal flip, colour jitter,
//! random grayscale, then per-channel standardization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::derive_seed;

/// Standardization applied to every model input.
pub const PIXEL_MEAN: f32 = 0.5;
pub const PIXEL_STD: f32 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub out_size: usize,
    /// Crop area as a fraction of the source image.
    pub scale_min: f64,
    pub scale_max: f64,
    pub flip_p: f64,
    pub jitter_p: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub grayscale_p: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            out_size: 32,
            scale_min: 0.3,
            scale_max: 1.0,
            flip_p: 0.5,
            jitter_p: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            grayscale_p: 0.2,
        }
    }
}

/// Random choices behind one view; exposed for distribution tests.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewParams {
    pub crop: (f64, f64, f64, f64),
    pub flip: bool,
    pub jitter: Option<(f64, f64, f64)>,
    pub grayscale: bool,
}

impl AugmentConfig {
    pub fn sample(&self, rng: &mut ChaCha8Rng, h: usize, w: usize) -> ViewParams {
        let area = (h * w) as f64;
        let mut crop = (0.0, 0.0, h as f64, w as f64);
        for _ in 0..10 {
            let target = area * rng.random_range(self.scale_min..=self.scale_max);
            let log_ratio = rng.random_range((3.0f64 / 4.0).ln()..=(4.0f64 / 3.0).ln());
            let ratio = log_ratio.exp();
            let cw = (target * ratio).sqrt();
            let ch = (target / ratio).sqrt();
            if cw <= w as f64 && ch <= h as f64 {
                let top = rng.random_range(0.0..=(h as f64 - ch));
                let left = rng.random_range(0.0..=(w as f64 - cw));
                crop = (top, left, ch, cw);
                break;
            }
        }
        let flip = rng.random_bool(self.flip_p);
        let jitter = rng.random_bool(self.jitter_p).then(|| {
            let f = |s: f64, rng: &mut ChaCha8Rng| rng.random_range((1.0 - s).max(0.0)..=1.0 + s);
            (f(self.brightness, rng), f(self.contrast, rng), f(self.saturation, rng))
        });
        let grayscale = rng.random_bool(self.grayscale_p);
        ViewParams {
            crop,
            flip,
            jitter,
            grayscale,
        }
    }
}

/// Bilinear sample of the `(top, left, height, width)` window of an
/// `[h, w, c]` image onto an `out × out` grid, half-pixel aligned.
pub fn resample(img: &[f32], (h, w, c): (usize, usize, usize), window: (f64, f64, f64, f64), out: usize) -> Vec<f32> {
    let (top, left, wh, ww) = window;
    let (sy, sx) = (wh / out as f64, ww / out as f64);
    let mut dst = Vec::with_capacity(out * out * c);
    for oy in 0..out {
        let fy = (top + (oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ay = fy - y0 as f64;
        for ox in 0..out {
            let fx = (left + (ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let ax = fx - x0 as f64;
            for ch in 0..c {
                let p = |y: usize, x: usize| img[(y * w + x) * c + ch] as f64;
                let top_row = p(y0, x0) * (1.0 - ax) + p(y0, x1) * ax;
                let bottom = p(y1, x0) * (1.0 - ax) + p(y1, x1) * ax;
                dst.push((top_row * (1.0 - ay) + bottom * ay) as f32);
            }
        }
    }
    dst
}

fn gray(px: &[f32]) -> f32 {
    0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
}

/// Applies `p` to an `[h, w, c]` image in `[0, 1]`, returning a standardized
/// `[out, out, c]` view.
pub fn apply(img: &[f32], dims: (usize, usize, usize), p: &ViewParams, out: usize) -> Vec<f32> {
    let c = dims.2;
    let mut v = resample(img, dims, p.crop, out);
    if p.flip {
        for row in v.chunks_mut(out * c) {
            for x in 0..out / 2 {
                for ch in 0..c {
                    row.swap(x * c + ch, (out - 1 - x) * c + ch);
                }
            }
        }
    }
    if let Some((b, con, sat)) = p.jitter {
        let (b, con, sat) = (b as f32, con as f32, sat as f32);
        v.iter_mut().for_each(|x| *x = (*x * b).clamp(0.0, 1.0));
        if c == 3 {
            let mean = v.chunks(3).map(gray).sum::<f32>() / (out * out) as f32;
            v.iter_mut().for_each(|x| *x = ((*x - mean) * con + mean).clamp(0.0, 1.0));
            for px in v.chunks_mut(3) {
                let g = gray(px);
                px.iter_mut().for_each(|x| *x = ((*x - g) * sat + g).clamp(0.0, 1.0));
            }
        }
    }
    if p.grayscale && c == 3 {
        for px in v.chunks_mut(3) {
            let g = gray(px);
            px.fill(g);
        }
    }
    standardize(&mut v);
    v
}

pub fn standardize(v: &mut [f32]) {
    v.iter_mut().for_each(|x| *x = (*x - PIXEL_MEAN) / PIXEL_STD);
}

/// Two independently augmented views of one image, fixed by
/// `(seed, epoch, index)`.
pub fn make_views(
    img: &[f32],
    dims: (usize, usize, usize),
    cfg: &AugmentConfig,
    seed: u64,
    epoch: usize,
    index: usize,
) -> Result<(Vec<f32>, Vec<f32>)> {
    let (h, w, _) = dims;
    if h < cfg.out_size || w < cfg.out_size {
        return Err(Error::Data(format!(
            "image {h}x{w} is smaller than the {0}x{0} view size",
            cfg.out_size
        )));
    }
    let base = derive_seed(seed, &[epoch as u64, index as u64]);
    let view = |k: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(base, &[k]));
        let p = cfg.sample(&mut rng, h, w);
        apply(img, dims, &p, cfg.out_size)
    };
    Ok((view(0), view(1)))
}

/// Deterministic evaluation input: the whole image resized and standardized.
pub fn eval_view(img: &[f32], dims: (usize, usize, usize), out: usize) -> Vec<f32> {
    let mut v = resample(img, dims, (0.0, 0.0, dims.0 as f64, dims.1 as f64), out);
    standardize(&mut v);
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize) -> Vec<f32> {
        (0..h * w * 3).map(|i| ((i * 37) % 101) as f32 / 100.0).collect()
    }

    #[test]
    fn views_are_deterministic_and_shaped() {
        let cfg = AugmentConfig::default();
        let x = img(64, 64);
        let a = make_views(&x, (64, 64, 3), &cfg, 1, 2, 3).unwrap();
        let b = make_views(&x, (64, 64, 3), &cfg, 1, 2, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0.len(), 32 * 32 * 3);
        assert_eq!(a.1.len(), 32 * 32 * 3);
        assert_ne!(a.0, a.1);
        assert_ne!(a, make_views(&x, (64, 64, 3), &cfg, 1, 3, 3).unwrap());
    }

    #[test]
    fn undersized_images_are_rejected() {
        let cfg = AugmentConfig::default();
        let e = make_views(&img(16, 16), (16, 16, 3), &cfg, 0, 0, 0).unwrap_err();
        assert!(matches!(e, Error::Data(_)));
    }

    #[test]
    fn flip_frequency() {
        let cfg = AugmentConfig::default();
        let flips = (0..1000)
            .filter(|&i| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(5, &[i]));
                cfg.sample(&mut rng, 64, 64).flip
            })
            .count();
        assert!((450..=550).contains(&flips), "{flips}");
    }

    #[test]
    fn halving_averages_pixel_quads() {
        let x = img(4, 4);
        let y = resample(&x, (4, 4, 3), (0.0, 0.0, 4.0, 4.0), 2);
        for ch in 0..3 {
            let q = [x[ch], x[3 + ch], x[12 + ch], x[15 + ch]];
            let want = q.iter().map(|&v| v as f64).sum::<f64>() / 4.0;
            assert!((y[ch] as f64 - want).abs() < 1e-6);
        }
    }

    #[test]
    fn identity_view_without_jitter() {
        let x = img(8, 8);
        let p = ViewParams {
            crop: (0.0, 0.0, 8.0, 8.0),
            flip: false,
            jitter: None,
            grayscale: false,
        };
        let v = apply(&x, (8, 8, 3), &p, 8);
        for (a, b) in v.iter().zip(&x) {
            assert!((a * PIXEL_STD + PIXEL_MEAN - b).abs() < 1e-6);
        }
    }
}
