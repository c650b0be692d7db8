use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::params::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            classes: 3,
            train_per_class: 200,
            test_per_class: 50,
            image_size: 64,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn splits(&self) -> Result<(Dataset, Dataset)> {
        Ok((
            gen_synthetic(self.classes, self.train_per_class, self.image_size, derive_seed(self.seed, &[0]))?,
            gen_synthetic(self.classes, self.test_per_class, self.image_size, derive_seed(self.seed, &[1]))?,
        ))
    }
}

/// Procedural image classes. Class `c` combines a grating whose frequency
/// grows with `c`, a class-specific shape, and a palette drawn around a
/// class hue. Orientation, phase, position, size, palette and pixel noise
/// vary per image. Samples are interleaved by class.
pub fn gen_synthetic(classes: usize, per_class: usize, size: usize, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Usage(format!("synthetic data needs at least 2 classes, got {classes}")));
    }
    if size < 8 {
        return Err(Error::Usage(format!("synthetic image size {size} is too small")));
    }
    let mut pixels = Vec::with_capacity(classes * per_class * size * size * 3);
    let mut labels = Vec::with_capacity(classes * per_class);
    for i in 0..per_class {
        for c in 0..classes {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[c as u64, i as u64]));
            draw(&mut rng, c, classes, size, &mut pixels);
            labels.push(c);
        }
    }
    Dataset::new(pixels, labels, (size, size, 3), classes)
}

fn draw(rng: &mut ChaCha8Rng, class: usize, classes: usize, size: usize, out: &mut Vec<f32>) {
    let s = size as f64;
    let hue = class as f64 / classes as f64 + rng.random_range(-0.12..0.12);
    let bg_a = hsv(hue, rng.random_range(0.4..0.9), rng.random_range(0.5..0.9));
    let bg_b = hsv(hue + 0.5, rng.random_range(0.2..0.6), rng.random_range(0.1..0.5));
    let fg = hsv(hue + 0.25, rng.random_range(0.5..1.0), rng.random_range(0.6..1.0));

    let freq = (2.0 + 3.0 * class as f64) * rng.random_range(0.85..1.15);
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let (ct, st) = (theta.cos(), theta.sin());

    let cx = s * (0.5 + rng.random_range(-0.15..0.15));
    let cy = s * (0.5 + rng.random_range(-0.15..0.15));
    let radius = s * rng.random_range(0.18..0.28);
    let spin = rng.random_range(0.0..std::f64::consts::TAU);
    let noise = Normal::new(0.0, 0.04).expect("valid std");

    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = 0.5 + 0.5 * (std::f64::consts::TAU * freq * (px * ct + py * st) / s + phase).sin();
            let inside = in_shape(class % 5, (px - cx) / radius, (py - cy) / radius, spin);
            for ch in 0..3 {
                let base = if inside { fg[ch] } else { bg_a[ch] * t + bg_b[ch] * (1.0 - t) };
                let v = base + noise.sample(rng);
                out.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
}

/// Unit-scale shape membership in local coordinates.
fn in_shape(kind: usize, u: f64, v: f64, spin: f64) -> bool {
    let (c, s) = (spin.cos(), spin.sin());
    let (ru, rv) = (u * c - v * s, u * s + v * c);
    match kind {
        0 => u * u + v * v <= 1.0,
        1 => ru.abs().max(rv.abs()) <= 0.8,
        2 => {
            let r = (u * u + v * v).sqrt();
            (0.6..=1.0).contains(&r)
        }
        3 => (ru.abs() <= 0.3 && rv.abs() <= 1.0) || (rv.abs() <= 0.3 && ru.abs() <= 1.0),
        _ => ru.abs() + rv.abs() <= 1.0,
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor() as usize % 6;
    let f = h - h.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}
