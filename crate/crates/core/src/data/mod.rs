//! Image datasets, the procedural generator, the CIFAR-10 binary reader and
//! plain-text exports.

mod cifar;
pub mod export;
mod synthetic;
mod weight_maps;

pub use cifar::{cifar_record, load_cifar_batches, CIFAR_RECORD};
pub use synthetic::{gen_synthetic, SyntheticConfig};
pub use weight_maps::{export_weight_maps, pool_weight_maps};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Images in `[0, 1]`, stored contiguously as `[n, H, W, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pixels: Vec<f32>,
    pub labels: Vec<usize>,
    /// Stable sample ids.
    pub ids: Vec<usize>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
}

impl Dataset {
    pub fn new(
        pixels: Vec<f32>,
        labels: Vec<usize>,
        (height, width, channels): (usize, usize, usize),
        classes: usize,
    ) -> Result<Self> {
        let per = height * width * channels;
        if per == 0 || pixels.len() != per * labels.len() {
            return Err(Error::Data(format!(
                "{} pixel values do not form {} images of {height}x{width}x{channels}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Data(format!("label {y} out of range for {classes} classes")));
        }
        let ids = (0..labels.len()).collect();
        Ok(Dataset {
            pixels,
            labels,
            ids,
            height,
            width,
            channels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    /// Samples at `idx`, keeping their ids.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut pixels = Vec::with_capacity(idx.len() * self.image_len());
        for &i in idx {
            pixels.extend_from_slice(self.image(i));
        }
        Dataset {
            pixels,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Dataset {
        Dataset {
            pixels: Vec::new(),
            labels: Vec::new(),
            ids: Vec::new(),
            height: self.height,
            width: self.width,
            channels: self.channels,
            classes: self.classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }

    /// Raw pixels as a `[n, H·W·C]` matrix.
    pub fn flat(&self) -> Tensor<f32> {
        Tensor::new(&[self.len(), self.image_len()], self.pixels.clone()).expect("consistent dataset")
    }
}
