use std::path::{Path, PathBuf};

use super::export::write_grid;
use super::Dataset;
use crate::error::{Error, Result};
use crate::model::{forward, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::{Tape, Tensor};
use crate::trainer::eval_batch;

/// Adaptive pooling weights of every branch for the selected images, each
/// `[n_images, N, D]`, in branch order.
pub fn pool_weight_maps(params: &ParamStore<f32>, cfg: &ModelConfig, data: &Dataset, images: &[usize]) -> Result<Vec<Tensor<f32>>> {
    if cfg.num_pooled == 0 || !params.contains("pool.0.dw.kernel") {
        return Err(Error::Usage("weight maps need an unstripped checkpoint with pooled tokens".into()));
    }
    if let Some(&bad) = images.iter().find(|&&i| i >= data.len()) {
        return Err(Error::Usage(format!("image index {bad} out of range for {} images", data.len())));
    }
    let x = eval_batch(data, images, cfg.image_size)?;
    let tape = Tape::no_grad();
    let bound = params.bind(&tape, |_| false);
    let bundle = forward(&tape, &bound, cfg, &x)?;
    Ok(bundle.pool_weights.iter().map(|w| (*w.value()).clone()).collect())
}

/// Writes, for each selected image and pooling branch, a CSV holding the
/// `√N × √N` weight grid of every selected channel stacked vertically
/// (`img{i}_branch{k}.csv`), plus each branch's `k × k` depthwise kernels
/// for the same channels (`kernel_branch{k}.csv`).
pub fn export_weight_maps(
    params: &ParamStore<f32>,
    cfg: &ModelConfig,
    data: &Dataset,
    images: &[usize],
    channels: &[usize],
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let d = cfg.embed_dim;
    if channels.is_empty() {
        return Err(Error::Usage("select at least one channel".into()));
    }
    if let Some(&bad) = channels.iter().find(|&&c| c >= d) {
        return Err(Error::Usage(format!("channel {bad} out of range for {d} channels")));
    }
    let maps = pool_weight_maps(params, cfg, data, images)?;
    std::fs::create_dir_all(out)?;
    let (g, n) = (cfg.grid(), cfg.num_patches());
    let kk = cfg.effective_pool_kernel();
    let mut files = Vec::new();
    for (branch, w) in maps.iter().enumerate() {
        for (row, &img) in images.iter().enumerate() {
            let mut grid = Vec::with_capacity(channels.len() * n);
            for &c in channels {
                grid.extend((0..n).map(|p| w.data()[(row * n + p) * d + c] as f64));
            }
            let path = out.join(format!("img{img}_branch{branch}.csv"));
            write_grid(&path, &grid, channels.len() * g, g)?;
            files.push(path);
        }
        let kernel = params.get(&format!("pool.{branch}.dw.kernel"))?;
        let mut grid = Vec::with_capacity(channels.len() * kk * kk);
        for &c in channels {
            grid.extend((0..kk * kk).map(|q| kernel.data()[q * d + c] as f64));
        }
        let path = out.join(format!("kernel_branch{branch}.csv"));
        write_grid(&path, &grid, channels.len() * kk, kk)?;
        files.push(path);
    }
    Ok(files)
}
