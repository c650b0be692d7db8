//! Adaptively pooled tokens: each branch predicts a per-position, per-channel
//! weight map from the patch grid (1×1 conv then depthwise k×k conv) and
//! averages the weighted patch tokens.

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{add_param, Bound, Init, ParamStore};
use crate::tensor::{Element, Var};

#[derive(Clone, Debug)]
pub struct AdaptivePooler {
    pub branches: usize,
    pub dim: usize,
    pub grid: usize,
    pub kernel: usize,
}

impl AdaptivePooler {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        AdaptivePooler {
            branches: cfg.num_pooled,
            dim: cfg.embed_dim,
            grid: cfg.grid(),
            kernel: cfg.effective_pool_kernel(),
        }
    }

    pub fn init<T: Element>(&self, p: &mut ParamStore<T>, seed: u64) {
        let (d, k) = (self.dim, self.kernel);
        for i in 0..self.branches {
            let b = format!("pool.{i}");
            add_param(p, seed, &format!("{b}.pw.weight"), &[d, d], Init::Uniform(1.0 / (d as f64).sqrt()));
            add_param(p, seed, &format!("{b}.pw.bias"), &[d], Init::Uniform(1.0 / (d as f64).sqrt()));
            add_param(p, seed, &format!("{b}.dw.kernel"), &[k, k, d], Init::Uniform(1.0 / k as f64));
        }
    }

    /// Weight map of branch `i` for `patches: [B, N, D]`, returned as `[B, N, D]`.
    pub fn weights<'t, T: Element>(&self, params: &Bound<'t, T>, i: usize, patches: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = patches.shape();
        if s.len() != 3 || s[1] != self.grid * self.grid {
            return Err(Error::Config(format!(
                "adaptive pooling needs a square {0}x{0} patch grid, got {1:?}",
                self.grid, s
            )));
        }
        let (b, n, d) = (s[0], s[1], s[2]);
        let grid = patches.reshape(&[b, self.grid, self.grid, d])?;
        let pre = format!("pool.{i}");
        let pw = grid.pointwise_conv1x1(&params.get(&format!("{pre}.pw.weight"))?, &params.get(&format!("{pre}.pw.bias"))?)?;
        let w = pw.depthwise_conv2d(&params.get(&format!("{pre}.dw.kernel"))?)?;
        w.reshape(&[b, n, d])
    }

    /// `patches: [B, N, D]` → pooled tokens `[B, K, D]` and the K weight maps.
    pub fn forward<'t, T: Element>(
        &self,
        params: &Bound<'t, T>,
        patches: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Vec<Var<'t, T>>)> {
        let s = patches.shape();
        if s.len() != 3 {
            return Err(Error::shape("adaptive_pool", &s, &[self.grid * self.grid, self.dim]));
        }
        let (b, d) = (s[0], s[2]);
        let mut tokens = Vec::with_capacity(self.branches);
        let mut maps = Vec::with_capacity(self.branches);
        for i in 0..self.branches {
            let w = self.weights(params, i, patches)?;
            tokens.push(pool_with_weights(w, patches)?.reshape(&[b, 1, d])?);
            maps.push(w);
        }
        if tokens.is_empty() {
            return Ok((patches.tape().constant(crate::tensor::Tensor::zeros(&[b, 0, d])), maps));
        }
        Ok((patches.tape().concat(&tokens, 1)?, maps))
    }
}


/// `mean_n(weights[n] ⊙ patches[n])` over `[B, N, D]` inputs, giving `[B, D]`.
pub fn pool_with_weights<'t, T: Element>(weights: Var<'t, T>, patches: Var<'t, T>) -> Result<Var<'t, T>> {
    weights.mul(&patches)?.mean_axis(1)
}
