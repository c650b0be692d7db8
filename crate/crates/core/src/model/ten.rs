//! Token enhancing: auxiliary CLS tokens cross-attend to the patch tokens,
//! then pass through a per-token MLP. Pre-norm, residual around both parts.

use super::{add_linear, add_norm, attention_core, linear, mlp, norm, ModelConfig};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Element, Var};

#[derive(Clone, Debug)]
pub struct TenModule {
    pub dim: usize,
    pub heads: usize,
    pub hidden: usize,
}

impl TenModule {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        TenModule {
            dim: cfg.embed_dim,
            heads: cfg.heads,
            hidden: cfg.mlp_hidden(),
        }
    }

    pub fn init<T: Element>(&self, p: &mut ParamStore<T>, seed: u64) {
        let d = self.dim;
        add_norm(p, seed, "ten.norm_q", d);
        add_norm(p, seed, "ten.norm_kv", d);
        for n in ["q", "k", "v", "proj"] {
            add_linear(p, seed, &format!("ten.{n}"), d, d);
        }
        add_norm(p, seed, "ten.norm_mlp", d);
        add_linear(p, seed, "ten.mlp.fc1", d, self.hidden);
        add_linear(p, seed, "ten.mlp.fc2", self.hidden, d);
    }

    /// Cross-attention probabilities are returned alongside the output only
    /// through [`TenModule::forward_with_attention`].
    pub fn forward<'t, T: Element>(
        &self,
        params: &Bound<'t, T>,
        aux: Var<'t, T>,
        patches: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        Ok(self.forward_with_attention(params, aux, patches)?.0)
    }

    /// `aux: [B, M, D]`, `patches: [B, N, D]` → (`[B, M, D]`, `[B, H, M, N]`).
    pub fn forward_with_attention<'t, T: Element>(
        &self,
        params: &Bound<'t, T>,
        aux: Var<'t, T>,
        patches: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let (sa, sp) = (aux.shape(), patches.shape());
        if sa.len() != 3 || sp.len() != 3 || sa[0] != sp[0] || sa[2] != self.dim || sp[2] != self.dim {
            return Err(Error::shape("ten_forward", &sa, &sp));
        }
        let (m, n) = (sa[1], sp[1]);
        if m == 0 {
            let empty = aux.tape().constant(crate::tensor::Tensor::zeros(&[sa[0], self.heads, 0, n]));
            return Ok((aux, empty));
        }
        let q_in = norm(params, "ten.norm_q", aux)?;
        let kv_in = norm(params, "ten.norm_kv", patches)?;
        let q = linear(params, "ten.q", q_in)?;
        let k = linear(params, "ten.k", kv_in)?;
        let v = linear(params, "ten.v", kv_in)?;
        let mask = vec![true; m * n];
        let (ctx, probs) = attention_core(q, k, v, self.heads, &mask)?;
        let x = aux.add(&linear(params, "ten.proj", ctx)?)?;
        let h = norm(params, "ten.norm_mlp", x)?;
        Ok((x.add(&mlp(params, "ten.mlp", h)?)?, probs))
    }
}
