use serde::{Deserialize, Serialize};

use super::BaseLossKind;
use crate::error::{Error, Result};
use crate::model::{add_linear, linear};
use crate::params::{add_param, Bound, Init, ParamStore};
use crate::tensor::{cst, Element, Tensor, Var};

pub(crate) const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub hidden: usize,
    pub bottleneck: usize,
    /// Prototype count P (clustering loss only).
    pub prototypes: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            hidden: 512,
            bottleneck: 64,
            prototypes: 1024,
        }
    }
}

/// One head per auxiliary token (first the M enhanced tokens, then the K
/// pooled ones) plus a separate head for the global token. In shared mode a
/// single parameter set serves every auxiliary token.
#[derive(Clone, Debug)]
pub struct HeadBank {
    pub cfg: HeadConfig,
    pub dim: usize,
    pub num_aux: usize,
    pub shared: bool,
    pub kind: BaseLossKind,
}

impl HeadBank {
    pub fn new(cfg: HeadConfig, dim: usize, num_aux: usize, shared: bool, kind: BaseLossKind) -> Self {
        HeadBank {
            cfg,
            dim,
            num_aux,
            shared,
            kind,
        }
    }

    pub fn out_dim(&self) -> usize {
        match self.kind {
            BaseLossKind::Clustering => self.cfg.prototypes,
            _ => self.cfg.bottleneck,
        }
    }

    pub fn global_prefix(&self) -> &'static str {
        "head.global"
    }

    /// Parameter prefix of the head serving auxiliary token `i`.
    pub fn aux_prefix(&self, i: usize) -> String {
        if self.shared {
            "head.shared".to_string()
        } else {
            format!("head.aux.{i}")
        }
    }

    pub fn prefixes(&self) -> Vec<String> {
        let mut v = vec![self.global_prefix().to_string()];
        if self.shared {
            if self.num_aux > 0 {
                v.push("head.shared".into());
            }
        } else {
            v.extend((0..self.num_aux).map(|i| self.aux_prefix(i)));
        }
        v
    }

    pub fn init<T: Element>(&self, p: &mut ParamStore<T>, seed: u64) {
        let c = &self.cfg;
        for pre in self.prefixes() {
            add_linear(p, seed, &format!("{pre}.fc1"), self.dim, c.hidden);
            add_linear(p, seed, &format!("{pre}.fc2"), c.hidden, c.hidden);
            add_linear(p, seed, &format!("{pre}.fc3"), c.hidden, c.bottleneck);
            if self.kind == BaseLossKind::Clustering {
                let name = format!("{pre}.proto.weight");
                add_param(p, seed, &name, &[c.prototypes, c.bottleneck], Init::Uniform(1.0 / (c.bottleneck as f64).sqrt()));
            }
        }
        normalize_prototypes(p);
    }

    /// Runs the head at `prefix` on `x: [B, D]`, giving `[B, out_dim]`.
    pub fn project<'t, T: Element>(&self, params: &Bound<'t, T>, prefix: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = linear(params, &format!("{prefix}.fc1"), x)?.gelu();
        let h = linear(params, &format!("{prefix}.fc2"), h)?.gelu();
        let z = linear(params, &format!("{prefix}.fc3"), h)?.l2_normalize(cst(NORM_EPS));
        if self.kind != BaseLossKind::Clustering {
            return Ok(z);
        }
        let proto = params.get(&format!("{prefix}.proto.weight"))?.l2_normalize(cst(NORM_EPS));
        z.matmul_t(&proto)
    }

    pub fn project_global<'t, T: Element>(&self, params: &Bound<'t, T>, global: Var<'t, T>) -> Result<Var<'t, T>> {
        self.project(params, self.global_prefix(), global)
    }

    /// Projects every auxiliary token through its head and averages.
    /// `enhanced: [B, M, D]`, `pooled: [B, K, D]`. Returns the fused
    /// `[B, out_dim]` output and the per-token outputs in token order.
    pub fn project_fuse<'t, T: Element>(
        &self,
        params: &Bound<'t, T>,
        enhanced: Var<'t, T>,
        pooled: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Vec<Var<'t, T>>)> {
        let (se, sp) = (enhanced.shape(), pooled.shape());
        let (m, k) = (se[1], sp[1]);
        if m + k == 0 {
            return Err(Error::Usage("token fusion needs at least one auxiliary token".into()));
        }
        if m + k != self.num_aux {
            return Err(Error::Usage(format!("head bank sized for {} tokens, got {}", self.num_aux, m + k)));
        }
        let b = se[0];
        let mut outs = Vec::with_capacity(m + k);
        for i in 0..m + k {
            let (src, j) = if i < m { (enhanced, i) } else { (pooled, i - m) };
            let tok = src.narrow(1, j, 1)?.reshape(&[b, self.dim])?;
            outs.push(self.project(params, &self.aux_prefix(i), tok)?);
        }
        let mut sum = outs[0];
        for o in &outs[1..] {
            sum = sum.add(o)?;
        }
        Ok((sum.scale(cst(1.0 / (m + k) as f64)), outs))
    }
}

/// Rescales every stored prototype row to unit length.
pub fn normalize_prototypes<T: Element>(p: &mut ParamStore<T>) {
    for (name, t) in p.iter_mut() {
        if name.ends_with(".proto.weight") {
            normalize_rows(t);
        }
    }
}

pub fn normalize_rows<T: Element>(t: &mut Tensor<T>) {
    let cols = *t.shape().last().unwrap_or(&1);
    for row in t.data_mut().chunks_mut(cols.max(1)) {
        let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(cst(NORM_EPS));
        row.iter_mut().for_each(|v| *v /= n);
    }
}
