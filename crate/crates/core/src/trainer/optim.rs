use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{cst, Element, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub weight_decay: f64,
    /// Updates applied so far.
    pub steps: u64,
    pub first: BTreeMap<String, Tensor<T>>,
    pub second: BTreeMap<String, Tensor<T>>,
}

/// Biases, norm parameters and learned tokens are not decayed.
pub fn decays(name: &str, shape: &[usize]) -> bool {
    shape.len() >= 2 && !name.ends_with(".pos") && !name.ends_with(".cls")
}

impl<T: Element> AdamW<T> {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            weight_decay,
            steps: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// Applies one update to every parameter present in `grads`.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>, lr: f64) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        let (b1, b2): (T, T) = (cst(BETA1), cst(BETA2));
        let (ob1, ob2): (T, T) = (cst(1.0 - BETA1), cst(1.0 - BETA2));
        let (inv_bc1, inv_bc2): (T, T) = (cst(1.0 / bc1), cst(1.0 / bc2));
        let (lr_t, eps): (T, T) = (cst(lr), cst(ADAM_EPS));
        let wd: T = cst(lr * self.weight_decay);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(Error::shape("adamw", p.shape(), g.shape()));
            }
            let decay = decays(name, p.shape());
            let m = self.first.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.second.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mv = b1 * *mv + ob1 * gv;
                *vv = b2 * *vv + ob2 * gv * gv;
                let update = (*mv * inv_bc1) / ((*vv * inv_bc2).sqrt() + eps);
                if decay {
                    *pv -= wd * *pv;
                }
                *pv -= lr_t * update;
            }
        }
        Ok(())
    }
}

/// Global L2 norm of all gradients (accumulated in 64-bit).
pub fn grad_norm<T: Element>(grads: &BTreeMap<String, Tensor<T>>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| v.to_f64() * v.to_f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<T: Element>(grads: &mut BTreeMap<String, Tensor<T>>, max_norm: f64) -> f64 {
    let n = grad_norm(grads);
    if max_norm > 0.0 && n > max_norm {
        let s: T = cst(max_norm / (n + 1e-6));
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    n
}
