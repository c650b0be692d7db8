use crate::error::{Error, Result};
use crate::params::{add_param, Bound, Init, ParamStore};
use crate::tensor::{cst, Element, Tensor, Var};

/// Linear classifiers without bias: one for the global token and one per
/// auxiliary token (or a single shared one).
#[derive(Clone, Debug)]
pub struct ClassifierBank {
    pub dim: usize,
    pub classes: usize,
    pub num_aux: usize,
    pub shared: bool,
}

impl ClassifierBank {
    pub fn aux_name(&self, i: usize) -> String {
        if self.shared {
            "cls.shared.weight".into()
        } else {
            format!("cls.aux.{i}.weight")
        }
    }

    pub fn init<T: Element>(&self, p: &mut ParamStore<T>, seed: u64) {
        let shape = [self.dim, self.classes];
        add_param(p, seed, "cls.global.weight", &shape, Init::TruncNormal(0.02));
        if self.shared && self.num_aux > 0 {
            add_param(p, seed, "cls.shared.weight", &shape, Init::TruncNormal(0.02));
        } else if !self.shared {
            for i in 0..self.num_aux {
                add_param(p, seed, &self.aux_name(i), &shape, Init::TruncNormal(0.02));
            }
        }
    }

    /// Global-token logits `[B, C]`.
    pub fn global_logits<'t, T: Element>(&self, params: &Bound<'t, T>, global: Var<'t, T>) -> Result<Var<'t, T>> {
        global.linear(&params.get("cls.global.weight")?, None)
    }

    /// Mean of per-token logits over the auxiliary tokens, `[B, C]`.
    pub fn aux_logits<'t, T: Element>(
        &self,
        params: &Bound<'t, T>,
        enhanced: Var<'t, T>,
        pooled: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let (m, k) = (enhanced.shape()[1], pooled.shape()[1]);
        if m + k != self.num_aux || m + k == 0 {
            return Err(Error::Usage(format!("classifier bank sized for {} tokens, got {}", self.num_aux, m + k)));
        }
        let b = enhanced.shape()[0];
        let mut sum: Option<Var<'t, T>> = None;
        for i in 0..m + k {
            let (src, j) = if i < m { (enhanced, i) } else { (pooled, i - m) };
            let tok = src.narrow(1, j, 1)?.reshape(&[b, self.dim])?;
            let l = tok.linear(&params.get(&self.aux_name(i))?, None)?;
            sum = Some(match sum {
                Some(s) => s.add(&l)?,
                None => l,
            });
        }
        Ok(sum.expect("at least one token").scale(cst(1.0 / (m + k) as f64)))
    }
}

pub struct SupervisedOutput<'t, T: Element> {
    pub loss: Var<'t, T>,
    /// Cross-entropy of the fused auxiliary prediction against the labels.
    pub ce_aux: Var<'t, T>,
    /// Cross-entropy of the global prediction against the detached fused prediction.
    pub ce_distill: Var<'t, T>,
    /// Fused auxiliary class probabilities `[B, C]`.
    pub aux_probs: Option<Var<'t, T>>,
    /// Global-token class probabilities `[B, C]`.
    pub global_probs: Var<'t, T>,
}

fn one_hot<T: Element>(labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Param(format!("label {y} out of range for {classes} classes")));
    }
    Ok(Tensor::from_fn(&[labels.len(), classes], |i| {
        if labels[i / classes] == i % classes {
            T::ONE
        } else {
            T::ZERO
        }
    }))
}

/// `CE(l_t, y) + CE(l_c, sg(l_t))`, batch-averaged. Without auxiliary tokens
/// this reduces to plain cross-entropy on the global token.
pub fn supervised_loss<'t, T: Element>(
    params: &Bound<'t, T>,
    bank: &ClassifierBank,
    global: Var<'t, T>,
    enhanced: Var<'t, T>,
    pooled: Var<'t, T>,
    labels: &[usize],
) -> Result<SupervisedOutput<'t, T>> {
    if bank.classes < 2 {
        return Err(Error::Param("supervised loss needs at least two classes".into()));
    }
    let b = global.shape()[0];
    if labels.len() != b {
        return Err(Error::shape("supervised_loss", &[labels.len()], &[b]));
    }
    let tape = global.tape();
    let y = tape.constant(one_hot(labels, bank.classes)?);
    let neg_inv_b: T = cst(-1.0 / b as f64);
    let one: T = T::ONE;
    let lc = bank.global_logits(params, global)?;
    let log_c = lc.log_softmax(1, one)?;
    let global_probs = lc.softmax(1, one)?;
    if bank.num_aux == 0 {
        let ce = log_c.mul(&y)?.sum().scale(neg_inv_b);
        let zero = tape.constant(Tensor::scalar(T::ZERO));
        return Ok(SupervisedOutput {
            loss: ce,
            ce_aux: zero,
            ce_distill: ce,
            aux_probs: None,
            global_probs,
        });
    }
    let lt = bank.aux_logits(params, enhanced, pooled)?;
    let ce_aux = lt.log_softmax(1, one)?.mul(&y)?.sum().scale(neg_inv_b);
    let aux_probs = lt.softmax(1, one)?;
    let ce_distill = log_c.mul(&aux_probs.stop_gradient())?.sum().scale(neg_inv_b);
    Ok(SupervisedOutput {
        loss: ce_aux.add(&ce_distill)?,
        ce_aux,
        ce_distill,
        aux_probs: Some(aux_probs),
        global_probs,
    })
}
