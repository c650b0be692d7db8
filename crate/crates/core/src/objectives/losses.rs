use serde::{Deserialize, Serialize};

use super::heads::NORM_EPS;
use super::teacher::Centers;
use crate::error::{Error, Result};
use crate::tensor::{cst, Element, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseLossKind {
    Clustering,
    Cosine,
    Infonce,
}

impl std::str::FromStr for BaseLossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clustering" => Ok(Self::Clustering),
            "cosine" => Ok(Self::Cosine),
            "infonce" => Ok(Self::Infonce),
            _ => Err(Error::Config(format!("unknown loss kind `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: BaseLossKind,
    pub student_temp: f64,
    pub teacher_temp: f64,
    pub nce_temp: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: BaseLossKind::Clustering,
            student_temp: 0.1,
            teacher_temp: 0.04,
            nce_temp: 0.2,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (n, t) in [
            ("student_temp", self.student_temp),
            ("teacher_temp", self.teacher_temp),
            ("nce_temp", self.nce_temp),
        ] {
            if !(t > 0.0) {
                return Err(Error::Config(format!("{n} must be > 0, got {t}")));
            }
        }
        Ok(())
    }
}

/// Which terms make up the pretraining objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Fused teacher output supervises both the fused and the global student outputs.
    Distill,
    /// Fused and global streams each supervise only themselves.
    NoDistill,
    /// Only the global streams are matched; auxiliary outputs carry no loss.
    GlobalOnly,
}

/// Loss between one teacher output and one student output, both `[B, P]`,
/// averaged over the batch. The teacher side never receives gradient.
/// `center` is subtracted from teacher logits in the clustering loss.
pub fn base_loss<'t, T: Element>(
    teacher: Var<'t, T>,
    student: Var<'t, T>,
    cfg: &LossConfig,
    center: Option<&Tensor<T>>,
) -> Result<Var<'t, T>> {
    let (st, ss) = (teacher.shape(), student.shape());
    if st != ss || st.len() != 2 {
        return Err(Error::shape("base_loss", &st, &ss));
    }
    let tape = student.tape();
    let b = st[0];
    let inv_b: T = cst(1.0 / b as f64);
    let t = teacher.stop_gradient();
    match cfg.kind {
        BaseLossKind::Clustering => {
            let centered = match center {
                Some(c) => t.add_bias(&tape.constant(c.map(|v| -v)))?,
                None => t,
            };
            let target = centered.softmax(1, cst(cfg.teacher_temp))?;
            let logp = student.log_softmax(1, cst(cfg.student_temp))?;
            Ok(target.mul(&logp)?.sum().scale(-inv_b))
        }
        BaseLossKind::Cosine => {
            check_nonzero_rows(&t.value(), "teacher")?;
            check_nonzero_rows(&student.value(), "student")?;
            let cos = t.l2_normalize(cst(NORM_EPS)).mul(&student.l2_normalize(cst(NORM_EPS)))?;
            Ok(cos.sum().scale(cst(-2.0 / b as f64)).add_scalar(cst(2.0)))
        }
        BaseLossKind::Infonce => {
            let q = student.l2_normalize(cst(NORM_EPS));
            let k = t.l2_normalize(cst(NORM_EPS));
            let logits = q.matmul_t(&k)?;
            let logp = logits.log_softmax(1, cst(cfg.nce_temp))?;
            let eye = tape.constant(Tensor::from_fn(&[b, b], |i| if i / b == i % b { T::ONE } else { T::ZERO }));
            Ok(logp.mul(&eye)?.sum().scale(-inv_b))
        }
    }
}

fn check_nonzero_rows<T: Element>(x: &Tensor<T>, side: &str) -> Result<()> {
    let d = x.shape()[1].max(1);
    for row in x.data().chunks(d) {
        if row.iter().map(|v| v.to_f64() * v.to_f64()).sum::<f64>().sqrt() < NORM_EPS {
            return Err(Error::Numeric(format!("zero-norm {side} vector in cosine loss")));
        }
    }
    Ok(())
}

/// Head outputs of one network on one view.
#[derive(Clone, Copy)]
pub struct StreamOutputs<'t, T: Element> {
    /// Fused auxiliary output `[B, P]`; absent when auxiliary outputs are unused.
    pub fused: Option<Var<'t, T>>,
    /// Global-token output `[B, P]`.
    pub global: Var<'t, T>,
}

pub struct LossParts<'t, T: Element> {
    pub total: Var<'t, T>,
    /// Auxiliary-stream term, zero in global-only mode.
    pub fused: Var<'t, T>,
    /// Term supervising the global student output.
    pub distill: Var<'t, T>,
}

/// Symmetrized objective over two views: the teacher sees view `a` while the
/// student sees the other, for both orderings, and the two are averaged.
pub fn pretrain_loss<'t, T: Element>(
    teacher: &[StreamOutputs<'t, T>; 2],
    student: &[StreamOutputs<'t, T>; 2],
    cfg: &LossConfig,
    centers: &Centers<T>,
    mode: LossMode,
) -> Result<LossParts<'t, T>> {
    let tape = student[0].global.tape();
    let fused_of = |s: &StreamOutputs<'t, T>, who: &str| {
        s.fused
            .ok_or_else(|| Error::Usage(format!("{who} fused output required in {mode:?} mode")))
    };
    let mut fused_terms = Vec::new();
    let mut distill_terms = Vec::new();
    for (a, b) in [(0, 1), (1, 0)] {
        let (t, s) = (&teacher[a], &student[b]);
        match mode {
            LossMode::Distill => {
                let ht = fused_of(t, "teacher")?;
                fused_terms.push(base_loss(ht, fused_of(s, "student")?, cfg, Some(&centers.fused))?);
                distill_terms.push(base_loss(ht, s.global, cfg, Some(&centers.fused))?);
            }
            LossMode::NoDistill => {
                let ht = fused_of(t, "teacher")?;
                fused_terms.push(base_loss(ht, fused_of(s, "student")?, cfg, Some(&centers.fused))?);
                distill_terms.push(base_loss(t.global, s.global, cfg, Some(&centers.global))?);
            }
            LossMode::GlobalOnly => {
                distill_terms.push(base_loss(t.global, s.global, cfg, Some(&centers.global))?);
            }
        }
    }
    let half: T = cst(0.5);
    let avg = |terms: &[Var<'t, T>]| -> Result<Var<'t, T>> {
        match terms {
            [] => Ok(tape.constant(Tensor::scalar(T::ZERO))),
            [x, rest @ ..] => {
                let mut s = *x;
                for r in rest {
                    s = s.add(r)?;
                }
                Ok(s.scale(half))
            }
        }
    };
    let fused = avg(&fused_terms)?;
    let distill = avg(&distill_terms)?;
    let total = fused.add(&distill)?;
    Ok(LossParts { total, fused, distill })
}
