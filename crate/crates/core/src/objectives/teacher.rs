use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{cst, Element, Tensor};

/// Running means subtracted from teacher outputs, one per stream.
#[derive(Clone, Debug, PartialEq)]
pub struct Centers<T> {
    pub fused: Tensor<T>,
    pub global: Tensor<T>,
}

impl<T: Element> Centers<T> {
    pub fn zeros(dim: usize) -> Self {
        Centers {
            fused: Tensor::zeros(&[dim]),
            global: Tensor::zeros(&[dim]),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TeacherState<T> {
    pub params: ParamStore<T>,
    pub centers: Centers<T>,
}

impl<T: Element> TeacherState<T> {
    /// Teacher initialized as an exact copy of the student.
    pub fn from_student(student: &ParamStore<T>, out_dim: usize) -> Self {
        TeacherState {
            params: student.clone(),
            centers: Centers::zeros(out_dim),
        }
    }
}

/// `teacher ← m·teacher + (1−m)·student`, elementwise.
pub fn ema_update<T: Element>(teacher: &mut ParamStore<T>, student: &ParamStore<T>, m: f64) -> Result<()> {
    ema_update_selected(teacher, student, m, |_| true)
}

/// [`ema_update`] restricted to names accepted by `select`; the rest are left untouched.
pub fn ema_update_selected<T: Element>(
    teacher: &mut ParamStore<T>,
    student: &ParamStore<T>,
    m: f64,
    select: impl Fn(&str) -> bool,
) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Param(format!("EMA momentum must lie in [0, 1], got {m}")));
    }
    teacher.check_isomorphic(student)?;
    let (mt, ms): (T, T) = (cst(m), cst(1.0 - m));
    for ((name, t), (_, s)) in teacher.iter_mut().zip(student.iter()) {
        if !select(name) {
            continue;
        }
        for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = mt * *a + ms * b;
        }
    }
    Ok(())
}

/// `center ← momentum·center + (1−momentum)·mean_rows(batch)`.
pub fn center_update<T: Element>(center: &Tensor<T>, batch: &Tensor<T>, momentum: f64) -> Result<Tensor<T>> {
    let s = batch.shape();
    if s.len() != 2 || center.shape() != [s[1]] || s[0] == 0 {
        return Err(Error::shape("center_update", center.shape(), s));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::Param(format!("center momentum must lie in [0, 1), got {momentum}")));
    }
    let d = s[1];
    let mut mean = vec![T::ZERO; d];
    for row in batch.data().chunks(d) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    let inv: T = cst(1.0 / s[0] as f64);
    let (a, b): (T, T) = (cst(momentum), cst(1.0 - momentum));
    let data = center.data().iter().zip(&mean).map(|(&c, &m)| a * c + b * (m * inv)).collect();
    Tensor::new(&[d], data)
}
