use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::kernels::{self, axis_split};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// `sqrt(2/pi)` in the tanh form of GELU.
const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient in the tanh form of GELU.
const GELU_CUBIC: f64 = 0.044_715;

enum Op<T> {
    Leaf,
    Gemm {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
        dims: [usize; 4],
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    AddBias {
        x: usize,
        bias: usize,
    },
    Tile {
        x: usize,
        reps: usize,
    },
    SumAll(usize),
    SumAxis {
        x: usize,
        axis: usize,
    },
    Softmax {
        x: usize,
        axis: usize,
        inv_temp: T,
    },
    LogSoftmax {
        x: usize,
        axis: usize,
        inv_temp: T,
    },
    MaskedSoftmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(usize),
    L2Normalize {
        x: usize,
        eps: T,
    },
    Reshape(usize),
    Permute {
        x: usize,
        perm: Vec<usize>,
    },
    Narrow {
        x: usize,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<usize>,
        axis: usize,
    },
    Depthwise {
        x: usize,
        kernel: usize,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Gemm { a, b, .. } => vec![*a, *b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddBias { x, bias } => vec![*x, *bias],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Depthwise { x, kernel } => vec![*x, *kernel],
            Op::Concat { xs, .. } => xs.clone(),
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Tile { x, .. }
            | Op::SumAll(x)
            | Op::SumAxis { x, .. }
            | Op::Softmax { x, .. }
            | Op::LogSoftmax { x, .. }
            | Op::MaskedSoftmax(x)
            | Op::Gelu(x)
            | Op::L2Normalize { x, .. }
            | Op::Reshape(x)
            | Op::Permute { x, .. }
            | Op::Narrow { x, .. } => vec![*x],
        }
    }
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of one forward pass.
///
/// Nodes are appended in execution order, so inputs always precede their
/// consumers; [`Tape::backward`] visits them in exact reverse order.
pub struct Tape<T: Element> {
    nodes: RefCell<Vec<Node<T>>>,
    grad_enabled: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.len())
            .field("grad_enabled", &self.grad_enabled)
            .finish()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Element> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Element> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of a leaf, or `None` when nothing flowed into it.
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient of a leaf, materializing zeros when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var<'_, T>) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.value().shape()))
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// A tape on which no leaf ever requires gradients (inference, EMA teacher).
    pub fn no_grad() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push_node(value, Op::Leaf, requires_grad && self.grad_enabled)
    }

    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    fn push_node(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        let requires_grad = self.grad_enabled && {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].requires_grad)
        };
        self.push_node(value, op, requires_grad)
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat<'t>(&'t self, xs: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?
            .value();
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::shape("concat", first.shape(), &[axis]));
        }
        let values: Vec<_> = xs.iter().map(|v| v.value()).collect();
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = 0;
        for v in &values {
            let s = v.shape();
            let ok = s.len() == rank
                && s.iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", first.shape(), s));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for v in &values {
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.push(
            out,
            Op::Concat {
                xs: xs.iter().map(|v| v.id).collect(),
                axis,
            },
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.id];
        if loss_node.value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if !loss_node.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.id] = Some(Tensor::full(loss_node.value.shape(), T::ONE));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            let mut acc = |input: usize, delta: Tensor<T>| {
                if !nodes[input].requires_grad {
                    return;
                }
                match &mut grads[input] {
                    Some(existing) => existing.add_assign(&delta),
                    slot @ None => *slot = Some(delta),
                }
            };
            backward_node(&nodes, node, &g, &mut acc)?;
        }
        // Only leaf gradients are meaningful to callers.
        for (slot, node) in grads.iter_mut().zip(nodes.iter()) {
            if !matches!(node.op, Op::Leaf) {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn backward_node<T: Element>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: &Tensor<T>,
    acc: &mut impl FnMut(usize, Tensor<T>),
) -> Result<()> {
    let val = |i: usize| Rc::clone(&nodes[i].value);
    let needs = |i: usize| nodes[i].requires_grad;
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Gemm { a, b, ta, tb, dims } => {
            let [batch, m, k, n] = *dims;
            let (av, bv) = (val(*a), val(*b));
            if needs(*a) {
                let d = if *ta {
                    // A stored k×m: dA = op(B)·Gᵀ
                    kernels::gemm(bv.data(), g.data(), batch, k, n, m, *tb, true)
                } else {
                    kernels::gemm(g.data(), bv.data(), batch, m, n, k, false, !*tb)
                };
                acc(*a, Tensor::new(av.shape(), d)?);
            }
            if needs(*b) {
                let d = if *tb {
                    // B stored n×k: dB = Gᵀ·op(A)
                    kernels::gemm(g.data(), av.data(), batch, n, m, k, true, *ta)
                } else {
                    kernels::gemm(av.data(), g.data(), batch, k, m, n, !*ta, false)
                };
                acc(*b, Tensor::new(bv.shape(), d)?);
            }
        }
        Op::Add(a, b) => {
            acc(*a, g.clone());
            acc(*b, g.clone());
        }
        Op::Sub(a, b) => {
            acc(*a, g.clone());
            acc(*b, g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if needs(*a) {
                let d = g.data().iter().zip(bv.data()).map(|(&g, &b)| g * b).collect();
                acc(*a, Tensor::new(av.shape(), d)?);
            }
            if needs(*b) {
                let d = g.data().iter().zip(av.data()).map(|(&g, &a)| g * a).collect();
                acc(*b, Tensor::new(bv.shape(), d)?);
            }
        }
        Op::Scale(x, c) => acc(*x, g.map(|v| v * *c)),
        Op::AddScalar(x) => acc(*x, g.clone()),
        Op::AddBias { x, bias } => {
            acc(*x, g.clone());
            if needs(*bias) {
                let bv = val(*bias);
                let mut d = vec![T::ZERO; bv.len()];
                for chunk in g.data().chunks(bv.len()) {
                    for (s, &v) in d.iter_mut().zip(chunk) {
                        *s += v;
                    }
                }
                acc(*bias, Tensor::new(bv.shape(), d)?);
            }
        }
        Op::Tile { x, reps } => {
            let xv = val(*x);
            let n = xv.len();
            let mut d = vec![T::ZERO; n];
            for r in 0..*reps {
                for (s, &v) in d.iter_mut().zip(&g.data()[r * n..(r + 1) * n]) {
                    *s += v;
                }
            }
            acc(*x, Tensor::new(xv.shape(), d)?);
        }
        Op::SumAll(x) => {
            let xv = val(*x);
            acc(*x, Tensor::full(xv.shape(), g.item()));
        }
        Op::SumAxis { x, axis } => {
            let xv = val(*x);
            let (outer, ext, inner) = axis_split(xv.shape(), *axis);
            let mut d = vec![T::ZERO; xv.len()];
            for o in 0..outer {
                for e in 0..ext {
                    let dst = &mut d[(o * ext + e) * inner..][..inner];
                    dst.copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                }
            }
            acc(*x, Tensor::new(xv.shape(), d)?);
        }
        Op::Softmax { x, axis, inv_temp } => {
            let (outer, ext, inner) = axis_split(y.shape(), *axis);
            let mut d = vec![T::ZERO; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |e: usize| (o * ext + e) * inner + i;
                    let dot: T = (0..ext).map(|e| g.data()[idx(e)] * y.data()[idx(e)]).sum();
                    for e in 0..ext {
                        d[idx(e)] = y.data()[idx(e)] * (g.data()[idx(e)] - dot) * *inv_temp;
                    }
                }
            }
            acc(*x, Tensor::new(y.shape(), d)?);
        }
        Op::LogSoftmax { x, axis, inv_temp } => {
            let (outer, ext, inner) = axis_split(y.shape(), *axis);
            let mut d = vec![T::ZERO; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |e: usize| (o * ext + e) * inner + i;
                    let gsum: T = (0..ext).map(|e| g.data()[idx(e)]).sum();
                    for e in 0..ext {
                        let p = y.data()[idx(e)].exp();
                        d[idx(e)] = (g.data()[idx(e)] - p * gsum) * *inv_temp;
                    }
                }
            }
            acc(*x, Tensor::new(y.shape(), d)?);
        }
        Op::MaskedSoftmax(x) => {
            let cols = *y.shape().last().unwrap_or(&1);
            let mut d = vec![T::ZERO; y.len()];
            for ((drow, yrow), grow) in d
                .chunks_mut(cols)
                .zip(y.data().chunks(cols))
                .zip(g.data().chunks(cols))
            {
                let dot: T = yrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                for ((dv, &yv), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
                    *dv = yv * (gv - dot);
                }
            }
            acc(*x, Tensor::new(y.shape(), d)?);
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let gv = val(*gamma);
            let dim = gv.len();
            let inv_d = T::ONE / T::from_f64(dim as f64);
            if needs(*gamma) {
                let mut dg = vec![T::ZERO; dim];
                for (grow, xrow) in g.data().chunks(dim).zip(xhat.chunks(dim)) {
                    for ((s, &a), &b) in dg.iter_mut().zip(grow).zip(xrow) {
                        *s += a * b;
                    }
                }
                acc(*gamma, Tensor::new(gv.shape(), dg)?);
            }
            if needs(*beta) {
                let mut db = vec![T::ZERO; dim];
                for grow in g.data().chunks(dim) {
                    for (s, &a) in db.iter_mut().zip(grow) {
                        *s += a;
                    }
                }
                acc(*beta, Tensor::new(gv.shape(), db)?);
            }
            if needs(*x) {
                let mut dx = vec![T::ZERO; y.len()];
                for (r, ((drow, grow), xrow)) in dx
                    .chunks_mut(dim)
                    .zip(g.data().chunks(dim))
                    .zip(xhat.chunks(dim))
                    .enumerate()
                {
                    let mut mean_g = T::ZERO;
                    let mut mean_gx = T::ZERO;
                    for c in 0..dim {
                        let gh = grow[c] * gv.data()[c];
                        mean_g += gh;
                        mean_gx += gh * xrow[c];
                    }
                    mean_g *= inv_d;
                    mean_gx *= inv_d;
                    for c in 0..dim {
                        let gh = grow[c] * gv.data()[c];
                        drow[c] = rstd[r] * (gh - mean_g - xrow[c] * mean_gx);
                    }
                }
                acc(*x, Tensor::new(y.shape(), dx)?);
            }
        }
        Op::Gelu(x) => {
            let xv = val(*x);
            let c = T::from_f64(GELU_SQRT_2_OVER_PI);
            let a = T::from_f64(GELU_CUBIC);
            let half = T::from_f64(0.5);
            let three = T::from_f64(3.0);
            let d = xv
                .data()
                .iter()
                .zip(g.data())
                .map(|(&x, &g)| {
                    let t = (c * (x + a * x * x * x)).tanh();
                    let dt = c * (T::ONE + three * a * x * x);
                    g * (half * (T::ONE + t) + half * x * (T::ONE - t * t) * dt)
                })
                .collect();
            acc(*x, Tensor::new(xv.shape(), d)?);
        }
        Op::L2Normalize { x, eps } => {
            let xv = val(*x);
            let cols = *xv.shape().last().unwrap_or(&1);
            let mut d = vec![T::ZERO; xv.len()];
            for (((drow, xrow), yrow), grow) in d
                .chunks_mut(cols)
                .zip(xv.data().chunks(cols))
                .zip(y.data().chunks(cols))
                .zip(g.data().chunks(cols))
            {
                let raw = xrow.iter().map(|&v| v * v).sum::<T>().sqrt();
                let n = raw.max(*eps);
                if raw > *eps {
                    let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for ((dv, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                        *dv = (gv - yv * dot) / n;
                    }
                } else {
                    for (dv, &gv) in drow.iter_mut().zip(grow) {
                        *dv = gv / n;
                    }
                }
            }
            acc(*x, Tensor::new(xv.shape(), d)?);
        }
        Op::Reshape(x) => {
            let xv = val(*x);
            acc(*x, g.reshape(xv.shape())?);
        }
        Op::Permute { x, perm } => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            let xv = val(*x);
            let d = kernels::permute(g.data(), g.shape(), &inv);
            acc(*x, Tensor::new(xv.shape(), d)?);
        }
        Op::Narrow { x, axis, start } => {
            let xv = val(*x);
            let (outer, ext, inner) = axis_split(xv.shape(), *axis);
            let len = g.shape()[*axis];
            let mut d = vec![T::ZERO; xv.len()];
            for o in 0..outer {
                let dst = &mut d[(o * ext + start) * inner..][..len * inner];
                dst.copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            acc(*x, Tensor::new(xv.shape(), d)?);
        }
        Op::Concat { xs, axis } => {
            let outer: usize = g.shape()[..*axis].iter().product();
            let inner: usize = g.shape()[axis + 1..].iter().product();
            let total = g.shape()[*axis];
            let mut offset = 0;
            for &xi in xs {
                let xv = val(xi);
                let ext = xv.shape()[*axis];
                if needs(xi) {
                    let mut d = Vec::with_capacity(xv.len());
                    for o in 0..outer {
                        let src = &g.data()[(o * total + offset) * inner..][..ext * inner];
                        d.extend_from_slice(src);
                    }
                    acc(xi, Tensor::new(xv.shape(), d)?);
                }
                offset += ext;
            }
        }
        Op::Depthwise { x, kernel } => {
            let (xv, kv) = (val(*x), val(*kernel));
            let s = xv.shape();
            let r = s.len();
            let (h, w, d) = (s[r - 3], s[r - 2], s[r - 1]);
            let batch = xv.len() / (h * w * d).max(1);
            let k = kv.shape()[0];
            let (gx, gk) =
                kernels::depthwise_backward(xv.data(), kv.data(), g.data(), (batch, h, w, d), k);
            acc(*x, Tensor::new(xv.shape(), gx)?);
            acc(*kernel, Tensor::new(kv.shape(), gk)?);
        }
    }
    Ok(())
}

impl<'t, T: Element> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_shape(&self, other: &Self, op: &'static str) -> Result<(Rc<Tensor<T>>, Rc<Tensor<T>>)> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::shape(op, a.shape(), b.shape()));
        }
        Ok((a, b))
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (a, b) = self.same_shape(other, op)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape(), data)
    }

    /// Batched matrix product `op(self)·op(other)` over the last two axes.
    ///
    /// Leading (batch) extents must be identical; there is no broadcasting.
    pub fn gemm(&self, other: &Self, ta: bool, tb: bool) -> Result<Self> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let r = sa.len();
        let (m, ka) = if ta { (sa[r - 1], sa[r - 2]) } else { (sa[r - 2], sa[r - 1]) };
        let (kb, n) = if tb { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if ka != kb {
            return Err(Error::shape("matmul", sa, sb));
        }
        let batch: usize = sa[..r - 2].iter().product();
        let data = kernels::gemm(a.data(), b.data(), batch, m, ka, n, ta, tb);
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let out = Tensor::new(&shape, data)?;
        Ok(self.tape.push(
            out,
            Op::Gemm {
                a: self.id,
                b: other.id,
                ta,
                tb,
                dims: [batch, m, ka, n],
            },
        ))
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        self.gemm(other, false, false)
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Self) -> Result<Self> {
        self.gemm(other, false, true)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        let out = self.zip_with(other, "add", |a, b| a + b)?;
        Ok(self.tape.push(out, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        let out = self.zip_with(other, "sub", |a, b| a - b)?;
        Ok(self.tape.push(out, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        let out = self.zip_with(other, "mul", |a, b| a * b)?;
        Ok(self.tape.push(out, Op::Mul(self.id, other.id)))
    }

    pub fn scale(&self, c: T) -> Self {
        let out = self.value().map(|v| v * c);
        self.tape.push(out, Op::Scale(self.id, c))
    }

    pub fn add_scalar(&self, c: T) -> Self {
        let out = self.value().map(|v| v + c);
        self.tape.push(out, Op::AddScalar(self.id))
    }

    /// Adds `bias` whose shape is a trailing suffix of `self`'s shape.
    /// This is the only broadcasting the engine performs.
    pub fn add_bias(&self, bias: &Self) -> Result<Self> {
        let (x, b) = (self.value(), bias.value());
        let (sx, sb) = (x.shape(), b.shape());
        if sb.len() > sx.len() || sx[sx.len() - sb.len()..] != *sb {
            return Err(Error::shape("add_bias", sx, sb));
        }
        let n = b.len();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b.data()[i % n])
            .collect();
        let out = Tensor::new(sx, data)?;
        Ok(self.tape.push(
            out,
            Op::AddBias {
                x: self.id,
                bias: bias.id,
            },
        ))
    }

    /// Stacks `reps` copies along a new leading axis.
    pub fn tile(&self, reps: usize) -> Self {
        let x = self.value();
        let mut shape = vec![reps];
        shape.extend_from_slice(x.shape());
        let mut data = Vec::with_capacity(x.len() * reps);
        for _ in 0..reps {
            data.extend_from_slice(x.data());
        }
        let out = Tensor { shape, data };
        self.tape.push(out, Op::Tile { x: self.id, reps })
    }

    pub fn sum(&self) -> Self {
        let out = Tensor::scalar(self.value().sum());
        self.tape.push(out, Op::SumAll(self.id))
    }

    pub fn mean(&self) -> Self {
        let n = self.value().len().max(1);
        self.sum().scale(T::ONE / T::from_f64(n as f64))
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Self> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(Error::shape("sum_axis", x.shape(), &[axis]));
        }
        let (outer, ext, inner) = axis_split(x.shape(), axis);
        let mut data = vec![T::ZERO; outer * inner];
        for o in 0..outer {
            for e in 0..ext {
                let src = &x.data()[(o * ext + e) * inner..][..inner];
                for (d, &s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let out = Tensor::new(&shape, data)?;
        Ok(self.tape.push(out, Op::SumAxis { x: self.id, axis }))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Self> {
        let n = self.value().shape().get(axis).copied().unwrap_or(1).max(1);
        Ok(self.sum_axis(axis)?.scale(T::ONE / T::from_f64(n as f64)))
    }

    /// `softmax(x / temperature)` along `axis`, shifted by the per-slice max.
    pub fn softmax(&self, axis: usize, temperature: T) -> Result<Self> {
        let (out, inv_temp) = softmax_like(&self.value(), axis, temperature, false)?;
        Ok(self.tape.push(
            out,
            Op::Softmax {
                x: self.id,
                axis,
                inv_temp,
            },
        ))
    }

    pub fn log_softmax(&self, axis: usize, temperature: T) -> Result<Self> {
        let (out, inv_temp) = softmax_like(&self.value(), axis, temperature, true)?;
        Ok(self.tape.push(
            out,
            Op::LogSoftmax {
                x: self.id,
                axis,
                inv_temp,
            },
        ))
    }

    /// Softmax over the last axis where `mask[q * keys + k] == false` forces a
    /// probability of exactly zero (logit treated as −∞). The mask covers the
    /// last two axes `[queries, keys]`.
    pub fn masked_softmax(&self, mask: &[bool]) -> Result<Self> {
        let x = self.value();
        let s = x.shape();
        if s.len() < 2 || mask.len() != s[s.len() - 1] * s[s.len() - 2] {
            return Err(Error::shape("masked_softmax", s, &[mask.len()]));
        }
        let keys = s[s.len() - 1];
        if mask.chunks(keys).any(|row| !row.iter().any(|&m| m)) {
            return Err(Error::Param("attention mask row with no allowed key".into()));
        }
        let queries = s[s.len() - 2];
        let mut data = vec![T::ZERO; x.len()];
        for (r, (orow, xrow)) in data.chunks_mut(keys).zip(x.data().chunks(keys)).enumerate() {
            let mrow = &mask[(r % queries) * keys..][..keys];
            let mut mx = T::NEG_INFINITY;
            for (&v, &m) in xrow.iter().zip(mrow) {
                if m {
                    mx = mx.max(v);
                }
            }
            let mut sum = T::ZERO;
            for ((o, &v), &m) in orow.iter_mut().zip(xrow).zip(mrow) {
                if m {
                    *o = (v - mx).exp();
                    sum += *o;
                }
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        let out = Tensor::new(s, data)?;
        Ok(self.tape.push(out, Op::MaskedSoftmax(self.id)))
    }

    /// Layer normalization over the last axis (biased variance).
    pub fn layer_norm(&self, gamma: &Self, beta: &Self, eps: T) -> Result<Self> {
        let (x, gv, bv) = (self.value(), gamma.value(), beta.value());
        let d = *x.shape().last().unwrap_or(&0);
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::shape("layer_norm", x.shape(), gv.shape()));
        }
        let rows = x.len() / d.max(1);
        let inv_d = T::ONE / T::from_f64(d as f64);
        let mut xhat = vec![T::ZERO; x.len()];
        let mut rstd = vec![T::ZERO; rows];
        let mut data = vec![T::ZERO; x.len()];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::ONE / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let xh = (row[c] - mean) * rs;
                xhat[r * d + c] = xh;
                data[r * d + c] = xh * gv.data()[c] + bv.data()[c];
            }
        }
        let out = Tensor::new(x.shape(), data)?;
        Ok(self.tape.push(
            out,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
        ))
    }

    /// GELU, tanh form: `0.5·x·(1 + tanh(sqrt(2/pi)·(x + 0.044715·x³)))`.
    pub fn gelu(&self) -> Self {
        let c = T::from_f64(GELU_SQRT_2_OVER_PI);
        let a = T::from_f64(GELU_CUBIC);
        let half = T::from_f64(0.5);
        let out = self
            .value()
            .map(|x| half * x * (T::ONE + (c * (x + a * x * x * x)).tanh()));
        self.tape.push(out, Op::Gelu(self.id))
    }

    /// `x / max(‖x‖₂, eps)` over the last axis.
    pub fn l2_normalize(&self, eps: T) -> Self {
        let x = self.value();
        let cols = *x.shape().last().unwrap_or(&1);
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(cols.max(1)) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
            for v in row.iter_mut() {
                *v /= n;
            }
        }
        let out = Tensor {
            shape: x.shape().to_vec(),
            data,
        };
        self.tape.push(out, Op::L2Normalize { x: self.id, eps })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let out = self.value().reshape(shape)?;
        Ok(self.tape.push(out, Op::Reshape(self.id)))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let x = self.value();
        let mut seen = vec![false; x.rank()];
        if perm.len() != x.rank() || perm.iter().any(|&p| p >= x.rank() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", x.shape(), perm));
        }
        let data = kernels::permute(x.data(), x.shape(), perm);
        let shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
        let out = Tensor::new(&shape, data)?;
        Ok(self.tape.push(
            out,
            Op::Permute {
                x: self.id,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        let x = self.value();
        if axis >= x.rank() || start + len > x.shape()[axis] {
            return Err(Error::shape("narrow", x.shape(), &[axis, start, len]));
        }
        let (outer, ext, inner) = axis_split(x.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&x.data()[(o * ext + start) * inner..][..len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::new(&shape, data)?;
        Ok(self.tape.push(
            out,
            Op::Narrow {
                x: self.id,
                axis,
                start,
            },
        ))
    }

    /// Same-padded depthwise correlation of `[..., H, W, D]` with a `[k, k, D]` kernel.
    pub fn depthwise_conv2d(&self, kernel: &Self) -> Result<Self> {
        let (x, kv) = (self.value(), kernel.value());
        let (s, ks) = (x.shape(), kv.shape());
        if s.len() < 3 || ks.len() != 3 || ks[0] != ks[1] || ks[2] != s[s.len() - 1] {
            return Err(Error::shape("depthwise_conv2d", s, ks));
        }
        let k = ks[0];
        if k % 2 == 0 {
            return Err(Error::Param(format!("depthwise kernel extent must be odd, got {k}")));
        }
        let r = s.len();
        let (h, w, d) = (s[r - 3], s[r - 2], s[r - 1]);
        let batch = x.len() / (h * w * d).max(1);
        let data = kernels::depthwise_forward(x.data(), kv.data(), batch, h, w, d, k);
        let out = Tensor::new(s, data)?;
        Ok(self.tape.push(
            out,
            Op::Depthwise {
                x: self.id,
                kernel: kernel.id,
            },
        ))
    }

    /// Per-position linear map on `[..., H, W, D]` with `weight: [D, D']`, `bias: [D']`.
    pub fn pointwise_conv1x1(&self, weight: &Self, bias: &Self) -> Result<Self> {
        let s = self.shape();
        let ws = weight.shape();
        if s.len() < 3 || ws.len() != 2 || ws[0] != s[s.len() - 1] || bias.shape() != [ws[1]] {
            return Err(Error::shape("pointwise_conv1x1", &s, &ws));
        }
        self.linear(weight, Some(bias))
    }

    /// `x·W + b` applied over the last axis of any-rank `x`.
    pub fn linear(&self, weight: &Self, bias: Option<&Self>) -> Result<Self> {
        let s = self.shape();
        let ws = weight.shape();
        let d = *s.last().ok_or_else(|| Error::shape("linear", &s, &ws))?;
        if ws.len() != 2 || ws[0] != d {
            return Err(Error::shape("linear", &s, &ws));
        }
        let rows = s.iter().product::<usize>() / d.max(1);
        let mut y = self.reshape(&[rows, d])?.matmul(weight)?;
        if let Some(b) = bias {
            y = y.add_bias(b)?;
        }
        let mut out_shape = s.clone();
        *out_shape.last_mut().unwrap() = ws[1];
        y.reshape(&out_shape)
    }

    /// Identity forward; blocks all gradient flow into `self`.
    pub fn stop_gradient(&self) -> Self {
        let v = (*self.value()).clone();
        self.tape.push_node(v, Op::Leaf, false)
    }
}

fn softmax_like<T: Element>(x: &Tensor<T>, axis: usize, temperature: T, log: bool) -> Result<(Tensor<T>, T)> {
    if !(temperature > T::ZERO) {
        return Err(Error::Param(format!("softmax temperature must be > 0, got {temperature}")));
    }
    if axis >= x.rank() {
        return Err(Error::shape("softmax", x.shape(), &[axis]));
    }
    let inv_temp = T::ONE / temperature;
    let (outer, ext, inner) = axis_split(x.shape(), axis);
    let mut data = vec![T::ZERO; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |e: usize| (o * ext + e) * inner + i;
            let mut mx = T::NEG_INFINITY;
            for e in 0..ext {
                mx = mx.max(x.data()[idx(e)]);
            }
            let mut sum = T::ZERO;
            for e in 0..ext {
                let z = (x.data()[idx(e)] - mx) * inv_temp;
                let ez = z.exp();
                sum += ez;
                data[idx(e)] = if log { z } else { ez };
            }
            if log {
                let lse = sum.ln();
                for e in 0..ext {
                    data[idx(e)] -= lse;
                }
            } else {
                for e in 0..ext {
                    data[idx(e)] /= sum;
                }
            }
        }
    }
    Ok((Tensor::new(x.shape(), data)?, inv_temp))
}
