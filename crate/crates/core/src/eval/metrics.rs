use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::FeatureMatrix;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Tape, Tensor};
use crate::trainer::AdamW;

fn num_classes(labels: &[usize]) -> usize {
    labels.iter().max().map_or(0, |&m| m + 1)
}

/// Weighted k-NN predictions: cosine similarity to every training row,
/// the `k` most similar vote with weight `exp(sim / temperature)`.
/// Ties in similarity keep the lower training index; ties in the vote go
/// to the lower class.
pub fn knn_predict(train: &FeatureMatrix, test: &FeatureMatrix, k: usize, temperature: f64) -> Result<Vec<usize>> {
    if train.rows == 0 {
        return Err(Error::Usage("k-NN needs a non-empty training set".into()));
    }
    if train.cols != test.cols {
        return Err(Error::shape("knn_classify", &[train.rows, train.cols], &[test.rows, test.cols]));
    }
    if k == 0 || k > train.rows {
        return Err(Error::Param(format!("k = {k} must lie in 1..={}", train.rows)));
    }
    if !(temperature > 0.0) {
        return Err(Error::Param(format!("temperature must be > 0, got {temperature}")));
    }
    let (tr, te) = (train.normalized(), test.normalized());
    let classes = num_classes(&train.labels);
    Ok((0..te.rows)
        .into_par_iter()
        .map(|i| {
            let q = te.row(i);
            let mut sims: Vec<(f64, usize)> = (0..tr.rows)
                .map(|j| (q.iter().zip(tr.row(j)).map(|(a, b)| a * b).sum::<f64>(), j))
                .collect();
            sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut votes = vec![0.0; classes];
            for &(s, j) in &sims[..k] {
                votes[tr.labels[j]] += (s / temperature).exp();
            }
            votes
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (c, &v)| if v > b.1 { (c, v) } else { b })
                .0
        })
        .collect())
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / pred.len() as f64
}

/// Top-1 accuracy of [`knn_predict`].
pub fn knn_classify(train: &FeatureMatrix, test: &FeatureMatrix, k: usize, temperature: f64) -> Result<f64> {
    Ok(accuracy(&knn_predict(train, test, k, temperature)?, &test.labels))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 300,
            lr: 0.05,
            weight_decay: 0.0,
        }
    }
}

/// Softmax-regression probe on frozen features, trained full-batch with
/// AdamW from zero weights after standardizing columns with the training
/// statistics. Returns test top-1 accuracy.
pub fn linear_probe(train: &FeatureMatrix, test: &FeatureMatrix, cfg: &ProbeConfig) -> Result<f64> {
    if train.rows == 0 || train.cols != test.cols {
        return Err(Error::shape("linear_probe", &[train.rows, train.cols], &[test.rows, test.cols]));
    }
    let classes = num_classes(&train.labels).max(num_classes(&test.labels)).max(2);
    let d = train.cols;
    let mut mean = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for i in 0..train.rows {
        train.row(i).iter().zip(&mut mean).for_each(|(v, m)| *m += v / train.rows as f64);
    }
    for i in 0..train.rows {
        for ((v, m), s) in train.row(i).iter().zip(&mean).zip(&mut sd) {
            *s += (v - m) * (v - m) / train.rows as f64;
        }
    }
    sd.iter_mut().for_each(|s| *s = if *s > 1e-24 { s.sqrt() } else { 1.0 });
    let standardize = |f: &FeatureMatrix| {
        Tensor::from_fn(&[f.rows, d], |i| (f.values[i] - mean[i % d]) / sd[i % d])
    };
    let (xtr, xte) = (standardize(train), standardize(test));
    let y = Tensor::from_fn(&[train.rows, classes], |i| {
        if train.labels[i / classes] == i % classes {
            1.0
        } else {
            0.0
        }
    });
    let mut params = ParamStore::<f64>::new();
    params.insert("probe.weight", Tensor::zeros(&[d, classes]));
    params.insert("probe.bias", Tensor::zeros(&[classes]));
    let mut opt = AdamW::new(cfg.weight_decay);
    for _ in 0..cfg.epochs {
        let tape = Tape::new();
        let bound = params.bind(&tape, |_| true);
        let x = tape.constant(xtr.clone());
        let logits = x.linear(&bound.get("probe.weight")?, Some(&bound.get("probe.bias")?))?;
        let loss = logits
            .log_softmax(1, 1.0)?
            .mul(&tape.constant(y.clone()))?
            .sum()
            .scale(-1.0 / train.rows as f64);
        let grads = bound.grads(&tape.backward(loss)?);
        drop(bound);
        opt.step(&mut params, &grads, cfg.lr)?;
    }
    let tape = Tape::no_grad();
    let bound = params.bind(&tape, |_| false);
    let logits = tape
        .constant(xte)
        .linear(&bound.get("probe.weight")?, Some(&bound.get("probe.bias")?))?;
    let v = logits.value();
    let pred = FeatureMatrix::new(test.rows, classes, v.data().to_vec(), test.labels.clone(), "probe")?.argmax();
    Ok(accuracy(&pred, &test.labels))
}

fn centered(x: &FeatureMatrix) -> Vec<f64> {
    let (n, d) = (x.rows, x.cols);
    let mut mean = vec![0.0; d];
    for i in 0..n {
        x.row(i).iter().zip(&mut mean).for_each(|(v, m)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    (0..n * d).map(|i| x.values[i] - mean[i % d]).collect()
}

/// Squared Frobenius norm of `Aᵀ B` for row-major `[n, p]` and `[n, q]`.
fn cross_frobenius_sq(a: &[f64], p: usize, b: &[f64], q: usize, n: usize) -> f64 {
    let mut g = vec![0.0; p * q];
    for r in 0..n {
        let (ar, br) = (&a[r * p..(r + 1) * p], &b[r * q..(r + 1) * q]);
        for (i, &av) in ar.iter().enumerate() {
            for (gv, &bv) in g[i * q..(i + 1) * q].iter_mut().zip(br) {
                *gv += av * bv;
            }
        }
    }
    g.iter().map(|v| v * v).sum()
}

/// Linear centered kernel alignment between two representations of the
/// same samples.
pub fn cka(x: &FeatureMatrix, y: &FeatureMatrix) -> Result<f64> {
    if x.rows != y.rows || x.rows < 2 {
        return Err(Error::shape("cka", &[x.rows, x.cols], &[y.rows, y.cols]));
    }
    let n = x.rows;
    let (xc, yc) = (centered(x), centered(y));
    let xx = cross_frobenius_sq(&xc, x.cols, &xc, x.cols, n).sqrt();
    let yy = cross_frobenius_sq(&yc, y.cols, &yc, y.cols, n).sqrt();
    if xx < 1e-300 || yy < 1e-300 {
        return Err(Error::Numeric("CKA of a zero-variance representation".into()));
    }
    Ok(cross_frobenius_sq(&yc, y.cols, &xc, x.cols, n) / (xx * yy))
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information `2 I(U;V) / (H(U) + H(V))`.
pub fn nmi(pseudo: &[usize], truth: &[usize]) -> Result<f64> {
    if pseudo.is_empty() {
        return Err(Error::Usage("NMI of empty labelings".into()));
    }
    if pseudo.len() != truth.len() {
        return Err(Error::Usage(format!(
            "NMI labelings differ in length: {} vs {}",
            pseudo.len(),
            truth.len()
        )));
    }
    let n = pseudo.len() as f64;
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut pu: BTreeMap<usize, usize> = BTreeMap::new();
    let mut pv: BTreeMap<usize, usize> = BTreeMap::new();
    for (&u, &v) in pseudo.iter().zip(truth) {
        *joint.entry((u, v)).or_default() += 1;
        *pu.entry(u).or_default() += 1;
        *pv.entry(v).or_default() += 1;
    }
    let (hu, hv) = (entropy(pu.values().copied(), n), entropy(pv.values().copied(), n));
    if hu == 0.0 || hv == 0.0 {
        return Ok(if pu.len() == 1 && pv.len() == 1 { 1.0 } else { 0.0 });
    }
    let mi: f64 = joint
        .iter()
        .map(|(&(u, v), &c)| {
            let p = c as f64 / n;
            p * (p * n * n / (pu[&u] as f64 * pv[&v] as f64)).ln()
        })
        .sum();
    Ok((2.0 * mi / (hu + hv)).clamp(0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerClassStats {
    /// Classes present in the labels, ascending.
    pub classes: Vec<usize>,
    /// `accuracy[token][j]` for class `classes[j]`.
    pub accuracy: Vec<Vec<f64>>,
    /// Population standard deviation over tokens of each class's accuracy.
    pub std: Vec<f64>,
    /// Per token, the number of classes on which it is the single best.
    pub best_counts: Vec<usize>,
}

pub fn per_class_stats(predictions: &[Vec<usize>], labels: &[usize]) -> Result<PerClassStats> {
    if predictions.len() < 2 {
        return Err(Error::Usage("per-class statistics need at least two tokens".into()));
    }
    if predictions.iter().any(|p| p.len() != labels.len()) {
        return Err(Error::Usage("prediction vectors and labels differ in length".into()));
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let accuracy: Vec<Vec<f64>> = predictions
        .iter()
        .map(|p| {
            classes
                .iter()
                .map(|&c| {
                    let (mut hit, mut tot) = (0usize, 0usize);
                    for (&q, &y) in p.iter().zip(labels) {
                        if y == c {
                            tot += 1;
                            hit += (q == y) as usize;
                        }
                    }
                    hit as f64 / tot as f64
                })
                .collect()
        })
        .collect();
    let t = predictions.len() as f64;
    let mut std = Vec::with_capacity(classes.len());
    let mut best_counts = vec![0usize; predictions.len()];
    for j in 0..classes.len() {
        let col: Vec<f64> = accuracy.iter().map(|a| a[j]).collect();
        let mean = col.iter().sum::<f64>() / t;
        std.push((col.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / t).sqrt());
        let best = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let winners: Vec<usize> = (0..col.len()).filter(|&i| col[i] == best).collect();
        if let [only] = winners[..] {
            best_counts[only] += 1;
        }
    }
    Ok(PerClassStats {
        classes,
        accuracy,
        std,
        best_counts,
    })
}
