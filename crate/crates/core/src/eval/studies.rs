use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{knn_classify, nmi, Extractor, FeatureMatrix, TokenId};
use crate::data::Dataset;
use crate::error::{Error, Result};

/// How encoder-space features of several tokens are merged for k-NN.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineMode {
    Concat,
    Average,
}

impl std::str::FromStr for CombineMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(CombineMode::Concat),
            "average" => Ok(CombineMode::Average),
            _ => Err(Error::Usage(format!("unknown combine mode `{s}` (concat | average)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComboResult {
    pub tokens: Vec<TokenId>,
    /// Agreement of prototype assignments with the true labels.
    pub nmi: f64,
    pub knn_top1: Option<f64>,
}

fn pick<'a>(map: &'a BTreeMap<TokenId, FeatureMatrix>, subset: &[TokenId]) -> Result<Vec<&'a FeatureMatrix>> {
    subset
        .iter()
        .map(|t| map.get(t).ok_or_else(|| Error::Usage(format!("no features for token {t}"))))
        .collect()
}

/// Evaluates one token subset. Post-head outputs of the subset are
/// averaged and assigned to their argmax prototype for NMI; when encoder
/// features are given, the subset's encoder features are merged with
/// `mode` and scored with k-NN.
pub fn combination_study(
    post_head: &BTreeMap<TokenId, FeatureMatrix>,
    encoder: Option<(&BTreeMap<TokenId, FeatureMatrix>, &BTreeMap<TokenId, FeatureMatrix>)>,
    subset: &[TokenId],
    mode: CombineMode,
    k: usize,
    temperature: f64,
) -> Result<ComboResult> {
    if subset.is_empty() {
        return Err(Error::Usage("empty token subset".into()));
    }
    let name = subset.iter().map(ToString::to_string).collect::<Vec<_>>().join("+");
    let fused = FeatureMatrix::average(&pick(post_head, subset)?, &name)?;
    let score = nmi(&fused.argmax(), &fused.labels)?;
    let knn_top1 = match encoder {
        None => None,
        Some((train, test)) => {
            let merge = |parts: Vec<&FeatureMatrix>| match mode {
                CombineMode::Concat => FeatureMatrix::concat(&parts, &name),
                CombineMode::Average => FeatureMatrix::average(&parts, &name),
            };
            let (tr, te) = (merge(pick(train, subset)?)?, merge(pick(test, subset)?)?);
            Some(knn_classify(&tr, &te, k.min(tr.rows), temperature)?)
        }
    };
    Ok(ComboResult {
        tokens: subset.to_vec(),
        nmi: score,
        knn_top1,
    })
}

/// All size-`r` subsets of `0..n` in lexicographic order.
pub fn combinations(n: usize, r: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if r > n {
        return out;
    }
    let mut idx: Vec<usize> = (0..r).collect();
    loop {
        out.push(idx.clone());
        let Some(i) = (0..r).rev().find(|&i| idx[i] != i + n - r) else {
            return out;
        };
        idx[i] += 1;
        for j in i + 1..r {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub size: usize,
    pub combinations: usize,
    pub nmi_mean: f64,
    pub knn_mean: Option<f64>,
}

/// Mean metrics over every subset of `universe` of each size `1..=len`.
pub fn subset_curve(
    post_head: &BTreeMap<TokenId, FeatureMatrix>,
    encoder: Option<(&BTreeMap<TokenId, FeatureMatrix>, &BTreeMap<TokenId, FeatureMatrix>)>,
    universe: &[TokenId],
    mode: CombineMode,
    k: usize,
    temperature: f64,
) -> Result<Vec<CurvePoint>> {
    let mut out = Vec::with_capacity(universe.len());
    for size in 1..=universe.len() {
        let combos = combinations(universe.len(), size);
        let (mut nmi_sum, mut knn_sum) = (0.0, 0.0);
        for c in &combos {
            let subset: Vec<TokenId> = c.iter().map(|&i| universe[i]).collect();
            let r = combination_study(post_head, encoder, &subset, mode, k, temperature)?;
            nmi_sum += r.nmi;
            knn_sum += r.knn_top1.unwrap_or(0.0);
        }
        let n = combos.len() as f64;
        out.push(CurvePoint {
            size,
            combinations: combos.len(),
            nmi_mean: nmi_sum / n,
            knn_mean: encoder.map(|_| knn_sum / n),
        });
    }
    Ok(out)
}

/// For each `n` in `ns`, the mean of the `n` final patch tokens that the
/// global token attends to most in the last block. Scores are averaged
/// over heads, or taken from head `head` alone.
pub fn patch_topn_features(ex: &Extractor, data: &Dataset, ns: &[usize], head: Option<usize>) -> Result<Vec<FeatureMatrix>> {
    let n_patches = ex.model.num_patches();
    if let Some(&bad) = ns.iter().find(|&&n| n == 0 || n > n_patches) {
        return Err(Error::Param(format!("top-n must lie in 1..={n_patches}, got {bad}")));
    }
    if let Some(h) = head.filter(|&h| h >= ex.model.heads) {
        return Err(Error::Param(format!("head {h} out of range for {} heads", ex.model.heads)));
    }
    let d = ex.model.embed_dim;
    let offset = 1 + ex.model.num_aux_cls;
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); ns.len()];
    ex.visit(data, |_, bundle, _| {
        let attn = bundle.last_attention.value();
        let s = attn.shape().to_vec();
        let (heads, t) = (s[1], s[2]);
        let patches = bundle.patches.value();
        for b in 0..s[0] {
            let score = |p: usize| -> f64 {
                let at = |h: usize| attn.data()[((b * heads + h) * t) * t + offset + p] as f64;
                match head {
                    Some(h) => at(h),
                    None => (0..heads).map(at).sum::<f64>() / heads as f64,
                }
            };
            let mut order: Vec<(f64, usize)> = (0..n_patches).map(|p| (score(p), p)).collect();
            order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            for (j, &n) in ns.iter().enumerate() {
                let mut acc = vec![0.0f64; d];
                for &(_, p) in &order[..n] {
                    let row = &patches.data()[(b * n_patches + p) * d..(b * n_patches + p + 1) * d];
                    acc.iter_mut().zip(row).for_each(|(a, &v)| *a += v as f64);
                }
                values[j].extend(acc.iter().map(|a| a / n as f64));
            }
        }
        Ok(())
    })?;
    ns.iter()
        .zip(values)
        .map(|(n, v)| FeatureMatrix::new(data.len(), d, v, data.labels.clone(), format!("patch-top{n}")))
        .collect()
}

/// k-NN on the concatenation of each member's L2-normalized features.
/// `members` holds one `(train, test)` pair per model.
pub fn ensemble_concat(members: &[(FeatureMatrix, FeatureMatrix)], k: usize, temperature: f64) -> Result<(f64, usize)> {
    if members.len() < 2 {
        return Err(Error::Usage("an ensemble needs at least two models".into()));
    }
    let (t0, e0) = &members[0];
    if members.iter().any(|(tr, te)| tr.labels != t0.labels || te.labels != e0.labels) {
        return Err(Error::Usage("ensemble members were evaluated on different datasets".into()));
    }
    let tr: Vec<FeatureMatrix> = members.iter().map(|m| m.0.normalized()).collect();
    let te: Vec<FeatureMatrix> = members.iter().map(|m| m.1.normalized()).collect();
    let train = FeatureMatrix::concat(&tr.iter().collect::<Vec<_>>(), "ensemble")?;
    let test = FeatureMatrix::concat(&te.iter().collect::<Vec<_>>(), "ensemble")?;
    Ok((knn_classify(&train, &test, k.min(train.rows), temperature)?, train.cols))
}

/// Post-head output of the fused auxiliary stream: every auxiliary token
/// projected through its head, then averaged.
pub fn fused_features(ex: &Extractor, data: &Dataset) -> Result<FeatureMatrix> {
    let heads = ex
        .heads
        .as_ref()
        .ok_or_else(|| Error::Usage("the fused stream needs a checkpoint with projection heads".into()))?;
    let mut values = Vec::new();
    let mut cols = 0;
    ex.visit(data, |bound, bundle, _| {
        let fused = heads.project_fuse(bound, bundle.enhanced, bundle.pooled)?.0;
        let v = fused.value();
        cols = v.shape()[1];
        values.extend(v.data().iter().map(|&x| x as f64));
        Ok(())
    })?;
    FeatureMatrix::new(data.len(), cols, values, data.labels.clone(), "fused")
}
