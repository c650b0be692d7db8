//! Frozen-feature evaluation: token feature extraction, k-NN, linear
//! probing, representation similarity, clustering agreement, token
//! combination studies, patch probes, ensembles and MAC accounting.

mod flops;
mod metrics;
mod studies;

pub use flops::{flop_count, FlopMode, FlopReport};
pub use metrics::{cka, knn_classify, knn_predict, linear_probe, nmi, per_class_stats, PerClassStats, ProbeConfig};
pub use studies::{
    combinations, combination_study, ensemble_concat, fused_features, patch_topn_features, subset_curve, CombineMode, ComboResult,
    CurvePoint,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, EvalWeights};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{forward, ModelConfig, TokenBundle};
use crate::objectives::HeadBank;
use crate::params::{Bound, ParamStore};
use crate::tensor::Tape;
use crate::trainer::{eval_batch, TrainConfig};

/// One token stream of the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TokenId {
    Global,
    /// Enhanced auxiliary CLS token `i`.
    Aux(usize),
    /// Adaptively pooled token `i`.
    Pool(usize),
    /// Plain mean of the final patch tokens.
    PatchAvg,
}

impl TokenId {
    /// Index in `[enhanced | pooled]` order for auxiliary tokens.
    pub fn auxiliary_index(self, m: usize) -> Option<usize> {
        match self {
            TokenId::Aux(i) => Some(i),
            TokenId::Pool(i) => Some(m + i),
            _ => None,
        }
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokenId::Global => write!(f, "global"),
            TokenId::Aux(i) => write!(f, "aux:{i}"),
            TokenId::Pool(i) => write!(f, "pool:{i}"),
            TokenId::PatchAvg => write!(f, "patch-avg"),
        }
    }
}

/// Parses a token selector: comma-separated items among `global`,
/// `patch-avg`, `aux:I`, `aux:A..B`, `pool:I`, `pool:A..B` (inclusive
/// ranges) and `all` (every auxiliary token). Ranges are checked against
/// `(m, k)`.
pub fn parse_tokens(spec: &str, m: usize, k: usize) -> Result<Vec<TokenId>> {
    let mut out = Vec::new();
    for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match item {
            "global" => out.push(TokenId::Global),
            "patch-avg" => out.push(TokenId::PatchAvg),
            "all" => {
                out.extend((0..m).map(TokenId::Aux));
                out.extend((0..k).map(TokenId::Pool));
            }
            _ => {
                let (kind, range) = item
                    .split_once(':')
                    .ok_or_else(|| Error::Usage(format!("bad token selector `{item}`")))?;
                let (make, limit): (fn(usize) -> TokenId, usize) = match kind {
                    "aux" => (TokenId::Aux, m),
                    "pool" => (TokenId::Pool, k),
                    _ => return Err(Error::Usage(format!("bad token selector `{item}`"))),
                };
                let num = |s: &str| {
                    s.parse::<usize>()
                        .map_err(|_| Error::Usage(format!("bad token index `{s}` in `{item}`")))
                };
                let (a, b) = match range.split_once("..") {
                    Some((a, b)) => (num(a)?, num(b)?),
                    None => {
                        let i = num(range)?;
                        (i, i)
                    }
                };
                if a > b || b >= limit {
                    return Err(Error::Usage(format!(
                        "token selector `{item}` out of range: model has {limit} {kind} tokens"
                    )));
                }
                out.extend((a..=b).map(make));
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Usage("empty token selector".into()));
    }
    Ok(out)
}

/// Where features are read off.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSpace {
    /// Final encoder tokens, `D` columns.
    Encoder,
    /// Projection-head outputs.
    PostHead,
}

impl FromStr for FeatureSpace {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(FeatureSpace::Encoder),
            "post_head" | "post-head" => Ok(FeatureSpace::PostHead),
            _ => Err(Error::Usage(format!("unknown feature space `{s}` (encoder | post-head)"))),
        }
    }
}

/// Samples × features, with aligned labels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub labels: Vec<usize>,
    pub token: String,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>, labels: Vec<usize>, token: impl Into<String>) -> Result<Self> {
        if values.len() != rows * cols || labels.len() != rows {
            return Err(Error::shape("feature_matrix", &[rows, cols], &[values.len(), labels.len()]));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite feature value".into()));
        }
        Ok(FeatureMatrix {
            rows,
            cols,
            values,
            labels,
            token: token.into(),
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    /// Row-wise L2-normalized copy (zero rows stay zero).
    pub fn normalized(&self) -> FeatureMatrix {
        let mut out = self.clone();
        for r in out.values.chunks_mut(self.cols.max(1)) {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                r.iter_mut().for_each(|v| *v /= n);
            }
        }
        out
    }

    /// Column-wise concatenation of matrices over the same samples.
    pub fn concat(parts: &[&FeatureMatrix], token: impl Into<String>) -> Result<FeatureMatrix> {
        let first = parts.first().ok_or_else(|| Error::Usage("nothing to concatenate".into()))?;
        if parts.iter().any(|p| p.rows != first.rows || p.labels != first.labels) {
            return Err(Error::Usage("feature matrices describe different samples".into()));
        }
        let cols = parts.iter().map(|p| p.cols).sum();
        let mut values = Vec::with_capacity(first.rows * cols);
        for i in 0..first.rows {
            for p in parts {
                values.extend_from_slice(p.row(i));
            }
        }
        FeatureMatrix::new(first.rows, cols, values, first.labels.clone(), token)
    }

    /// Elementwise mean of equally shaped matrices.
    pub fn average(parts: &[&FeatureMatrix], token: impl Into<String>) -> Result<FeatureMatrix> {
        let first = parts.first().ok_or_else(|| Error::Usage("nothing to average".into()))?;
        if parts.iter().any(|p| p.rows != first.rows || p.cols != first.cols || p.labels != first.labels) {
            return Err(Error::Usage("feature matrices differ in shape or samples".into()));
        }
        let mut values = vec![0.0; first.values.len()];
        for p in parts {
            values.iter_mut().zip(&p.values).for_each(|(a, b)| *a += b);
        }
        let inv = 1.0 / parts.len() as f64;
        values.iter_mut().for_each(|v| *v *= inv);
        FeatureMatrix::new(first.rows, first.cols, values, first.labels.clone(), token)
    }

    /// Row-wise argmax.
    pub fn argmax(&self) -> Vec<usize> {
        self.values
            .chunks(self.cols.max(1))
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                    .0
            })
            .collect()
    }
}

/// Frozen model weights plus the optional projection heads.
pub struct Extractor {
    pub params: ParamStore<f32>,
    pub model: ModelConfig,
    pub heads: Option<HeadBank>,
    pub batch: usize,
}

impl Extractor {
    pub fn new(params: ParamStore<f32>, model: ModelConfig, heads: Option<HeadBank>) -> Self {
        Extractor {
            params,
            model,
            heads,
            batch: 100,
        }
    }

    /// Evaluation weights of a checkpoint; heads are attached when the
    /// checkpoint carries a pretraining config and head parameters.
    pub fn from_checkpoint(ck: &Checkpoint) -> Self {
        Self::from_checkpoint_weights(ck, EvalWeights::default())
    }

    pub fn from_checkpoint_weights(ck: &Checkpoint, weights: EvalWeights) -> Self {
        let params = ck.params_for(weights);
        let heads = ck
            .config
            .as_ref()
            .and_then(|v| serde_json::from_value::<TrainConfig>(v.clone()).ok())
            .map(|c| {
                HeadBank::new(c.head, ck.model.embed_dim, ck.model.num_auxiliary(), c.shared_heads, c.loss.kind)
            })
            .filter(|h| h.prefixes().iter().all(|p| params.contains(&format!("{p}.fc1.weight"))));
        Extractor::new(params, ck.model.clone(), heads)
    }

    fn check_token(&self, t: TokenId) -> Result<()> {
        let (m, k) = (self.model.num_aux_cls, self.model.num_pooled);
        let ok = match t {
            TokenId::Aux(i) => i < m,
            TokenId::Pool(i) => i < k,
            _ => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Usage(format!(
                "token {t} is not available: model has {m} auxiliary CLS and {k} pooled tokens"
            )))
        }
    }

    /// Runs the model over the dataset in fixed-size batches, handing each
    /// batch's bundle to `visit` together with the sample index range.
    pub fn visit(
        &self,
        data: &Dataset,
        mut visit: impl FnMut(&Bound<'_, f32>, &TokenBundle<'_, f32>, std::ops::Range<usize>) -> Result<()>,
    ) -> Result<()> {
        let idx: Vec<usize> = (0..data.len()).collect();
        let mut start = 0;
        for chunk in idx.chunks(self.batch.max(1)) {
            let x = eval_batch(data, chunk, self.model.image_size)?;
            let tape = Tape::no_grad();
            let bound = self.params.bind(&tape, |_| false);
            let bundle = forward(&tape, &bound, &self.model, &x)?;
            visit(&bound, &bundle, start..start + chunk.len())?;
            start += chunk.len();
        }
        Ok(())
    }

    /// One matrix per requested token, in request order. Deterministic:
    /// no augmentation, the whole image resized.
    pub fn extract(&self, data: &Dataset, tokens: &[TokenId], space: FeatureSpace) -> Result<Vec<FeatureMatrix>> {
        if data.is_empty() {
            return Err(Error::Usage("cannot extract features from an empty dataset".into()));
        }
        for &t in tokens {
            self.check_token(t)?;
        }
        let heads = match space {
            FeatureSpace::Encoder => None,
            FeatureSpace::PostHead => Some(self.heads.as_ref().ok_or_else(|| {
                Error::Usage("post-head features need a checkpoint with projection heads".into())
            })?),
        };
        if heads.is_some() && tokens.contains(&TokenId::PatchAvg) {
            return Err(Error::Usage("patch-avg has no projection head".into()));
        }
        let mut cols = vec![0usize; tokens.len()];
        let mut values: Vec<Vec<f64>> = vec![Vec::new(); tokens.len()];
        let m = self.model.num_aux_cls;
        self.visit(data, |bound, bundle, _| {
            for (j, &t) in tokens.iter().enumerate() {
                let enc = match t {
                    TokenId::Global => bundle.global,
                    TokenId::PatchAvg => bundle.patches.mean_axis(1)?,
                    _ => bundle.auxiliary_token(t.auxiliary_index(m).expect("auxiliary"))?,
                };
                let v = match (heads, t) {
                    (None, _) => enc,
                    (Some(h), TokenId::Global) => h.project_global(bound, enc)?,
                    (Some(h), _) => h.project(bound, &h.aux_prefix(t.auxiliary_index(m).expect("auxiliary")), enc)?,
                };
                let val = v.value();
                cols[j] = val.shape()[1];
                values[j].extend(val.data().iter().map(|&x| x as f64));
            }
            Ok(())
        })?;
        tokens
            .iter()
            .zip(values)
            .zip(cols)
            .map(|((t, v), c)| FeatureMatrix::new(data.len(), c, v, data.labels.clone(), t.to_string()))
            .collect()
    }
}
