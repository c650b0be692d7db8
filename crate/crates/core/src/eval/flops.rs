use serde::{Deserialize, Serialize};

use crate::model::ModelConfig;
use crate::objectives::{BaseLossKind, HeadConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopMode {
    /// Everything a training forward pass computes for one image,
    /// including auxiliary tokens, the enhancing module, pooling and heads.
    TrainForward,
    /// The stripped network: global token and patches only, no heads.
    Inference,
}

/// Multiply-accumulate counts per component for one image.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub patch_embed: u64,
    pub blocks: u64,
    pub ten: u64,
    pub pooler: u64,
    pub heads: u64,
}

impl FlopReport {
    pub fn total(&self) -> u64 {
        self.patch_embed + self.blocks + self.ten + self.pooler + self.heads
    }
}

/// Analytic MAC count. Only products that feed a sum are counted: linear
/// layers, attention scores and mixing, convolutions and the weighted
/// pooling average. Norms, softmax and activations are excluded.
pub fn flop_count(cfg: &ModelConfig, heads: Option<(&HeadConfig, BaseLossKind)>, mode: FlopMode) -> FlopReport {
    let d = cfg.embed_dim as u64;
    let n = cfg.num_patches() as u64;
    let p2c = (cfg.patch_size * cfg.patch_size * cfg.channels) as u64;
    let hidden = cfg.mlp_hidden() as u64;
    let train = mode == FlopMode::TrainForward;
    let m = if train { cfg.num_aux_cls as u64 } else { 0 };
    let k = if train { cfg.num_pooled as u64 } else { 0 };
    let t = 1 + m + n;

    let per_block = t * d * 3 * d + 2 * t * t * d + t * d * d + 2 * t * d * hidden;
    let mut r = FlopReport {
        patch_embed: n * p2c * d,
        blocks: cfg.depth as u64 * per_block,
        ..FlopReport::default()
    };
    if m > 0 {
        r.ten = 2 * m * d * d + 2 * n * d * d + 2 * m * n * d + 2 * m * d * hidden;
    }
    if k > 0 {
        let kk = cfg.effective_pool_kernel() as u64;
        r.pooler = k * (n * d * d + n * d * kk * kk + n * d);
    }
    if let (true, Some((h, kind))) = (train, heads) {
        let (hd, bn) = (h.hidden as u64, h.bottleneck as u64);
        let mut one = d * hd + hd * hd + hd * bn;
        if kind == BaseLossKind::Clustering {
            one += bn * h.prototypes as u64;
        }
        r.heads = (1 + m + k) * one;
    }
    r
}
