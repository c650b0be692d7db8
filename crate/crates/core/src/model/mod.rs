//! Miniature plain ViT emitting `[z_c, z_a, z_p]`, plus the token-enhancing
//! module and the adaptive pooler that turn them into auxiliary tokens.

mod mask;
mod pool;
mod strip;
mod ten;

pub use mask::build_attention_mask;
pub use pool::{pool_with_weights, AdaptivePooler};
pub use strip::{strip_auxiliary, StripReport};
pub use ten::TenModule;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{add_param, Bound, Init, ParamStore};
use crate::tensor::{cst, Element, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(rename = "D")]
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Auxiliary CLS tokens.
    #[serde(rename = "M")]
    pub num_aux_cls: usize,
    /// Adaptively pooled tokens.
    #[serde(rename = "K")]
    pub num_pooled: usize,
    pub pool_kernel: usize,
    pub mask_auxiliary: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 2,
            patch_size: 8,
            image_size: 32,
            channels: 3,
            num_aux_cls: 4,
            num_pooled: 6,
            pool_kernel: 11,
            mask_auxiliary: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!("D={} not divisible by heads={}", self.embed_dim, self.heads));
        }
        if self.pool_kernel % 2 == 0 {
            return bad(format!("pool_kernel must be odd, got {}", self.pool_kernel));
        }
        if self.depth == 0 || self.mlp_ratio == 0 || self.channels == 0 || self.embed_dim == 0 {
            return bad("depth, mlp_ratio, channels and D must be positive".into());
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// N, the patch-token count.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// `1 + M + N` tokens seen by the encoder.
    pub fn num_tokens(&self) -> usize {
        1 + self.num_aux_cls + self.num_patches()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    /// Auxiliary token count `M + K`.
    pub fn num_auxiliary(&self) -> usize {
        self.num_aux_cls + self.num_pooled
    }

    /// Depthwise kernel extent actually used: `pool_kernel` clamped to the
    /// largest odd value not exceeding the grid extent.
    pub fn effective_pool_kernel(&self) -> usize {
        let g = self.grid().max(1);
        let largest_odd = if g % 2 == 1 { g } else { g - 1 };
        self.pool_kernel.min(largest_odd)
    }

    /// The same architecture with all auxiliary components removed.
    pub fn baseline(&self) -> Self {
        ModelConfig {
            num_aux_cls: 0,
            num_pooled: 0,
            ..self.clone()
        }
    }
}

/// Parameters that exist only to produce auxiliary tokens (and their heads
/// or classifiers). Frozen in `freeze_auxiliary` mode; removed by stripping.
pub fn is_auxiliary_param(name: &str) -> bool {
    ["aux.", "ten.", "pool.", "head.aux.", "head.shared.", "cls.aux.", "cls.shared."]
        .iter()
        .any(|p| name.starts_with(p))
}

/// Encoder parameters for `cfg`. Every tensor draws from its own stream keyed
/// by `(seed, name)`, so an `M=0, K=0` model equals the encoder subset of any
/// auxiliary-augmented model with the same seed.
pub fn init_params<T: Element>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let d = cfg.embed_dim;
    let patch_in = cfg.patch_size * cfg.patch_size * cfg.channels;
    let mut p = ParamStore::new();
    let w = Init::TruncNormal(0.02);
    add_param(&mut p, seed, "embed.patch.weight", &[patch_in, d], Init::Uniform(1.0 / (patch_in as f64).sqrt()));
    add_param(&mut p, seed, "embed.patch.bias", &[d], Init::Zeros);
    add_param(&mut p, seed, "embed.pos", &[cfg.num_patches(), d], w);
    add_param(&mut p, seed, "embed.cls", &[1, d], w);
    if cfg.num_aux_cls > 0 {
        add_param(&mut p, seed, "aux.cls", &[cfg.num_aux_cls, d], w);
    }
    for l in 0..cfg.depth {
        let b = format!("blocks.{l}");
        add_norm(&mut p, seed, &format!("{b}.norm1"), d);
        add_linear(&mut p, seed, &format!("{b}.attn.qkv"), d, 3 * d);
        add_linear(&mut p, seed, &format!("{b}.attn.proj"), d, d);
        add_norm(&mut p, seed, &format!("{b}.norm2"), d);
        add_linear(&mut p, seed, &format!("{b}.mlp.fc1"), d, cfg.mlp_hidden());
        add_linear(&mut p, seed, &format!("{b}.mlp.fc2"), cfg.mlp_hidden(), d);
    }
    add_norm(&mut p, seed, "norm", d);
    if cfg.num_aux_cls > 0 {
        TenModule::from_config(cfg).init(&mut p, seed);
    }
    if cfg.num_pooled > 0 {
        AdaptivePooler::from_config(cfg).init(&mut p, seed);
    }
    Ok(p)
}

pub(crate) fn add_linear<T: Element>(p: &mut ParamStore<T>, seed: u64, name: &str, fan_in: usize, fan_out: usize) {
    add_param(p, seed, &format!("{name}.weight"), &[fan_in, fan_out], Init::TruncNormal(0.02));
    add_param(p, seed, &format!("{name}.bias"), &[fan_out], Init::Zeros);
}

pub(crate) fn add_norm<T: Element>(p: &mut ParamStore<T>, seed: u64, name: &str, d: usize) {
    add_param(p, seed, &format!("{name}.weight"), &[d], Init::Ones);
    add_param(p, seed, &format!("{name}.bias"), &[d], Init::Zeros);
}

pub(crate) fn linear<'t, T: Element>(b: &Bound<'t, T>, name: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
    let w = b.get(&format!("{name}.weight"))?;
    let bias = b.get(&format!("{name}.bias"))?;
    x.linear(&w, Some(&bias))
}

pub(crate) fn norm<'t, T: Element>(b: &Bound<'t, T>, name: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
    let g = b.get(&format!("{name}.weight"))?;
    let beta = b.get(&format!("{name}.bias"))?;
    x.layer_norm(&g, &beta, cst(LN_EPS))
}

pub(crate) fn mlp<'t, T: Element>(b: &Bound<'t, T>, name: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
    let h = linear(b, &format!("{name}.fc1"), x)?.gelu();
    linear(b, &format!("{name}.fc2"), h)
}

/// Multi-head attention core. `q`: `[B, Tq, D]`, `k`/`v`: `[B, Tk, D]`.
/// Returns the merged context `[B, Tq, D]` and the probabilities `[B, H, Tq, Tk]`.
pub(crate) fn attention_core<'t, T: Element>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    heads: usize,
    mask: &[bool],
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let (qs, ks) = (q.shape(), k.shape());
    let (b, tq, d) = (qs[0], qs[1], qs[2]);
    let tk = ks[1];
    let dh = d / heads;
    let split = |x: Var<'t, T>, t: usize| -> Result<Var<'t, T>> {
        x.reshape(&[b, t, heads, dh])?.permute(&[0, 2, 1, 3])?.reshape(&[b * heads, t, dh])
    };
    let (qh, kh, vh) = (split(q, tq)?, split(k, tk)?, split(v, tk)?);
    let scores = qh.matmul_t(&kh)?.scale(cst(1.0 / (dh as f64).sqrt()));
    let probs = scores.masked_softmax(mask)?;
    let ctx = probs
        .matmul(&vh)?
        .reshape(&[b, heads, tq, dh])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b, tq, d])?;
    Ok((ctx, probs.reshape(&[b, heads, tq, tk])?))
}

/// Cuts `[B, H, W, C]` images into `[B, N, p·p·C]` patch vectors, row-major
/// over the patch grid and `(dy, dx, c)` within a patch.
pub fn patchify<T: Element>(images: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let s = images.shape();
    if s.len() != 4 || s[1] % patch != 0 || s[2] % patch != 0 {
        return Err(Error::shape("patchify", s, &[patch]));
    }
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let (gh, gw) = (h / patch, w / patch);
    let dim = patch * patch * c;
    let mut out = Vec::with_capacity(images.len());
    for bi in 0..b {
        for py in 0..gh {
            for px in 0..gw {
                for dy in 0..patch {
                    let row = ((bi * h + py * patch + dy) * w + px * patch) * c;
                    out.extend_from_slice(&images.data()[row..row + patch * c]);
                }
            }
        }
    }
    Tensor::new(&[b, gh * gw, dim], out)
}

/// One forward pass's token outputs for a batch of `B` images.
pub struct TokenBundle<'t, T: Element> {
    /// `z_c`: `[B, D]`
    pub global: Var<'t, T>,
    /// `z_a`: `[B, M, D]`
    pub aux_cls: Var<'t, T>,
    /// `z_p`: `[B, N, D]`
    pub patches: Var<'t, T>,
    /// `T_a`: `[B, M, D]`
    pub enhanced: Var<'t, T>,
    /// `T_p`: `[B, K, D]`
    pub pooled: Var<'t, T>,
    /// Adaptive pooling weights `W^i`, each `[B, N, D]`.
    pub pool_weights: Vec<Var<'t, T>>,
    /// Last block's self-attention probabilities `[B, H, T, T]`.
    pub last_attention: Var<'t, T>,
}

impl<'t, T: Element> TokenBundle<'t, T> {
    /// Auxiliary token `i` in `[T_a | T_p]` order, `[B, D]`.
    pub fn auxiliary_token(&self, i: usize) -> Result<Var<'t, T>> {
        let m = self.enhanced.shape()[1];
        let (src, idx) = if i < m { (self.enhanced, i) } else { (self.pooled, i - m) };
        let s = src.shape();
        if idx >= s[1] {
            return Err(Error::Usage(format!("auxiliary token {i} out of range")));
        }
        src.narrow(1, idx, 1)?.reshape(&[s[0], s[2]])
    }
}

/// Full forward over `images: [B, H, W, C]`.
pub fn forward<'t, T: Element>(
    tape: &'t Tape<T>,
    params: &Bound<'t, T>,
    cfg: &ModelConfig,
    images: &Tensor<T>,
) -> Result<TokenBundle<'t, T>> {
    let (encoded, last_attention) = encode(tape, params, cfg, images)?;
    let s = encoded.shape();
    let (b, d) = (s[0], s[2]);
    let (m, n) = (cfg.num_aux_cls, cfg.num_patches());
    let global = encoded.narrow(1, 0, 1)?.reshape(&[b, d])?;
    let aux_cls = encoded.narrow(1, 1, m)?;
    let patches = encoded.narrow(1, 1 + m, n)?;
    let enhanced = if m > 0 {
        TenModule::from_config(cfg).forward(params, aux_cls, patches)?
    } else {
        tape.constant(Tensor::zeros(&[b, 0, d]))
    };
    let (pooled, pool_weights) = if cfg.num_pooled > 0 {
        AdaptivePooler::from_config(cfg).forward(params, patches)?
    } else {
        (tape.constant(Tensor::zeros(&[b, 0, d])), Vec::new())
    };
    for (name, v) in [("enhanced", &enhanced), ("pooled", &pooled)] {
        if !v.value().all_finite() {
            log::error!("non-finite {name} tokens");
            return Err(Error::NonFinite { layer: cfg.depth });
        }
    }
    Ok(TokenBundle {
        global,
        aux_cls,
        patches,
        enhanced,
        pooled,
        pool_weights,
        last_attention,
    })
}

/// Patch embedding, token prepending and the transformer stack.
/// Returns the final-normed `[B, 1+M+N, D]` tokens and the last attention map.
pub fn encode<'t, T: Element>(
    tape: &'t Tape<T>,
    params: &Bound<'t, T>,
    cfg: &ModelConfig,
    images: &Tensor<T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    cfg.validate()?;
    let s = images.shape();
    let want = [cfg.image_size, cfg.image_size, cfg.channels];
    if s.len() != 4 || s[1..] != want {
        return Err(Error::shape("forward(image)", s, &want));
    }
    let b = s[0];
    let patches = tape.constant(patchify(images, cfg.patch_size)?);
    let x = linear(params, "embed.patch", patches)?.add_bias(&params.get("embed.pos")?)?;
    let mut parts = vec![params.get("embed.cls")?.tile(b)];
    if cfg.num_aux_cls > 0 {
        parts.push(params.get("aux.cls")?.tile(b));
    }
    parts.push(x);
    let mut x = tape.concat(&parts, 1)?;

    let mask = build_attention_mask(
        if cfg.mask_auxiliary { cfg.num_aux_cls } else { 0 },
        cfg.num_patches() + if cfg.mask_auxiliary { 0 } else { cfg.num_aux_cls },
    );
    let mut last = None;
    for l in 0..cfg.depth {
        let pre = format!("blocks.{l}");
        let h = norm(params, &format!("{pre}.norm1"), x)?;
        let qkv = linear(params, &format!("{pre}.attn.qkv"), h)?;
        let d = cfg.embed_dim;
        let q = qkv.narrow(2, 0, d)?;
        let k = qkv.narrow(2, d, d)?;
        let v = qkv.narrow(2, 2 * d, d)?;
        let (ctx, probs) = attention_core(q, k, v, cfg.heads, &mask)?;
        x = x.add(&linear(params, &format!("{pre}.attn.proj"), ctx)?)?;
        let h = norm(params, &format!("{pre}.norm2"), x)?;
        x = x.add(&mlp(params, &format!("{pre}.mlp"), h)?)?;
        if !x.value().all_finite() {
            return Err(Error::NonFinite { layer: l });
        }
        last = Some(probs);
    }
    let x = norm(params, "norm", x)?;
    Ok((x, last.expect("depth >= 1")))
}
