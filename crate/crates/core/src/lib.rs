//! Multi-token enhancing (MTE) for plain vision transformers, at desk scale.
//!
//! The crate bundles a small reverse-mode tensor engine, a miniature ViT that
//! emits auxiliary CLS tokens and adaptively pooled tokens, the self-supervised
//! and supervised objectives with online distillation into the global token,
//! a deterministic trainer, and the representation-analysis suite.

pub mod checkpoint;
pub mod data;
pub mod diagnostics;
pub mod eval;
pub mod error;
pub mod model;
pub mod objectives;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};
