use super::{is_auxiliary_param, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Element;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StripReport {
    pub removed: Vec<String>,
    pub params_before: usize,
    pub params_after: usize,
    /// Set when the source model let patches and the global token attend the
    /// auxiliary tokens; the stripped model then computes a different function.
    pub lossy: bool,
}

impl StripReport {
    pub fn warning(&self) -> Option<String> {
        self.lossy.then(|| {
            "model was trained without the auxiliary attention mask; stripped outputs will differ".to_string()
        })
    }
}

/// Removes every auxiliary component and returns the inference-only
/// parameters with an `M = 0, K = 0` config. Retained tensors are untouched.
pub fn strip_auxiliary<T: Element>(params: &ParamStore<T>, cfg: &ModelConfig) -> (ParamStore<T>, ModelConfig, StripReport) {
    let removed: Vec<String> = params.names().filter(|n| is_auxiliary_param(n)).map(str::to_string).collect();
    let kept = params.filter(|n| !is_auxiliary_param(n));
    let lossy = !cfg.mask_auxiliary && cfg.num_aux_cls > 0;
    if lossy {
        log::warn!("stripping a model trained without the auxiliary attention mask");
    }
    let report = StripReport {
        removed,
        params_before: params.num_params(),
        params_after: kept.num_params(),
        lossy,
    };
    let mut out_cfg = cfg.baseline();
    out_cfg.mask_auxiliary = true;
    (kept, out_cfg, report)
}
