use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{forward, init_params, ModelConfig};
use crate::objectives::{
    pretrain_loss, supervised_loss, BaseLossKind, Centers, ClassifierBank, HeadBank, HeadConfig, LossConfig, LossMode,
    StreamOutputs,
};
use crate::params::{derive_seed, Bound, ParamStore};
use crate::tensor::gradcheck::{check, op_suite, GradCheckReport, DEFAULT_STEP};
use crate::tensor::{Tape, Tensor, Var};

/// Depth-1, D = 16, two auxiliary CLS tokens, two pooled tokens, four patches.
pub fn grad_model() -> ModelConfig {
    ModelConfig {
        embed_dim: 16,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
        patch_size: 4,
        image_size: 8,
        channels: 3,
        num_aux_cls: 2,
        num_pooled: 2,
        pool_kernel: 3,
        mask_auxiliary: true,
    }
}

fn grad_heads() -> HeadConfig {
    HeadConfig {
        hidden: 8,
        bottleneck: 6,
        prototypes: 10,
    }
}

fn jitter(store: &ParamStore<f64>, seed: u64, scale: f64) -> ParamStore<f64> {
    let mut out = store.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in out.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += scale * rng.random_range(-1.0..1.0));
    }
    out
}

fn bind_inputs<'t>(names: &[String], vars: &[Var<'t, f64>]) -> Bound<'t, f64> {
    Bound::from_vars(names.iter().cloned().zip(vars.iter().copied()))
}

/// Gradient of the full symmetrized pretraining objective with respect to
/// every student parameter, with the teacher and centers held fixed.
pub fn pretrain_loss_check(kind: BaseLossKind, mode: LossMode, seed: u64, max_coords: Option<usize>) -> Result<GradCheckReport> {
    let cfg = grad_model();
    let bank = HeadBank::new(grad_heads(), cfg.embed_dim, cfg.num_auxiliary(), false, kind);
    let mut student = init_params::<f64>(&cfg, seed)?;
    bank.init(&mut student, seed);
    // Perturb away from the symmetric init so every path carries gradient.
    let student = jitter(&student, derive_seed(seed, &[1]), 0.05);
    let teacher = jitter(&student, derive_seed(seed, &[2]), 0.05);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[3]));
    let (b, s) = (2, cfg.image_size);
    let views = Tensor::from_fn(&[2 * b, s, s, cfg.channels], |_| rng.random_range(-1.0..1.0));
    let p = bank.out_dim();
    let centers = Centers {
        fused: Tensor::from_fn(&[p], |_| rng.random_range(-0.1..0.1)),
        global: Tensor::from_fn(&[p], |_| rng.random_range(-0.1..0.1)),
    };
    let loss_cfg = LossConfig {
        kind,
        ..LossConfig::default()
    };
    let with_fused = mode != LossMode::GlobalOnly;

    let (t_global, t_fused) = {
        let tape = Tape::no_grad();
        let bound = teacher.bind(&tape, |_| false);
        let bundle = forward(&tape, &bound, &cfg, &views)?;
        let g = (*bank.project_global(&bound, bundle.global)?.value()).clone();
        let f = (*bank.project_fuse(&bound, bundle.enhanced, bundle.pooled)?.0.value()).clone();
        (g, f)
    };
    let names: Vec<String> = student.names().map(str::to_string).collect();
    let inputs: Vec<Tensor<f64>> = student.iter().map(|(_, t)| t.clone()).collect();
    let name = format!("pretrain_loss({kind:?}, {mode:?})");
    check(
        &name,
        &inputs,
        |tape, vars| {
            let bound = bind_inputs(&names, vars);
            let bundle = forward(tape, &bound, &cfg, &views)?;
            let sg = bank.project_global(&bound, bundle.global)?;
            let sf = if with_fused {
                Some(bank.project_fuse(&bound, bundle.enhanced, bundle.pooled)?.0)
            } else {
                None
            };
            let tg = tape.constant(t_global.clone());
            let tf = tape.constant(t_fused.clone());
            let mut teacher_out = Vec::new();
            let mut student_out = Vec::new();
            for i in 0..2 {
                teacher_out.push(StreamOutputs {
                    fused: Some(tf.narrow(0, i * b, b)?),
                    global: tg.narrow(0, i * b, b)?,
                });
                student_out.push(StreamOutputs {
                    fused: sf.map(|v| v.narrow(0, i * b, b)).transpose()?,
                    global: sg.narrow(0, i * b, b)?,
                });
            }
            let parts = pretrain_loss(
                &[teacher_out[0], teacher_out[1]],
                &[student_out[0], student_out[1]],
                &loss_cfg,
                &centers,
                mode,
            )?;
            Ok(parts.total)
        },
        DEFAULT_STEP,
        max_coords,
        seed,
    )
}

/// Gradient of the supervised objective with respect to model and classifier weights.
pub fn supervised_loss_check(seed: u64, max_coords: Option<usize>) -> Result<GradCheckReport> {
    let cfg = grad_model();
    let bank = ClassifierBank {
        dim: cfg.embed_dim,
        classes: 3,
        num_aux: cfg.num_auxiliary(),
        shared: false,
    };
    let mut params = init_params::<f64>(&cfg, seed)?;
    bank.init(&mut params, seed);
    let params = jitter(&params, derive_seed(seed, &[4]), 0.05);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[5]));
    let s = cfg.image_size;
    let images = Tensor::from_fn(&[3, s, s, cfg.channels], |_| rng.random_range(-1.0..1.0));
    let labels = [0, 2, 1];
    // Finite differences cannot see the detached distillation target, so the
    // target is frozen at the unperturbed point for the numeric side.
    let target = {
        let tape = Tape::no_grad();
        let bound = params.bind(&tape, |_| false);
        let bundle = forward(&tape, &bound, &cfg, &images)?;
        let out = supervised_loss(&bound, &bank, bundle.global, bundle.enhanced, bundle.pooled, &labels)?;
        (*out.aux_probs.expect("auxiliary classifiers present").value()).clone()
    };
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let inputs: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let inv_b = -1.0 / labels.len() as f64;
    check(
        "supervised_loss",
        &inputs,
        |tape, vars| {
            let bound = bind_inputs(&names, vars);
            let bundle = forward(tape, &bound, &cfg, &images)?;
            let out = supervised_loss(&bound, &bank, bundle.global, bundle.enhanced, bundle.pooled, &labels)?;
            let frozen = bank
                .global_logits(&bound, bundle.global)?
                .log_softmax(1, 1.0)?
                .mul(&tape.constant(target.clone()))?
                .sum()
                .scale(inv_b);
            // Value follows the frozen target; gradient is the loss's own.
            Ok(out.loss.add(&frozen.sub(&out.ce_distill)?.stop_gradient())?)
        },
        DEFAULT_STEP,
        max_coords,
        seed,
    )
}

/// Every tape op plus the full objectives on the small model.
/// `max_coords` caps the coordinates probed per parameter tensor in the
/// model-level checks.
pub fn grad_suite(seed: u64, max_coords: Option<usize>) -> Result<Vec<GradCheckReport>> {
    let mut out = op_suite(seed)?;
    for (kind, mode) in [
        (BaseLossKind::Clustering, LossMode::Distill),
        (BaseLossKind::Clustering, LossMode::NoDistill),
        (BaseLossKind::Clustering, LossMode::GlobalOnly),
        (BaseLossKind::Cosine, LossMode::Distill),
        (BaseLossKind::Infonce, LossMode::Distill),
    ] {
        out.push(pretrain_loss_check(kind, mode, seed, max_coords)?);
    }
    out.push(supervised_loss_check(seed, max_coords)?);
    Ok(out)
}
