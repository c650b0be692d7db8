use std::path::Path;
use std::time::Instant;

use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::data::{cifar_record, gen_synthetic, load_cifar_batches};
use crate::error::{Error, Result};
use crate::eval::{cka, flop_count, knn_classify, nmi, per_class_stats, FeatureMatrix, FlopMode};
use crate::model::{build_attention_mask, init_params, strip_auxiliary, ModelConfig};
use crate::objectives::{BaseLossKind, HeadBank, HeadConfig};
use crate::trainer::{cosine_schedule, make_views, AugmentConfig, SupervisedConfig, SupervisedTrainer};

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub millis: u128,
}

type Check = fn(&Path) -> Result<std::result::Result<(), String>>;

fn ensure(cond: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn schedule_endpoints(_: &Path) -> Result<std::result::Result<(), String>> {
    let (a, b) = (0.996, 1.0);
    Ok(ensure(
        cosine_schedule(0, 100, a, b) == a
            && cosine_schedule(100, 100, a, b) == b
            && (cosine_schedule(50, 100, a, b) - (a + b) / 2.0).abs() < 1e-12,
        "cosine schedule endpoints or midpoint",
    ))
}

fn mask_layout(_: &Path) -> Result<std::result::Result<(), String>> {
    let (m, n) = (2, 3);
    let mask = build_attention_mask(m, n);
    let t = 1 + m + n;
    let aux = |j: usize| (1..=m).contains(&j);
    let ok = (0..t).all(|i| (0..t).all(|j| mask[i * t + j] == (aux(i) || !aux(j))));
    Ok(ensure(ok && build_attention_mask(0, 4).iter().all(|&b| b), "attention mask layout"))
}

fn views_deterministic(_: &Path) -> Result<std::result::Result<(), String>> {
    let img: Vec<f32> = (0..40 * 40 * 3).map(|i| (i % 17) as f32 / 16.0).collect();
    let cfg = AugmentConfig::default();
    let a = make_views(&img, (40, 40, 3), &cfg, 3, 1, 9)?;
    let b = make_views(&img, (40, 40, 3), &cfg, 3, 1, 9)?;
    Ok(ensure(a == b && a.0.len() == 32 * 32 * 3 && a.1.len() == a.0.len(), "view determinism or shape"))
}

fn synthetic_deterministic(_: &Path) -> Result<std::result::Result<(), String>> {
    let a = gen_synthetic(3, 4, 16, 1)?;
    Ok(ensure(a == gen_synthetic(3, 4, 16, 1)?, "synthetic data differs across calls"))
}

fn cifar_round_trip(dir: &Path) -> Result<std::result::Result<(), String>> {
    let hwc: Vec<u8> = (0..32 * 32 * 3).map(|i| (i * 7 % 256) as u8).collect();
    let mut bytes = cifar_record(3, &hwc)?;
    bytes.extend(cifar_record(0, &hwc)?);
    let path = dir.join("selfcheck_batch.bin");
    std::fs::write(&path, &bytes)?;
    let d = load_cifar_batches(&[&path], None, None)?;
    std::fs::remove_file(&path)?;
    let back: Vec<u8> = d.image(0).iter().map(|&v| (v * 255.0).round() as u8).collect();
    Ok(ensure(d.len() == 2 && d.labels == [3, 0] && back == hwc, "CIFAR record round trip"))
}

fn strip_accounting(_: &Path) -> Result<std::result::Result<(), String>> {
    let cfg = ModelConfig {
        embed_dim: 8,
        depth: 1,
        heads: 2,
        image_size: 8,
        patch_size: 4,
        pool_kernel: 3,
        ..ModelConfig::default()
    };
    let params = init_params::<f32>(&cfg, 0)?;
    let (kept, base, report) = strip_auxiliary(&params, &cfg);
    let reference = init_params::<f32>(&base, 0)?;
    Ok(ensure(
        kept == reference && report.params_after == reference.num_params() && !report.lossy,
        "stripped parameters differ from the baseline model",
    ))
}

fn checkpoint_round_trip(dir: &Path) -> Result<std::result::Result<(), String>> {
    let cfg = ModelConfig {
        embed_dim: 8,
        depth: 1,
        heads: 2,
        image_size: 8,
        patch_size: 4,
        pool_kernel: 3,
        ..ModelConfig::default()
    };
    let ck = Checkpoint::new(CheckpointKind::Inference, cfg.clone(), init_params(&cfg, 1)?);
    let path = dir.join("selfcheck.mte");
    ck.save(&path)?;
    let back = Checkpoint::load(&path)?;
    std::fs::remove_file(&path)?;
    Ok(ensure(back == ck, "checkpoint round trip"))
}

fn flop_stripping_contract(_: &Path) -> Result<std::result::Result<(), String>> {
    let base = ModelConfig::default().baseline();
    let head = HeadConfig::default();
    let ok = [(1, 1), (4, 6), (8, 8)].iter().all(|&(m, k)| {
        let c = ModelConfig {
            num_aux_cls: m,
            num_pooled: k,
            ..ModelConfig::default()
        };
        let h = Some((&head, BaseLossKind::Clustering));
        flop_count(&c, h, FlopMode::Inference) == flop_count(&base, None, FlopMode::Inference)
            && flop_count(&c, h, FlopMode::TrainForward).total() > flop_count(&base, h, FlopMode::TrainForward).total()
    });
    Ok(ensure(ok, "FLOP stripping contract"))
}

fn metric_identities(_: &Path) -> Result<std::result::Result<(), String>> {
    let labels = vec![0, 1, 2, 0, 1, 2];
    let x = FeatureMatrix::new(6, 2, vec![1.0, 0.1, 0.0, 1.0, -1.0, 0.3, 0.9, 0.0, 0.1, 0.8, -0.9, 0.2], labels.clone(), "x")?;
    let ok = (nmi(&labels, &labels)? - 1.0).abs() < 1e-12
        && nmi(&[0; 6], &labels)? == 0.0
        && (cka(&x, &x)? - 1.0).abs() < 1e-12
        && knn_classify(&x, &x, 1, 0.07)? == 1.0;
    let same = per_class_stats(&[labels.clone(), labels.clone()], &labels)?;
    Ok(ensure(
        ok && same.std.iter().all(|&s| s == 0.0) && same.best_counts == [0, 0],
        "metric identities",
    ))
}

fn head_accounting(_: &Path) -> Result<std::result::Result<(), String>> {
    let hc = HeadConfig {
        hidden: 8,
        bottleneck: 4,
        prototypes: 6,
    };
    let count = |shared| {
        let mut p = crate::params::ParamStore::<f32>::new();
        HeadBank::new(hc.clone(), 8, 3, shared, BaseLossKind::Clustering).init(&mut p, 0);
        p
    };
    let (indep, shared) = (count(false), count(true));
    let unit_rows = indep
        .iter()
        .filter(|(n, _)| n.ends_with(".proto.weight"))
        .all(|(_, t)| t.data().chunks(4).all(|r| (r.iter().map(|v| v * v).sum::<f32>() - 1.0).abs() < 1e-5));
    let sup = |shared| -> Result<usize> {
        let cfg = SupervisedConfig {
            shared_classifiers: shared,
            ..SupervisedConfig::default()
        };
        Ok(SupervisedTrainer::new(cfg, 1, 3)?.params.num_params())
    };
    Ok(ensure(
        indep.num_params() > shared.num_params() && sup(false)? > sup(true)? && unit_rows,
        "shared versus independent head accounting",
    ))
}

const CHECKS: &[(&str, Check)] = &[
    ("schedule endpoints", schedule_endpoints),
    ("attention mask layout", mask_layout),
    ("view determinism", views_deterministic),
    ("synthetic determinism", synthetic_deterministic),
    ("cifar round trip", cifar_round_trip),
    ("strip accounting", strip_accounting),
    ("checkpoint round trip", checkpoint_round_trip),
    ("flop stripping contract", flop_stripping_contract),
    ("metric identities", metric_identities),
    ("head accounting", head_accounting),
];

/// Runs the quick structural checks. Temporary files go to `scratch` and
/// are removed afterwards.
pub fn selfcheck(scratch: &Path) -> Result<Vec<CheckOutcome>> {
    std::fs::create_dir_all(scratch)?;
    let mut out = Vec::new();
    for &(name, f) in CHECKS {
        let start = Instant::now();
        let res = f(scratch);
        let (passed, detail) = match res {
            Ok(Ok(())) => (true, String::new()),
            Ok(Err(msg)) => (false, msg),
            Err(Error::Io(e)) => return Err(Error::Io(e)),
            Err(e) => (false, e.to_string()),
        };
        out.push(CheckOutcome {
            name,
            passed,
            detail,
            millis: start.elapsed().as_millis(),
        });
    }
    Ok(out)
}
