use std::path::{Path, PathBuf};

use mte_core::diagnostics::{grad_suite, selfcheck as run_selfcheck};
use mte_core::eval::{flop_count, FlopMode};
use mte_core::trainer::{pretrain as run_pretrain, predict, train_supervised, MetricRecord, Pretrainer};
use mte_core::{Error, Result};
use serde_json::json;

use crate::run::{fmt_f, fmt_pct, load_checkpoint, reject_mode, supervised_config, train_config, Run};
use crate::Common;

fn epoch_means(records: &[MetricRecord]) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    let mut i = 0;
    while i < records.len() {
        let e = records[i].epoch;
        let group: Vec<&MetricRecord> = records[i..].iter().take_while(|r| r.epoch == e).collect();
        let n = group.len() as f64;
        let mean = |f: fn(&MetricRecord) -> f64| group.iter().map(|r| f(r)).sum::<f64>() / n;
        rows.push(vec![
            (e + 1).to_string(),
            fmt_f(mean(|r| r.loss)),
            fmt_f(mean(|r| r.loss_fused)),
            fmt_f(mean(|r| r.loss_distill)),
            format!("{:.2e}", group.last().map_or(0.0, |r| r.lr)),
        ]);
        i += group.len();
    }
    rows
}

pub fn pretrain(sub: &str, common: &Common, epochs: Option<usize>, resume: Option<PathBuf>) -> Result<()> {
    let (trainer, data) = match resume {
        Some(path) => {
            if common.config.is_some() || common.mode.is_some() || common.seed.is_some() {
                return Err(Error::Usage("--resume takes its config from the checkpoint; drop --config, --mode and --seed".into()));
            }
            let ck = load_checkpoint(&path)?;
            let cfg: mte_core::trainer::TrainConfig = serde_json::from_value(
                ck.config.clone().ok_or_else(|| Error::Format("checkpoint has no training config".into()))?,
            )
            .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
            let (train, _) = cfg.data.load()?;
            let mut t = Pretrainer::from_checkpoint(&ck, train.len())?;
            if let Some(e) = epochs {
                t.cfg.epochs = e;
            }
            (t, train)
        }
        None => {
            let mut cfg = train_config(common)?;
            if let Some(e) = epochs {
                cfg.epochs = e;
                cfg.validate()?;
            }
            let (train, _) = cfg.data.load()?;
            (Pretrainer::new(cfg, train.len())?, train)
        }
    };
    let run = Run::start(sub, common, &trainer.cfg, trainer.cfg.seed)?;
    log::info!(
        "pretraining {} images for {} epochs ({} steps per epoch)",
        data.len(),
        trainer.cfg.epochs,
        trainer.steps_per_epoch
    );
    let outcome = run_pretrain(&data, trainer, Some(&run.dir), &mut |_| Ok(()))?;
    run.table("epochs", &["epoch", "L", "L_c", "L_d", "lr"], &epoch_means(&outcome.records))?;
    let files: Vec<String> = outcome.checkpoints.iter().map(|p| p.display().to_string()).collect();
    run.json(
        "summary",
        &json!({ "epochs": outcome.trainer.epoch, "steps": outcome.trainer.step, "checkpoints": files }),
    )?;
    println!("checkpoint: {}", run.dir.join("last.mte").display());
    Ok(())
}

pub fn supervised(sub: &str, common: &Common, epochs: Option<usize>) -> Result<()> {
    let mut cfg = supervised_config(common)?;
    if let Some(e) = epochs {
        cfg.epochs = e;
        cfg.validate()?;
    }
    let run = Run::start(sub, common, &cfg, cfg.seed)?;
    let (train, test) = cfg.data.load()?;
    let model = cfg.model.clone();
    let outcome = train_supervised(&train, cfg, Some(&run.dir))?;
    let preds = predict(&outcome.trainer.params, &model, &test, 100)?;
    let correct = preds.iter().zip(&test.labels).filter(|(p, y)| p == y).count();
    let acc = correct as f64 / test.len().max(1) as f64;
    let mut rows = epoch_means(&outcome.records);
    for (r, a) in rows.iter_mut().zip(&outcome.epoch_accuracy) {
        r.push(fmt_pct(*a));
    }
    run.table("epochs", &["epoch", "L", "ce_aux", "ce_distill", "lr", "train_top1"], &rows)?;
    run.json("summary", &json!({ "test_top1": acc, "test_images": test.len() }))?;
    println!("test top-1 (global classifier): {}%", fmt_pct(acc));
    println!("checkpoint: {}", run.dir.join("last.mte").display());
    Ok(())
}

pub fn strip(sub: &str, common: &Common, checkpoint: &Path) -> Result<()> {
    reject_mode(sub, common)?;
    let weights = common.weights.unwrap_or_default();
    let run = Run::start(sub, common, &json!({ "checkpoint": checkpoint, "weights": weights }), common.seed.unwrap_or(0))?;
    let ck = load_checkpoint(checkpoint)?;
    let (stripped, report) = ck.strip_weights(weights);
    let path = run.dir.join("stripped.mte");
    stripped.save(&path)?;
    run.json("strip_report", &report)?;
    let rows = vec![vec![
        report.params_before.to_string(),
        report.params_after.to_string(),
        report.removed.len().to_string(),
    ]];
    run.table("strip", &["params_before", "params_after", "tensors_removed"], &rows)?;
    if let Some(w) = report.warning() {
        log::warn!("{w}");
    }
    println!("checkpoint: {}", path.display());
    Ok(())
}

pub fn flops(sub: &str, common: &Common) -> Result<()> {
    let cfg = train_config(common)?;
    let run = Run::start(sub, common, &cfg, cfg.seed)?;
    let heads = Some((&cfg.head, cfg.loss.kind));
    let base = cfg.model.baseline();
    let mut rows = Vec::new();
    let mut report = Vec::new();
    for (name, model) in [("mte", &cfg.model), ("baseline", &base)] {
        let train = flop_count(model, heads, FlopMode::TrainForward);
        let infer = flop_count(model, heads, FlopMode::Inference);
        rows.push(vec![
            name.to_string(),
            format!("M={} K={}", model.num_aux_cls, model.num_pooled),
            train.total().to_string(),
            infer.total().to_string(),
        ]);
        report.push(json!({ "config": name, "M": model.num_aux_cls, "K": model.num_pooled,
            "train_forward": train, "train_forward_total": train.total(),
            "inference": infer, "inference_total": infer.total() }));
    }
    run.table("flops", &["config", "tokens", "train_forward_macs", "inference_macs"], &rows)?;
    let t = |i: usize| report[i]["train_forward_total"].as_u64().unwrap_or(0) as f64;
    let ratio = t(0) / t(1);
    run.json("flops", &json!({ "rows": report, "train_overhead_ratio": ratio }))?;
    println!("training-forward overhead: {ratio:.4}x; inference equal: {}", rows[0][3] == rows[1][3]);
    Ok(())
}

pub fn grad_check(sub: &str, common: &Common, max_coords: Option<usize>) -> Result<()> {
    reject_mode(sub, common)?;
    let seed = common.seed.unwrap_or(0);
    let run = Run::start(sub, common, &json!({ "max_coords": max_coords, "tolerance": 1e-5 }), seed)?;
    let reports = grad_suite(seed, max_coords)?;
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.name.clone(),
                r.coords_checked.to_string(),
                format!("{:.3e}", r.max_rel_err),
                if r.passed() { "ok" } else { "FAIL" }.to_string(),
            ]
        })
        .collect();
    run.table("grad_check", &["check", "coords", "max_rel_err", "status"], &rows)?;
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    println!("max relative error: {worst:.3e}");
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("gradient check failed: {}", failed.join(", "))))
    }
}

pub fn selfcheck(sub: &str, common: &Common) -> Result<()> {
    reject_mode(sub, common)?;
    let run = Run::start(sub, common, &json!({}), common.seed.unwrap_or(0))?;
    let scratch = run.dir.join("scratch");
    let outcomes = run_selfcheck(&scratch)?;
    std::fs::remove_dir_all(&scratch)?;
    let rows: Vec<Vec<String>> = outcomes
        .iter()
        .map(|c| {
            vec![
                c.name.to_string(),
                if c.passed { "ok".into() } else { format!("FAIL: {}", c.detail) },
                c.millis.to_string(),
            ]
        })
        .collect();
    run.table("selfcheck", &["check", "status", "ms"], &rows)?;
    let failed: Vec<&str> = outcomes.iter().filter(|c| !c.passed).map(|c| c.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("self-check failed: {}", failed.join(", "))))
    }
}
