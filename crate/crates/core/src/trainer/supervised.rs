use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::augment::{eval_view, make_views, AugmentConfig};
use super::config::DataConfig;
use super::optim::{clip_grad_norm, AdamW};
use super::pretrain::MetricRecord;
use super::schedule::warmup_cosine;
use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{forward, init_params, ModelConfig};
use crate::objectives::{supervised_loss, ClassifierBank};
use crate::params::{derive_seed, ParamStore};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupervisedConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub final_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub clip_grad: f64,
    pub seed: u64,
    pub shared_classifiers: bool,
    /// Train on one random augmented view per image instead of the plain resize.
    pub augment_inputs: bool,
    pub checkpoint_every: usize,
    pub record_wall_time: bool,
    pub model: ModelConfig,
    pub augment: AugmentConfig,
    pub data: DataConfig,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        SupervisedConfig {
            epochs: 30,
            batch_size: 50,
            lr: 1e-3,
            final_lr: 1e-5,
            warmup_epochs: 3,
            weight_decay: 0.05,
            clip_grad: 3.0,
            seed: 0,
            shared_classifiers: false,
            augment_inputs: true,
            checkpoint_every: 0,
            record_wall_time: true,
            model: ModelConfig::default(),
            augment: AugmentConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl SupervisedConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: SupervisedConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.augment.out_size != self.model.image_size {
            return Err(Error::Config(format!(
                "augment.out_size {} must equal model.image_size {}",
                self.augment.out_size, self.model.image_size
            )));
        }
        Ok(())
    }

    pub fn bank(&self, classes: usize) -> ClassifierBank {
        ClassifierBank {
            dim: self.model.embed_dim,
            classes,
            num_aux: self.model.num_auxiliary(),
            shared: self.shared_classifiers,
        }
    }
}

/// Standardized `[n, S, S, C]` inputs for `idx`, as used at evaluation time.
pub fn eval_batch(data: &Dataset, idx: &[usize], size: usize) -> Result<Tensor<f32>> {
    let dims = (data.height, data.width, data.channels);
    let mut out = Vec::with_capacity(idx.len() * size * size * data.channels);
    let views: Vec<Vec<f32>> = idx.par_iter().map(|&i| eval_view(data.image(i), dims, size)).collect();
    views.iter().for_each(|v| out.extend_from_slice(v));
    Tensor::new(&[idx.len(), size, size, data.channels], out)
}

pub struct SupervisedTrainer {
    pub cfg: SupervisedConfig,
    pub bank: ClassifierBank,
    pub params: ParamStore<f32>,
    pub opt: AdamW<f32>,
    pub epoch: usize,
    pub step: u64,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupervisedStep {
    pub loss: f64,
    pub ce_aux: f64,
    pub ce_distill: f64,
    pub grad_norm: f64,
    pub lr: f64,
    /// Global-token predictions for the batch.
    pub predictions: Vec<usize>,
}

impl SupervisedTrainer {
    pub fn new(cfg: SupervisedConfig, train_len: usize, classes: usize) -> Result<Self> {
        cfg.validate()?;
        if train_len == 0 {
            return Err(Error::Data("empty training set".into()));
        }
        let bank = cfg.bank(classes);
        let mut params = init_params::<f32>(&cfg.model, cfg.seed)?;
        bank.init(&mut params, cfg.seed);
        let batch_size = cfg.batch_size.min(train_len);
        Ok(SupervisedTrainer {
            opt: AdamW::new(cfg.weight_decay),
            steps_per_epoch: train_len / batch_size,
            batch_size,
            bank,
            params,
            epoch: 0,
            step: 0,
            cfg,
        })
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let total = self.cfg.epochs * self.steps_per_epoch;
        let warm = self.cfg.warmup_epochs * self.steps_per_epoch;
        warmup_cosine(step as usize, total, warm, self.cfg.lr, self.cfg.final_lr)
    }

    pub fn epoch_batches(&self, n: usize, epoch: usize) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &[epoch as u64, 0x5eed]));
        idx.shuffle(&mut rng);
        idx.chunks_exact(self.batch_size).map(<[usize]>::to_vec).collect()
    }

    pub fn make_batch(&self, data: &Dataset, idx: &[usize], epoch: usize) -> Result<Tensor<f32>> {
        let s = self.cfg.model.image_size;
        if !self.cfg.augment_inputs {
            return eval_batch(data, idx, s);
        }
        let dims = (data.height, data.width, data.channels);
        let views: Vec<Vec<f32>> = idx
            .par_iter()
            .map(|&i| make_views(data.image(i), dims, &self.cfg.augment, self.cfg.seed, epoch, data.ids[i]).map(|v| v.0))
            .collect::<Result<_>>()?;
        let mut out = Vec::with_capacity(idx.len() * s * s * data.channels);
        views.iter().for_each(|v| out.extend_from_slice(v));
        Tensor::new(&[idx.len(), s, s, data.channels], out)
    }

    pub fn train_step(&mut self, images: &Tensor<f32>, labels: &[usize]) -> Result<SupervisedStep> {
        let lr = self.lr_at(self.step);
        let tape = Tape::new();
        let bound = self.params.bind(&tape, |_| true);
        let bundle = forward(&tape, &bound, &self.cfg.model, images)?;
        let out = supervised_loss(&bound, &self.bank, bundle.global, bundle.enhanced, bundle.pooled, labels)?;
        let loss = out.loss.value().item() as f64;
        let ce_aux = out.ce_aux.value().item() as f64;
        let ce_distill = out.ce_distill.value().item() as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at step {}: L={loss} CE_aux={ce_aux} CE_distill={ce_distill} lr={lr}",
                self.step
            )));
        }
        let predictions = argmax_rows(&out.global_probs.value());
        let mut grads = bound.grads(&tape.backward(out.loss)?);
        drop(bound);
        drop(tape);
        let grad_norm = clip_grad_norm(&mut grads, self.cfg.clip_grad);
        self.opt.step(&mut self.params, &grads, lr)?;
        self.step += 1;
        Ok(SupervisedStep {
            loss,
            ce_aux,
            ce_distill,
            grad_norm,
            lr,
            predictions,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(CheckpointKind::Supervised, self.cfg.model.clone(), self.params.clone());
        ck.step = self.step;
        ck.epoch = self.epoch;
        ck.config = Some(serde_json::to_value(&self.cfg).expect("config serializes"));
        ck
    }
}

pub fn argmax_rows(t: &Tensor<f32>) -> Vec<usize> {
    let c = t.shape()[1];
    t.data()
        .chunks(c)
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Global-token class predictions of a checkpoint-style parameter set.
pub fn predict(
    params: &ParamStore<f32>,
    model: &ModelConfig,
    data: &Dataset,
    batch: usize,
) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let x = eval_batch(data, chunk, model.image_size)?;
        let tape = Tape::no_grad();
        let bound = params.bind(&tape, |_| false);
        let bundle = forward(&tape, &bound, model, &x)?;
        let logits = bundle.global.linear(&bound.get("cls.global.weight")?, None)?;
        preds.extend(argmax_rows(&logits.value()));
    }
    Ok(preds)
}

pub struct SupervisedOutcome {
    pub trainer: SupervisedTrainer,
    pub records: Vec<MetricRecord>,
    /// Train-batch accuracy of the global classifier per epoch.
    pub epoch_accuracy: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
}

/// Supervised training. With `out`, writes `metrics.jsonl`, `last.mte` and
/// the inference-ready `stripped.mte`.
pub fn train_supervised(data: &Dataset, cfg: SupervisedConfig, out: Option<&Path>) -> Result<SupervisedOutcome> {
    let mut t = SupervisedTrainer::new(cfg, data.len(), data.classes)?;
    let start = Instant::now();
    let mut log = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(std::io::BufWriter::new(std::fs::File::create(dir.join("metrics.jsonl"))?))
        }
        None => None,
    };
    let mut records = Vec::new();
    let mut epoch_accuracy = Vec::new();
    let mut checkpoints = Vec::new();
    while t.epoch < t.cfg.epochs {
        let epoch = t.epoch;
        let (mut hit, mut seen) = (0usize, 0usize);
        for idx in t.epoch_batches(data.len(), epoch) {
            let x = t.make_batch(data, &idx, epoch)?;
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let step = t.step;
            let m = t.train_step(&x, &labels)?;
            hit += m.predictions.iter().zip(&labels).filter(|(p, y)| p == y).count();
            seen += labels.len();
            let rec = MetricRecord {
                step,
                epoch,
                loss: m.loss,
                loss_fused: m.ce_aux,
                loss_distill: m.ce_distill,
                lr: m.lr,
                ema_m: 0.0,
                wall_ms: if t.cfg.record_wall_time {
                    start.elapsed().as_millis() as u64
                } else {
                    0
                },
            };
            if let Some(f) = log.as_mut() {
                serde_json::to_writer(&mut *f, &rec).map_err(|e| Error::Format(e.to_string()))?;
                f.write_all(b"\n")?;
            }
            records.push(rec);
        }
        epoch_accuracy.push(hit as f64 / seen.max(1) as f64);
        t.epoch += 1;
        if let (Some(dir), true) = (out, t.cfg.checkpoint_every > 0 && t.epoch % t.cfg.checkpoint_every.max(1) == 0) {
            let p = dir.join(format!("epoch_{:04}.mte", t.epoch));
            t.checkpoint().save(&p)?;
            checkpoints.push(p);
        }
        log::info!("epoch {} train acc {:.3}", t.epoch, epoch_accuracy.last().unwrap());
    }
    if let Some(f) = log.as_mut() {
        f.flush()?;
    }
    if let Some(dir) = out {
        let ck = t.checkpoint();
        let last = dir.join("last.mte");
        ck.save(&last)?;
        let (stripped, report) = ck.strip();
        if let Some(w) = report.warning() {
            log::warn!("{w}");
        }
        let sp = dir.join("stripped.mte");
        stripped.save(&sp)?;
        checkpoints.push(last);
        checkpoints.push(sp);
    }
    Ok(SupervisedOutcome {
        trainer: t,
        records,
        epoch_accuracy,
        checkpoints,
    })
}
