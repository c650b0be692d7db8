use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::augment::make_views;
use super::config::TrainConfig;
use super::optim::{clip_grad_norm, AdamW};
use super::schedule::{cosine_schedule, warmup_cosine};
use crate::checkpoint::{Checkpoint, CheckpointKind, CENTER, OPT_FIRST, OPT_SECOND, TEACHER};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{forward, init_params, is_auxiliary_param};
use crate::objectives::{
    center_update, ema_update_selected, normalize_rows, pretrain_loss, Centers, HeadBank, LossMode, StreamOutputs,
    TeacherState,
};
use crate::params::{derive_seed, Bound, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub epoch: usize,
    #[serde(rename = "L")]
    pub loss: f64,
    #[serde(rename = "L_c")]
    pub loss_fused: f64,
    #[serde(rename = "L_d")]
    pub loss_distill: f64,
    pub lr: f64,
    pub ema_m: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub loss: f64,
    pub loss_fused: f64,
    pub loss_distill: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub ema_m: f64,
}

pub struct Pretrainer {
    pub cfg: TrainConfig,
    pub bank: HeadBank,
    pub student: ParamStore<f32>,
    pub teacher: TeacherState<f32>,
    pub opt: AdamW<f32>,
    /// Completed epochs.
    pub epoch: usize,
    /// Optimizer updates applied.
    pub step: u64,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
}

impl Pretrainer {
    pub fn new(cfg: TrainConfig, train_len: usize) -> Result<Self> {
        cfg.validate()?;
        if train_len == 0 {
            return Err(Error::Data("empty training set".into()));
        }
        let bank = HeadBank::new(
            cfg.head.clone(),
            cfg.model.embed_dim,
            cfg.model.num_auxiliary(),
            cfg.shared_heads,
            cfg.loss.kind,
        );
        let mut student = init_params::<f32>(&cfg.model, cfg.seed)?;
        bank.init(&mut student, cfg.seed);
        let teacher = TeacherState::from_student(&student, bank.out_dim());
        let batch_size = cfg.batch_size.min(train_len);
        Ok(Pretrainer {
            opt: AdamW::new(cfg.weight_decay),
            steps_per_epoch: train_len / batch_size,
            batch_size,
            bank,
            student,
            teacher,
            epoch: 0,
            step: 0,
            cfg,
        })
    }

    /// Restores the full training state written by [`Pretrainer::checkpoint`].
    pub fn from_checkpoint(ck: &Checkpoint, train_len: usize) -> Result<Self> {
        if ck.kind != CheckpointKind::Pretrain {
            return Err(Error::Usage("resume needs a pretraining checkpoint".into()));
        }
        let value = ck
            .config
            .clone()
            .ok_or_else(|| Error::Format("checkpoint lacks its training config".into()))?;
        let cfg: TrainConfig = serde_json::from_value(value).map_err(|e| Error::Format(e.to_string()))?;
        let mut t = Pretrainer::new(cfg, train_len)?;
        let student = ck.student();
        student.check_isomorphic(&t.student)?;
        t.student = student;
        t.teacher.params = ck.with_prefix(TEACHER);
        t.teacher.params.check_isomorphic(&t.student)?;
        let centers = ck.with_prefix(CENTER);
        t.teacher.centers = Centers {
            fused: centers.get("fused")?.clone(),
            global: centers.get("global")?.clone(),
        };
        t.opt.steps = ck.step;
        t.opt.first = ck.with_prefix(OPT_FIRST).iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
        t.opt.second = ck.with_prefix(OPT_SECOND).iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
        t.step = ck.step;
        t.epoch = ck.epoch;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors = self.student.clone();
        for (n, v) in self.teacher.params.iter() {
            tensors.insert(format!("{TEACHER}{n}"), v.clone());
        }
        for (n, v) in &self.opt.first {
            tensors.insert(format!("{OPT_FIRST}{n}"), v.clone());
        }
        for (n, v) in &self.opt.second {
            tensors.insert(format!("{OPT_SECOND}{n}"), v.clone());
        }
        tensors.insert(format!("{CENTER}fused"), self.teacher.centers.fused.clone());
        tensors.insert(format!("{CENTER}global"), self.teacher.centers.global.clone());
        let mut ck = Checkpoint::new(CheckpointKind::Pretrain, self.cfg.model.clone(), tensors);
        ck.step = self.step;
        ck.epoch = self.epoch;
        ck.config = Some(serde_json::to_value(&self.cfg).expect("config serializes"));
        ck
    }

    pub fn total_steps(&self) -> usize {
        self.cfg.epochs * self.steps_per_epoch
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let warm = self.cfg.warmup_epochs * self.steps_per_epoch;
        warmup_cosine(step as usize, self.total_steps(), warm, self.cfg.lr, self.cfg.final_lr)
    }

    pub fn ema_at(&self, step: u64) -> f64 {
        cosine_schedule(step as usize, self.total_steps(), self.cfg.ema_start, self.cfg.ema_end)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        !(self.cfg.freeze_auxiliary && is_auxiliary_param(name))
    }

    /// Index batches of one epoch, shuffled by `(seed, epoch)`; the remainder is dropped.
    pub fn epoch_batches(&self, n: usize, epoch: usize) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &[epoch as u64, 0x5eed]));
        idx.shuffle(&mut rng);
        idx.chunks_exact(self.batch_size).map(<[usize]>::to_vec).collect()
    }

    /// `[2B, S, S, C]` batch: the first view of every image, then the second.
    pub fn make_batch(&self, data: &Dataset, idx: &[usize], epoch: usize) -> Result<Tensor<f32>> {
        let dims = (data.height, data.width, data.channels);
        let views: Vec<(Vec<f32>, Vec<f32>)> = idx
            .par_iter()
            .map(|&i| make_views(data.image(i), dims, &self.cfg.augment, self.cfg.seed, epoch, data.ids[i]))
            .collect::<Result<_>>()?;
        let s = self.cfg.augment.out_size;
        let mut out = Vec::with_capacity(2 * idx.len() * s * s * data.channels);
        for v in &views {
            out.extend_from_slice(&v.0);
        }
        for v in &views {
            out.extend_from_slice(&v.1);
        }
        Tensor::new(&[2 * idx.len(), s, s, data.channels], out)
    }

    fn heads<'t>(
        &self,
        tape: &'t Tape<f32>,
        bound: &Bound<'t, f32>,
        views: &Tensor<f32>,
        with_fused: bool,
    ) -> Result<(Var<'t, f32>, Option<Var<'t, f32>>)> {
        let bundle = forward(tape, bound, &self.cfg.model, views)?;
        let global = self.bank.project_global(bound, bundle.global)?;
        let fused = if with_fused {
            Some(self.bank.project_fuse(bound, bundle.enhanced, bundle.pooled)?.0)
        } else {
            None
        };
        Ok((global, fused))
    }

    /// One optimization step on a `[2B, S, S, C]` two-view batch.
    pub fn train_step(&mut self, views: &Tensor<f32>) -> Result<StepMetrics> {
        let lr = self.lr_at(self.step);
        let ema_m = self.ema_at(self.step);
        let mode = self.cfg.loss_mode();
        let with_fused = mode != LossMode::GlobalOnly;
        let b = views.shape()[0] / 2;

        let (t_global, t_fused) = {
            let tape = Tape::no_grad();
            let bound = self.teacher.params.bind(&tape, |_| false);
            let (g, f) = self.heads(&tape, &bound, views, with_fused)?;
            ((*g.value()).clone(), f.map(|f| (*f.value()).clone()))
        };

        let tape = Tape::new();
        let bound = self.student.bind(&tape, |n| self.is_trainable(n));
        let (sg, sf) = self.heads(&tape, &bound, views, with_fused)?;
        let tg = tape.constant(t_global.clone());
        let tf = t_fused.clone().map(|t| tape.constant(t));
        let teacher = [view_stream(tg, tf, 0, b)?, view_stream(tg, tf, 1, b)?];
        let student = [view_stream(sg, sf, 0, b)?, view_stream(sg, sf, 1, b)?];
        let parts = pretrain_loss(&teacher, &student, &self.cfg.loss, &self.teacher.centers, mode)?;
        let loss = parts.total.value().item() as f64;
        let loss_fused = parts.fused.value().item() as f64;
        let loss_distill = parts.distill.value().item() as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at step {}: L={loss} L_c={loss_fused} L_d={loss_distill} lr={lr}",
                self.step
            )));
        }
        let mut grads = bound.grads(&tape.backward(parts.total)?);
        drop(bound);
        drop(tape);

        let grad_norm = clip_grad_norm(&mut grads, self.cfg.clip_grad);
        self.opt.step(&mut self.student, &grads, lr)?;
        for name in grads.keys().filter(|n| n.ends_with(".proto.weight")) {
            normalize_rows(self.student.get_mut(name)?);
        }
        ema_update_selected(&mut self.teacher.params, &self.student, ema_m, |n| grads.contains_key(n))?;
        let cm = self.cfg.center_momentum;
        self.teacher.centers.global = center_update(&self.teacher.centers.global, &t_global, cm)?;
        if let Some(f) = &t_fused {
            self.teacher.centers.fused = center_update(&self.teacher.centers.fused, f, cm)?;
        }
        self.step += 1;
        Ok(StepMetrics {
            loss,
            loss_fused,
            loss_distill,
            grad_norm,
            lr,
            ema_m,
        })
    }
}

/// Rows of view `i` from outputs stacked as `[view 0; view 1]`.
fn view_stream<'t>(g: Var<'t, f32>, f: Option<Var<'t, f32>>, i: usize, b: usize) -> Result<StreamOutputs<'t, f32>> {
    Ok(StreamOutputs {
        fused: f.map(|v| v.narrow(0, i * b, b)).transpose()?,
        global: g.narrow(0, i * b, b)?,
    })
}

pub struct PretrainOutcome {
    pub trainer: Pretrainer,
    pub records: Vec<MetricRecord>,
    pub checkpoints: Vec<PathBuf>,
}

/// Called after every completed epoch.
pub type EpochHook<'a> = dyn FnMut(&Pretrainer) -> Result<()> + 'a;

fn checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:04}.mte")
}

/// Runs (or resumes) pretraining up to `cfg.epochs`. With `out`, writes
/// `metrics.jsonl`, periodic `epoch_NNNN.mte` checkpoints and `last.mte`.
pub fn pretrain(
    data: &Dataset,
    mut trainer: Pretrainer,
    out: Option<&Path>,
    hook: &mut EpochHook<'_>,
) -> Result<PretrainOutcome> {
    let start = Instant::now();
    let mut records = Vec::new();
    let mut checkpoints = Vec::new();
    let mut log = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(open_log(&dir.join("metrics.jsonl"), trainer.step)?)
        }
        None => None,
    };
    while trainer.epoch < trainer.cfg.epochs {
        let epoch = trainer.epoch;
        for idx in trainer.epoch_batches(data.len(), epoch) {
            let batch = trainer.make_batch(data, &idx, epoch)?;
            let step = trainer.step;
            let m = trainer.train_step(&batch)?;
            let rec = MetricRecord {
                step,
                epoch,
                loss: m.loss,
                loss_fused: m.loss_fused,
                loss_distill: m.loss_distill,
                lr: m.lr,
                ema_m: m.ema_m,
                wall_ms: if trainer.cfg.record_wall_time {
                    start.elapsed().as_millis() as u64
                } else {
                    0
                },
            };
            if let Some(f) = log.as_mut() {
                serde_json::to_writer(&mut *f, &rec).map_err(|e| Error::Format(e.to_string()))?;
                f.write_all(b"\n")?;
            }
            log::debug!("step {step} L={:.4} L_c={:.4} L_d={:.4}", m.loss, m.loss_fused, m.loss_distill);
            records.push(rec);
        }
        trainer.epoch += 1;
        if let Some(f) = log.as_mut() {
            f.flush()?;
        }
        if let Some(dir) = out {
            let every = trainer.cfg.checkpoint_every;
            let last = trainer.epoch == trainer.cfg.epochs;
            if last || (every > 0 && trainer.epoch % every == 0) {
                let path = dir.join(checkpoint_name(trainer.epoch));
                trainer.checkpoint().save(&path)?;
                checkpoints.push(path);
            }
        }
        log::info!("epoch {} done", trainer.epoch);
        hook(&trainer)?;
    }
    if let Some(dir) = out {
        trainer.checkpoint().save(&dir.join("last.mte"))?;
    }
    Ok(PretrainOutcome {
        trainer,
        records,
        checkpoints,
    })
}

/// Opens the metric log for appending, dropping records at or beyond `step`
/// left over from an interrupted run.
fn open_log(path: &Path, step: u64) -> Result<std::io::BufWriter<std::fs::File>> {
    let mut kept = Vec::new();
    if step > 0 && path.exists() {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        for line in f.lines() {
            let line = line?;
            let rec: MetricRecord = serde_json::from_str(&line).map_err(|e| Error::Format(e.to_string()))?;
            if rec.step < step {
                kept.push(line);
            }
        }
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for l in kept {
        writeln!(f, "{l}")?;
    }
    Ok(f)
}

pub fn read_metric_log(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(e.to_string())))
        .collect()
}
