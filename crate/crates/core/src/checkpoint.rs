//! Self-describing checkpoint container.
//!
//! Layout: the 8-byte magic `MTECKPT1`, a little-endian `u32` header length,
//! a JSON header (configs, flags, tensor directory), then every tensor's raw
//! little-endian values in directory order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{strip_auxiliary, ModelConfig, StripReport};
use crate::params::ParamStore;
use crate::tensor::{DType, Element, Tensor};

const MAGIC: &[u8; 8] = b"MTECKPT1";

pub const TEACHER: &str = "teacher.";
pub const OPT_FIRST: &str = "opt.m.";
pub const OPT_SECOND: &str = "opt.v.";
pub const CENTER: &str = "center.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    /// Self-supervised training state: student, EMA teacher, optimizer, centers.
    Pretrain,
    /// Supervised training state: model, classifiers, optimizer.
    Supervised,
    /// Inference-only weights.
    Inference,
}

/// Which copy of a self-supervised checkpoint to evaluate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalWeights {
    /// The trained network. Default: over a few hundred steps the EMA
    /// teacher still averages in early, unsettled head states.
    #[default]
    Student,
    Teacher,
}

impl std::str::FromStr for EvalWeights {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "student" => Ok(EvalWeights::Student),
            "teacher" => Ok(EvalWeights::Teacher),
            other => Err(Error::Usage(format!("unknown weights `{other}` (student, teacher)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: CheckpointKind,
    model: ModelConfig,
    mask_auxiliary: bool,
    step: u64,
    epoch: usize,
    config: Option<serde_json::Value>,
    notes: Vec<String>,
    tensors: Vec<TensorMeta>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub model: ModelConfig,
    /// Optimizer updates applied.
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    /// Training configuration snapshot.
    pub config: Option<serde_json::Value>,
    /// Free-form annotations, such as strip warnings.
    pub notes: Vec<String>,
    pub tensors: ParamStore<f32>,
}

fn is_state(name: &str) -> bool {
    [TEACHER, OPT_FIRST, OPT_SECOND, CENTER].iter().any(|p| name.starts_with(p))
}

impl Checkpoint {
    pub fn new(kind: CheckpointKind, model: ModelConfig, tensors: ParamStore<f32>) -> Self {
        Checkpoint {
            kind,
            model,
            step: 0,
            epoch: 0,
            config: None,
            notes: Vec::new(),
            tensors,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            kind: self.kind,
            model: self.model.clone(),
            mask_auxiliary: self.model.mask_auxiliary,
            step: self.step,
            epoch: self.epoch,
            config: self.config.clone(),
            notes: self.notes.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| TensorMeta {
                    name: n.to_string(),
                    shape: t.shape().to_vec(),
                    dtype: DType::F32,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        let tmp = path.with_extension("partial");
        {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            f.write_all(MAGIC)?;
            f.write_all(&(json.len() as u32).to_le_bytes())?;
            f.write_all(&json)?;
            let mut buf = Vec::new();
            for (_, t) in self.tensors.iter() {
                buf.clear();
                t.data().iter().for_each(|v| v.write_le(&mut buf));
                f.write_all(&buf)?;
            }
            f.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(&format!("bad header: {e}")))?;
        let mut offset = 12 + hlen;
        let mut tensors = ParamStore::new();
        for meta in &header.tensors {
            let n: usize = meta.shape.iter().product();
            let size = n * meta.dtype.size();
            let raw = bytes
                .get(offset..offset + size)
                .ok_or_else(|| bad(&format!("truncated data for `{}`", meta.name)))?;
            offset += size;
            let data: Vec<f32> = match meta.dtype {
                DType::F32 => raw.chunks(4).map(f32::read_le).collect(),
                DType::F64 => raw.chunks(8).map(|c| f64::read_le(c) as f32).collect(),
            };
            tensors.insert(meta.name.clone(), Tensor::new(&meta.shape, data)?);
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        header.model.validate()?;
        let mut model = header.model;
        model.mask_auxiliary = header.mask_auxiliary;
        Ok(Checkpoint {
            kind: header.kind,
            model,
            step: header.step,
            epoch: header.epoch,
            config: header.config,
            notes: header.notes,
            tensors,
        })
    }

    /// Trainable model parameters (no teacher, optimizer or center state).
    pub fn student(&self) -> ParamStore<f32> {
        self.tensors.filter(|n| !is_state(n))
    }

    /// Tensors stored under `prefix`, with the prefix removed.
    pub fn with_prefix(&self, prefix: &str) -> ParamStore<f32> {
        let mut out = ParamStore::new();
        for (n, t) in self.tensors.iter() {
            if let Some(rest) = n.strip_prefix(prefix) {
                out.insert(rest, t.clone());
            }
        }
        out
    }

    /// Default evaluation weights, see [`EvalWeights`].
    pub fn eval_params(&self) -> ParamStore<f32> {
        self.params_for(EvalWeights::default())
    }

    /// The teacher copy is only available in self-supervised checkpoints;
    /// other kinds always yield the model itself.
    pub fn params_for(&self, weights: EvalWeights) -> ParamStore<f32> {
        match (self.kind, weights) {
            (CheckpointKind::Pretrain, EvalWeights::Teacher) => self.with_prefix(TEACHER),
            _ => self.student(),
        }
    }

    pub fn eval_params_as<T: Element>(&self) -> ParamStore<T> {
        self.eval_params().cast()
    }

    pub fn is_stripped(&self) -> bool {
        self.kind == CheckpointKind::Inference && self.model.num_auxiliary() == 0
    }

    /// Inference checkpoint without any auxiliary component, optimizer
    /// state or teacher copy.
    pub fn strip(&self) -> (Checkpoint, StripReport) {
        self.strip_weights(EvalWeights::default())
    }

    pub fn strip_weights(&self, weights: EvalWeights) -> (Checkpoint, StripReport) {
        let params = self.params_for(weights);
        let (kept, cfg, report) = strip_auxiliary(&params, &self.model);
        let mut notes = self.notes.clone();
        if let Some(w) = report.warning() {
            notes.push(format!("warning: {w}"));
        }
        let out = Checkpoint {
            kind: CheckpointKind::Inference,
            model: cfg,
            step: self.step,
            epoch: self.epoch,
            config: self.config.clone(),
            notes,
            tensors: kept,
        };
        (out, report)
    }
}
