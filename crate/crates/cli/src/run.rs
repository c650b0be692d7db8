use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use mte_core::checkpoint::Checkpoint;
use mte_core::data::export::write_table;
use mte_core::objectives::BaseLossKind;
use mte_core::trainer::{DataConfig, SupervisedConfig, TrainConfig};
use mte_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::Common;

/// Written to the output directory before any computation.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: Value,
    pub seed: u64,
    pub version: String,
    pub out: PathBuf,
    pub threads: Option<usize>,
    pub argv: Vec<String>,
}

pub struct Run {
    pub dir: PathBuf,
}

impl Run {
    pub fn start(sub: &str, common: &Common, config: &impl Serialize, seed: u64) -> Result<Run> {
        let dir = common.out.clone().unwrap_or_else(|| Path::new("runs").join(sub));
        std::fs::create_dir_all(&dir)?;
        let manifest = RunManifest {
            subcommand: sub.to_string(),
            config: serde_json::to_value(config).map_err(|e| Error::Format(e.to_string()))?,
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            out: dir.clone(),
            threads: common.threads,
            argv: std::env::args().collect(),
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(dir.join("manifest.json"), text + "\n")?;
        Ok(Run { dir })
    }

    /// Prints an aligned table and writes the same rows to `<name>.csv`.
    pub fn table(&self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        print!("{}", render_table(header, rows));
        write_table(&self.dir.join(format!("{name}.csv")), header, rows)
    }

    pub fn jsonl<S: Serialize>(&self, name: &str, items: &[S]) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(self.dir.join(format!("{name}.jsonl")))?);
        for it in items {
            let line = serde_json::to_string(it).map_err(|e| Error::Format(e.to_string()))?;
            writeln!(f, "{line}")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn json(&self, name: &str, value: &impl Serialize) -> Result<()> {
        let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(self.dir.join(format!("{name}.json")), text + "\n")?;
        Ok(())
    }
}

pub fn render_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut width: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in width.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<&str>| {
        let parts: Vec<String> = cells.iter().zip(&width).map(|(c, w)| format!("{c:<w$}")).collect();
        parts.join("  ").trim_end().to_string()
    };
    let mut s = String::new();
    let _ = writeln!(s, "{}", line(header.to_vec()));
    let _ = writeln!(s, "{}", line(width.iter().map(|&w| &"------------------------------------------------"[..w.min(48)]).collect()));
    for r in rows {
        let _ = writeln!(s, "{}", line(r.iter().map(String::as_str).collect()));
    }
    s
}

pub fn fmt_pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

pub fn fmt_f(x: f64) -> String {
    format!("{x:.4}")
}

/// Reads `--config` as a JSON value: TOML files are converted, and a run
/// manifest yields the config it recorded.
pub fn config_value(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path)?;
    let is_json = path.extension().is_some_and(|e| e == "json");
    let v: Value = if is_json {
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
    } else {
        let t: toml::Value = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::to_value(t).map_err(|e| Error::Config(e.to_string()))?
    };
    Ok(match v {
        Value::Object(ref o) if o.contains_key("subcommand") && o.contains_key("config") => o["config"].clone(),
        other => other,
    })
}

fn from_value<T: serde::de::DeserializeOwned>(v: Value, what: &str) -> Result<T> {
    serde_json::from_value(v).map_err(|e| Error::Config(format!("{what}: {e}")))
}

pub fn train_config(common: &Common) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(p) => from_value(config_value(p)?, "pretraining config")?,
        None => TrainConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(m) = &common.mode {
        for item in switches(m) {
            match item {
                "distill" => {
                    cfg.no_distill = false;
                    cfg.freeze_auxiliary = false;
                }
                "no-distill" => cfg.no_distill = true,
                "freeze-aux" => cfg.freeze_auxiliary = true,
                "shared-heads" => cfg.shared_heads = true,
                "no-mask" => cfg.model.mask_auxiliary = false,
                "baseline" => cfg.model = cfg.model.baseline(),
                "clustering" => cfg.loss.kind = BaseLossKind::Clustering,
                "cosine" => cfg.loss.kind = BaseLossKind::Cosine,
                "infonce" => cfg.loss.kind = BaseLossKind::Infonce,
                other => {
                    return Err(Error::Usage(format!(
                        "unknown mode `{other}` (distill, no-distill, freeze-aux, shared-heads, no-mask, baseline, clustering, cosine, infonce)"
                    )))
                }
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn supervised_config(common: &Common) -> Result<SupervisedConfig> {
    let mut cfg = match &common.config {
        Some(p) => from_value(config_value(p)?, "supervised config")?,
        None => SupervisedConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(m) = &common.mode {
        for item in switches(m) {
            match item {
                "shared-heads" => cfg.shared_classifiers = true,
                "no-mask" => cfg.model.mask_auxiliary = false,
                "baseline" => cfg.model = cfg.model.baseline(),
                "no-augment" => cfg.augment_inputs = false,
                other => {
                    return Err(Error::Usage(format!(
                        "unknown mode `{other}` (shared-heads, no-mask, baseline, no-augment)"
                    )))
                }
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn switches(s: &str) -> impl Iterator<Item = &str> {
    s.split(',').map(str::trim).filter(|x| !x.is_empty())
}

pub fn reject_mode(sub: &str, common: &Common) -> Result<()> {
    match &common.mode {
        Some(_) => Err(Error::Usage(format!("--mode is not used by {sub}"))),
        None => Ok(()),
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).map_err(|e| match e {
        Error::Io(io) => Error::Data(format!("{}: {io}", path.display())),
        other => other,
    })
}

/// Data for evaluation: the `[data]` table of `--config` when given,
/// otherwise the one recorded in the checkpoint.
pub fn eval_data_config(common: &Common, ck: &Checkpoint) -> Result<DataConfig> {
    let v = match &common.config {
        Some(p) => config_value(p)?,
        None => ck
            .config
            .clone()
            .ok_or_else(|| Error::Usage("checkpoint records no data config; pass --config with a [data] table".into()))?,
    };
    match v.get("data") {
        Some(d) => from_value(d.clone(), "data config"),
        None => Ok(DataConfig::default()),
    }
}

/// Parses `1,2,5..7` into indices (inclusive ranges).
pub fn parse_indices(s: &str) -> Result<Vec<usize>> {
    let bad = || Error::Usage(format!("invalid index list `{s}`"));
    let mut out = Vec::new();
    for item in switches(s) {
        match item.split_once("..") {
            Some((a, b)) => {
                let (a, b): (usize, usize) = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
                if a > b {
                    return Err(bad());
                }
                out.extend(a..=b);
            }
            None => out.push(item.parse().map_err(|_| bad())?),
        }
    }
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}
