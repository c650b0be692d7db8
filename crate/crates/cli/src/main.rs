//! `mte`: pretraining, supervised training, stripping and the analysis suite.

mod analysis;
mod run;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};
use mte_core::checkpoint::EvalWeights;
use mte_core::{Error, ErrorKind, Result};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "mte", version, about = "Multi-token enhancing experiments on a miniature vision transformer")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand. Values given here win over the
/// config file.
#[derive(Args, Debug, Clone, Default, Serialize)]
pub struct Common {
    /// TOML config file, or a `manifest.json` from an earlier run.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; nothing is written elsewhere. Defaults to `runs/<subcommand>`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for the parallel kernels.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Token selector: `global`, `patch-avg`, `aux:0..3`, `pool:0..5`, `all`, comma-separated.
    #[arg(long, global = true)]
    pub tokens: Option<String>,
    /// Comma-separated switches, e.g. `no-distill`, `freeze-aux`, `shared-heads`, `no-mask`, `baseline`.
    #[arg(long, global = true)]
    pub mode: Option<String>,
    /// Which copy of a pretraining checkpoint to evaluate or strip: `student` (default) or `teacher`.
    #[arg(long, global = true)]
    pub weights: Option<EvalWeights>,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct KnnArgs {
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long, default_value_t = 0.07)]
    pub temperature: f64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Self-supervised pretraining.
    Pretrain {
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from a pretraining checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Supervised training with auxiliary classifiers.
    TrainSupervised {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Remove every auxiliary component from a checkpoint.
    Strip {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Weighted k-NN accuracy of frozen token features.
    EvalKnn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        knn: KnnArgs,
        /// `encoder` or `post-head`.
        #[arg(long, default_value = "encoder")]
        space: String,
    },
    /// Linear probe accuracy of frozen token features.
    EvalLinear {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "encoder")]
        space: String,
        #[arg(long, default_value_t = 300)]
        probe_epochs: usize,
        #[arg(long, default_value_t = 0.05)]
        probe_lr: f64,
        #[arg(long, default_value_t = 0.0)]
        probe_weight_decay: f64,
    },
    /// Pairwise CKA between token representations on the test split.
    AnalyzeCka {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "encoder")]
        space: String,
    },
    /// NMI between prototype assignments and labels, per token and for the fused stream.
    AnalyzeNmi {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Mean NMI and k-NN over token combinations of every size.
    AnalyzeCombination {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `concat` or `average` for encoder features.
        #[arg(long, default_value = "concat")]
        combine: String,
        /// Evaluate this single subset instead of the full curve.
        #[arg(long)]
        subset: Option<String>,
        /// Skip the encoder k-NN part.
        #[arg(long)]
        no_knn: bool,
        #[command(flatten)]
        knn: KnnArgs,
    },
    /// Per-class k-NN accuracy of each token.
    AnalyzePerClass {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "encoder")]
        space: String,
        #[command(flatten)]
        knn: KnnArgs,
    },
    /// k-NN on the mean of the patches the global token attends to most.
    AnalyzePatchKnn {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Patch counts, comma-separated.
        #[arg(long, default_value = "1,2,4,8")]
        top: String,
        /// Use one attention head instead of the head average.
        #[arg(long)]
        head: Option<usize>,
        #[command(flatten)]
        knn: KnnArgs,
    },
    /// k-NN on concatenated features of several models.
    EvalEnsemble {
        /// Repeat for each member.
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[command(flatten)]
        knn: KnnArgs,
    },
    /// Adaptive pooling weight maps and kernels as CSV grids.
    ExportWeights {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Test-split image indices.
        #[arg(long, default_value = "0,1,2,3")]
        images: String,
        #[arg(long, default_value = "0..3")]
        channels: String,
    },
    /// Multiply-accumulate counts for training and inference.
    Flops,
    /// Finite-difference gradient suite in double precision.
    GradCheck {
        /// Probe at most this many coordinates per tensor in the model-level checks.
        #[arg(long)]
        max_coords: Option<usize>,
    },
    /// Quick structural checks across modules.
    Selfcheck,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Pretrain { .. } => "pretrain",
            Command::TrainSupervised { .. } => "train-supervised",
            Command::Strip { .. } => "strip",
            Command::EvalKnn { .. } => "eval-knn",
            Command::EvalLinear { .. } => "eval-linear",
            Command::AnalyzeCka { .. } => "analyze-cka",
            Command::AnalyzeNmi { .. } => "analyze-nmi",
            Command::AnalyzeCombination { .. } => "analyze-combination",
            Command::AnalyzePerClass { .. } => "analyze-per-class",
            Command::AnalyzePatchKnn { .. } => "analyze-patch-knn",
            Command::EvalEnsemble { .. } => "eval-ensemble",
            Command::ExportWeights { .. } => "export-weights",
            Command::Flops => "flops",
            Command::GradCheck { .. } => "grad-check",
            Command::Selfcheck => "selfcheck",
        }
    }
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Usage => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
    }
}

fn report(kind: &str, message: &str, code: u8) -> ExitCode {
    let line = serde_json::json!({ "error": kind, "message": message.replace('\n', " ") });
    eprintln!("{line}");
    ExitCode::from(code)
}

/// Flags accepted by `sub` (or the top level), for the unknown-flag message.
fn valid_flags(sub: Option<&str>) -> Vec<String> {
    let mut cmd = Cli::command();
    cmd.build();
    let target = sub.and_then(|s| cmd.find_subcommand(s)).unwrap_or(&cmd);
    let mut flags: Vec<String> = target.get_arguments().filter_map(|a| a.get_long()).map(|l| format!("--{l}")).collect();
    flags.sort();
    flags.dedup();
    flags
}

fn parse_error(e: clap::Error, argv: &[String]) -> ExitCode {
    use clap::error::{ContextKind, ErrorKind as K};
    match e.kind() {
        K::DisplayHelp | K::DisplayVersion | K::DisplayHelpOnMissingArgumentOrSubcommand => {
            let _ = e.print();
            ExitCode::SUCCESS
        }
        K::UnknownArgument => {
            let flag = e.get(ContextKind::InvalidArg).map(|v| v.to_string()).unwrap_or_default();
            let sub = argv.iter().skip(1).find(|a| !a.starts_with('-')).map(String::as_str);
            let msg = format!("unknown flag {flag}; valid flags: {}", valid_flags(sub).join(" "));
            report("usage", &msg, 2)
        }
        _ => {
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            report("usage", first, 2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let common = cli.common;
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(Error::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Usage(format!("thread pool: {e}")))?;
    }
    let name = cli.command.name();
    match cli.command {
        Command::Pretrain { epochs, resume } => train::pretrain(name, &common, epochs, resume),
        Command::TrainSupervised { epochs } => train::supervised(name, &common, epochs),
        Command::Strip { checkpoint } => train::strip(name, &common, &checkpoint),
        Command::Flops => train::flops(name, &common),
        Command::GradCheck { max_coords } => train::grad_check(name, &common, max_coords),
        Command::Selfcheck => train::selfcheck(name, &common),
        Command::EvalKnn { checkpoint, knn, space } => analysis::knn(name, &common, &checkpoint, &knn, &space),
        Command::EvalLinear {
            checkpoint,
            space,
            probe_epochs,
            probe_lr,
            probe_weight_decay,
        } => {
            let probe = mte_core::eval::ProbeConfig {
                epochs: probe_epochs,
                lr: probe_lr,
                weight_decay: probe_weight_decay,
            };
            analysis::linear(name, &common, &checkpoint, &space, probe)
        }
        Command::AnalyzeCka { checkpoint, space } => analysis::cka(name, &common, &checkpoint, &space),
        Command::AnalyzeNmi { checkpoint } => analysis::nmi(name, &common, &checkpoint),
        Command::AnalyzeCombination {
            checkpoint,
            combine,
            subset,
            no_knn,
            knn,
        } => analysis::combination(name, &common, &checkpoint, &combine, subset.as_deref(), !no_knn, &knn),
        Command::AnalyzePerClass { checkpoint, space, knn } => analysis::per_class(name, &common, &checkpoint, &space, &knn),
        Command::AnalyzePatchKnn { checkpoint, top, head, knn } => {
            analysis::patch_knn(name, &common, &checkpoint, &top, head, &knn)
        }
        Command::EvalEnsemble { checkpoint, knn } => analysis::ensemble(name, &common, &checkpoint, &knn),
        Command::ExportWeights {
            checkpoint,
            images,
            channels,
        } => analysis::export_weights(name, &common, &checkpoint, &images, &channels),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => return parse_error(e, &argv),
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.kind();
            report(&kind.to_string(), &e.to_string(), exit_code(kind))
        }
    }
}
