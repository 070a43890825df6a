//! Command-line front end: attention analysis, policy search, toy training,
//! gradient checking, parameter accounting, decoding and benchmarking.

pub mod bench;
pub mod commands;
pub mod error;
pub mod files;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use san_core::divergence::AttnKind;
use san_core::policy::BackwardFault;

use crate::bench::BenchSettings;
use crate::error::{CliError, CliResult, EXIT_OK, EXIT_USAGE};

#[derive(Debug, Parser)]
#[command(
    name = "san-attn",
    version,
    about = "Shared attention networks: analysis, policy search, training and benchmarks"
)]
pub struct Cli {
    /// Random seed; overrides SAN_SEED.
    #[arg(long, global = true, env = "SAN_SEED")]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    #[value(name = "self")]
    SelfAttn,
    Encdec,
    Enc,
}

impl From<KindArg> for AttnKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::SelfAttn => AttnKind::SelfAttn,
            KindArg::Encdec => AttnKind::EncDec,
            KindArg::Enc => AttnKind::Enc,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FaultArg {
    LayerNormGain,
    Softmax,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Layer-by-layer divergence matrix of attention weights over a corpus.
    Analyze(AnalyzeArgs),
    /// Sharing policy from divergence matrices or from a model and corpus.
    Policy(PolicyCmd),
    /// Decode throughput of sharing policies against the unshared model.
    Bench(BenchCmd),
    /// Joint training and policy learning on a synthetic task.
    TrainToy(TrainToyArgs),
    /// Finite-difference check of the training gradients.
    Gradcheck(GradcheckArgs),
    /// Parameter counts and savings of a policy.
    Params(ParamsArgs),
    /// Greedy or beam decoding of a corpus.
    Decode(DecodeCmd),
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output prefix; writes PREFIX.csv and PREFIX.json.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "self")]
    pub kind: KindArg,
    /// Decode limit for corpus lines without a target.
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PolicyCmd {
    /// Decoder self-attention divergence matrix (CSV, or JSON by extension).
    #[arg(long)]
    pub js_self: Option<PathBuf>,
    /// Enc-dec attention divergence matrix (CSV, or JSON by extension).
    #[arg(long)]
    pub js_encdec: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 0.35)]
    pub theta_self: f64,
    #[arg(long, default_value_t = 0.45)]
    pub theta_encdec: f64,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchCmd {
    /// Weight file fixing the configuration; random base-sized weights otherwise.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Policy files to compare; the unshared baseline is always included.
    #[arg(long = "policy")]
    pub policies: Vec<PathBuf>,
    /// Beam sizes, comma separated; 1 is greedy.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub beam: Vec<usize>,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 32)]
    pub src_len: usize,
    /// Generated tokens per sentence.
    #[arg(long, default_value_t = 64)]
    pub max_len: usize,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainToyArgs {
    /// JSON settings; defaults to the built-in copy task.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Deliberately wrong backward rule, to see the check fail.
    #[arg(long, value_enum)]
    pub fault: Option<FaultArg>,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    /// Take the configuration and policy from a weight file.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Model configuration JSON; base configuration when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub policy: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DecodeCmd {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub beam: usize,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// JSONL output; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn execute(cli: Cli) -> CliResult<i32> {
    let seed = cli.seed;
    match cli.command {
        Command::Analyze(a) => {
            commands::analyze(&a.model, &a.corpus, &a.out, a.kind.into(), a.max_len)?;
        }
        Command::Policy(p) => {
            commands::policy(&commands::PolicyArgs {
                js_self: p.js_self.as_deref(),
                js_encdec: p.js_encdec.as_deref(),
                model: p.model.as_deref(),
                corpus: p.corpus.as_deref(),
                theta_self: p.theta_self,
                theta_encdec: p.theta_encdec,
                max_len: p.max_len,
                out: p.out.as_deref(),
            })?;
        }
        Command::Bench(b) => {
            let settings = BenchSettings {
                beams: b.beam,
                batch: b.batch,
                src_len: b.src_len,
                tgt_len: b.max_len,
                workers: b.workers,
                repeats: b.repeats,
                seed: seed.unwrap_or(BenchSettings::default().seed),
            };
            commands::bench(&commands::BenchArgs {
                model: b.model.as_deref(),
                policies: &b.policies,
                settings,
                out: b.out.as_deref(),
            })?;
        }
        Command::TrainToy(t) => {
            commands::train_toy(t.config.as_deref(), seed, &t.out)?;
        }
        Command::Gradcheck(g) => {
            let fault = g.fault.map(|f| match f {
                FaultArg::LayerNormGain => BackwardFault::LayerNormGain,
                FaultArg::Softmax => BackwardFault::Softmax,
            });
            let report = commands::run_gradcheck(g.config.as_deref(), seed, fault)?;
            if !report.passed {
                return Err(CliError::Verify(format!(
                    "gradient check failed: {} error {:.3e}",
                    report.worst_param, report.max_rel_error
                )));
            }
        }
        Command::Params(p) => {
            commands::params(
                p.model.as_deref(),
                p.config.as_deref(),
                p.policy.as_deref(),
                p.out.as_deref(),
            )?;
        }
        Command::Decode(d) => {
            commands::decode(&commands::DecodeArgs {
                model: &d.model,
                corpus: &d.corpus,
                beam: d.beam,
                batch: d.batch,
                workers: d.workers,
                max_len: d.max_len,
                out: d.out.as_deref(),
            })?;
        }
    }
    Ok(EXIT_OK)
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
