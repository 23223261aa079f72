use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lngram_core::bench::CountingAlloc;
use lngram_core::{GateMode, LngramError, RunConfig, SurrogateMode};

mod commands;

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

/// Latent n-gram memory: corpus generation, training, evaluation, analysis
/// and benchmarks.
#[derive(Debug, Parser)]
#[command(name = "lngram", version)]
struct Cli {
    /// TOML run configuration; every section is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for the command's random generator (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Overrides {
    /// n-gram orders, e.g. 2,3.
    #[arg(long, global = true, value_delimiter = ',')]
    orders: Option<Vec<usize>>,
    /// Bits per route.
    #[arg(long, global = true)]
    bits: Option<usize>,
    /// Number of subtables; more than one switches the readout to softmax fusion.
    #[arg(long, global = true)]
    subtables: Option<usize>,
    /// 1-based layers that carry a memory branch, e.g. 1,3; empty for none.
    #[arg(long, global = true, value_delimiter = ',', num_args = 0..)]
    insert_layers: Option<Vec<usize>>,
    /// exact | onebit | ste
    #[arg(long, global = true)]
    surrogate: Option<SurrogateMode>,
    /// Fusion temperature.
    #[arg(long = "tau-f", global = true)]
    tau_f: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic corpus and its entity index.
    CorpusGen,
    /// Train a model and write a checkpoint and loss curve.
    Train,
    /// Validation perplexity of a checkpoint, overall and by prefix position.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Prefix bucket width in positions.
        #[arg(long, default_value_t = 16)]
        bucket: usize,
    },
    /// Finite-difference checks of the routing surrogate and the main path.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        cases: usize,
    },
    /// KL between every layer's vocabulary projection and the output.
    AnalyzeLogitlens {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Layer-by-layer CKA between two checkpoints and the soft alignment.
    AnalyzeCka {
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        variant: PathBuf,
    },
    /// Paired bootstrap over per-instance correctness vectors.
    AnalyzeBootstrap {
        /// JSON list of {"name", "a", "b"} with 0/1 or boolean entries.
        #[arg(long)]
        input: PathBuf,
    },
    /// Per-position gate traces and the entity-final summary.
    GateViz {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Prefill/decode throughput and memory, with and without the branches.
    Bench {
        /// Model to measure; a freshly initialized one when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) {
        let l = &mut cfg.model.lngram;
        if let Some(o) = &self.orders {
            l.orders = o.clone();
        }
        if let Some(b) = self.bits {
            l.bits = b;
        }
        if let Some(s) = self.subtables {
            l.subtables = s;
            l.gate = if s > 1 { GateMode::Softmax } else { l.gate };
        }
        if let Some(m) = self.surrogate {
            l.surrogate.mode = m;
        }
        if let Some(t) = self.tau_f {
            l.fusion_temperature = t;
        }
        if let Some(layers) = &self.insert_layers {
            cfg.model.insert_layers = layers.clone();
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, LngramError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            RunConfig::from_toml(&text).map_err(|e| LngramError::Config(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cli.overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = load_config(&cli).and_then(|cfg| commands::run(&cli.command, &cfg, &cli.out));
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                LngramError::Config(_) | LngramError::Usage(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
