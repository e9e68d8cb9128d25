use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use emerg::cli::{self, OracleOptions, RunConfig, Workspace};

#[derive(Parser)]
#[command(name = "emerg", version, about = "Cold-start CTR prediction with item-specific feature graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (flat TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct WithCheckpoint {
    #[command(flatten)]
    common: RunArgs,
    /// θ checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain and meta-train on the old items.
    Train(RunArgs),
    /// Cold-start and warm-up evaluation of every new item.
    Eval {
        #[command(flatten)]
        args: WithCheckpoint,
        /// Also write per-item φ after each phase to phi.jsonl.
        #[arg(long)]
        export_phi: bool,
    },
    /// Evaluation restricted to selected phases.
    Warmup {
        #[command(flatten)]
        args: WithCheckpoint,
        /// Comma-separated phase labels out of cold, A, B, C.
        #[arg(long, value_delimiter = ',', default_value = "A,B,C")]
        phases: Vec<String>,
    },
    /// Sufficient-data sweep: keep adapting on growing extra record counts.
    Common {
        #[command(flatten)]
        args: WithCheckpoint,
        /// Cumulative extra record counts.
        #[arg(long, value_delimiter = ',', default_value = "20,40,80")]
        sizes: Vec<usize>,
        /// Update a copy of θ together with φ.
        #[arg(long)]
        finetune: bool,
    },
    /// Write an item's adjacency matrices as CSV.
    ExportGraph {
        #[command(flatten)]
        args: WithCheckpoint,
        #[arg(long)]
        item: u32,
        /// Also export the stacks after warm-up phases A, B and C.
        #[arg(long)]
        warmup: bool,
        /// Include the raw generated matrix and the symmetrized stack.
        #[arg(long)]
        full: bool,
    },
    /// Symbolic interaction-order tables and checks.
    Oracle {
        #[arg(long, default_value_t = 4)]
        features: usize,
        #[arg(long, default_value_t = 3)]
        layers: usize,
        /// Random sparse patterns checked per depth.
        #[arg(long, default_value_t = 50)]
        patterns: usize,
        #[arg(long, default_value_t = 0.5)]
        density: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic dataset with planted pairwise interactions.
    Synth {
        /// Synthetic-data config (TOML); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn open(config: &Path) -> emerg::Result<Workspace> {
    Workspace::open(RunConfig::load(config)?)
}

fn open_with_theta(a: &WithCheckpoint) -> emerg::Result<(Workspace, emerg::diffcore::ParamStore)> {
    let ws = open(&a.common.config)?;
    let theta = ws.load_theta(&a.checkpoint)?;
    Ok((ws, theta))
}

fn print_reports(reports: &[emerg::eval::MetricReport]) {
    if reports.is_empty() {
        println!("no new items to evaluate");
    }
    for r in reports {
        let auc = r.auc.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into());
        println!("{:>10}  auc={auc}  f1={:.4}  n={}  positives={}", r.phase, r.f1, r.n, r.positives);
    }
}

fn run(command: Command) -> emerg::Result<()> {
    match command {
        Command::Train(c) => {
            let ws = open(&c.config)?;
            let o = cli::cmd_train(&ws, &c.out)?;
            println!("checkpoint {}", o.checkpoint.display());
            println!("run log    {}", o.run_log.display());
        }
        Command::Eval { args, export_phi } => {
            let (ws, theta) = open_with_theta(&args)?;
            print_reports(&cli::cmd_eval(&ws, &theta, &args.common.out, None, export_phi)?);
        }
        Command::Warmup { args, phases } => {
            let (ws, theta) = open_with_theta(&args)?;
            print_reports(&cli::cmd_eval(&ws, &theta, &args.common.out, Some(&phases), false)?);
        }
        Command::Common { args, sizes, finetune } => {
            let (ws, theta) = open_with_theta(&args)?;
            print_reports(&cli::cmd_common(&ws, &theta, &args.common.out, &sizes, finetune)?);
        }
        Command::ExportGraph { args, item, warmup, full } => {
            let (ws, theta) = open_with_theta(&args)?;
            for p in cli::cmd_export_graph(&ws, &theta, &args.common.out, item, warmup, full)? {
                println!("{}", p.display());
            }
        }
        Command::Oracle {
            features,
            layers,
            patterns,
            density,
            seed,
            out,
        } => {
            let opts = OracleOptions {
                features,
                layers,
                patterns,
                density,
                seed,
            };
            print!("{}", cli::cmd_oracle(&opts, out.as_deref())?);
            println!("order check passed");
        }
        Command::Synth { config, seed, out } => {
            let sc = cli::load_synth_config(config.as_deref())?;
            for p in cli::cmd_synth(&sc, seed, &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let parsed = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(parsed.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
