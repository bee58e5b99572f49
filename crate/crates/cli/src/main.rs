use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use patprune::commands::{self, AnalyzeOptions, EvalReport};
use patprune::config::RunConfig;
use patprune::verify::{self, Fault};

#[derive(Parser)]
#[command(name = "patprune", version, about = "ADMM-optimized pattern pruning for transformer encoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults to the toy preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `out_dir` in the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the dense model.
    TrainDense(Common),
    /// Run the ADMM phase on a dense checkpoint, then hard-prune.
    AdmmPrune {
        #[command(flatten)]
        common: Common,
        /// Input checkpoint (default: <out>/dense.ckpt).
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Retrain a pruned checkpoint with SR-STE.
    Retrain {
        #[command(flatten)]
        common: Common,
        /// Input checkpoint (default: <out>/pruned.ckpt).
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and audit its masks.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate (default: <out>/retrained.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Dense training, ADMM, hard prune, retraining and evaluation.
    FullPipeline(Common),
    /// Histograms and per-block near-zero statistics of one weight matrix.
    AnalyzeDistribution {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Parameter id, e.g. layer0.wq.
        #[arg(long)]
        target: Option<String>,
        /// Sections per side of the section grid.
        #[arg(long)]
        sections: Option<usize>,
        /// Near-zero threshold.
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        bins: Option<usize>,
    },
    /// Write the configured train and test sets as JSON.
    ExportData(Common),
    /// Run the property suites.
    Verify {
        /// Restrict to these suites (repeatable).
        #[arg(long = "suite")]
        suites: Vec<String>,
        /// Run with a deliberately injected defect.
        #[arg(long, value_enum)]
        inject_fault: Option<Fault>,
        /// List suites and properties without running them.
        #[arg(long)]
        list: bool,
    },
}

fn resolve(common: &Common) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
        cfg.validate()?;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = Some(out.clone());
    }
    let out = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs/default"));
    Ok((cfg, out))
}

fn print_eval(report: &EvalReport) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(report)?);
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::TrainDense(c) => {
            let (cfg, out) = resolve(&c)?;
            print_eval(&commands::train_dense(&cfg, &out)?)?;
        }
        Command::AdmmPrune { common, from } => {
            let (cfg, out) = resolve(&common)?;
            print_eval(&commands::admm_prune(&cfg, &out, from.as_deref())?)?;
        }
        Command::Retrain { common, from } => {
            let (cfg, out) = resolve(&common)?;
            print_eval(&commands::retrain(&cfg, &out, from.as_deref())?)?;
        }
        Command::Eval { common, checkpoint } => {
            let (cfg, out) = resolve(&common)?;
            print_eval(&commands::eval(&cfg, &out, checkpoint.as_deref())?)?;
        }
        Command::FullPipeline(c) => {
            let (cfg, out) = resolve(&c)?;
            print_eval(&commands::full_pipeline(&cfg, &out)?)?;
        }
        Command::AnalyzeDistribution { common, checkpoint, target, sections, epsilon, bins } => {
            let (cfg, out) = resolve(&common)?;
            let opts = AnalyzeOptions { target, sections, epsilon, bins };
            let (report, paths) = commands::analyze_distribution(&cfg, &out, &checkpoint, &opts)?;
            println!("{}", report.summary_json());
            for p in paths {
                eprintln!("wrote {}", p.display());
            }
        }
        Command::ExportData(c) => {
            let (cfg, out) = resolve(&c)?;
            let path = commands::export_data(&cfg, &out)?;
            eprintln!("wrote {}", path.display());
        }
        Command::Verify { suites, inject_fault, list } => {
            if list {
                for p in verify::properties() {
                    println!("{}/{}", p.suite, p.name);
                }
                return Ok(ExitCode::SUCCESS);
            }
            let known = verify::suites();
            if let Some(bad) = suites.iter().find(|s| !known.contains(&s.as_str())) {
                anyhow::bail!("unknown suite {bad:?}; valid suites: {}", known.join(", "));
            }
            let outcomes = verify::run(&suites, inject_fault);
            for o in &outcomes {
                println!("{}", o.line());
            }
            let failed = outcomes.iter().filter(|o| o.result.is_err()).count();
            println!("{} passed, {failed} failed", outcomes.len() - failed);
            if failed > 0 {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
