use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hatlab::calc::CalculatorRegistry;
use hatlab::pipeline::{self, Overrides, PipelineConfig};
use hatlab::Error;

/// HAT dataset generation, labeling, neural potential training and evaluation.
#[derive(Parser, Debug)]
#[command(name = "hatlab", version)]
struct Cli {
    /// Pipeline configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replace the configured seed.
    #[arg(long, global = true)]
    seed_override: Option<u64>,
    /// Worker threads for generation and labeling.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build reaction configurations and interpolation paths.
    Generate,
    /// Label (or relabel) every frame with the configured calculator.
    Label,
    /// Assign stratified train/val/test splits.
    Split,
    /// Train the potential on the training split.
    Train,
    /// Test-split energy, force and barrier errors.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Learning curve over `eval.curve_sizes`.
    Curve,
    /// Train on small systems, report size-bucketed errors.
    Transfer,
    /// Predicted vs reference barriers of the interpolation systems.
    Barriers {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

const EXIT_USAGE: u8 = 1;
const EXIT_PIPELINE: u8 = 2;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::UnknownCalculator(_) | Error::UnknownTag(_) => EXIT_USAGE,
        _ => EXIT_PIPELINE,
    }
}

fn print_lines(lines: impl IntoIterator<Item = String>) {
    for l in lines {
        println!("{l}");
    }
}

fn run(cli: &Cli, cfg: &PipelineConfig) -> Result<(), Error> {
    let registry = CalculatorRegistry::with_builtins();
    println!("config_hash={}", cfg.hash());
    println!("seed={}", cfg.seed);
    match &cli.command {
        Command::Generate => {
            let s = pipeline::cmd_generate(cfg, &registry)?;
            print_lines(s.lines());
            s.check_complete(cfg.hat.max_attempts)?;
        }
        Command::Label => {
            let s = pipeline::cmd_label(cfg, &registry)?;
            print_lines(s.lines());
            s.check(cfg.label.max_failure_rate)?;
        }
        Command::Split => {
            for (stratum, [train, val, test]) in pipeline::cmd_split(cfg)? {
                println!("stratum={stratum} train={train} val={val} test={test}");
            }
        }
        Command::Train => {
            let s = pipeline::cmd_train(cfg)?;
            print_lines(s.lines());
            println!("checkpoint={}", cfg.checkpoint_path().display());
            if let Some(reason) = s.aborted {
                return Err(Error::Pipeline(format!("training aborted: {reason}")));
            }
        }
        Command::Eval { checkpoint } => {
            let s = pipeline::cmd_eval(cfg, checkpoint.as_deref())?;
            print_lines(s.lines());
        }
        Command::Curve => {
            for p in pipeline::cmd_curve(cfg)? {
                println!(
                    "size={} energy_mae_mev={:.4} force_mae_mev_ang={:.4} train_seconds={:.2}",
                    p.size, p.metrics.energy_mae_mev, p.metrics.force_mae_mev_ang, p.train_seconds
                );
            }
        }
        Command::Transfer => {
            let r = pipeline::cmd_transfer(cfg)?;
            for (name, m) in [("small", &r.small), ("large", &r.large)] {
                match m {
                    Some(m) => println!(
                        "bucket={name} structures={} energy_mae_mev={:.4} force_mae_mev_ang={:.4}",
                        m.n_structures, m.energy_mae_mev, m.force_mae_mev_ang
                    ),
                    None => println!("bucket={name} structures=0"),
                }
            }
        }
        Command::Barriers { checkpoint } => {
            let r = pipeline::cmd_barriers(cfg, checkpoint.as_deref())?;
            println!("barrier_systems={}", r.rows.len());
            println!("barrier_invalid={}", r.n_invalid);
            println!(
                "barrier_mae_mev={}",
                r.mae_mev.map(|v| format!("{v:.4}")).unwrap_or_else(|| "nan".into())
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let Some(path) = &cli.config else {
        eprintln!("error: --config is required");
        return ExitCode::from(EXIT_USAGE);
    };
    let mut cfg = match PipelineConfig::load(path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let overrides = Overrides {
        seed: cli.seed_override,
        workers: cli.workers,
        out_dir: cli.out.clone(),
    };
    if let Err(e) = cfg.apply(&overrides) {
        eprintln!("error: {e}");
        return ExitCode::from(EXIT_USAGE);
    }
    match run(&cli, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
