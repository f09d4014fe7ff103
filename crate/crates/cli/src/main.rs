use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anysr::bench::{write_synthetic_dataset, EvalMode, PsnrMode};
use anysr::config::RunConfig;
use anysr::run::{cmd_eval, cmd_flops, cmd_inspect, cmd_train, AnyStore};
use anysr::Error;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "anysr",
    version,
    about = "Elastic-width arbitrary-scale super-resolution"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write its checkpoint and loss log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output checkpoint (overrides paths.checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Extra `key=value` overrides, applied last.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Measure PSNR against bicubic on a directory of HR PNGs.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated scales, e.g. `2,3.5,1.5x2`.
        #[arg(long)]
        scales: Option<String>,
        #[arg(long)]
        mode: Option<EvalModeArg>,
        #[arg(long)]
        psnr: Option<PsnrArg>,
        /// Report CSV (overrides paths.report).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Print the cost of every subnet at every evaluation scale.
    Flops {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// List the tensors of a checkpoint.
    Inspect { checkpoint: PathBuf },
    /// Write procedurally generated PNGs.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        first: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum EvalModeArg {
    Subnet,
    Full,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum PsnrArg {
    Rgb,
    Y,
}

enum Failure {
    Usage(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::ConfigKey { .. } | Error::Scale(_) => 1,
        Error::Io(_) | Error::Image(_) | Error::Data(_) | Error::Checkpoint(_) => 2,
        Error::Numeric(_) | Error::Dimension(_) => 3,
    }
}

fn overrides(set: &[String]) -> Result<Vec<(String, String)>, Failure> {
    set.iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))
        })
        .collect()
}

fn load_config(path: &Path, extra: Vec<(String, String)>) -> Result<RunConfig, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Failure::Lib(Error::Data(format!(
            "cannot read config `{}`: {e}",
            path.display()
        )))
    })?;
    Ok(RunConfig::parse_with_overrides(&text, &extra)?)
}

fn show(p: &Path) -> String {
    p.display().to_string()
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train {
            config,
            seed,
            out,
            set,
        } => {
            let mut extra = overrides(&set)?;
            if let Some(seed) = seed {
                extra.push(("train.seed".into(), seed.to_string()));
            }
            if let Some(out) = out {
                extra.push(("paths.checkpoint".into(), show(&out)));
            }
            let cfg = load_config(&config, extra)?;
            if cfg.paths.checkpoint.is_none() {
                return Err(Failure::Usage(
                    "no output checkpoint: pass --out or set paths.checkpoint".into(),
                ));
            }
            print!("# resolved config\n{}", cfg.echo());
            let (_, log) = cmd_train(&cfg)?;
            let n = log.records.len();
            println!(
                "trained {n} steps; mean loss first 100 {:.5}, last 100 {:.5}",
                log.mean_loss(0..100),
                log.mean_loss(n.saturating_sub(100)..n)
            );
            println!(
                "checkpoint: {}",
                show(cfg.paths.checkpoint.as_deref().unwrap())
            );
        }
        Command::Eval {
            config,
            checkpoint,
            data,
            scales,
            mode,
            psnr,
            out,
            set,
        } => {
            let mut extra = overrides(&set)?;
            if let Some(d) = data {
                extra.push(("eval.data_dir".into(), show(&d)));
            }
            if let Some(s) = scales {
                extra.push(("eval.scales".into(), s));
            }
            if let Some(m) = mode {
                let m = match m {
                    EvalModeArg::Subnet => EvalMode::Subnet,
                    EvalModeArg::Full => EvalMode::Full,
                };
                extra.push(("eval.mode".into(), m.to_string()));
            }
            if let Some(p) = psnr {
                let p = match p {
                    PsnrArg::Rgb => PsnrMode::Rgb,
                    PsnrArg::Y => PsnrMode::Y,
                };
                extra.push(("eval.psnr".into(), p.to_string()));
            }
            if let Some(o) = out {
                extra.push(("paths.report".into(), show(&o)));
            }
            let cfg = load_config(&config, extra)?;
            let store = AnyStore::load(&checkpoint)?;
            let report = cmd_eval(&cfg, &store)?;
            print!("{}", report.to_table());
        }
        Command::Flops { config, set } => {
            let cfg = load_config(&config, overrides(&set)?)?;
            print!("{}", cmd_flops(&cfg)?.to_table());
        }
        Command::Inspect { checkpoint } => {
            print!("{}", cmd_inspect(&checkpoint)?);
        }
        Command::Synth {
            out,
            count,
            first,
            size,
            seed,
        } => {
            if size < 8 {
                return Err(Failure::Usage(format!("--size {size} must be at least 8")));
            }
            let paths = write_synthetic_dataset(&out, first, count, size, seed)?;
            println!("wrote {} images to {}", paths.len(), show(&out));
        }
    }
    Ok(())
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(value) = std::env::var("ANYSR_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| {
            Failure::Usage(format!(
                "ANYSR_THREADS must be a positive integer, got `{value}`"
            ))
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(format!("cannot size the thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match configure_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
