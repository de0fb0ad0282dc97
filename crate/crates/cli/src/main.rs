//! `vstpose`: synthesize, preprocess, train, evaluate and ablate WiFi-CSI
//! pose models from the command line.

mod ablate;
mod commands;
mod config;
mod data;
mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use log::{info, LevelFilter};

use config::{CommandKind, Precision, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "vstpose", version, about = "WiFi-CSI human pose estimation")]
struct Cli {
    /// TOML run configuration.
    #[arg(short, long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one configuration value, e.g. `--set train.lr=1e-3`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Directory under which run directories are created.
    #[arg(long, global = true, env = "VSTPOSE_OUTPUT_ROOT", default_value = "runs")]
    output_root: PathBuf,
    /// Exact output directory, bypassing the generated name.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Seed for training, synthesis, splitting and gradient checks.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Compute in f64 instead of f32.
    #[arg(long, global = true)]
    f64: bool,
    /// Print the resolved configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
    /// More logging (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct DataArg {
    /// Dataset directory containing `manifest.tsv`.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset.
    Synth {
        #[arg(long)]
        num_clips: Option<usize>,
    },
    /// Turn raw CSI recordings and skeleton tracks into aligned clips.
    Preprocess {
        #[command(flatten)]
        data: DataArg,
        /// Skip wavelet denoising.
        #[arg(long)]
        no_denoise: bool,
    },
    /// Train a model; without `--data`, trains on synthetic clips.
    Train {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Continue from a `state.ckpt`.
        #[arg(long, value_name = "FILE")]
        resume: Option<PathBuf>,
    },
    /// Compute metrics for a checkpoint.
    Eval {
        #[command(flatten)]
        data: DataArg,
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        /// Evaluate every window rather than the test split.
        #[arg(long)]
        all: bool,
    },
    /// Write per-window predictions as JSON lines.
    Predict {
        #[command(flatten)]
        data: DataArg,
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        all: bool,
    },
    /// Train and evaluate every cell of a configuration grid.
    Ablate {
        #[command(flatten)]
        data: DataArg,
        #[arg(long, value_delimiter = ',')]
        window: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        depth: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        velocity_branch: Vec<bool>,
        /// Any of ts, st, ts+st.
        #[arg(long, value_delimiter = ',')]
        velocity_source: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        fusion: Vec<bool>,
        #[arg(long)]
        parallel: bool,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[arg(long)]
        epsilon: Option<f64>,
        /// Check the `[model]` architecture instead of the tiny one.
        #[arg(long)]
        full_model: bool,
    },
}

type Assignments = Vec<(String, toml::Value)>;

fn push<V: Into<toml::Value>>(out: &mut Assignments, key: &str, value: Option<V>) {
    if let Some(v) = value {
        out.push((key.to_string(), v.into()));
    }
}

fn path_value(p: Option<PathBuf>) -> Option<String> {
    p.map(|p| p.display().to_string())
}

fn array<T: Clone + Into<toml::Value>>(v: &[T]) -> Option<toml::Value> {
    (!v.is_empty()).then(|| toml::Value::Array(v.iter().cloned().map(Into::into).collect()))
}

fn int(n: usize) -> i64 {
    i64::try_from(n).unwrap_or(i64::MAX)
}

/// The subcommand and its flags as configuration assignments.
fn command_assignments(cli: &Cli) -> (CommandKind, Assignments) {
    let mut a = Assignments::new();
    let data = |a: &mut Assignments, d: &DataArg| push(a, "paths.data", path_value(d.data.clone()));
    let kind = match &cli.command {
        Command::Synth { num_clips } => {
            push(&mut a, "synth.num_clips", num_clips.map(int));
            CommandKind::Synth
        }
        Command::Preprocess { data: d, no_denoise } => {
            data(&mut a, d);
            push(&mut a, "preprocess.denoise", no_denoise.then_some(false));
            CommandKind::Preprocess
        }
        Command::Train { data: d, epochs, lr, resume } => {
            data(&mut a, d);
            push(&mut a, "train.epochs", epochs.map(int));
            push(&mut a, "train.lr", *lr);
            push(&mut a, "paths.resume", path_value(resume.clone()));
            CommandKind::Train
        }
        Command::Eval { data: d, checkpoint, all } | Command::Predict { data: d, checkpoint, all } => {
            data(&mut a, d);
            push(&mut a, "paths.checkpoint", path_value(checkpoint.clone()));
            push(&mut a, "eval.subset", all.then_some("all"));
            if matches!(cli.command, Command::Eval { .. }) {
                CommandKind::Eval
            } else {
                CommandKind::Predict
            }
        }
        Command::Ablate { data: d, window, depth, velocity_branch, velocity_source, fusion, parallel, epochs } => {
            data(&mut a, d);
            let ints = |v: &[usize]| v.iter().map(|&n| int(n)).collect::<Vec<_>>();
            push(&mut a, "ablate.window", array(&ints(window)));
            push(&mut a, "ablate.depth", array(&ints(depth)));
            push(&mut a, "ablate.velocity_branch", array(velocity_branch));
            push(&mut a, "ablate.velocity_source", array(velocity_source));
            push(&mut a, "ablate.velocity_fusion", array(fusion));
            push(&mut a, "ablate.parallel", parallel.then_some(true));
            push(&mut a, "train.epochs", epochs.map(int));
            CommandKind::Ablate
        }
        Command::Gradcheck { epsilon, full_model } => {
            push(&mut a, "gradcheck.epsilon", *epsilon);
            push(&mut a, "gradcheck.tiny", full_model.then_some(false));
            CommandKind::Gradcheck
        }
    };
    if let Some(seed) = cli.seed {
        let seed = i64::try_from(seed).unwrap_or(i64::MAX);
        for key in ["train.seed", "synth.seed", "split.seed", "gradcheck.seed"] {
            a.push((key.to_string(), seed.into()));
        }
    }
    if cli.f64 {
        a.push(("precision".into(), "f64".into()));
    }
    (kind, a)
}

fn dispatch<S: vstpose_core::Scalar>(cfg: &RunConfig, dir: &Path) -> Result<()> {
    match cfg.command.expect("resolved configs carry their command") {
        CommandKind::Synth => commands::synth::<S>(cfg, dir),
        CommandKind::Preprocess => commands::preprocess::<S>(cfg, dir),
        CommandKind::Train => commands::train::<S>(cfg, dir),
        CommandKind::Eval => commands::eval::<S>(cfg, dir),
        CommandKind::Predict => commands::predict::<S>(cfg, dir),
        CommandKind::Ablate => ablate::ablate::<S>(cfg, dir),
        CommandKind::Gradcheck => commands::gradcheck(cfg, dir),
    }
}

fn run(cli: Cli) -> Result<()> {
    let (kind, flags) = command_assignments(&cli);
    let mut assignments = cli.set.iter().map(|s| config::parse_assignment(s)).collect::<Result<Assignments>>()?;
    assignments.extend(flags);
    let cfg = config::resolve(cli.config.as_deref(), &assignments, kind)?;
    if cli.print_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => LevelFilter::Warn,
        (false, 0) => LevelFilter::Info,
        (false, 1) => LevelFilter::Debug,
        _ => LevelFilter::Trace,
    };
    if kind == CommandKind::Ablate {
        ablate::expand(&cfg.ablate, &cfg.model)?;
    }
    let dir = run::create_run_dir(&cli.output_root, cli.out.as_deref(), &cfg)?;
    run::init_logging(level, Some(&dir.join(run::LOG_FILE)))?;
    info!("{} run in {} (config {})", kind.name(), dir.display(), cfg.hash());
    match cfg.precision {
        Precision::F32 => dispatch::<f32>(&cfg, &dir),
        Precision::F64 => dispatch::<f64>(&cfg, &dir),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Once logging is up, the error also belongs in run.log.
            if log::max_level() >= LevelFilter::Error {
                log::error!("{}", run::error_chain(&e));
            } else {
                eprintln!("error: {}", run::error_chain(&e));
            }
            ExitCode::FAILURE
        }
    }
}
