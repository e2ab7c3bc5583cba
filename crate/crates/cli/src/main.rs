use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use crosskd::report::commands::{self, Outcome};
use crosskd::report::{Recipe, RunConfig};
use crosskd::{Error, Result};

/// Cross-head distillation experiments on synthetic detection data.
#[derive(Parser, Debug)]
#[command(name = "crosskd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Run configuration file (TOML).
    #[arg(long, value_name = "PATH", conflicts_with = "recipe", required_unless_present = "recipe")]
    config: Option<PathBuf>,
    /// Built-in reference recipe instead of a file.
    #[arg(long, value_name = "NAME")]
    recipe: Option<String>,
    /// Replaces the configured seeds (the teacher seed for teacher training).
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output directory; defaults to the configured `out_dir`.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the teacher and write its checkpoint and log.
    TrainTeacher {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train distilled students (and compared strategies) against a teacher.
    Distill {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Teacher checkpoint; trained from the config when absent.
        #[arg(long, value_name = "CKPT")]
        teacher: Option<PathBuf>,
    },
    /// Final AP for every split index next to the no-KD baseline.
    AblateSplit {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "CKPT")]
        teacher: Option<PathBuf>,
    },
    /// Conflict curves of teachers against the student assigner.
    AnalyzeConflict {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Teacher checkpoints; may be repeated.
        #[arg(long, value_name = "CKPT")]
        teacher: Vec<PathBuf>,
    },
    /// AP of a checkpoint on the configured validation split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        checkpoint: PathBuf,
    },
    /// Render training logs, heatmaps and conflict curves as SVG.
    Plot {
        #[arg(long, value_name = "DIR", default_value = "figures")]
        out: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

enum SeedTarget {
    Teacher,
    Students,
}

fn load(args: &ConfigArgs, target: SeedTarget) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = match (&args.config, &args.recipe) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(name)) => Recipe::from_name(name)
            .ok_or_else(|| Error::config(format!("unknown recipe `{name}`")))?
            .config()?,
        (None, None) => return Err(Error::config("--config or --recipe is required")),
    };
    if let Some(seed) = args.seed {
        match target {
            SeedTarget::Teacher => cfg.teacher.seed = seed,
            SeedTarget::Students => cfg.seeds = vec![seed],
        }
    }
    let out = args.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    Ok((cfg, out))
}

fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::TrainTeacher { cfg } => {
            let (config, out) = load(&cfg, SeedTarget::Teacher)?;
            commands::train_teacher(&config, &out)
        }
        Command::Distill { cfg, teacher } => {
            let (config, out) = load(&cfg, SeedTarget::Students)?;
            commands::distill(&config, teacher.as_deref(), &out)
        }
        Command::AblateSplit { cfg, teacher } => {
            let (config, out) = load(&cfg, SeedTarget::Students)?;
            commands::ablate_split(&config, teacher.as_deref(), &out)
        }
        Command::AnalyzeConflict { cfg, teacher } => {
            let (config, out) = load(&cfg, SeedTarget::Teacher)?;
            commands::analyze_conflict(&config, &teacher, &out)
        }
        Command::Eval { cfg, checkpoint } => {
            let (config, _) = load(&cfg, SeedTarget::Students)?;
            commands::eval(&config, Path::new(&checkpoint))
        }
        Command::Plot { out, inputs } => commands::plot(&inputs, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(outcome) => {
            let _ = commands::print_outcome(std::io::stdout().lock(), &outcome);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
