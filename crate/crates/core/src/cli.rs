//! Command-line front end.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{load_for_config, Method, RunConfig};
use crate::diagnostics::{export_embeddings, replay_checkpoint};
use crate::error::{Error, Result};
use crate::meta::{evaluate, prepare, restore_multitask, train};
use crate::nn::Checkpoint;

/// Relative output directories are resolved against this variable when set.
pub const OUTPUT_ROOT_ENV: &str = "MAXL_OUTPUT_ROOT";

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "maxl",
    version,
    about = "Meta auxiliary learning: training, evaluation and diagnostics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a run described by a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to the config's `output-dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Print the primary test accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Config naming the dataset to evaluate on.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Recompute gradient cosine and label utilization for saved checkpoints.
    Diagnose {
        #[arg(long)]
        config: PathBuf,
        /// A checkpoint file, or a run directory whose `checkpoints/` are all replayed.
        #[arg(long)]
        checkpoint: PathBuf,
        /// CSV destination; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write test-set trunk features of a checkpoint as CSV.
    ExportEmbeddings {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    method: Option<String>,
}

enum Failure {
    Config(Error),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Config(e),
            other => Failure::Runtime(other),
        }
    }
}

fn load_config(path: &Path) -> std::result::Result<RunConfig, Failure> {
    let cfg = RunConfig::load(path).map_err(Failure::Config)?;
    cfg.validate().map_err(Failure::Config)?;
    Ok(cfg)
}

fn resolve_output(out: Option<PathBuf>, cfg: &RunConfig) -> PathBuf {
    let base = out
        .or_else(|| (!cfg.output_dir.as_os_str().is_empty()).then(|| cfg.output_dir.clone()))
        .unwrap_or_else(|| PathBuf::from(format!("runs/{}-{}-seed{}", cfg.dataset, cfg.method, cfg.seed)));
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if base.is_relative() => PathBuf::from(root).join(base),
        _ => base,
    }
}

fn checkpoint_files(path: &Path) -> Result<Vec<PathBuf>> {
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let dir = if path.join("checkpoints").is_dir() {
        path.join("checkpoints")
    } else {
        path.to_path_buf()
    };
    let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    files.sort();
    Ok(files)
}

fn execute(cmd: Command, out: &mut dyn Write) -> std::result::Result<(), Failure> {
    let io = |e| Failure::Runtime(Error::io("<stdout>", e));
    match cmd {
        Command::Train {
            config,
            out: dir,
            overrides,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(seed) = overrides.seed {
                cfg.seed = seed;
            }
            if let Some(m) = overrides.method {
                cfg.method = m.parse::<Method>().map_err(Failure::Config)?;
                cfg.validate().map_err(Failure::Config)?;
            }
            let dir = resolve_output(dir, &cfg);
            let (tr, te) = load_for_config(&cfg)?;
            let run = train(&cfg, &tr, &te, Some(&dir))?;
            let last = run.metrics.last().map_or(f64::NAN, |m| m.test_accuracy);
            writeln!(out, "{}", dir.display()).map_err(io)?;
            writeln!(out, "test-accuracy {last}").map_err(io)?;
        }
        Command::Eval { checkpoint, config } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let config = config
                .ok_or_else(|| Failure::Config(Error::Config("eval needs --config to locate the test data".into())))?;
            let cfg = load_config(&config)?;
            let net = restore_multitask(&ckpt)?;
            let (tr, te) = load_for_config(&cfg)?;
            let p = prepare(&cfg, &tr, &te)?;
            let e = evaluate(&net, &p.test)?;
            writeln!(out, "accuracy {}", e.accuracy).map_err(io)?;
            for (c, acc) in e.per_class.iter().enumerate() {
                match acc {
                    Some(a) => writeln!(out, "class {c} {a}"),
                    None => writeln!(out, "class {c} -"),
                }
                .map_err(io)?;
            }
        }
        Command::Diagnose {
            config,
            checkpoint,
            out: dest,
        } => {
            let cfg = load_config(&config)?;
            let files = checkpoint_files(&checkpoint)?;
            if files.is_empty() {
                return Err(Failure::Runtime(Error::Truncated {
                    path: checkpoint,
                    detail: "no checkpoint files".into(),
                }));
            }
            let (tr, te) = load_for_config(&cfg)?;
            let mut text = String::from("checkpoint,epoch,cosine-similarity,label-utilization\n");
            for f in files {
                let r = replay_checkpoint(&cfg, &tr, &te, &Checkpoint::load(&f)?)?;
                let cos = r.cosine.map(|c| c.similarity.to_string()).unwrap_or_default();
                let util = r.utilization.map(|u| u.fraction.to_string()).unwrap_or_default();
                text.push_str(&format!("{},{},{cos},{util}\n", f.display(), r.epoch));
            }
            match dest {
                Some(p) => std::fs::write(&p, text).map_err(|e| Failure::Runtime(Error::io(&p, e)))?,
                None => out.write_all(text.as_bytes()).map_err(io)?,
            }
        }
        Command::ExportEmbeddings {
            config,
            checkpoint,
            out: dest,
        } => {
            let cfg = load_config(&config)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let net = restore_multitask(&ckpt)?;
            let (tr, te) = load_for_config(&cfg)?;
            let p = prepare(&cfg, &tr, &te)?;
            export_embeddings(&net, &p.test, &dest)?;
            writeln!(out, "{}", dest.display()).map_err(io)?;
        }
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the exit status.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{e}");
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match execute(cli.command, out) {
        Ok(()) => 0,
        Err(Failure::Config(e)) => {
            let _ = writeln!(err, "{e}");
            EXIT_CONFIG
        }
        Err(Failure::Runtime(e)) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_RUNTIME
        }
    }
}
