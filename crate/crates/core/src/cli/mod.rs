//! The `kpbev` command-line tool.

pub mod boxes_csv;
mod commands;
pub mod config;
pub mod fmap;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::checks::Scope;
use crate::detect::{Architecture, DetectorConfig};
use crate::encoders::EncoderKind;
use crate::error::{Error, Result};

pub use commands::{
    bench, eval_boxes, eval_files, gradcheck, random_cloud, render, render_maps, train_demo, BenchArgs, BenchReport,
    EvalSummary, RenderStats, ScaleStats, Timing, TrainDemoArgs,
};
pub use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "kpbev", version, about = "Radar BEV grid rendering with kernel point convolutions")]
pub struct Cli {
    /// Worker threads for data-parallel stages (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the BEV maps of one point cloud CSV with a freshly initialised model.
    Render {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference checks of every hand-written backward pass.
    Gradcheck {
        #[arg(long, default_value = "all")]
        scope: Scope,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Time the rendering stages on a random cloud.
    Bench {
        #[arg(long, default_value_t = 2000)]
        points: usize,
        #[arg(long, default_value = "kpbev", value_parser = parse_encoder)]
        encoder: EncoderKind,
        #[arg(long)]
        multiscale: bool,
        #[arg(long)]
        preprocessing: bool,
        #[arg(long, default_value_t = 10)]
        repeat: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate a detector on synthetic scenes.
    TrainDemo {
        /// Replaces the encoder, preprocessing, radius and scale settings of
        /// the config; single-scale unless `--multiscale` is also given.
        #[arg(long)]
        arch: Option<Architecture>,
        #[arg(long)]
        multiscale: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        train_scenes: Option<usize>,
        #[arg(long)]
        eval_scenes: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a detections CSV against a ground-truth CSV.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Print the default run configuration as JSON.
    PrintDefaultConfig,
}

fn parse_encoder(s: &str) -> std::result::Result<EncoderKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Numerical(_) => EXIT_NUMERICAL,
        _ => EXIT_VALIDATION,
    }
}

/// Parses the process arguments and runs; usage errors map to
/// [`EXIT_VALIDATION`].
pub fn main_from_env() -> i32 {
    match Cli::try_parse() {
        Ok(cli) => run(cli),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                EXIT_VALIDATION
            } else {
                EXIT_OK
            }
        }
    }
}

/// Runs one command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Render { input, config, out } => {
            let cfg = load_or_default(config.as_deref())?;
            render(&input, &cfg, &out)?;
            Ok(EXIT_OK)
        }
        Command::Gradcheck { scope, seed } => {
            let (table, ok) = gradcheck(scope, seed)?;
            print!("{table}");
            Ok(if ok { EXIT_OK } else { EXIT_NUMERICAL })
        }
        Command::Bench {
            points,
            encoder,
            multiscale,
            preprocessing,
            repeat,
            seed,
            config,
            out,
        } => {
            let detector = match config {
                Some(p) => RunConfig::load(&p)?.detector,
                None => DetectorConfig::preset(Architecture::from_parts(preprocessing, encoder), multiscale),
            };
            let report = bench(&BenchArgs {
                points,
                encoder,
                multiscale,
                preprocessing,
                repeat,
                seed,
                detector,
            })?;
            let text = serde_json::to_string_pretty(&report)? + "\n";
            match out {
                Some(p) => std::fs::write(p, text)?,
                None => print!("{text}"),
            }
            Ok(EXIT_OK)
        }
        Command::TrainDemo {
            arch,
            multiscale,
            seed,
            config,
            epochs,
            train_scenes,
            eval_scenes,
            out,
        } => {
            let mut cfg = load_or_default(config.as_deref())?;
            if let Some(a) = arch {
                cfg.detector.encoder = a.encoder();
                cfg.detector.preprocessing = a.preprocessing();
                cfg.detector.rho_k0 = a.default_rho_k0();
                cfg.detector.multiscale = multiscale;
            } else {
                cfg.detector.multiscale |= multiscale;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(n) = train_scenes {
                cfg.train.train_scenes = n;
            }
            if let Some(n) = eval_scenes {
                cfg.train.eval_scenes = n;
            }
            cfg.validate()?;
            let summary = train_demo(&TrainDemoArgs { config: cfg, out }, |line| eprintln!("{line}"))?;
            println!("{}", serde_json::to_string(&summary)?);
            Ok(EXIT_OK)
        }
        Command::Eval { pred, gt } => {
            let summary = eval_files(&pred, &gt)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(EXIT_OK)
        }
        Command::PrintDefaultConfig => {
            print!("{}", RunConfig::default().to_json());
            Ok(EXIT_OK)
        }
    }
}

fn load_or_default(path: Option<&std::path::Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}
