//! Command-line front end for the quantized optimal-stopping pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use qstop::cli::{self, RunConfig};

#[derive(Parser)]
#[command(name = "qstop", version, about = "Quantized value approximation for partially observed optimal stopping")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Master seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Output path (overrides the config; stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Output format: csv or json (overrides the config).
    #[arg(long)]
    format: Option<String>,
    /// Worker threads (0 = automatic).
    #[arg(long)]
    jobs: Option<usize>,
    /// Emit real runtimes in the records (breaks byte-for-byte output
    /// determinism; timings always go to the stderr log).
    #[arg(long)]
    timings: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the full pipeline for the configured cell or sweep.
    Run(CommonArgs),
    /// Alias of `run` for sweep tables.
    Table(CommonArgs),
    /// Quantize the reference measure; writes the grid artifact.
    QuantizeMeasure(CommonArgs),
    /// Simulate the filter chain from a grid artifact.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        /// Grid artifact from quantize-measure.
        #[arg(long)]
        grid: PathBuf,
    },
    /// Quantize the chain and run the backward DP from artifacts.
    Solve {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        grid: PathBuf,
        /// Path-ensemble artifact from simulate.
        #[arg(long)]
        paths: PathBuf,
        /// Optional chain artifact output.
        #[arg(long)]
        chain_out: Option<PathBuf>,
        /// Optional value-table text output.
        #[arg(long)]
        table_out: Option<PathBuf>,
    },
    /// Evaluate the error bounds of a solved run.
    Bounds {
        #[command(flatten)]
        common: CommonArgs,
        /// Solved-run JSON from solve.
        #[arg(long)]
        solved: PathBuf,
    },
}

fn load_config(common: &CommonArgs) -> qstop::Result<RunConfig> {
    let mut cfg = RunConfig::from_path(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.run.seed = seed;
    }
    if let Some(fmt) = &common.format {
        cfg.run.format = fmt.clone();
    }
    if let Some(out) = &common.out {
        cfg.run.output = Some(out.display().to_string());
    }
    if let Some(jobs) = common.jobs {
        cfg.run.jobs = jobs;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cmd: &Cmd) -> qstop::Result<usize> {
    let common = match cmd {
        Cmd::Run(c) | Cmd::Table(c) | Cmd::QuantizeMeasure(c) => c,
        Cmd::Simulate { common, .. } | Cmd::Solve { common, .. } | Cmd::Bounds { common, .. } => {
            common
        }
    };
    let cfg = load_config(common)?;
    if cfg.run.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.run.jobs)
            .build_global()
            .map_err(|e| qstop::Error::Config(format!("thread pool: {e}")))?;
    }
    let out_path = cfg.run.output.as_ref().map(PathBuf::from);
    match cmd {
        Cmd::Run(c) | Cmd::Table(c) => {
            let (_, failures) = cli::cmd_run(&cfg, out_path.as_deref(), c.timings)?;
            Ok(failures)
        }
        Cmd::QuantizeMeasure(_) => {
            let out = out_path
                .ok_or_else(|| qstop::Error::Config("quantize-measure needs --out".into()))?;
            cli::cmd_quantize_measure(&cfg, &out)?;
            Ok(0)
        }
        Cmd::Simulate { grid, .. } => {
            let out =
                out_path.ok_or_else(|| qstop::Error::Config("simulate needs --out".into()))?;
            cli::cmd_simulate(&cfg, grid, &out)?;
            Ok(0)
        }
        Cmd::Solve { grid, paths, chain_out, table_out, .. } => {
            let out = out_path.ok_or_else(|| qstop::Error::Config("solve needs --out".into()))?;
            cli::cmd_solve(&cfg, grid, paths, &out, chain_out.as_deref(), table_out.as_deref())?;
            Ok(0)
        }
        Cmd::Bounds { solved, .. } => {
            let out = out_path.ok_or_else(|| qstop::Error::Config("bounds needs --out".into()))?;
            cli::cmd_bounds(solved, &out)?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let args = Cli::parse();
    match dispatch(&args.cmd) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(_failures) => ExitCode::from(2),
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
