//! `eitmon`: the stroke-monitoring pipeline from meshes to report images.
//!
//! Each subcommand reads the artifacts of the previous stages from the output
//! directory, writes its own, and appends one line to `run_log.jsonl`.

mod commands;
mod config;
mod image;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use eitmon_core::{artifact, ErrorKind};
use serde_json::json;

use config::PipelineConfig;

pub const OUT_ENV: &str = "EITMON_OUT";
pub const RUN_LOG: &str = "run_log.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] eitmon_core::Error),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) => match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Numeric => 3,
                ErrorKind::Io => 4,
            },
            CliError::Io { .. } => 4,
        }
    }
}

#[derive(Parser)]
#[command(name = "eitmon", version, about = "EIT stroke monitoring pipeline")]
struct Cli {
    /// Pipeline configuration (JSON); defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the master seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the configuration and EITMON_OUT.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for sample-level parallelism. Results do not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the 2D and 3D dense (simulation) and coarse (inversion) meshes.
    GenMesh,
    /// Simulate the 2D dataset with LD inputs and the 3D spherical growth suite.
    GenData,
    /// LD reconstructions of the 3D growth suite.
    ReconLd,
    /// Nonlinear reconstructions of the first test samples.
    ReconMo,
    /// Train the graph U-net on the 2D dataset.
    Train,
    /// Apply the trained network to LD images.
    Postprocess(commands::PostprocessArgs),
    /// Metrics of every reconstruction against its truth, as CSV.
    Evaluate,
    /// Slice images of every case plus the metrics CSV.
    Report,
    /// Every stage in order.
    RunAll,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenMesh => "gen-mesh",
            Command::GenData => "gen-data",
            Command::ReconLd => "recon-ld",
            Command::ReconMo => "recon-mo",
            Command::Train => "train",
            Command::Postprocess(_) => "postprocess",
            Command::Evaluate => "evaluate",
            Command::Report => "report",
            Command::RunAll => "run-all",
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<(PipelineConfig, PathBuf), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let out = cli
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("eitmon-out"));
    Ok((cfg, out))
}

fn append_log(out: &Path, line: &serde_json::Value) -> Result<(), CliError> {
    use std::io::Write;
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let path = out.join(RUN_LOG);
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| CliError::io(&path, e))?;
    writeln!(f, "{line}").map_err(|e| CliError::io(&path, e))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (cfg, out) = resolve_config(&cli)?;
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::Config("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot size the worker pool: {e}")))?;
    }
    let hash = cfg.hash();
    artifact::set_config_hash(Some(hash.clone()));
    let mut ctx = commands::Context::new(cfg, out.clone());
    let start = Instant::now();
    let name = cli.command.name();
    let result = match cli.command {
        Command::GenMesh => commands::gen_mesh(&mut ctx),
        Command::GenData => commands::gen_data(&mut ctx),
        Command::ReconLd => commands::recon_ld(&mut ctx),
        Command::ReconMo => commands::recon_mo(&mut ctx),
        Command::Train => commands::train(&mut ctx),
        Command::Postprocess(args) => commands::postprocess(&mut ctx, &args),
        Command::Evaluate => commands::evaluate(&mut ctx),
        Command::Report => commands::report(&mut ctx),
        Command::RunAll => commands::run_all(&mut ctx),
    };
    let line = json!({
        "subcommand": name,
        "configHash": hash,
        "jobs": rayon::current_num_threads(),
        "status": if result.is_ok() { "ok" } else { "error" },
        "error": result.as_ref().err().map(|e| e.to_string()),
        "seconds": start.elapsed().as_secs_f64(),
        "details": ctx.details,
    });
    // a failing stage still gets its log line; its own error wins
    let logged = append_log(&out, &line);
    result.and(logged)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::from(e.exit_code())
        }
    }
}
