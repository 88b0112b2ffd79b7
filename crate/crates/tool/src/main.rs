use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use organoid_core::fsutil::write_atomic;
use organoid_core::pipeline::{self, PipelineConfig, PipelineError, STATS_JSON};
use organoid_review::{http, ReviewService, ServiceError};

#[derive(Debug, Parser)]
#[command(
    name = "organoid",
    version,
    about = "Organoid instance post-processing, morphometry and curation"
)]
struct Cli {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(subcommand)]
    command: Command,
}

/// Pipeline settings; each one overrides the same key of `--config`.
#[derive(Debug, Args, Default)]
struct ConfigArgs {
    /// TOML file with pipeline settings
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Drop instances covering at least this fraction of a tile
    #[arg(long, global = true, value_name = "FRAC")]
    background_frac: Option<f64>,
    /// Drop instances touching this many pixels next to a tile edge
    #[arg(long, global = true, value_name = "PX")]
    border_margin: Option<u32>,
    /// Drop instances smaller than this many pixels
    #[arg(long, global = true, value_name = "PX")]
    min_area: Option<u64>,
    /// Significance level for group comparisons
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Use Welch's unequal-variance test
    #[arg(long, global = true)]
    welch: bool,
    /// Bonferroni-correct significance across properties
    #[arg(long, global = true)]
    bonferroni: bool,
    /// Worker threads for tile processing
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Post-process and measure every tile of a slide manifest
    Run {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare groups across one or more measurement CSVs
    Stats {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        /// Directory receiving stats.json
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predicted instances against ground truth
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the curation API for a completed run
    Serve {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        port: Option<u16>,
        /// Directory holding the built review UI
        #[arg(long, value_name = "DIR")]
        ui_dir: Option<PathBuf>,
    },
}

#[derive(Debug, Error)]
enum CliError {
    #[error("cannot read config {path}: {source}")]
    ConfigRead {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config {path}: {source}")]
    ConfigParse {
        path: PathBuf,
        source: toml::de::Error,
    },
    #[error("no output directory given (use --out or output_dir in the config file)")]
    NoOutputDir,
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error("io failure on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn load_config(args: &ConfigArgs) -> Result<PipelineConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|source| CliError::ConfigRead {
                path: path.clone(),
                source,
            })?;
            toml::from_str(&text).map_err(|source| CliError::ConfigParse {
                path: path.clone(),
                source,
            })?
        }
        None => PipelineConfig::default(),
    };
    if let Some(v) = args.background_frac {
        cfg.background_fraction = v;
    }
    if let Some(v) = args.border_margin {
        cfg.border_margin = v;
    }
    if let Some(v) = args.min_area {
        cfg.min_area = v;
    }
    if let Some(v) = args.alpha {
        cfg.alpha = v;
    }
    if args.welch {
        cfg.welch = true;
    }
    if args.bonferroni {
        cfg.bonferroni = true;
    }
    if args.jobs.is_some() {
        cfg.jobs = args.jobs;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn output_dir(flag: Option<PathBuf>, cfg: &PipelineConfig) -> Result<PathBuf, CliError> {
    flag.or_else(|| cfg.output_dir.clone())
        .ok_or(CliError::NoOutputDir)
}

fn cmd_run(manifest: &Path, out: &Path, cfg: &PipelineConfig) -> Result<(), CliError> {
    let summary = pipeline::run(manifest, out, cfg)?;
    for id in &summary.unknown_exclusions {
        log::warn!("exclusion for unknown instance `{id}` ignored");
    }
    println!(
        "{} tiles, {} instances ({} excluded) -> {}",
        summary.tiles,
        summary.instances,
        summary.excluded,
        out.display()
    );
    Ok(())
}

fn cmd_stats(csvs: &[PathBuf], out: &Path, cfg: &PipelineConfig) -> Result<(), CliError> {
    let doc = pipeline::stats_from_csvs(csvs, cfg)?;
    std::fs::create_dir_all(out).map_err(|source| CliError::Io {
        path: out.to_path_buf(),
        source,
    })?;
    let path = out.join(STATS_JSON);
    write_atomic(&path, doc.to_json().as_bytes()).map_err(|source| CliError::Io {
        path: path.clone(),
        source,
    })?;
    println!("{}", path.display());
    Ok(())
}

fn cmd_eval(pred: &Path, gt: &Path, out: &Path, cfg: &PipelineConfig) -> Result<String, CliError> {
    let eval = pipeline::evaluate_manifests(pred, gt, cfg)?;
    pipeline::write_evaluation(&eval, out)?;
    Ok(format!("{:.4}", eval.mean_ap))
}

fn cmd_serve(
    out: &Path,
    port: u16,
    ui_dir: Option<PathBuf>,
    cfg: &PipelineConfig,
) -> Result<(), CliError> {
    let svc = Arc::new(ReviewService::open(out, cfg.test_options(), ui_dir)?);
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|source| CliError::Io {
            path: out.to_path_buf(),
            source,
        })?;
    rt.block_on(async move {
        let listener = http::bind(port).await?;
        let addr = listener.local_addr()?;
        println!("serving {} on http://{addr}/", out.display());
        http::serve(svc, listener, http::interrupt()).await
    })?;
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let cfg = load_config(&cli.config)?;
    match cli.command {
        Command::Run { manifest, out } => cmd_run(&manifest, &output_dir(out, &cfg)?, &cfg),
        Command::Stats { csv, out } => {
            let out = out
                .or_else(|| cfg.output_dir.clone())
                .unwrap_or_else(|| PathBuf::from("."));
            cmd_stats(&csv, &out, &cfg)
        }
        Command::Eval { pred, gt, out } => {
            let out = out
                .or_else(|| cfg.output_dir.clone())
                .unwrap_or_else(|| PathBuf::from("."));
            println!("{}", cmd_eval(&pred, &gt, &out, &cfg)?);
            Ok(())
        }
        Command::Serve { out, port, ui_dir } => {
            let port = port.unwrap_or(cfg.port);
            cmd_serve(&output_dir(out, &cfg)?, port, ui_dir, &cfg)
        }
    }
}

/// Parse `args` and run; returns the process exit code.
fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code() as u8;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    ExitCode::from(run(std::env::args_os()))
}
