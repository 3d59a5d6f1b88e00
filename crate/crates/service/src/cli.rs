//! The `attnerase` command line.

use std::ffi::OsString;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use attnerase_core::attention::DescriptorAxis;
use attnerase_core::backend;
use attnerase_core::orchestrator::{LayerSelection, ReferenceScheme, RemovalConfig};
use attnerase_core::strategy::StrategyKind;
use attnerase_core::theory::{run_verification, VerifyOptions};
use clap::{Args, Parser, Subcommand};

use crate::ablate::{discover_corpus, read_external_metrics, run_sweep, write_report, Sweep};
use crate::error::{ServiceError, ServiceResult};
use crate::io;
use crate::jobs::{JobService, ServiceOptions};

/// Environment variable naming the job service's data directory.
pub const DATA_DIR_ENV: &str = "ATTNERASE_DATA_DIR";

#[derive(Debug, Parser)]
#[command(name = "attnerase", version, about = "Training-free object removal by adaptive attention suppression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Remove the masked object from one image.
    Erase(EraseArgs),
    /// Run a strategy × reference-scheme sweep over a corpus directory.
    Ablate(AblateArgs),
    /// Run the HTTP job service.
    Serve(ServeArgs),
    /// Run the numerical checks of the presence/suppression model.
    Verify(VerifyArgs),
}

/// Run settings shared by `erase` and `ablate`. Unset flags fall back to the
/// `--config` file, then to the built-in defaults.
#[derive(Debug, Args)]
struct RunArgs {
    /// Number of denoising steps [default: 50]
    #[arg(long)]
    steps: Option<usize>,
    /// Seed of the shared noise draw [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Backend id [default: toy]
    #[arg(long)]
    backend: Option<String>,
    /// all | res:<n> [default: all]
    #[arg(long)]
    layers: Option<LayerSelection>,
    /// Mask dilation radius in pixels [default: 0]
    #[arg(long)]
    dilate: Option<usize>,
    /// key_column | query_row [default: key_column]
    #[arg(long)]
    axis: Option<DescriptorAxis>,
    /// JSON file with any RemovalConfig fields
    #[arg(long)]
    config: Option<PathBuf>,
}

impl RunArgs {
    fn base_config(&self) -> ServiceResult<RemovalConfig> {
        let mut c = match &self.config {
            Some(path) => {
                let text = String::from_utf8(io::read_bytes(path)?)
                    .map_err(|_| ServiceError::Usage(format!("{}: not UTF-8", path.display())))?;
                RemovalConfig::from_json(&text)?
            }
            None => RemovalConfig::default(),
        };
        if let Some(v) = self.steps {
            c.steps = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = &self.backend {
            c.backend = v.clone();
        }
        if let Some(v) = self.layers {
            c.layers = v;
        }
        if let Some(v) = self.dilate {
            c.dilate = v;
        }
        if let Some(v) = self.axis {
            c.axis = v;
        }
        Ok(c)
    }
}

#[derive(Debug, Args)]
struct EraseArgs {
    #[arg(long)]
    image: PathBuf,
    /// Mask PNG; pixels with luma >= 128 are removed
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// token | region | timestep | full | none [default: token]
    #[arg(long)]
    strategy: Option<StrategyKind>,
    /// matched | first | last | mid [default: matched]
    #[arg(long)]
    reference: Option<ReferenceScheme>,
    /// Write presence curves (JSON lines) here when the strategy computes them
    #[arg(long)]
    curves: Option<PathBuf>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Debug, Args)]
struct AblateArgs {
    /// Directory of <name>.png, <name>.mask.png and optional <name>.ref.png
    #[arg(long)]
    corpus: PathBuf,
    /// Output directory for ablation.csv and ablation.json
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated strategies [default: all five]
    #[arg(long, value_delimiter = ',')]
    strategies: Option<Vec<StrategyKind>>,
    /// Comma-separated reference schemes [default: matched]
    #[arg(long, value_delimiter = ',')]
    references: Option<Vec<ReferenceScheme>>,
    /// CSV of externally computed metrics keyed by image,strategy,reference
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Debug, Args)]
struct ServeArgs {
    /// Job data directory
    #[arg(long, env = DATA_DIR_ENV, default_value = "attnerase-data")]
    data: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    /// Worker threads, each with its own backend instance
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    /// Also write the report as JSON
    #[arg(long)]
    json: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Smaller grids and fewer Monte Carlo trials
    #[arg(long)]
    quick: bool,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> ServiceResult<i32> {
    match command {
        Command::Erase(a) => erase(a).map(|_| 0),
        Command::Ablate(a) => ablate(a).map(|_| 0),
        Command::Serve(a) => serve(a).map(|_| 0),
        Command::Verify(a) => verify(a),
    }
}

fn erase(a: EraseArgs) -> ServiceResult<()> {
    let mut config = a.run.base_config()?;
    if let Some(s) = a.strategy {
        config.strategy = s;
    }
    if let Some(r) = a.reference {
        config.reference = r;
    }
    let image = io::read_png(&a.image)?;
    let mask = io::read_mask_png(&a.mask)?;
    let mut backend = backend::open(&config.backend)?;
    let art = crate::execute(backend.as_mut(), &image, &mask, &config, "cli")?;
    io::write_bytes(&a.out, &art.result_png)?;
    match (&a.curves, art.curves.is_empty()) {
        (Some(path), false) => io::write_bytes(path, art.curves_jsonl().as_bytes())?,
        (Some(_), true) => eprintln!("note: strategy `{}` records no presence curves", config.strategy),
        (None, _) => {}
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> ServiceResult<()> {
    let base = a.run.base_config()?;
    let items = discover_corpus(&a.corpus)?;
    let external = a.metrics.as_deref().map(read_external_metrics).transpose()?;
    let strategies = a.strategies.unwrap_or_else(|| StrategyKind::ALL.to_vec());
    let references = a.references.unwrap_or_else(|| vec![ReferenceScheme::Matched]);
    let report = run_sweep(
        &items,
        &Sweep {
            base: &base,
            strategies: &strategies,
            references: &references,
            external: external.as_ref(),
        },
    )?;
    let (csv, json) = write_report(&report, &a.out)?;
    eprintln!("{} rows -> {}, {}", report.rows.len(), csv.display(), json.display());
    Ok(())
}

fn serve(a: ServeArgs) -> ServiceResult<()> {
    let _ = tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .try_init();
    let service = Arc::new(JobService::start(&a.data, ServiceOptions { workers: a.workers })?);
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| ServiceError::io(Path::new("<runtime>"), e))?;
    runtime
        .block_on(crate::http::serve(service, a.addr))
        .map_err(|e| ServiceError::io(Path::new(&a.addr.to_string()), e))
}

fn verify(a: VerifyArgs) -> ServiceResult<i32> {
    let mut opts = VerifyOptions {
        seed: a.seed,
        ..VerifyOptions::default()
    };
    if a.quick {
        opts.grid_points = 1000;
        opts.noise_dim = 2048;
        opts.noise_trials = 500;
        opts.curve_steps = 20;
    }
    let report = run_verification(&opts)?;
    print!("{}", report.to_text());
    if let Some(path) = &a.json {
        io::write_bytes(path, report.to_json().as_bytes())?;
    }
    Ok(if report.passed() { 0 } else { 1 })
}
