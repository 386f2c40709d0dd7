use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use pcqa_core::config::PipelineConfig;
use pcqa_core::evaluation::{evaluate_model, scatter_csv};
use pcqa_core::io::{load_manifest, read_ply_file};
use pcqa_core::model::QualityModel;
use pcqa_core::pipeline::{default_cache_dir, run_stages, GraphCache};
use pcqa_core::training::{train, Predictor, SplitPart};

/// No-reference point cloud quality assessment.
#[derive(Debug, Parser)]
#[command(name = "pcqa", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// TOML pipeline config; omitted keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overrides `[training] seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Graph cache directory (default: $PCQA_CACHE_DIR, else a temp dir).
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    /// Rebuild graphs without reading or writing the cache.
    #[arg(long, global = true)]
    no_cache: bool,
    /// Log progress to stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Per-point perceptual features as CSV.
    Extract {
        #[arg(long)]
        cloud: PathBuf,
        /// Output file (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Builds the cluster graph of a cloud, caching it for `train`.
    Graph {
        #[arg(long)]
        cloud: PathBuf,
        /// Write the graph JSON here (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Trains on a manifest and writes the best checkpoint.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Report path (default: `<checkpoint>.report.json`).
        #[arg(long)]
        report: Option<PathBuf>,
        /// Overrides `[training] epochs`.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Scores one cloud.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cloud: PathBuf,
    },
    /// Scores a manifest split and reports PLCC, SRCC, KRCC and RMSE.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
        /// Write `pred,mapped_pred,mos` rows here.
        #[arg(long)]
        scatter: Option<PathBuf>,
    },
    /// Prints the architecture and the effective config.
    ModelInfo,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Table,
}

/// Usage errors exit 1, data and pipeline errors 2.
enum Failure {
    Usage(String),
    Data(String),
}

impl From<pcqa_core::Error> for Failure {
    fn from(e: pcqa_core::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.global.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Outcome {
    let g = &cli.global;
    if let Some(n) = g.threads {
        if n == 0 {
            return Err(Failure::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    let cache = if g.no_cache {
        GraphCache::disabled()
    } else {
        GraphCache::new(default_cache_dir(g.cache_dir.as_deref()))
    };

    match &cli.command {
        Command::Extract { cloud, out } => {
            let config = effective_config(g, None)?;
            let pc = read_ply_file(cloud)?;
            let stages = run_stages(&pc, &config.graph_settings()).map_err(|e| Failure::Data(format!("{}: {e}", cloud.display())))?;
            let f = &stages.features;
            let mut csv = String::from("x,y,z,l,a,b,curvature,saliency,cluster\n");
            for (i, p) in pc.positions.iter().enumerate() {
                let [l, a, b] = f.lab[i];
                csv.push_str(&format!(
                    "{},{},{},{l},{a},{b},{},{},{}\n",
                    p[0], p[1], p[2], f.curvature[i], f.saliency[i], stages.clusters.assignments[i]
                ));
            }
            log::info!("{} points, scales {:?}", pc.len(), f.scales);
            emit(out.as_deref(), csv.as_bytes())
        }
        Command::Graph { cloud, out } => {
            let config = effective_config(g, None)?;
            let graph = cache.graph_for(cloud, &config.graph_settings())?;
            log::info!("{} nodes, {} isolated", graph.k, graph.isolated_nodes.len());
            let mut json = serde_json::to_string(&graph).map_err(|e| Failure::Data(e.to_string()))?;
            json.push('\n');
            emit(out.as_deref(), json.as_bytes())
        }
        Command::Train {
            manifest,
            checkpoint,
            report,
            epochs,
        } => {
            let mut config = effective_config(g, None)?;
            if let Some(e) = epochs {
                config.training.epochs = *e;
            }
            config.validate()?;
            let m = load_manifest(manifest)?;
            let r = train(&m, &config, checkpoint, &cache)?;
            log::info!("trained in {:.1} s", r.wall_clock_seconds);
            let json = r.to_json();
            let report = report.clone().unwrap_or_else(|| {
                let mut p = checkpoint.clone().into_os_string();
                p.push(".report.json");
                PathBuf::from(p)
            });
            write_file(&report, json.as_bytes())?;
            emit(None, json.as_bytes())
        }
        Command::Predict { checkpoint, cloud } => {
            let predictor = Predictor::load(checkpoint)?;
            check_config(g, &predictor)?;
            let score = predictor.predict_cloud(cloud, &cache)?;
            emit(None, format!("score={score}\n").as_bytes())
        }
        Command::Evaluate {
            checkpoint,
            manifest,
            split,
            format,
            scatter,
        } => {
            let predictor = Predictor::load(checkpoint)?;
            check_config(g, &predictor)?;
            let m = load_manifest(manifest)?;
            let part = match split {
                Split::Train => SplitPart::Train,
                Split::Val => SplitPart::Val,
                Split::Test => SplitPart::Test,
                Split::All => SplitPart::All,
            };
            let ev = evaluate_model(&predictor, &m, part, &cache)?;
            if let Some(path) = scatter {
                write_file(path, scatter_csv(&ev.pred, &ev.report, &ev.mos).as_bytes())?;
            }
            let text = match format {
                Format::Json => {
                    let mut s = serde_json::to_string_pretty(&ev.report).map_err(|e| Failure::Data(e.to_string()))?;
                    s.push('\n');
                    s
                }
                Format::Table => ev.report.to_table(),
            };
            emit(None, text.as_bytes())
        }
        Command::ModelInfo => {
            let config = effective_config(g, None)?;
            let model = QualityModel::new(config.model.clone(), config.training.seed)?;
            let text = format!("{}\n# effective config\n{}", model.describe(), config.to_toml());
            emit(None, text.as_bytes())
        }
    }
}

/// Defaults, then the config file (or `base`), then flags.
fn effective_config(g: &Global, base: Option<&PipelineConfig>) -> Result<PipelineConfig, Failure> {
    let mut config = match (&g.config, base) {
        (Some(path), _) => PipelineConfig::load(path)?,
        (None, Some(b)) => b.clone(),
        (None, None) => PipelineConfig::default(),
    };
    if let Some(seed) = g.seed {
        config.training.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

/// A config given alongside a checkpoint must build the same graphs.
fn check_config(g: &Global, predictor: &Predictor) -> Outcome {
    if g.config.is_some() {
        let config = effective_config(g, Some(&predictor.meta.config))?;
        predictor.check_settings(&config.graph_settings())?;
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Outcome {
    std::fs::write(path, bytes).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn emit(path: Option<&Path>, bytes: &[u8]) -> Outcome {
    match path {
        Some(p) => write_file(p, bytes),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(bytes)
                .and_then(|_| out.flush())
                .map_err(|e| Failure::Data(format!("stdout: {e}")))
        }
    }
}
