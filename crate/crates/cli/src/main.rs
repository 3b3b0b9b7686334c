//! `dkm`: cluster, compress and train with differentiable k-means from the shell.
//!
//! Exit codes: 0 on success, 1 on a usage error, 2 on a runtime error. Errors
//! are printed to stderr as a single line `error[<class>]: <message>`.

mod weights;

use weights::io_at as at;

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use dkm::compression::{empirical_entropy, reshape_to_subvectors, snap, CompressedLayer, CompressionReport};
use dkm::dkm::{dkm_forward, DkmConfig, Init, Metric};
use dkm::train::config::RunConfig;
use dkm::train::{evaluate, summarize, tau_search, train, Model, RunSummary, TrainLog};
use dkm::{DkmError, Result};

/// Seed used when `--seed` is not given.
const DEFAULT_SEED: u64 = 0;

#[derive(Debug, Parser)]
#[command(name = "dkm", version, about = "Differentiable k-means weight clustering")]
struct Cli {
    /// Seed for every randomized step.
    #[arg(long, global = true, default_value_t = DEFAULT_SEED)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Cluster a weight file once and report the codebook and assignments.
    Cluster {
        #[command(flatten)]
        clustering: ClusterArgs,
        /// Directory for codebook.csv, indices.txt and report.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cluster a weight file and store it as a .dkmz layer.
    Compress {
        #[command(flatten)]
        clustering: ClusterArgs,
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Decode a .dkmz layer back to a weight file.
    Decompress {
        input: PathBuf,
        /// Target weight file; the extension picks the format.
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Print the header and statistics of a .dkmz layer.
    Inspect { input: PathBuf },
    /// Train a model described by a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Directory for model.json, metrics.csv and summary.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a saved model on the config's validation split.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Search the clustering temperature by snapped validation accuracy.
    TauSearch {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        low: Option<f64>,
        #[arg(long)]
        high: Option<f64>,
        #[arg(long)]
        budget: Option<usize>,
        /// Optional file for the JSON result.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MetricArg {
    SquaredEuclidean,
    Euclidean,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum InitArg {
    KmeansPp,
    RandomSample,
}

#[derive(Debug, Args)]
struct ClusterArgs {
    /// Weight file (.f32/.bin raw little-endian f32, or .txt one value per line).
    #[arg(long)]
    weights: PathBuf,
    #[arg(long, short)]
    bits: u32,
    #[arg(long, short, default_value_t = 1)]
    dim: usize,
    #[arg(long)]
    tau: f64,
    #[arg(long, default_value_t = 1e-4)]
    epsilon: f64,
    #[arg(long, default_value_t = 5)]
    max_iter: usize,
    #[arg(long, value_enum, default_value_t = MetricArg::SquaredEuclidean)]
    metric: MetricArg,
    #[arg(long, value_enum, default_value_t = InitArg::KmeansPp)]
    init: InitArg,
}

impl ClusterArgs {
    fn config(&self) -> DkmConfig {
        let mut cfg = DkmConfig::new(self.bits, self.dim, self.tau);
        cfg.epsilon = self.epsilon;
        cfg.max_iterations = self.max_iter;
        cfg.metric = match self.metric {
            MetricArg::SquaredEuclidean => Metric::SquaredEuclidean,
            MetricArg::Euclidean => Metric::Euclidean,
        };
        cfg.init = match self.init {
            InitArg::KmeansPp => Init::KmeansPp,
            InitArg::RandomSample => Init::RandomSample,
        };
        cfg
    }
}

#[derive(Debug, Serialize)]
struct ClusterReport {
    bits: u32,
    dim: usize,
    original_length: usize,
    iterations_used: usize,
    converged: bool,
    final_delta: f64,
    codebook: Vec<Vec<f64>>,
    empirical_entropy: f64,
    /// Frobenius norm between the input and the snapped weights.
    reconstruction_error: f64,
}

struct Clustered {
    report: ClusterReport,
    layer: CompressedLayer,
    original: Vec<f32>,
    indices: Vec<usize>,
}

/// One DKM forward pass (no training) followed by snapping.
fn run_clustering(args: &ClusterArgs, seed: u64) -> Result<Clustered> {
    let cfg = args.config();
    cfg.validate()?;
    let original = weights::read(&args.weights)?;
    let flat: Vec<f64> = original.iter().map(|&v| v as f64).collect();
    let sub = reshape_to_subvectors(&flat, cfg.dim)?;
    let pass = dkm_forward(&sub, None, &cfg, seed)?;
    let codebook = &pass.output.codebook;
    let (indices, snapped) = snap(&sub, &pass.attention(), codebook)?;
    let err: f64 = flat.iter().zip(snapped.flatten()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let layer = CompressedLayer::from_clustering(&sub, codebook, &indices, cfg.bits)?;
    let t = &pass.output.telemetry;
    let report = ClusterReport {
        bits: cfg.bits,
        dim: cfg.dim,
        original_length: flat.len(),
        iterations_used: t.iterations_used,
        converged: t.converged,
        final_delta: t.final_delta,
        codebook: (0..codebook.k()).map(|j| codebook.row(j).to_vec()).collect(),
        empirical_entropy: empirical_entropy(&indices, cfg.bits)?,
        reconstruction_error: err,
    };
    Ok(Clustered { report, layer, original, indices })
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    writeln!(io::stdout().lock(), "{}", serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(at(path))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(at(path))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(at(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, serde_json::to_string_pretty(value)? + "\n")
}

fn load_config(path: &Path, seed: u64) -> Result<RunConfig> {
    let text = read_text(path)?;
    let mut cfg = RunConfig::from_toml_str(&text)?;
    cfg.train.seed = seed;
    Ok(cfg)
}

#[derive(Debug, Serialize)]
struct TrainReport {
    #[serde(flatten)]
    summary: RunSummary,
    /// Train-vs-inference Frobenius error per layer on the last batch.
    final_layer_errors: BTreeMap<String, f64>,
    /// Clustering iterations per layer on the last batch.
    final_layer_iterations: BTreeMap<String, usize>,
}

fn train_report(summary: RunSummary, log: &TrainLog) -> TrainReport {
    let last = log.batches.last();
    let mut errors = BTreeMap::new();
    let mut iterations = BTreeMap::new();
    if let Some(b) = last {
        for (i, name) in log.layer_names.iter().enumerate() {
            errors.insert(name.clone(), b.layer_errors[i]);
            iterations.insert(name.clone(), b.layer_iterations[i]);
        }
    }
    TrainReport { summary, final_layer_errors: errors, final_layer_iterations: iterations }
}

#[derive(Debug, Serialize)]
struct EvaluateReport {
    train_time_accuracy: f64,
    snapped_accuracy: f64,
}

#[derive(Debug, Serialize)]
struct InspectReport {
    bits: u8,
    dim: u16,
    original_length: u64,
    pad_count: u16,
    subvectors: usize,
    file_bytes: usize,
    effective_bits_per_weight: f64,
    compression_ratio_formula: f64,
    measured_ratio: f64,
    empirical_entropy: f64,
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Cluster { clustering, out } => {
            let c = run_clustering(&clustering, seed)?;
            if let Some(dir) = out {
                fs::create_dir_all(&dir).map_err(at(&dir))?;
                let codebook: String = c
                    .report
                    .codebook
                    .iter()
                    .map(|row| row.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(",") + "\n")
                    .collect();
                write_file(&dir.join("codebook.csv"), codebook)?;
                let indices: String = c.indices.iter().map(|i| format!("{i}\n")).collect();
                write_file(&dir.join("indices.txt"), indices)?;
                write_json(&dir.join("report.json"), &c.report)?;
            }
            print_json(&c.report)
        }
        Command::Compress { clustering, output } => {
            let c = run_clustering(&clustering, seed)?;
            write_file(&output, c.layer.to_bytes()?)?;
            print_json(&CompressionReport::for_layer(&c.layer, &c.original)?)
        }
        Command::Decompress { input, output } => {
            let layer = CompressedLayer::from_bytes(&read_bytes(&input)?)?;
            weights::write(&output, &layer.reconstruct())?;
            print_json(&serde_json::json!({
                "bits": layer.bits,
                "dim": layer.dim,
                "original_length": layer.original_length,
            }))
        }
        Command::Inspect { input } => {
            let bytes = read_bytes(&input)?;
            let layer = CompressedLayer::from_bytes(&bytes)?;
            let report = CompressionReport::for_layer(&layer, &layer.reconstruct())?;
            print_json(&InspectReport {
                bits: layer.bits,
                dim: layer.dim,
                original_length: layer.original_length,
                pad_count: layer.pad_count,
                subvectors: layer.subvector_count(),
                file_bytes: bytes.len(),
                effective_bits_per_weight: report.effective_bits_per_weight,
                compression_ratio_formula: report.compression_ratio_formula,
                measured_ratio: report.measured_ratio,
                empirical_entropy: report.empirical_entropy,
            })
        }
        Command::Train { config, out } => {
            let cfg = load_config(&config, seed)?;
            let data = cfg.data.make(seed)?;
            let model = cfg.model.build(seed)?;
            let (trained, log) = train(&model, &data, &cfg.train, cfg.mode)?;
            let summary = summarize(&trained, &log, &data.validation, &cfg.train, cfg.mode)?;
            fs::create_dir_all(&out).map_err(at(&out))?;
            write_file(&out.join("model.json"), trained.to_json()?)?;
            let metrics = out.join("metrics.csv");
            log.write_csv(fs::File::create(&metrics).map_err(at(&metrics))?)?;
            let report = train_report(summary, &log);
            write_json(&out.join("summary.json"), &report)?;
            print_json(&report)
        }
        Command::Evaluate { config, model } => {
            let cfg = load_config(&config, seed)?;
            let data = cfg.data.make(seed)?;
            let model = Model::from_json(&read_text(&model)?)?;
            print_json(&EvaluateReport {
                train_time_accuracy: evaluate(&model, &data.validation, false)?,
                snapped_accuracy: evaluate(&model, &data.validation, true)?,
            })
        }
        Command::TauSearch { config, low, high, budget, out } => {
            let cfg = load_config(&config, seed)?;
            let from_file = cfg.tau_search.clone();
            let pick = |flag: Option<f64>, file: Option<f64>, name: &str| {
                flag.or(file).ok_or_else(|| DkmError::Config(vec![format!("missing key `tau_search.{name}`")]))
            };
            let low = pick(low, from_file.as_ref().map(|t| t.low), "low")?;
            let high = pick(high, from_file.as_ref().map(|t| t.high), "high")?;
            let budget =
                pick(budget.map(|b| b as f64), from_file.as_ref().map(|t| t.budget as f64), "budget")? as usize;
            let data = cfg.data.make(seed)?;
            let result = tau_search(&cfg.model, &data, &cfg.train, cfg.mode, low, high, budget)?;
            if let Some(path) = out {
                write_json(&path, &result)?;
            }
            print_json(&result)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let rendered = e.render().to_string();
            let first = rendered.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            let msg = first.trim().trim_start_matches("error:").trim();
            eprintln!("error[usage]: {msg}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.class());
            ExitCode::from(2)
        }
    }
}
