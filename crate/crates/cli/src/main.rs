//! `dsu`: discrete speech unit extraction from frame-level features.

mod config;
mod convert;
mod error;
mod pipeline;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dsu_core::data::{self, UtteranceManifest};
use dsu_core::units::{self, BpeModel, UnitSequence};

use config::PipelineConfig;
use error::{CliError, Result, StageExt};

#[derive(Parser)]
#[command(name = "dsu", version, about = "Discrete speech unit extraction", args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the preprocessing transform and k-means model.
    Fit(ConfigArgs),
    /// Assign units, deduplicate, apply BPE and report the bit-rate.
    Encode(ConfigArgs),
    /// Centroid similarity, nearest neighbors and ICA component extremes.
    Analyze(ConfigArgs),
    /// Train a BPE model on a unit file.
    BpeTrain(BpeTrainArgs),
    /// Compute the bit-rate of a unit file.
    Bitrate(BitrateArgs),
    /// Convert a `.npy` or text matrix into the binary feature format.
    Convert(ConvertArgs),
}

/// Flags override keys from `--config`, which override the defaults.
#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    manifest: Option<String>,
    #[arg(long)]
    out_dir: Option<String>,
    /// none, std, pca, whiten or ica.
    #[arg(long)]
    preprocessing: Option<String>,
    /// euclidean or cosine.
    #[arg(long)]
    metric: Option<String>,
    #[arg(short, long)]
    k: Option<String>,
    #[arg(long)]
    sample_fraction: Option<String>,
    #[arg(long)]
    ica_iters: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    bpe_vocab: Option<String>,
    #[arg(long)]
    max_iters: Option<String>,
    #[arg(long)]
    tol: Option<String>,
    /// sample or full.
    #[arg(long)]
    fit_on: Option<String>,
    /// Worker threads; 0 uses all cores.
    #[arg(long)]
    threads: Option<String>,
    #[arg(long)]
    labels: Option<String>,
    #[arg(long)]
    bpe_model: Option<String>,
    #[arg(long)]
    bins: Option<String>,
    #[arg(long)]
    neighbors: Option<String>,
    #[arg(long)]
    extremes: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut overrides = Vec::new();
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            overrides.push((k.trim().to_string(), v.trim().to_string()));
        }
        let flags = [
            ("manifest", &self.manifest),
            ("out_dir", &self.out_dir),
            ("preprocessing", &self.preprocessing),
            ("metric", &self.metric),
            ("k", &self.k),
            ("sample_fraction", &self.sample_fraction),
            ("ica_iters", &self.ica_iters),
            ("seed", &self.seed),
            ("bpe_vocab", &self.bpe_vocab),
            ("max_iters", &self.max_iters),
            ("tol", &self.tol),
            ("fit_on", &self.fit_on),
            ("threads", &self.threads),
            ("labels", &self.labels),
            ("bpe_model", &self.bpe_model),
            ("bins", &self.bins),
            ("neighbors", &self.neighbors),
            ("extremes", &self.extremes),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                overrides.push((k.to_string(), v.clone()));
            }
        }
        PipelineConfig::resolve(self.config.as_deref(), &overrides)
    }
}

#[derive(Args)]
struct BpeTrainArgs {
    /// Unit file (`id<TAB>u1 u2 ...`).
    #[arg(long)]
    units: PathBuf,
    /// Number of base unit ids (k).
    #[arg(long)]
    base_vocab: u32,
    /// Target vocabulary size including the base units.
    #[arg(long, default_value_t = units::DEFAULT_BPE_VOCAB)]
    vocab_size: usize,
    /// Train on the sequences as given instead of deduplicating them first.
    #[arg(long)]
    no_dedup: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BitrateArgs {
    /// Unit file (`id<TAB>u1 u2 ...`).
    #[arg(long)]
    units: PathBuf,
    /// Utterance manifest supplying durations.
    #[arg(long)]
    manifest: PathBuf,
    /// Vocabulary size; taken from `--bpe-model` when omitted.
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    bpe_model: Option<PathBuf>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ConvertArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// npy or text; inferred from the input extension when omitted.
    #[arg(long)]
    format: Option<String>,
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| dsu_core::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
        .stage("read")
}

fn with_threads(threads: usize, f: impl FnOnce() -> Result<()> + Send) -> Result<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::config(format!("cannot start {threads} threads: {e}")))?;
    pool.install(f)
}

fn run_pipeline(args: &ConfigArgs, stage: fn(&PipelineConfig) -> Result<()>) -> Result<()> {
    let cfg = args.resolve()?;
    with_threads(cfg.threads, || stage(&cfg))
}

fn bpe_train(args: &BpeTrainArgs) -> Result<()> {
    let parsed = units::parse_unit_file(&read_text(&args.units)?).stage("units")?;
    let corpus: Vec<Vec<u32>> = parsed
        .into_iter()
        .map(|(id, u)| {
            let s = UnitSequence::new(id, u, 1.0);
            if args.no_dedup { s.units } else { units::deduplicate(&s).units }
        })
        .collect();
    let model = units::fit_bpe(corpus.iter().map(Vec::as_slice), args.base_vocab, args.vocab_size).stage("bpe")?;
    model.save(&args.out).stage("write")?;
    eprintln!(
        "bpe-train: {} merges, vocabulary {}",
        model.merges().count(),
        model.vocab_size()
    );
    Ok(())
}

fn bitrate(args: &BitrateArgs) -> Result<()> {
    let vocab = match (args.vocab_size, &args.bpe_model) {
        (Some(v), _) => v,
        (None, Some(p)) => BpeModel::load(p).stage("bpe")?.vocab_size(),
        (None, None) => return Err(CliError::config("pass --vocab-size or --bpe-model")),
    };
    let manifest = UtteranceManifest::read(&args.manifest).stage("manifest")?;
    let parsed = units::parse_unit_file(&read_text(&args.units)?).stage("units")?;
    let durations: std::collections::HashMap<&str, f64> = manifest
        .entries
        .iter()
        .map(|e| (e.id.as_str(), e.duration_s))
        .collect();
    let seqs = parsed
        .into_iter()
        .map(|(id, u)| {
            let d = *durations.get(id.as_str()).ok_or_else(|| CliError::Stage {
                stage: "bitrate",
                source: dsu_core::Error::Data(format!("utterance {id:?} is not in the manifest")),
            })?;
            Ok(UnitSequence::new(id, u, d))
        })
        .collect::<Result<Vec<_>>>()?;
    let report = pipeline::bitrate_report(&seqs, vocab)?;
    let json = pipeline::bitrate_json(&report);
    match &args.out {
        Some(p) => pipeline::write_file(p, json),
        None => {
            print!("{json}");
            Ok(())
        }
    }
}

fn convert(args: &ConvertArgs) -> Result<()> {
    let format = match &args.format {
        Some(f) => f.clone(),
        None => match args.input.extension().and_then(|e| e.to_str()) {
            Some("npy") => "npy".into(),
            _ => "text".into(),
        },
    };
    let m = match format.as_str() {
        "npy" => {
            let bytes = std::fs::read(&args.input)
                .map_err(|e| dsu_core::Error::Io {
                    path: args.input.clone(),
                    source: e,
                })
                .stage("read")?;
            convert::decode_npy(&bytes).stage("convert")?
        }
        "text" => convert::parse_text_matrix(&read_text(&args.input)?).stage("convert")?,
        other => return Err(CliError::config(format!("unknown format {other:?}; use npy or text"))),
    };
    data::write_matrix(&m, &args.output).stage("write")?;
    eprintln!("convert: {} x {} -> {}", m.rows(), m.cols(), args.output.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Fit(a) => run_pipeline(a, pipeline::fit),
        Command::Encode(a) => run_pipeline(a, pipeline::encode),
        Command::Analyze(a) => run_pipeline(a, pipeline::analyze),
        Command::BpeTrain(a) => bpe_train(a),
        Command::Bitrate(a) => bitrate(a),
        Command::Convert(a) => convert(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dsu: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
