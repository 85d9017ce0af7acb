//! The `fit`, `encode` and `analyze` stages.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use dsu_core::analysis::{self, PooledSegment};
use dsu_core::data::{self, UtteranceManifest};
use dsu_core::kmeans::{fit_kmeans, KMeansParams};
use dsu_core::preprocess::PreprocessKind;
use dsu_core::units::{self, BpeModel, UnitSequence};
use dsu_core::{FeatureMatrix, KMeansModel, Transform};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{FitOn, PipelineConfig};
use crate::error::{CliError, Result, StageExt};

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| dsu_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    });
    Ok(sha256_hex(&bytes.stage("digest")?))
}

pub(crate) fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents)
        .map_err(|e| dsu_core::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
        .stage("write")
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path)
        .map_err(|e| dsu_core::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
        .stage("write")
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable report");
    s.push('\n');
    s
}

#[derive(Serialize)]
struct InputDigest {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config: &'a BTreeMap<String, String>,
    config_sha256: String,
    inputs: Vec<InputDigest>,
    outputs: Vec<String>,
    stats: BTreeMap<&'a str, f64>,
}

fn write_run_manifest(
    cfg: &PipelineConfig,
    command: &str,
    manifest: &UtteranceManifest,
    outputs: &[PathBuf],
    stats: BTreeMap<&str, f64>,
) -> Result<()> {
    let mut inputs = vec![InputDigest {
        path: cfg.manifest.display().to_string(),
        sha256: file_digest(&cfg.manifest)?,
    }];
    for e in manifest.entries.iter().filter(|e| e.frames > 0) {
        inputs.push(InputDigest {
            path: e.path.display().to_string(),
            sha256: file_digest(&e.path)?,
        });
    }
    if let Some(l) = &cfg.labels {
        inputs.push(InputDigest {
            path: l.display().to_string(),
            sha256: file_digest(l)?,
        });
    }
    let run = RunManifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed: cfg.seed,
        config: &cfg.raw,
        config_sha256: sha256_hex(cfg.canonical().as_bytes()),
        inputs,
        outputs: outputs
            .iter()
            .map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned())
            .collect(),
        stats,
    };
    write_file(&cfg.out_dir.join(format!("run_{command}.json")), to_json(&run))
}

fn load_corpus(cfg: &PipelineConfig) -> Result<(UtteranceManifest, Vec<Option<FeatureMatrix>>)> {
    let manifest = UtteranceManifest::read(&cfg.manifest).stage("manifest")?;
    if manifest.is_empty() {
        return Err(CliError::Stage {
            stage: "manifest",
            source: dsu_core::Error::Data("manifest lists no utterances".into()),
        });
    }
    let features = manifest.load_features().stage("features")?;
    Ok((manifest, features))
}

fn load_transform(cfg: &PipelineConfig) -> Result<Option<Transform>> {
    if cfg.preprocessing == PreprocessKind::None {
        return Ok(None);
    }
    let path = cfg.transform_path();
    if !path.is_file() {
        return Err(CliError::config(format!(
            "preprocessing is {} but {} is missing; run `dsu fit` first",
            cfg.preprocessing,
            path.display()
        )));
    }
    let t = Transform::load(&path).stage("transform")?;
    if t.kind() != cfg.preprocessing {
        return Err(CliError::config(format!(
            "{} holds a {} transform but preprocessing is {}",
            path.display(),
            t.kind(),
            cfg.preprocessing
        )));
    }
    Ok(Some(t))
}

fn load_model(cfg: &PipelineConfig) -> Result<KMeansModel> {
    let path = cfg.model_path();
    if !path.is_file() {
        return Err(CliError::config(format!(
            "{} is missing; run `dsu fit` first",
            path.display()
        )));
    }
    let model = KMeansModel::load(&path).stage("model")?;
    if model.metric() != cfg.metric {
        return Err(CliError::config(format!(
            "model uses the {} metric but metric is {}",
            model.metric(),
            cfg.metric
        )));
    }
    Ok(model)
}

fn apply(t: Option<&Transform>, x: FeatureMatrix) -> Result<FeatureMatrix> {
    match t {
        Some(t) => t.apply(&x).stage("transform"),
        None => Ok(x),
    }
}

/// Samples frames, fits the optional transform and the k-means model.
pub fn fit(cfg: &PipelineConfig) -> Result<()> {
    cfg.check_inputs()?;
    let (manifest, features) = load_corpus(cfg)?;
    let parts: Vec<FeatureMatrix> = features.into_iter().flatten().collect();
    let all = FeatureMatrix::concat(&parts).stage("features")?;
    drop(parts);
    let sample = data::sample_frames(&all, cfg.sample_fraction, cfg.seed).stage("sample")?;
    eprintln!(
        "fit: {} utterances, {} frames, {} sampled, dim {}",
        manifest.len(),
        all.rows(),
        sample.rows(),
        all.cols()
    );

    let fit_data = match cfg.fit_on {
        FitOn::Sample => &sample,
        FitOn::Full => &all,
    };
    let transform = Transform::fit(cfg.preprocessing, fit_data, cfg.ica_iters).stage("preprocess")?;
    let train = apply(transform.as_ref(), sample)?;
    drop(all);

    let params = KMeansParams {
        k: cfg.k,
        metric: cfg.metric,
        seed: cfg.seed,
        max_iters: cfg.max_iters,
        tol: cfg.tol,
    };
    let model = fit_kmeans(&train, &params).stage("kmeans")?;

    create_dir(&cfg.out_dir)?;
    let mut outputs = Vec::new();
    let tpath = cfg.transform_path();
    match &transform {
        Some(t) => {
            t.save(&tpath).stage("write")?;
            outputs.push(tpath);
        }
        None => {
            if tpath.exists() {
                fs::remove_file(&tpath)
                    .map_err(|e| dsu_core::Error::Io { path: tpath.clone(), source: e })
                    .stage("write")?;
            }
        }
    }
    let mpath = cfg.model_path();
    model.save(&mpath).stage("write")?;
    outputs.push(mpath);

    let mut stats = BTreeMap::new();
    stats.insert("sample_frames", train.rows() as f64);
    stats.insert("dim", train.cols() as f64);
    stats.insert("k", model.k() as f64);
    write_run_manifest(cfg, "fit", &manifest, &outputs, stats)?;
    eprintln!("fit: wrote {}", cfg.out_dir.display());
    Ok(())
}

#[derive(Serialize)]
struct UtteranceRate {
    id: String,
    units: usize,
    duration_s: f64,
    bitrate: f64,
}

#[derive(Serialize)]
pub(crate) struct BitrateReport {
    vocab_size: usize,
    mean: f64,
    per_utterance: Vec<UtteranceRate>,
}

pub(crate) fn bitrate_report(seqs: &[UnitSequence], vocab_size: usize) -> Result<BitrateReport> {
    let per_utterance = seqs
        .iter()
        .map(|s| {
            Ok(UtteranceRate {
                id: s.id.clone(),
                units: s.len(),
                duration_s: s.duration_s,
                bitrate: units::utterance_bitrate(s.len(), vocab_size, s.duration_s)?,
            })
        })
        .collect::<dsu_core::Result<Vec<_>>>()
        .stage("bitrate")?;
    let mean = units::bitrate(seqs, vocab_size).stage("bitrate")?;
    Ok(BitrateReport {
        vocab_size,
        mean,
        per_utterance,
    })
}

pub(crate) fn bitrate_json(report: &BitrateReport) -> String {
    to_json(report)
}

fn unit_file(seqs: &[UnitSequence]) -> String {
    seqs.iter()
        .map(|s| units::format_unit_line(&s.id, &s.units) + "\n")
        .collect()
}

/// Assigns units to every utterance, deduplicates, applies BPE and reports
/// the bit-rate.
pub fn encode(cfg: &PipelineConfig) -> Result<()> {
    cfg.check_inputs()?;
    let transform = load_transform(cfg)?;
    let model = load_model(cfg)?;
    let (manifest, features) = load_corpus(cfg)?;

    let raw: Vec<UnitSequence> = manifest
        .entries
        .par_iter()
        .zip(features.into_par_iter())
        .map(|(entry, feats)| -> Result<UnitSequence> {
            let ids = match feats {
                Some(x) => {
                    let y = apply(transform.as_ref(), x)?;
                    model.assign(&y).stage("assign")?.into_iter().map(|c| c as u32).collect()
                }
                None => Vec::new(),
            };
            Ok(UnitSequence::new(entry.id.clone(), ids, entry.duration_s))
        })
        .collect::<Result<_>>()?;
    let deduped: Vec<UnitSequence> = raw.iter().map(units::deduplicate).collect();

    create_dir(&cfg.out_dir)?;
    let mut outputs = Vec::new();
    let raw_path = cfg.out_dir.join("units_raw.txt");
    write_file(&raw_path, unit_file(&raw))?;
    outputs.push(raw_path);
    let dedup_path = cfg.out_dir.join("units_dedup.txt");
    write_file(&dedup_path, unit_file(&deduped))?;
    outputs.push(dedup_path);

    let bpe = match &cfg.bpe_model {
        Some(p) => {
            let m = BpeModel::load(p).stage("bpe")?;
            if (m.base_vocab() as usize) < model.k() {
                return Err(CliError::config(format!(
                    "BPE model base vocabulary {} is smaller than k = {}",
                    m.base_vocab(),
                    model.k()
                )));
            }
            m
        }
        None => {
            let m = units::fit_bpe(
                deduped.iter().map(|s| s.units.as_slice()),
                model.k() as u32,
                cfg.bpe_vocab,
            )
            .stage("bpe")?;
            let p = cfg.out_dir.join("bpe.txt");
            m.save(&p).stage("write")?;
            outputs.push(p);
            m
        }
    };
    let encoded: Vec<UnitSequence> = deduped
        .par_iter()
        .map(|s| bpe.encode(s))
        .collect::<dsu_core::Result<_>>()
        .stage("bpe")?;
    let units_path = cfg.out_dir.join("units.txt");
    write_file(&units_path, unit_file(&encoded))?;
    outputs.push(units_path);

    let report = bitrate_report(&encoded, bpe.vocab_size())?;
    let rate_path = cfg.out_dir.join("bitrate.json");
    write_file(&rate_path, bitrate_json(&report))?;
    outputs.push(rate_path);

    let mut stats = BTreeMap::new();
    stats.insert("bitrate_mean", report.mean);
    stats.insert("vocab_size", bpe.vocab_size() as f64);
    stats.insert("bpe_merges", bpe.merges().count() as f64);
    write_run_manifest(cfg, "encode", &manifest, &outputs, stats)?;
    eprintln!(
        "encode: {} utterances, vocab {}, mean bit-rate {:.3} bit/s",
        encoded.len(),
        bpe.vocab_size(),
        report.mean
    );
    Ok(())
}

#[derive(Serialize)]
struct AnalysisSummary {
    k: usize,
    metric: String,
    pairs: u64,
    mean_similarity: f64,
    neighbors: Option<NeighborSummary>,
    extremes: Option<NeighborSummary>,
}

#[derive(Serialize)]
struct NeighborSummary {
    lists: usize,
    pure: usize,
    size: usize,
}

fn transform_pool(t: Option<&Transform>, pool: &[PooledSegment]) -> Result<Vec<PooledSegment>> {
    let Some(t) = t else {
        return Ok(pool.to_vec());
    };
    if pool.is_empty() {
        return Ok(Vec::new());
    }
    let rows: Vec<&[f64]> = pool.iter().map(|p| p.vector.as_slice()).collect();
    let x = FeatureMatrix::from_rows(&rows).stage("analysis")?;
    let y = t.apply(&x).stage("transform")?;
    Ok(pool
        .iter()
        .zip(y.row_iter())
        .map(|(p, v)| PooledSegment {
            label: p.label.clone(),
            vector: v.to_vec(),
        })
        .collect())
}

/// Centroid similarity histogram plus, when labels are configured, neighbor
/// lists and ICA component extremes.
pub fn analyze(cfg: &PipelineConfig) -> Result<()> {
    cfg.check_inputs()?;
    let transform = load_transform(cfg)?;
    let model = load_model(cfg)?;
    create_dir(&cfg.out_dir)?;

    let hist = analysis::centroid_similarity(&model, cfg.bins).stage("analysis")?;
    write_file(&cfg.out_dir.join("similarity.csv"), hist.to_csv())?;

    let mut summary = AnalysisSummary {
        k: model.k(),
        metric: model.metric().to_string(),
        pairs: hist.total(),
        mean_similarity: hist.mean_similarity,
        neighbors: None,
        extremes: None,
    };

    match &cfg.labels {
        None => eprintln!("analyze: no labels configured; skipping neighbor and extreme lists"),
        Some(path) => {
            let labels = data::read_labels(path).stage("labels")?;
            let (manifest, features) = load_corpus(cfg)?;
            let by_id: HashMap<String, FeatureMatrix> = manifest
                .entries
                .iter()
                .zip(features)
                .filter_map(|(e, f)| f.map(|f| (e.id.clone(), f)))
                .collect();
            let pool = analysis::pooled_segments(&by_id, &labels).stage("labels")?;

            let mapped = transform_pool(transform.as_ref(), &pool)?;
            let report = analysis::nearest_to_centroids(&model, &mapped, cfg.neighbors).stage("analysis")?;
            write_file(&cfg.out_dir.join("neighbors.csv"), report.to_csv())?;
            summary.neighbors = Some(NeighborSummary {
                lists: report.entries.len(),
                pure: report.pure_count(),
                size: cfg.neighbors,
            });

            match &transform {
                Some(Transform::Ica(ica)) => {
                    let ext = analysis::component_extremes(ica, &pool, cfg.extremes).stage("analysis")?;
                    write_file(&cfg.out_dir.join("extremes.csv"), ext.to_csv())?;
                    summary.extremes = Some(NeighborSummary {
                        lists: ext.entries.len(),
                        pure: ext.pure_count(),
                        size: cfg.extremes,
                    });
                }
                _ => eprintln!("analyze: no ICA transform; skipping component extremes"),
            }
        }
    }

    write_file(&cfg.out_dir.join("analysis.json"), to_json(&summary))?;
    eprintln!(
        "analyze: mean centroid cosine similarity {:.4} over {} pairs",
        summary.mean_similarity, summary.pairs
    );
    Ok(())
}
