//! Pipeline configuration: a flat `key = value` file, overridden by flags.
//!
//! Lines are `key = value`; `#` starts a comment. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dsu_core::kmeans::{DEFAULT_K, DEFAULT_MAX_ITERS, DEFAULT_TOL};
use dsu_core::preprocess::{PreprocessKind, DEFAULT_ICA_ITERS};
use dsu_core::units::DEFAULT_BPE_VOCAB;
use dsu_core::Metric;

use crate::error::{CliError, Result};

pub const KEYS: &[&str] = &[
    "preprocessing",
    "metric",
    "k",
    "sample_fraction",
    "ica_iters",
    "seed",
    "bpe_vocab",
    "manifest",
    "out_dir",
    "max_iters",
    "tol",
    "fit_on",
    "threads",
    "labels",
    "bpe_model",
    "bins",
    "neighbors",
    "extremes",
];

fn defaults() -> BTreeMap<String, String> {
    let pairs = [
        ("preprocessing", "none".to_string()),
        ("metric", "euclidean".to_string()),
        ("k", DEFAULT_K.to_string()),
        ("sample_fraction", "0.05".to_string()),
        ("ica_iters", DEFAULT_ICA_ITERS.to_string()),
        ("seed", "0".to_string()),
        ("bpe_vocab", DEFAULT_BPE_VOCAB.to_string()),
        ("out_dir", "dsu_out".to_string()),
        ("max_iters", DEFAULT_MAX_ITERS.to_string()),
        ("tol", DEFAULT_TOL.to_string()),
        ("fit_on", "sample".to_string()),
        ("threads", "0".to_string()),
        ("bins", dsu_core::analysis::DEFAULT_BINS.to_string()),
        ("neighbors", dsu_core::analysis::DEFAULT_NEIGHBORS.to_string()),
        ("extremes", dsu_core::analysis::DEFAULT_EXTREMES.to_string()),
    ];
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

/// Parses a `key = value` file body.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("line {}: expected key = value", i + 1)))?;
        let k = k.trim().to_string();
        check_key(&k)?;
        out.insert(k, v.trim().to_string());
    }
    Ok(out)
}

fn check_key(k: &str) -> Result<()> {
    if KEYS.contains(&k) {
        Ok(())
    } else {
        Err(CliError::config(format!("unknown config key {k:?}")))
    }
}

/// Where preprocessing statistics are estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitOn {
    Sample,
    Full,
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub preprocessing: PreprocessKind,
    pub metric: Metric,
    pub k: usize,
    pub sample_fraction: f64,
    pub ica_iters: usize,
    pub seed: u64,
    pub bpe_vocab: usize,
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
    pub max_iters: usize,
    pub tol: f64,
    pub fit_on: FitOn,
    pub threads: usize,
    pub labels: Option<PathBuf>,
    pub bpe_model: Option<PathBuf>,
    pub bins: usize,
    pub neighbors: usize,
    pub extremes: usize,
    /// The merged key/value view the typed fields were parsed from.
    pub raw: BTreeMap<String, String>,
}

fn parse<T: std::str::FromStr>(raw: &BTreeMap<String, String>, key: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    let v = raw
        .get(key)
        .ok_or_else(|| CliError::config(format!("missing required key {key:?}")))?;
    v.parse()
        .map_err(|e| CliError::config(format!("{key} = {v:?}: {e}")))
}

impl PipelineConfig {
    /// Layers defaults, the optional config file and flag overrides.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut raw = defaults();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
            let base = path.parent().unwrap_or(Path::new("."));
            for (k, v) in parse_kv(&text)? {
                let v = if matches!(k.as_str(), "manifest" | "out_dir" | "labels" | "bpe_model") {
                    resolve_path(base, &v)
                } else {
                    v
                };
                raw.insert(k, v);
            }
        }
        for (k, v) in overrides {
            check_key(k)?;
            raw.insert(k.clone(), v.clone());
        }
        Self::from_raw(raw)
    }

    pub fn from_raw(raw: BTreeMap<String, String>) -> Result<Self> {
        let fit_on = match raw.get("fit_on").map(String::as_str) {
            Some("sample") => FitOn::Sample,
            Some("full") => FitOn::Full,
            other => {
                return Err(CliError::config(format!(
                    "fit_on must be `sample` or `full`, got {other:?}"
                )))
            }
        };
        let opt_path = |k: &str| raw.get(k).filter(|v| !v.is_empty()).map(PathBuf::from);
        let cfg = PipelineConfig {
            preprocessing: parse(&raw, "preprocessing")?,
            metric: parse(&raw, "metric")?,
            k: parse(&raw, "k")?,
            sample_fraction: parse(&raw, "sample_fraction")?,
            ica_iters: parse(&raw, "ica_iters")?,
            seed: parse(&raw, "seed")?,
            bpe_vocab: parse(&raw, "bpe_vocab")?,
            manifest: opt_path("manifest")
                .ok_or_else(|| CliError::config("missing required key \"manifest\""))?,
            out_dir: parse(&raw, "out_dir")?,
            max_iters: parse(&raw, "max_iters")?,
            tol: parse(&raw, "tol")?,
            fit_on,
            threads: parse(&raw, "threads")?,
            labels: opt_path("labels"),
            bpe_model: opt_path("bpe_model"),
            bins: parse(&raw, "bins")?,
            neighbors: parse(&raw, "neighbors")?,
            extremes: parse(&raw, "extremes")?,
            raw,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(CliError::config("k must be at least 1"));
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return Err(CliError::config(format!(
                "sample_fraction must lie in (0, 1], got {}",
                self.sample_fraction
            )));
        }
        if self.ica_iters == 0 {
            return Err(CliError::config("ica_iters must be at least 1"));
        }
        if self.max_iters == 0 {
            return Err(CliError::config("max_iters must be at least 1"));
        }
        if self.tol.is_nan() || self.tol < 0.0 {
            return Err(CliError::config("tol must be non-negative"));
        }
        if self.bins == 0 || self.neighbors == 0 || self.extremes == 0 {
            return Err(CliError::config("bins, neighbors and extremes must be positive"));
        }
        Ok(())
    }

    /// Checks that every referenced input exists.
    pub fn check_inputs(&self) -> Result<()> {
        let mut inputs = vec![("manifest", &self.manifest)];
        if let Some(l) = &self.labels {
            inputs.push(("labels", l));
        }
        if let Some(b) = &self.bpe_model {
            inputs.push(("bpe_model", b));
        }
        for (key, path) in inputs {
            if !path.is_file() {
                return Err(CliError::config(format!(
                    "{key} path {} does not exist",
                    path.display()
                )));
            }
        }
        Ok(())
    }

    /// Canonical `key=value` text, one per line in key order.
    pub fn canonical(&self) -> String {
        self.raw.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn transform_path(&self) -> PathBuf {
        self.out_dir.join("transform.dsut")
    }

    pub fn model_path(&self) -> PathBuf {
        self.out_dir.join("kmeans.dsum")
    }
}

fn resolve_path(base: &Path, v: &str) -> String {
    let p = Path::new(v);
    if v.is_empty() || p.is_absolute() {
        v.to_string()
    } else {
        base.join(p).to_string_lossy().into_owned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_flags_over_file_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.conf");
        std::fs::write(&file, "# comment\nk = 50\nmetric = cosine\nmanifest = m.tsv\n").unwrap();
        let cfg = PipelineConfig::resolve(Some(&file), &[("k".into(), "7".into())]).unwrap();
        assert_eq!(cfg.k, 7);
        assert_eq!(cfg.metric, Metric::Cosine);
        assert_eq!(cfg.ica_iters, 100);
        assert_eq!(cfg.manifest, dir.path().join("m.tsv"));
    }

    #[test]
    fn rejects_bad_values() {
        let base = [("manifest".to_string(), "m".to_string())];
        let with = |k: &str, v: &str| {
            let mut o = base.to_vec();
            o.push((k.into(), v.into()));
            PipelineConfig::resolve(None, &o)
        };
        assert!(with("metric", "manhattan").is_err());
        assert!(with("preprocessing", "lda").is_err());
        assert!(with("sample_fraction", "0").is_err());
        assert!(with("nope", "1").is_err());
        assert!(PipelineConfig::resolve(None, &[]).is_err());
        assert!(parse_kv("k 5").is_err());
    }

    #[test]
    fn missing_manifest_is_config_error() {
        let cfg = PipelineConfig::resolve(None, &[("manifest".into(), "/no/such/file".into())]).unwrap();
        assert_eq!(cfg.check_inputs().unwrap_err().exit_code(), 2);
    }
}
