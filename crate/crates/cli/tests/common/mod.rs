#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dsu_core::data::write_matrix;
use dsu_core::FeatureMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const DIM: usize = 6;

pub fn dsu(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsu"))
        .args(args)
        .output()
        .expect("dsu binary runs")
}

pub fn dsu_ok(args: &[&str]) -> Output {
    let out = dsu(args);
    assert!(
        out.status.success(),
        "dsu {:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Frames drawn around one of three well-separated class means.
fn class_mean(label: usize) -> [f64; DIM] {
    let mut m = [0.0; DIM];
    m[label] = 8.0;
    m[DIM - 1] = 2.0;
    m
}

pub const CLASSES: [&str; 3] = ["aa", "iy", "uw"];

/// Writes a labeled corpus: each utterance is a run of class segments with
/// anisotropic noise. Utterance `u_empty` has no frames.
pub struct Corpus {
    pub dir: PathBuf,
    pub manifest: PathBuf,
    pub labels: PathBuf,
    pub utterances: usize,
}

pub fn write_corpus(dir: &Path, utterances: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut manifest = String::new();
    let mut labels = String::new();
    let scale = [1.0, 0.7, 0.5, 0.3, 0.2, 0.1];
    for u in 0..utterances {
        let id = format!("utt{u:03}");
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for s in 0..6 {
            let label = (u + s) % CLASSES.len();
            let len = rng.random_range(5..15);
            let start = rows.len();
            for _ in 0..len {
                let mean = class_mean(label);
                rows.push(
                    (0..DIM)
                        .map(|d| {
                            let z: f64 = rng.sample(StandardNormal);
                            mean[d] + scale[d] * z
                        })
                        .collect(),
                );
            }
            labels.push_str(&format!("{id}\t{start}\t{}\t{}\n", rows.len(), CLASSES[label]));
        }
        let file = format!("{id}.dsuk");
        write_matrix(&FeatureMatrix::from_rows(&rows).unwrap(), dir.join(&file)).unwrap();
        manifest.push_str(&format!("{id}\t{file}\t{}\t{:.2}\n", rows.len(), rows.len() as f64 * 0.02));
    }
    manifest.push_str("u_empty\tmissing.dsuk\t0\t0.5\n");
    let manifest_path = dir.join("manifest.tsv");
    let labels_path = dir.join("labels.tsv");
    std::fs::write(&manifest_path, manifest).unwrap();
    std::fs::write(&labels_path, labels).unwrap();
    Corpus {
        dir: dir.to_path_buf(),
        manifest: manifest_path,
        labels: labels_path,
        utterances: utterances + 1,
    }
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}
