//! k-means under Euclidean distance and spherical k-means under cosine
//! distance, seeded with k-means++.
//!
//! Model files (`DSUM`) share the matrix header layout: magic, `u16`
//! version, `u16` metric code (1 Euclidean, 2 cosine), `u64` k, `u64` D,
//! then `k·D` row-major float64 centroids.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::container::{self, Reader, Writer};
use crate::data::FeatureMatrix;
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};

pub const MODEL_MAGIC: &[u8; 4] = b"DSUM";
pub const MODEL_VERSION: u16 = 1;

pub const DEFAULT_K: usize = 2000;
pub const DEFAULT_MAX_ITERS: usize = 300;
pub const DEFAULT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Metric {
    Euclidean,
    Cosine,
}

impl Metric {
    fn code(self) -> u16 {
        match self {
            Metric::Euclidean => 1,
            Metric::Cosine => 2,
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euclid" | "euclidean" => Ok(Metric::Euclidean),
            "cos" | "cosine" => Ok(Metric::Cosine),
            other => Err(Error::param(format!("unknown metric {other:?}"))),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Euclidean => "euclidean",
            Metric::Cosine => "cosine",
        })
    }
}

/// Squared Euclidean distance.
#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// L2-normalized copy of every row; zero rows are rejected by index.
pub fn normalize_rows(x: &FeatureMatrix) -> Result<FeatureMatrix> {
    let mut out = Vec::with_capacity(x.values().len());
    for (i, row) in x.row_iter().enumerate() {
        let n = linalg::norm(row);
        if n == 0.0 {
            return Err(Error::Data(format!(
                "row {i} has zero norm and cannot be used with the cosine metric"
            )));
        }
        out.extend(row.iter().map(|v| v / n));
    }
    Ok(FeatureMatrix::from_parts(x.rows(), x.cols(), out))
}

/// Distance of a prepared row (normalized for cosine) to a centroid.
#[inline]
fn distance(metric: Metric, row: &[f64], c: &[f64]) -> f64 {
    match metric {
        Metric::Euclidean => sq_dist(row, c),
        Metric::Cosine => (1.0 - linalg::dot(row, c)).max(0.0),
    }
}

/// Index of the closest centroid to a prepared row, with its distance.
/// Ties go to the lowest index.
fn nearest(metric: Metric, centroids: &Matrix, row: &[f64]) -> (usize, f64) {
    let mut best = 0;
    match metric {
        Metric::Euclidean => {
            let mut best_d = f64::INFINITY;
            for c in 0..centroids.rows() {
                let d = sq_dist(row, centroids.row(c));
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            (best, best_d)
        }
        Metric::Cosine => {
            let mut best_s = f64::NEG_INFINITY;
            for c in 0..centroids.rows() {
                let s = linalg::dot(row, centroids.row(c));
                if s > best_s {
                    best_s = s;
                    best = c;
                }
            }
            (best, (1.0 - best_s).max(0.0))
        }
    }
}

fn assign_prepared(metric: Metric, centroids: &Matrix, x: &FeatureMatrix) -> Vec<(usize, f64)> {
    x.values()
        .par_chunks(x.cols())
        .map(|row| nearest(metric, centroids, row))
        .collect()
}

/// A trained clustering: `k × D` centroids and their distance metric.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansModel {
    centroids: Matrix,
    metric: Metric,
}

impl KMeansModel {
    /// Wraps explicit centroids. Cosine centroids are L2-normalized.
    pub fn new(centroids: Matrix, metric: Metric) -> Result<Self> {
        if centroids.rows() == 0 || centroids.cols() == 0 {
            return Err(Error::param("model needs at least one centroid and dimension"));
        }
        if centroids.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite centroid value".into()));
        }
        let centroids = match metric {
            Metric::Euclidean => centroids,
            Metric::Cosine => {
                let (k, d) = (centroids.rows(), centroids.cols());
                let fm = FeatureMatrix::from_parts(k, d, centroids.into_vec());
                Matrix::from_vec(k, d, normalize_rows(&fm)?.into_values())?
            }
        };
        Ok(KMeansModel { centroids, metric })
    }

    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn centroids(&self) -> &Matrix {
        &self.centroids
    }

    pub fn centroid(&self, c: usize) -> &[f64] {
        self.centroids.row(c)
    }

    /// Distance from a raw frame to centroid `c` under the model's metric
    /// (squared Euclidean, or `1 − cos`).
    pub fn distance_to(&self, c: usize, frame: &[f64]) -> Result<f64> {
        match self.metric {
            Metric::Euclidean => Ok(sq_dist(frame, self.centroid(c))),
            Metric::Cosine => {
                let n = linalg::norm(frame);
                if n == 0.0 {
                    return Err(Error::Data("zero-norm frame under cosine metric".into()));
                }
                Ok((1.0 - linalg::dot(frame, self.centroid(c)) / n).max(0.0))
            }
        }
    }

    /// Cluster index of every frame: nearest centroid by squared Euclidean
    /// distance, or largest cosine similarity. Ties go to the lowest index.
    pub fn assign(&self, x: &FeatureMatrix) -> Result<Vec<usize>> {
        x.check_cols(self.dim())?;
        let prepared;
        let data = match self.metric {
            Metric::Euclidean => x,
            Metric::Cosine => {
                prepared = normalize_rows(x)?;
                &prepared
            }
        };
        Ok(assign_prepared(self.metric, &self.centroids, data)
            .into_iter()
            .map(|(c, _)| c)
            .collect())
    }

    pub fn assign_one(&self, frame: &[f64]) -> Result<usize> {
        let x = FeatureMatrix::new(1, frame.len(), frame.to_vec())?;
        Ok(self.assign(&x)?[0])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MODEL_MAGIC, MODEL_VERSION);
        w.u16(self.metric.code());
        w.u64(self.k() as u64);
        w.u64(self.dim() as u64);
        w.f64s(self.centroids.as_slice());
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let version = r.header(MODEL_MAGIC)?;
        if version != MODEL_VERSION {
            return Err(Error::format(4, format!("unsupported model version {version}")));
        }
        let metric = match r.u16("metric")? {
            1 => Metric::Euclidean,
            2 => Metric::Cosine,
            other => return Err(Error::format(6, format!("unknown metric code {other}"))),
        };
        let k = container::dim(r.u64("k")?, 8, "k")?;
        let d = container::dim(r.u64("dimension")?, 16, "dimension")?;
        let n = container::product(k, d, 8)?;
        if r.remaining() != n * 8 {
            return Err(Error::format(
                r.offset(),
                format!(
                    "centroid payload length mismatch: expected {} bytes, found {}",
                    n * 8,
                    r.remaining()
                ),
            ));
        }
        let values = r.f64s(n, "centroids")?;
        Ok(KMeansModel {
            centroids: Matrix::from_vec(k, d, values)?,
            metric,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&container::read_file(path.as_ref())?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansParams {
    pub k: usize,
    pub metric: Metric,
    pub seed: u64,
    pub max_iters: usize,
    /// Convergence threshold on the largest centroid movement, relative to
    /// the RMS distance of the data from its mean.
    pub tol: f64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        KMeansParams {
            k: DEFAULT_K,
            metric: Metric::Euclidean,
            seed: 0,
            max_iters: DEFAULT_MAX_ITERS,
            tol: DEFAULT_TOL,
        }
    }
}

/// Result of a Lloyd run.
#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub model: KMeansModel,
    /// Final assignment of every training frame against the final centroids.
    pub assignments: Vec<usize>,
    /// Inertia of each assignment step against the centroids that produced
    /// it, followed by the inertia of the final assignment. The first entry
    /// is the inertia of the initialization.
    pub inertia: Vec<f64>,
    /// Number of centroid updates performed.
    pub iterations: usize,
    /// Assignment after each assignment step, if requested.
    pub history: Option<Vec<Vec<usize>>>,
}

/// Row indices chosen by k-means++ seeding under `metric`.
///
/// For the cosine metric, distances are `1 − cos` between normalized rows.
/// Fails when fewer than `k` distinct points (directions) exist.
pub fn kmeans_plus_plus(x: &FeatureMatrix, k: usize, metric: Metric, seed: u64) -> Result<Vec<usize>> {
    check_k(x, k)?;
    let prepared;
    let data = match metric {
        Metric::Euclidean => x,
        Metric::Cosine => {
            prepared = normalize_rows(x)?;
            &prepared
        }
    };
    plus_plus_prepared(data, k, metric, seed)
}

fn check_k(x: &FeatureMatrix, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::param("k must be at least 1"));
    }
    if k > x.rows() {
        return Err(Error::param(format!(
            "k = {k} exceeds the number of frames {}",
            x.rows()
        )));
    }
    Ok(())
}

fn plus_plus_prepared(x: &FeatureMatrix, k: usize, metric: Metric, seed: u64) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = x.rows();
    let first = rng.random_range(0..t);
    let mut chosen = vec![first];
    let mut d: Vec<f64> = x
        .values()
        .par_chunks(x.cols())
        .map(|row| distance(metric, row, x.row(first)))
        .collect();
    while chosen.len() < k {
        let total: f64 = d.iter().sum();
        if total.is_nan() || total <= 0.0 {
            return Err(Error::Data(format!(
                "fewer than k = {k} distinct points; only {} could be seeded",
                chosen.len()
            )));
        }
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &di) in d.iter().enumerate() {
            if di <= 0.0 {
                continue;
            }
            acc += di;
            pick = Some(i);
            if acc > target {
                break;
            }
        }
        let pick = pick.expect("positive total has a positive entry");
        chosen.push(pick);
        let c = x.row(pick);
        d.par_iter_mut()
            .zip(x.values().par_chunks(x.cols()))
            .for_each(|(di, row)| {
                let nd = distance(metric, row, c);
                if nd < *di {
                    *di = nd;
                }
            });
    }
    Ok(chosen)
}

/// k-means++ seeding followed by Lloyd iterations.
pub fn fit_kmeans(x: &FeatureMatrix, params: &KMeansParams) -> Result<KMeansModel> {
    Ok(fit_kmeans_traced(x, params)?.model)
}

pub fn fit_kmeans_traced(x: &FeatureMatrix, params: &KMeansParams) -> Result<KMeansFit> {
    check_k(x, params.k)?;
    let seeds = kmeans_plus_plus(x, params.k, params.metric, params.seed)?;
    let init = Matrix::from_vec(
        params.k,
        x.cols(),
        x.select_rows(&seeds)?.into_values(),
    )?;
    fit_kmeans_from(x, init, params.metric, params.max_iters, params.tol, false)
}

/// Lloyd iterations from explicit initial centroids.
///
/// Each iteration assigns every frame, re-seeds empty clusters with the
/// frame farthest from its centroid (lowest index on ties, taken only from
/// clusters with more than one member), then moves each centroid to the
/// mean of its members (normalized for cosine). Stops once no centroid moves
/// by `tol` times the data scale, or after `max_iters` updates.
pub fn fit_kmeans_from(
    x: &FeatureMatrix,
    init: Matrix,
    metric: Metric,
    max_iters: usize,
    tol: f64,
    track_history: bool,
) -> Result<KMeansFit> {
    let k = init.rows();
    check_k(x, k)?;
    x.check_cols(init.cols())?;
    if tol.is_nan() || tol < 0.0 {
        return Err(Error::param(format!("tolerance must be non-negative, got {tol}")));
    }
    let prepared;
    let data = match metric {
        Metric::Euclidean => x,
        Metric::Cosine => {
            prepared = normalize_rows(x)?;
            &prepared
        }
    };
    let d = data.cols();
    let mut centroids = KMeansModel::new(init, metric)?.centroids;
    let threshold = tol * data_scale(data);

    let mut inertia = Vec::new();
    let mut history = track_history.then(Vec::new);
    let mut iterations = 0;

    for _ in 0..max_iters {
        let mut labeled = assign_prepared(metric, &centroids, data);
        repair_empty(&mut labeled, k);
        inertia.push(labeled.iter().map(|&(_, dist)| dist).sum());
        if let Some(h) = history.as_mut() {
            h.push(labeled.iter().map(|&(c, _)| c).collect());
        }

        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (row, &(c, _)) in data.row_iter().zip(&labeled) {
            counts[c] += 1;
            for (s, v) in sums[c * d..(c + 1) * d].iter_mut().zip(row) {
                *s += v;
            }
        }
        let mut movement: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let mut next: Vec<f64> = sums[c * d..(c + 1) * d]
                .iter()
                .map(|s| s / counts[c] as f64)
                .collect();
            if metric == Metric::Cosine {
                let n = linalg::norm(&next);
                if n == 0.0 {
                    continue;
                }
                next.iter_mut().for_each(|v| *v /= n);
            }
            movement = movement.max(sq_dist(&next, centroids.row(c)).sqrt());
            centroids.row_mut(c).copy_from_slice(&next);
        }
        iterations += 1;
        if movement <= threshold {
            break;
        }
    }

    let labeled = assign_prepared(metric, &centroids, data);
    inertia.push(labeled.iter().map(|&(_, dist)| dist).sum());
    Ok(KMeansFit {
        model: KMeansModel { centroids, metric },
        assignments: labeled.into_iter().map(|(c, _)| c).collect(),
        inertia,
        iterations,
        history,
    })
}

/// RMS distance of the rows from their mean.
fn data_scale(x: &FeatureMatrix) -> f64 {
    let d = x.cols();
    let mut mean = vec![0.0; d];
    for row in x.row_iter() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= x.rows() as f64);
    let ss: f64 = x.row_iter().map(|r| sq_dist(r, &mean)).sum();
    (ss / x.rows() as f64).sqrt()
}

/// Gives every empty cluster the frame farthest from its current centroid.
fn repair_empty(labeled: &mut [(usize, f64)], k: usize) {
    let mut counts = vec![0usize; k];
    for &(c, _) in labeled.iter() {
        counts[c] += 1;
    }
    for empty in 0..k {
        if counts[empty] != 0 {
            continue;
        }
        let mut best: Option<usize> = None;
        for (i, &(c, dist)) in labeled.iter().enumerate() {
            if counts[c] > 1 && best.is_none_or(|b| dist > labeled[b].1) {
                best = Some(i);
            }
        }
        // k ≤ T guarantees a donor cluster with two or more members
        let i = best.expect("a cluster with more than one member exists");
        counts[labeled[i].0] -= 1;
        counts[empty] += 1;
        labeled[i] = (empty, 0.0);
    }
}
