//! Centroid geometry and interpretability studies.
//!
//! * [`centroid_similarity`]: histogram of pairwise cosine similarity
//!   between centroids, a measure of anisotropy.
//! * [`pooled_segments`] + [`nearest_to_centroids`]: label tallies of the
//!   pooled segments closest to each centroid.
//! * [`component_extremes`]: labels of the segments with the largest and
//!   smallest value on each ICA component.
//! * [`amari_index`]: separation quality of a demixing·mixing product.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::data::{FeatureMatrix, LabeledSegment};
use crate::error::{Error, Result};
use crate::kmeans::KMeansModel;
use crate::linalg::{self, Matrix};
use crate::preprocess::IcaTransform;

pub const DEFAULT_BINS: usize = 50;
pub const DEFAULT_NEIGHBORS: usize = 10;
pub const DEFAULT_EXTREMES: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityHistogram {
    /// `bins + 1` ascending edges spanning [−1, 1].
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub mean_similarity: f64,
}

impl SimilarityHistogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `bin_lo,bin_hi,count` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let _ = writeln!(out, "{},{},{}", self.bin_edges[i], self.bin_edges[i + 1], c);
        }
        out
    }
}

/// Cosine similarity of two vectors; zero vectors give 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let n = linalg::norm(a) * linalg::norm(b);
    if n == 0.0 {
        0.0
    } else {
        (linalg::dot(a, b) / n).clamp(-1.0, 1.0)
    }
}

/// Histogram of cosine similarities over all unordered centroid pairs,
/// on `bins` uniform bins over [−1, 1] (the last bin is closed).
pub fn centroid_similarity(model: &KMeansModel, bins: usize) -> Result<SimilarityHistogram> {
    similarity_histogram(model.centroids(), bins)
}

pub fn similarity_histogram(centroids: &Matrix, bins: usize) -> Result<SimilarityHistogram> {
    let k = centroids.rows();
    if k < 2 {
        return Err(Error::param(format!("need at least 2 centroids, got {k}")));
    }
    if bins == 0 {
        return Err(Error::param("need at least one bin"));
    }
    let width = 2.0 / bins as f64;
    let bin_edges: Vec<f64> = (0..=bins).map(|i| -1.0 + i as f64 * width).collect();
    let mut counts = vec![0u64; bins];
    let mut sum = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            let s = cosine(centroids.row(i), centroids.row(j));
            sum += s;
            let b = (((s + 1.0) / width).floor() as usize).min(bins - 1);
            counts[b] += 1;
        }
    }
    let pairs = (k * (k - 1) / 2) as f64;
    Ok(SimilarityHistogram {
        bin_edges,
        counts,
        mean_similarity: sum / pairs,
    })
}

/// A pooled representation and its label.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledSegment {
    pub label: String,
    pub vector: Vec<f64>,
}

/// Averages the frames of each labeled segment.
pub fn pooled_segments(
    features: &HashMap<String, FeatureMatrix>,
    labels: &[LabeledSegment],
) -> Result<Vec<PooledSegment>> {
    let mut out = Vec::with_capacity(labels.len());
    for seg in labels {
        let m = features.get(&seg.utterance_id).ok_or_else(|| {
            Error::Data(format!("no features for utterance {:?}", seg.utterance_id))
        })?;
        if seg.start >= seg.end || seg.end > m.rows() {
            return Err(Error::Data(format!(
                "segment [{}, {}) of {:?} is outside its {} frames",
                seg.start,
                seg.end,
                seg.utterance_id,
                m.rows()
            )));
        }
        let mut v = vec![0.0; m.cols()];
        for t in seg.start..seg.end {
            for (a, x) in v.iter_mut().zip(m.row(t)) {
                *a += x;
            }
        }
        let n = (seg.end - seg.start) as f64;
        v.iter_mut().for_each(|a| *a /= n);
        out.push(PooledSegment {
            label: seg.label.clone(),
            vector: v,
        });
    }
    Ok(out)
}

/// One ranked member of a neighbor or extreme list.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub pool_index: usize,
    pub label: String,
    /// Distance to the centroid, or the component value for extremes.
    pub score: f64,
}

/// Ranked segments for one centroid or component direction.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborEntry {
    /// Centroid or component index.
    pub index: usize,
    /// `None` for centroids, `Some(true)` for the positive direction of a
    /// component, `Some(false)` for the negative one.
    pub positive: Option<bool>,
    pub neighbors: Vec<Neighbor>,
}

impl NeighborEntry {
    /// Label counts, sorted by label.
    pub fn tally(&self) -> BTreeMap<&str, usize> {
        let mut t = BTreeMap::new();
        for n in &self.neighbors {
            *t.entry(n.label.as_str()).or_default() += 1;
        }
        t
    }

    /// True when every ranked segment carries the same label.
    pub fn is_pure(&self) -> bool {
        self.tally().len() == 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborReport {
    pub entries: Vec<NeighborEntry>,
}

impl NeighborReport {
    /// `centroid,rank,label,distance` rows for centroid reports, and
    /// `component,direction,rank,label,value` rows for component reports.
    pub fn to_csv(&self) -> String {
        let component = self.entries.iter().any(|e| e.positive.is_some());
        let mut out = String::from(if component {
            "component,direction,rank,label,value\n"
        } else {
            "centroid,rank,label,distance\n"
        });
        for e in &self.entries {
            for (rank, n) in e.neighbors.iter().enumerate() {
                match e.positive {
                    None => {
                        let _ = writeln!(out, "{},{},{},{}", e.index, rank, n.label, n.score);
                    }
                    Some(pos) => {
                        let dir = if pos { "top" } else { "bottom" };
                        let _ = writeln!(out, "{},{},{},{},{}", e.index, dir, rank, n.label, n.score);
                    }
                }
            }
        }
        out
    }

    pub fn pure_count(&self) -> usize {
        self.entries.iter().filter(|e| e.is_pure()).count()
    }
}

/// Indices of the `m` smallest keys; equal keys keep pool order.
fn smallest(keys: &[f64], m: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..keys.len()).collect();
    idx.sort_by(|&a, &b| keys[a].total_cmp(&keys[b]).then(a.cmp(&b)));
    idx.truncate(m);
    idx
}

fn check_pool(pool: &[PooledSegment], dim: usize) -> Result<()> {
    if pool.is_empty() {
        return Err(Error::Data("empty segment pool".into()));
    }
    if let Some(p) = pool.iter().find(|p| p.vector.len() != dim) {
        return Err(Error::Dimension {
            expected: dim,
            actual: p.vector.len(),
        });
    }
    Ok(())
}

/// The `m` pooled segments nearest to each centroid under the model's
/// metric. Reported distances are Euclidean, or `1 − cos`.
pub fn nearest_to_centroids(model: &KMeansModel, pool: &[PooledSegment], m: usize) -> Result<NeighborReport> {
    check_pool(pool, model.dim())?;
    if m == 0 || m > pool.len() {
        return Err(Error::param(format!(
            "cannot take {m} neighbors from a pool of {}",
            pool.len()
        )));
    }
    let entries = (0..model.k())
        .into_par_iter()
        .map(|c| {
            let keys = pool
                .iter()
                .map(|p| model.distance_to(c, &p.vector))
                .collect::<Result<Vec<f64>>>()?;
            let neighbors = smallest(&keys, m)
                .into_iter()
                .map(|i| Neighbor {
                    pool_index: i,
                    label: pool[i].label.clone(),
                    score: match model.metric() {
                        crate::Metric::Euclidean => keys[i].sqrt(),
                        crate::Metric::Cosine => keys[i],
                    },
                })
                .collect();
            Ok(NeighborEntry {
                index: c,
                positive: None,
                neighbors,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(NeighborReport { entries })
}

/// For each ICA component, the `m` pooled segments with the largest and the
/// `m` with the smallest transformed value. Entries alternate top, bottom
/// per component.
pub fn component_extremes(t: &IcaTransform, pool: &[PooledSegment], m: usize) -> Result<NeighborReport> {
    check_pool(pool, t.dim())?;
    if m == 0 {
        return Err(Error::param("need at least one extreme per direction"));
    }
    let m = m.min(pool.len());
    let rows: Vec<&[f64]> = pool.iter().map(|p| p.vector.as_slice()).collect();
    let x = FeatureMatrix::from_rows(&rows)?;
    let y = t.apply(&x)?;
    let mut entries = Vec::with_capacity(2 * y.cols());
    for d in 0..y.cols() {
        let values: Vec<f64> = (0..y.rows()).map(|i| y.get(i, d)).collect();
        let negated: Vec<f64> = values.iter().map(|v| -v).collect();
        for (positive, keys) in [(true, &negated), (false, &values)] {
            let neighbors = smallest(keys, m)
                .into_iter()
                .map(|i| Neighbor {
                    pool_index: i,
                    label: pool[i].label.clone(),
                    score: values[i],
                })
                .collect();
            entries.push(NeighborEntry {
                index: d,
                positive: Some(positive),
                neighbors,
            });
        }
    }
    Ok(NeighborReport { entries })
}

/// Normalized Amari index of a square matrix `p` (e.g. demixing · mixing):
/// 0 for a scaled permutation, at most 1.
pub fn amari_index(p: &Matrix) -> Result<f64> {
    if !p.is_square() || p.rows() < 2 {
        return Err(Error::param("Amari index needs a square matrix of size ≥ 2"));
    }
    let n = p.rows();
    let a = |i: usize, j: usize| p[(i, j)].abs();
    let mut total = 0.0;
    for i in 0..n {
        let max = (0..n).map(|j| a(i, j)).fold(0.0, f64::max);
        if max == 0.0 {
            return Err(Error::Numerical(format!("row {i} is zero")));
        }
        total += (0..n).map(|j| a(i, j)).sum::<f64>() / max - 1.0;
    }
    for j in 0..n {
        let max = (0..n).map(|i| a(i, j)).fold(0.0, f64::max);
        if max == 0.0 {
            return Err(Error::Numerical(format!("column {j} is zero")));
        }
        total += (0..n).map(|i| a(i, j)).sum::<f64>() / max - 1.0;
    }
    Ok(total / (2.0 * n as f64 * (n as f64 - 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kmeans::Metric;
    use crate::preprocess::WhitenTransform;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn model(rows: &[&[f64]], metric: Metric) -> KMeansModel {
        KMeansModel::new(Matrix::from_rows(rows).unwrap(), metric).unwrap()
    }

    fn seg(label: &str, v: &[f64]) -> PooledSegment {
        PooledSegment {
            label: label.into(),
            vector: v.to_vec(),
        }
    }

    #[test]
    fn orthonormal_centroids() {
        let m = model(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]], Metric::Cosine);
        let h = centroid_similarity(&m, 50).unwrap();
        assert_eq!(h.total(), 3);
        assert_eq!(h.mean_similarity, 0.0);
        // 0 falls on the lower edge of bin 25
        assert_eq!(h.counts[25], 3);
        assert!(h.to_csv().starts_with("bin_lo,bin_hi,count\n-1,"));
    }

    #[test]
    fn parallel_centroids() {
        let m = model(&[&[1.0, 1.0], &[2.0, 2.0]], Metric::Euclidean);
        let h = centroid_similarity(&m, 10).unwrap();
        assert!((h.mean_similarity - 1.0).abs() < 1e-15);
        assert_eq!(h.counts[9], 1);
        assert!(centroid_similarity(&model(&[&[1.0]], Metric::Euclidean), 10).is_err());
    }

    #[test]
    fn random_unit_vectors_are_near_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let rows: Vec<Vec<f64>> = (0..100)
            .map(|_| (0..100).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let m = KMeansModel::new(Matrix::from_rows(&rows).unwrap(), Metric::Cosine).unwrap();
        let h = centroid_similarity(&m, DEFAULT_BINS).unwrap();
        assert_eq!(h.total(), 100 * 99 / 2);
        assert!(h.mean_similarity.abs() <= 0.05, "{}", h.mean_similarity);
    }

    #[test]
    fn histogram_scale_and_order_invariant() {
        let rows = [[0.3, -1.0, 2.0], [1.0, 0.5, 0.0], [-0.2, 0.1, 0.9], [2.0, 2.0, -1.0]];
        let base = similarity_histogram(&Matrix::from_rows(&rows).unwrap(), 20).unwrap();
        let scaled: Vec<Vec<f64>> = rows
            .iter()
            .enumerate()
            .map(|(i, r)| r.iter().map(|v| v * (i as f64 + 0.5) * 3.0).collect())
            .collect();
        let mut permuted = scaled.clone();
        permuted.reverse();
        let other = similarity_histogram(&Matrix::from_rows(&permuted).unwrap(), 20).unwrap();
        assert_eq!(base.counts, other.counts);
        assert!((base.mean_similarity - other.mean_similarity).abs() < 1e-12);
    }

    #[test]
    fn pooling() {
        let mut feats = HashMap::new();
        feats.insert(
            "u".to_string(),
            FeatureMatrix::from_rows(&[[0.0, 0.0], [2.0, 4.0], [7.0, 7.0], [7.0, 7.0]]).unwrap(),
        );
        let labels = vec![
            LabeledSegment { utterance_id: "u".into(), start: 0, end: 2, label: "A".into() },
            LabeledSegment { utterance_id: "u".into(), start: 2, end: 3, label: "B".into() },
            LabeledSegment { utterance_id: "u".into(), start: 2, end: 4, label: "C".into() },
        ];
        let pool = pooled_segments(&feats, &labels).unwrap();
        assert_eq!(pool[0].vector, vec![1.0, 2.0]);
        assert_eq!(pool[1].vector, vec![7.0, 7.0]);
        assert_eq!(pool[2].vector, vec![7.0, 7.0]);
        let bad = [LabeledSegment { utterance_id: "u".into(), start: 3, end: 5, label: "A".into() }];
        assert!(pooled_segments(&feats, &bad).is_err());
        let missing = [LabeledSegment { utterance_id: "v".into(), start: 0, end: 1, label: "A".into() }];
        assert!(pooled_segments(&feats, &missing).is_err());
    }

    #[test]
    fn exact_copies_are_pure() {
        let m = model(&[&[1.0, 2.0], &[-3.0, 0.5]], Metric::Euclidean);
        let mut pool: Vec<PooledSegment> = (0..10).map(|_| seg("S", &[1.0, 2.0])).collect();
        pool.push(seg("T", &[9.0, 9.0]));
        let r = nearest_to_centroids(&m, &pool, 10).unwrap();
        assert_eq!(r.entries[0].tally().get("S"), Some(&10));
        assert!(r.entries[0].is_pure());
        assert!(nearest_to_centroids(&m, &pool, 12).is_err());
        assert!(nearest_to_centroids(&m, &[], 1).is_err());
        assert!(r.to_csv().starts_with("centroid,rank,label,distance\n0,0,S,0\n"));
    }

    #[test]
    fn blob_labels_follow_centroids() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut pool = Vec::new();
        for i in 0..60 {
            let (label, cx) = if i % 2 == 0 { ("AA", -5.0) } else { ("IY", 5.0) };
            let nx: f64 = StandardNormal.sample(&mut rng);
            let ny: f64 = StandardNormal.sample(&mut rng);
            pool.push(seg(label, &[cx + nx, ny]));
        }
        for metric in [Metric::Euclidean, Metric::Cosine] {
            let m = model(&[&[-5.0, 0.0], &[5.0, 0.0]], metric);
            let r = nearest_to_centroids(&m, &pool, 10).unwrap();
            assert!(r.entries.iter().all(NeighborEntry::is_pure));
            assert_eq!(r.entries[0].tally().keys().next(), Some(&"AA"));
            assert_eq!(r.entries[1].tally().keys().next(), Some(&"IY"));
        }
    }

    #[test]
    fn neighbors_ignore_pool_order() {
        let m = model(&[&[0.0, 0.0], &[3.0, 1.0]], Metric::Euclidean);
        let pool: Vec<PooledSegment> = (0..20)
            .map(|i| seg(&format!("L{}", i % 3), &[i as f64 * 0.37 % 4.0, (i * i) as f64 * 0.11 % 3.0]))
            .collect();
        let mut rev = pool.clone();
        rev.reverse();
        let a = nearest_to_centroids(&m, &pool, 5).unwrap();
        let b = nearest_to_centroids(&m, &rev, 5).unwrap();
        for (ea, eb) in a.entries.iter().zip(&b.entries) {
            let va: Vec<_> = ea.neighbors.iter().map(|n| (n.label.clone(), n.score)).collect();
            let vb: Vec<_> = eb.neighbors.iter().map(|n| (n.label.clone(), n.score)).collect();
            assert_eq!(va, vb);
        }
    }

    fn identity_ica(pool: &[PooledSegment]) -> IcaTransform {
        let rows: Vec<&[f64]> = pool.iter().map(|p| p.vector.as_slice()).collect();
        let x = FeatureMatrix::from_rows(&rows).unwrap();
        let whiten = WhitenTransform::fit(&x).unwrap();
        let d = whiten.dim();
        IcaTransform {
            whiten,
            demixing: Matrix::identity(d),
        }
    }

    #[test]
    fn dominant_vector_tops_component() {
        let mut pool = vec![
            seg("a", &[0.1, 0.3]),
            seg("b", &[-0.2, 0.1]),
            seg("c", &[0.05, -0.4]),
            seg("d", &[-0.1, 0.2]),
        ];
        pool.push(seg("big", &[0.0, 0.0]));
        let mut t = identity_ica(&pool);
        // make the raw axis 0 the first component direction
        t.whiten.pca.basis = Matrix::identity(2);
        t.whiten.pca.mean = vec![0.0, 0.0];
        t.whiten.scale = vec![1.0, 1.0];
        pool[4].vector = vec![50.0, 0.0];
        let r = component_extremes(&t, &pool, 1).unwrap();
        assert_eq!(r.entries[0].positive, Some(true));
        assert_eq!(r.entries[0].neighbors[0].label, "big");
    }

    #[test]
    fn negating_a_row_swaps_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pool: Vec<PooledSegment> = (0..40)
            .map(|i| {
                let v: Vec<f64> = (0..3).map(|_| StandardNormal.sample(&mut rng)).collect();
                seg(&format!("p{}", i % 5), &v)
            })
            .collect();
        let t = identity_ica(&pool);
        let mut flipped = t.clone();
        for j in 0..3 {
            flipped.demixing[(1, j)] = -flipped.demixing[(1, j)];
        }
        let a = component_extremes(&t, &pool, 5).unwrap();
        let b = component_extremes(&flipped, &pool, 5).unwrap();
        let ids = |e: &NeighborEntry| e.neighbors.iter().map(|n| n.pool_index).collect::<Vec<_>>();
        // entries: 2 per component, top then bottom
        assert_eq!(ids(&a.entries[2]), ids(&b.entries[3]));
        assert_eq!(ids(&a.entries[3]), ids(&b.entries[2]));
        assert_eq!(ids(&a.entries[0]), ids(&b.entries[0]));
        assert!(a.to_csv().starts_with("component,direction,rank,label,value\n0,top,0,"));
    }

    #[test]
    fn amari_values() {
        let perm = Matrix::from_rows(&[[0.0, -2.0, 0.0], [0.0, 0.0, 0.5], [3.0, 0.0, 0.0]]).unwrap();
        assert_eq!(amari_index(&perm).unwrap(), 0.0);
        let ones = Matrix::from_rows(&[[1.0, 1.0], [1.0, 1.0]]).unwrap();
        assert!((amari_index(&ones).unwrap() - 1.0).abs() < 1e-15);
        // hand value: rows give 0.5+0.5, columns 0.5+0.5 → 2/(2·2·1)
        let m = Matrix::from_rows(&[[1.0, 0.5], [0.5, 1.0]]).unwrap();
        assert!((amari_index(&m).unwrap() - 0.5).abs() < 1e-15);
    }
}
