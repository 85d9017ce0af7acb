//! Linear preprocessing transforms fitted on a feature matrix.
//!
//! Every transform is an affine map `x ↦ (x − mean)·M` with a different
//! choice of `M`:
//!
//! * standardization: `M = diag(1/σ)`
//! * PCA: `M = V`, the covariance eigenvectors
//! * whitening: `M = V·diag(λ^(−1/2))`
//! * ICA: `M = V·diag(λ^(−1/2))·Ŵᵀ`, with `Ŵ` the Laplace maximum-likelihood
//!   demixing matrix estimated by auxiliary-function iterative projection.
//!
//! Transform files (`DSUT`) hold a header followed by named float64 arrays
//! in a fixed order per kind:
//!
//! ```text
//! magic "DSUT" | version u16 | kind u16 | dim u64 | array count u32
//! repeated: name_len u16 | name (UTF-8) | len u64 | len × f64
//! ```
//!
//! Kinds: 1 standardize (`mean`, `std`), 2 PCA (`mean`, `basis`,
//! `eigenvalues`), 3 whiten (PCA arrays + `scale`), 4 ICA (whiten arrays +
//! `demixing`). Matrices are row-major.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::container::{self, Reader, Writer};
use crate::data::FeatureMatrix;
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};

/// Floor applied to standard deviations.
pub const STD_FLOOR: f64 = 1e-12;
/// Eigenvalues below this fraction of the largest are suppressed by whitening.
pub const WHITEN_REL_FLOOR: f64 = 1e-10;
/// Floor on `|w_dᵀ x_t|` in the ICA auxiliary weights.
pub const ICA_WEIGHT_FLOOR: f64 = 1e-9;
pub const DEFAULT_ICA_ITERS: usize = 100;

pub const TRANSFORM_MAGIC: &[u8; 4] = b"DSUT";
pub const TRANSFORM_VERSION: u16 = 1;

/// Rows per partial sum in scatter-matrix accumulation. Fixed so the
/// reduction order does not depend on the thread pool.
const MIN_CHUNK: usize = 2048;
const MAX_CHUNKS: usize = 32;

fn chunk_len(rows: usize) -> usize {
    MIN_CHUNK.max(rows.div_ceil(MAX_CHUNKS))
}

fn column_means(x: &FeatureMatrix) -> Vec<f64> {
    let mut mean = vec![0.0; x.cols()];
    for row in x.row_iter() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    let n = x.rows() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

/// `Σ_t w_t (x_t − μ)(x_t − μ)ᵀ` over the first `dim` columns, with a
/// deterministic chunked reduction.
fn weighted_scatter(x: &FeatureMatrix, mean: Option<&[f64]>, weights: Option<&[f64]>, dim: usize) -> Matrix {
    let cols = x.cols();
    let chunk = chunk_len(x.rows());
    let partials: Vec<Vec<f64>> = x
        .values()
        .par_chunks(chunk * cols)
        .enumerate()
        .map(|(c, block)| {
            let mut acc = vec![0.0; dim * dim];
            let mut centered = vec![0.0; dim];
            for (r, row) in block.chunks_exact(cols).enumerate() {
                let w = weights.map_or(1.0, |w| w[c * chunk + r]);
                for j in 0..dim {
                    centered[j] = row[j] - mean.map_or(0.0, |m| m[j]);
                }
                for i in 0..dim {
                    let ci = w * centered[i];
                    if ci == 0.0 {
                        continue;
                    }
                    let acc_row = &mut acc[i * dim..(i + 1) * dim];
                    for j in i..dim {
                        acc_row[j] += ci * centered[j];
                    }
                }
            }
            acc
        })
        .collect();
    let mut total = Matrix::zeros(dim, dim);
    for p in &partials {
        for i in 0..dim {
            for j in i..dim {
                total[(i, j)] += p[i * dim + j];
            }
        }
    }
    for i in 0..dim {
        for j in 0..i {
            total[(i, j)] = total[(j, i)];
        }
    }
    total
}

/// Sample covariance `X̃ᵀX̃/(T−1)` of mean-centered data.
pub fn covariance(x: &FeatureMatrix, mean: &[f64]) -> Matrix {
    let mut s = weighted_scatter(x, Some(mean), None, x.cols());
    let denom = (x.rows() - 1) as f64;
    for i in 0..x.cols() {
        for j in 0..x.cols() {
            s[(i, j)] /= denom;
        }
    }
    s
}

/// Row-parallel `(x − offset)·M` followed by an optional per-column scale.
fn affine(x: &FeatureMatrix, offset: &[f64], map: Option<&Matrix>, scale: Option<&[f64]>) -> FeatureMatrix {
    let d_in = x.cols();
    let d_out = map.map_or(d_in, |m| m.cols());
    let mut out = vec![0.0; x.rows() * d_out];
    out.par_chunks_mut(d_out)
        .zip(x.values().par_chunks(d_in))
        .for_each_init(
            || vec![0.0; d_in],
            |centered, (o, row)| {
                for j in 0..d_in {
                    centered[j] = row[j] - offset[j];
                }
                match map {
                    Some(m) => {
                        for (i, &c) in centered.iter().enumerate() {
                            if c == 0.0 {
                                continue;
                            }
                            for (oj, &mij) in o.iter_mut().zip(m.row(i)) {
                                *oj += c * mij;
                            }
                        }
                    }
                    None => o.copy_from_slice(centered),
                }
                if let Some(s) = scale {
                    for (oj, sj) in o.iter_mut().zip(s) {
                        *oj *= sj;
                    }
                }
            },
        );
    FeatureMatrix::from_parts(x.rows(), d_out, out)
}

/// `y·Aᵀ` for each row `y`.
fn right_mul_transpose(y: &FeatureMatrix, a: &Matrix) -> FeatureMatrix {
    let d = y.cols();
    let k = a.rows();
    let mut out = vec![0.0; y.rows() * k];
    out.par_chunks_mut(k)
        .zip(y.values().par_chunks(d))
        .for_each(|(o, row)| {
            for (c, oc) in o.iter_mut().enumerate() {
                *oc = linalg::dot(row, a.row(c));
            }
        });
    FeatureMatrix::from_parts(y.rows(), k, out)
}

fn require_rows(x: &FeatureMatrix, what: &str) -> Result<()> {
    if x.rows() < 2 {
        return Err(Error::param(format!(
            "{what} needs at least 2 frames, got {}",
            x.rows()
        )));
    }
    Ok(())
}

/// Per-dimension zero-mean, unit-variance scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardizeTransform {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl StandardizeTransform {
    /// Fits means and sample standard deviations (divisor `T − 1`),
    /// flooring deviations at [`STD_FLOOR`].
    pub fn fit(x: &FeatureMatrix) -> Result<Self> {
        require_rows(x, "standardization")?;
        let mean = column_means(x);
        let mut var = vec![0.0; x.cols()];
        for row in x.row_iter() {
            for ((v, r), m) in var.iter_mut().zip(row).zip(&mean) {
                *v += (r - m) * (r - m);
            }
        }
        let denom = (x.rows() - 1) as f64;
        let std = var
            .into_iter()
            .map(|v| (v / denom).sqrt().max(STD_FLOOR))
            .collect();
        Ok(StandardizeTransform { mean, std })
    }

    pub fn apply(&self, x: &FeatureMatrix) -> Result<FeatureMatrix> {
        x.check_cols(self.mean.len())?;
        let d = self.mean.len();
        let mut out = x.values().to_vec();
        out.par_chunks_mut(d).for_each(|row| {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        });
        Ok(FeatureMatrix::from_parts(x.rows(), d, out))
    }
}

/// Projection onto the covariance eigenbasis.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaTransform {
    pub mean: Vec<f64>,
    /// `D × D`, column `j` is the eigenvector of `eigenvalues[j]`.
    pub basis: Matrix,
    /// Descending, clamped at zero.
    pub eigenvalues: Vec<f64>,
}

impl PcaTransform {
    pub fn fit(x: &FeatureMatrix) -> Result<Self> {
        require_rows(x, "PCA")?;
        let mean = column_means(x);
        let cov = covariance(x, &mean);
        let eig = linalg::eigh(&cov)?;
        let eigenvalues = eig.values.into_iter().map(|v| v.max(0.0)).collect();
        Ok(PcaTransform {
            mean,
            basis: eig.vectors,
            eigenvalues,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &FeatureMatrix) -> Result<FeatureMatrix> {
        x.check_cols(self.dim())?;
        Ok(affine(x, &self.mean, Some(&self.basis), None))
    }
}

/// PCA followed by per-component variance normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct WhitenTransform {
    pub pca: PcaTransform,
    /// `λ^(−1/2)` for retained components, 0 for suppressed ones.
    pub scale: Vec<f64>,
}

impl WhitenTransform {
    pub fn fit(x: &FeatureMatrix) -> Result<Self> {
        Self::from_pca(PcaTransform::fit(x)?)
    }

    /// Builds the whitening scales; components whose eigenvalue is below
    /// `1e-10 · λ_max` get scale 0.
    pub fn from_pca(pca: PcaTransform) -> Result<Self> {
        let largest = pca.eigenvalues.first().copied().unwrap_or(0.0);
        if largest <= 0.0 {
            return Err(Error::Numerical("rank-0 data: every eigenvalue is zero".into()));
        }
        let scale = pca
            .eigenvalues
            .iter()
            .map(|&l| {
                if l >= WHITEN_REL_FLOOR * largest {
                    1.0 / l.sqrt()
                } else {
                    0.0
                }
            })
            .collect();
        Ok(WhitenTransform { pca, scale })
    }

    pub fn dim(&self) -> usize {
        self.pca.dim()
    }

    /// Number of non-suppressed components. They come first.
    pub fn retained(&self) -> usize {
        self.scale.iter().take_while(|&&s| s > 0.0).count()
    }

    pub fn apply(&self, x: &FeatureMatrix) -> Result<FeatureMatrix> {
        x.check_cols(self.dim())?;
        Ok(affine(
            x,
            &self.pca.mean,
            Some(&self.pca.basis),
            Some(&self.scale),
        ))
    }
}

/// Whitening followed by the ICA demixing matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct IcaTransform {
    pub whiten: WhitenTransform,
    /// `D × D`; row `d` extracts component `d` from whitened features.
    pub demixing: Matrix,
}

/// Diagnostics recorded while fitting ICA.
#[derive(Debug, Clone)]
pub struct IcaFit {
    pub transform: IcaTransform,
    /// Mean per-frame log-likelihood before the first iteration and after
    /// each iteration (`iters + 1` values).
    pub log_likelihood: Vec<f64>,
    /// `w_dᵀ·V_d·w_d` for each row against the auxiliary matrix of its last
    /// update.
    pub row_norms: Vec<f64>,
    /// Separated components of the fit data, `whiten(x)·Ŵᵀ`.
    pub sources: FeatureMatrix,
}

/// Mean per-frame Laplace log-likelihood of whitened data `y` under demixing
/// `w` (restricted to its first `w.rows()` columns):
/// `−(1/T)·Σ_t Σ_d |w_dᵀ y_t| − D·ln 2 + ln|det W|`.
pub fn ica_log_likelihood(y: &FeatureMatrix, w: &Matrix) -> Result<f64> {
    let r = w.rows();
    let abs_sum: f64 = y
        .row_iter()
        .map(|row| {
            (0..r)
                .map(|d| linalg::dot(w.row(d), &row[..r]).abs())
                .sum::<f64>()
        })
        .sum();
    let logdet = linalg::log_abs_det(w)?;
    Ok(-abs_sum / y.rows() as f64 - r as f64 * std::f64::consts::LN_2 + logdet)
}

impl IcaTransform {
    pub fn fit(x: &FeatureMatrix, iters: usize) -> Result<Self> {
        Ok(Self::fit_traced(x, iters)?.transform)
    }

    /// Whitens `x`, then runs `iters` auxiliary-function iterations from an
    /// identity demixing matrix.
    ///
    /// Each iteration updates every row in turn:
    /// `r_t = max(|w_dᵀ y_t|, 1e-9)`, `V_d = (1/T)·Σ_t y_t y_tᵀ / r_t`,
    /// `w_d ← (W·V_d)⁻¹ e_d`, normalized to `w_dᵀ V_d w_d = 1`.
    /// Suppressed whitening components are left out of the update and keep
    /// an identity block.
    pub fn fit_traced(x: &FeatureMatrix, iters: usize) -> Result<IcaFit> {
        if iters == 0 {
            return Err(Error::param("ICA needs at least one iteration"));
        }
        let whiten = WhitenTransform::fit(x)?;
        let y = whiten.apply(x)?;
        let r = whiten.retained();
        let t = y.rows() as f64;

        let mut w = Matrix::identity(r);
        let mut log_likelihood = Vec::with_capacity(iters + 1);
        log_likelihood.push(ica_log_likelihood(&y, &w)?);
        let mut row_norms = vec![0.0; r];
        let mut weights = vec![0.0; y.rows()];

        for it in 0..iters {
            #[allow(clippy::needless_range_loop)]
            for d in 0..r {
                y.values()
                    .par_chunks(y.cols())
                    .zip(weights.par_iter_mut())
                    .for_each(|(row, wt)| {
                        let proj = linalg::dot(w.row(d), &row[..r]).abs();
                        *wt = 1.0 / proj.max(ICA_WEIGHT_FLOOR);
                    });
                let mut v = weighted_scatter(&y, None, Some(&weights), r);
                for a in 0..r {
                    for b in 0..r {
                        v[(a, b)] /= t;
                    }
                }
                let row = linalg::solve_row(&w, &v, d).map_err(|e| {
                    Error::Numerical(format!(
                        "ICA iteration {}, component {d}: {e}",
                        it + 1
                    ))
                })?;
                w.row_mut(d).copy_from_slice(&row);
                if it + 1 == iters {
                    row_norms[d] = linalg::dot(&row, &v.mul_vec(&row));
                }
            }
            log_likelihood.push(ica_log_likelihood(&y, &w)?);
        }

        let dim = whiten.dim();
        let mut demixing = Matrix::identity(dim);
        for i in 0..r {
            for j in 0..r {
                demixing[(i, j)] = w[(i, j)];
            }
        }
        let transform = IcaTransform { whiten, demixing };
        let sources = transform.apply(x)?;
        Ok(IcaFit {
            transform,
            log_likelihood,
            row_norms,
            sources,
        })
    }

    pub fn dim(&self) -> usize {
        self.whiten.dim()
    }

    pub fn apply(&self, x: &FeatureMatrix) -> Result<FeatureMatrix> {
        let y = self.whiten.apply(x)?;
        Ok(right_mul_transpose(&y, &self.demixing))
    }
}

/// Which preprocessing to fit before clustering.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PreprocessKind {
    None,
    Standardize,
    Pca,
    Whiten,
    Ica,
}

impl FromStr for PreprocessKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Self::None),
            "std" | "standardize" => Ok(Self::Standardize),
            "pca" => Ok(Self::Pca),
            "whiten" | "whitening" => Ok(Self::Whiten),
            "ica" => Ok(Self::Ica),
            other => Err(Error::param(format!("unknown preprocessing {other:?}"))),
        }
    }
}

impl fmt::Display for PreprocessKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Standardize => "std",
            Self::Pca => "pca",
            Self::Whiten => "whiten",
            Self::Ica => "ica",
        })
    }
}

/// Any fitted transform.
#[derive(Debug, Clone, PartialEq)]
pub enum Transform {
    Standardize(StandardizeTransform),
    Pca(PcaTransform),
    Whiten(WhitenTransform),
    Ica(IcaTransform),
}

impl Transform {
    /// Fits the requested transform; `None` yields no transform.
    pub fn fit(kind: PreprocessKind, x: &FeatureMatrix, ica_iters: usize) -> Result<Option<Self>> {
        Ok(match kind {
            PreprocessKind::None => None,
            PreprocessKind::Standardize => Some(Self::Standardize(StandardizeTransform::fit(x)?)),
            PreprocessKind::Pca => Some(Self::Pca(PcaTransform::fit(x)?)),
            PreprocessKind::Whiten => Some(Self::Whiten(WhitenTransform::fit(x)?)),
            PreprocessKind::Ica => Some(Self::Ica(IcaTransform::fit(x, ica_iters)?)),
        })
    }

    pub fn kind(&self) -> PreprocessKind {
        match self {
            Self::Standardize(_) => PreprocessKind::Standardize,
            Self::Pca(_) => PreprocessKind::Pca,
            Self::Whiten(_) => PreprocessKind::Whiten,
            Self::Ica(_) => PreprocessKind::Ica,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Standardize(t) => t.mean.len(),
            Self::Pca(t) => t.dim(),
            Self::Whiten(t) => t.dim(),
            Self::Ica(t) => t.dim(),
        }
    }

    pub fn apply(&self, x: &FeatureMatrix) -> Result<FeatureMatrix> {
        match self {
            Self::Standardize(t) => t.apply(x),
            Self::Pca(t) => t.apply(x),
            Self::Whiten(t) => t.apply(x),
            Self::Ica(t) => t.apply(x),
        }
    }

    fn code(&self) -> u16 {
        match self {
            Self::Standardize(_) => 1,
            Self::Pca(_) => 2,
            Self::Whiten(_) => 3,
            Self::Ica(_) => 4,
        }
    }

    fn arrays(&self) -> Vec<(&'static str, &[f64])> {
        fn pca_arrays(p: &PcaTransform) -> Vec<(&'static str, &[f64])> {
            vec![
                ("mean", &p.mean[..]),
                ("basis", p.basis.as_slice()),
                ("eigenvalues", &p.eigenvalues[..]),
            ]
        }
        match self {
            Self::Standardize(t) => vec![("mean", &t.mean[..]), ("std", &t.std[..])],
            Self::Pca(t) => pca_arrays(t),
            Self::Whiten(t) => {
                let mut v = pca_arrays(&t.pca);
                v.push(("scale", &t.scale[..]));
                v
            }
            Self::Ica(t) => {
                let mut v = pca_arrays(&t.whiten.pca);
                v.push(("scale", &t.whiten.scale[..]));
                v.push(("demixing", t.demixing.as_slice()));
                v
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(TRANSFORM_MAGIC, TRANSFORM_VERSION);
        w.u16(self.code());
        w.u64(self.dim() as u64);
        let arrays = self.arrays();
        w.u32(arrays.len() as u32);
        for (name, values) in arrays {
            w.u16(name.len() as u16);
            w.bytes(name.as_bytes());
            w.u64(values.len() as u64);
            w.f64s(values);
        }
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let version = r.header(TRANSFORM_MAGIC)?;
        if version != TRANSFORM_VERSION {
            return Err(Error::format(4, format!("unsupported transform version {version}")));
        }
        let kind_at = r.offset();
        let code = r.u16("transform kind")?;
        let names: &[&str] = match code {
            1 => &["mean", "std"],
            2 => &["mean", "basis", "eigenvalues"],
            3 => &["mean", "basis", "eigenvalues", "scale"],
            4 => &["mean", "basis", "eigenvalues", "scale", "demixing"],
            other => {
                return Err(Error::format(kind_at, format!("unknown transform kind {other}")))
            }
        };
        let dim_at = r.offset();
        let dim = container::dim(r.u64("dimension")?, dim_at, "dimension")?;
        let square = container::product(dim, dim, dim_at)?;
        let count_at = r.offset();
        let count = r.u32("array count")? as usize;
        if count != names.len() {
            return Err(Error::format(
                count_at,
                format!("expected {} arrays, found {count}", names.len()),
            ));
        }
        let mut arrays = Vec::with_capacity(count);
        for &name in names {
            let at = r.offset();
            let len = r.u16("array name length")? as usize;
            let got = r.bytes(len, "array name")?;
            if got != name.as_bytes() {
                return Err(Error::format(
                    at,
                    format!("expected array {name:?}, found {:?}", String::from_utf8_lossy(got)),
                ));
            }
            let len_at = r.offset();
            let n = r.u64("array length")?;
            let expected = if matches!(name, "basis" | "demixing") { square } else { dim };
            if n != expected as u64 {
                return Err(Error::format(
                    len_at,
                    format!("array {name:?} has length {n}, expected {expected}"),
                ));
            }
            arrays.push(r.f64s(expected, name)?);
        }
        r.expect_end()?;

        let mut it = arrays.into_iter();
        let mut next = || it.next().unwrap();
        let square_matrix = |v: Vec<f64>| Matrix::from_vec(dim, dim, v);
        Ok(match code {
            1 => Self::Standardize(StandardizeTransform {
                mean: next(),
                std: next(),
            }),
            _ => {
                let pca = PcaTransform {
                    mean: next(),
                    basis: square_matrix(next())?,
                    eigenvalues: next(),
                };
                match code {
                    2 => Self::Pca(pca),
                    3 => Self::Whiten(WhitenTransform { pca, scale: next() }),
                    _ => Self::Ica(IcaTransform {
                        whiten: WhitenTransform { pca, scale: next() },
                        demixing: square_matrix(next())?,
                    }),
                }
            }
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&container::read_file(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Exp1, StandardNormal};

    fn fm(rows: &[&[f64]]) -> FeatureMatrix {
        FeatureMatrix::from_rows(rows).unwrap()
    }

    fn laplace(rng: &mut ChaCha8Rng) -> f64 {
        let a: f64 = Exp1.sample(rng);
        let b: f64 = Exp1.sample(rng);
        a - b
    }

    fn col_stats(x: &FeatureMatrix, j: usize) -> (f64, f64) {
        let n = x.rows() as f64;
        let mean = (0..x.rows()).map(|i| x.get(i, j)).sum::<f64>() / n;
        let var = (0..x.rows()).map(|i| (x.get(i, j) - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var)
    }

    #[test]
    fn standardize_examples() {
        let t = StandardizeTransform::fit(&fm(&[&[1.0], &[2.0], &[3.0]])).unwrap();
        assert_eq!((t.mean[0], t.std[0]), (2.0, 1.0));
        assert_eq!(t.apply(&fm(&[&[4.0]])).unwrap().values(), &[2.0]);

        let c = StandardizeTransform::fit(&fm(&[&[5.0], &[5.0], &[5.0], &[5.0]])).unwrap();
        assert_eq!(c.std[0], STD_FLOOR);
        assert!(c.apply(&fm(&[&[5.0], &[5.0]])).unwrap().values().iter().all(|&v| v == 0.0));

        let two = StandardizeTransform::fit(&fm(&[&[1.0, 10.0], &[3.0, 10.0]])).unwrap();
        assert_eq!(two.mean, vec![2.0, 10.0]);
        assert!((two.std[0] - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(two.std[1], STD_FLOOR);

        assert!(StandardizeTransform::fit(&fm(&[&[1.0]])).is_err());
        assert!(matches!(two.apply(&fm(&[&[1.0]])), Err(Error::Dimension { .. })));
    }

    #[test]
    fn standardized_fit_data_is_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows: Vec<Vec<f64>> = (0..500)
            .map(|_| (0..4).map(|j| 3.0 * j as f64 + (j + 1) as f64 * laplace(&mut rng)).collect())
            .collect();
        let x = FeatureMatrix::from_rows(&rows).unwrap();
        let t = StandardizeTransform::fit(&x).unwrap();
        let y = t.apply(&x).unwrap();
        for j in 0..4 {
            let (m, v) = col_stats(&y, j);
            assert!(m.abs() < 1e-9 && (v - 1.0).abs() < 1e-6);
        }
        let mean_row = FeatureMatrix::new(1, 4, t.mean.clone()).unwrap();
        assert!(t.apply(&mean_row).unwrap().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pca_line_data() {
        let x = fm(&[&[-1.0, -1.0], &[1.0, 1.0]]);
        let p = PcaTransform::fit(&x).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((p.basis[(0, 0)] - h).abs() < 1e-15 && (p.basis[(1, 0)] - h).abs() < 1e-15);
        assert!((p.eigenvalues[0] - 4.0).abs() < 1e-14);
        assert_eq!(p.eigenvalues[1], 0.0);
        let y = p.apply(&x).unwrap();
        // signed distance along the line times √2... i.e. ±√2
        assert!((y.get(0, 0) + 2f64.sqrt()).abs() < 1e-14);
        assert!((y.get(1, 0) - 2f64.sqrt()).abs() < 1e-14);
        assert!(y.get(0, 1).abs() < 1e-15 && y.get(1, 1).abs() < 1e-15);
    }

    #[test]
    fn pca_isotropic_and_degenerate() {
        let iso = fm(&[&[1.0, 0.0], &[-1.0, 0.0], &[0.0, 1.0], &[0.0, -1.0]]);
        let p = PcaTransform::fit(&iso).unwrap();
        // covariance is (2/3)·I; the tie keeps diagonal order
        assert_eq!(p.eigenvalues, vec![2.0 / 3.0, 2.0 / 3.0]);
        assert_eq!(p.basis, Matrix::identity(2));

        let same = fm(&[&[3.0, -1.0], &[3.0, -1.0], &[3.0, -1.0]]);
        let p = PcaTransform::fit(&same).unwrap();
        assert_eq!(p.eigenvalues, vec![0.0, 0.0]);
        assert!(matches!(WhitenTransform::from_pca(p), Err(Error::Numerical(_))));
    }

    #[test]
    fn pca_decorrelates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..400)
            .map(|_| {
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                vec![a + 5.0, 0.8 * a + 0.3 * b, -a + 2.0 * b]
            })
            .collect();
        let x = FeatureMatrix::from_rows(&rows).unwrap();
        let p = PcaTransform::fit(&x).unwrap();
        let y = p.apply(&x).unwrap();
        let cov = covariance(&y, &column_means(&y));
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert!(cov[(i, j)].abs() <= 1e-8 * p.eigenvalues[0]);
                }
            }
        }
        let btb = p.basis.transpose().matmul(&p.basis).unwrap();
        assert!(btb.max_abs_diff(&Matrix::identity(3)) < 1e-10);
        let mean_row = FeatureMatrix::new(1, 3, p.mean.clone()).unwrap();
        assert!(p.apply(&mean_row).unwrap().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn whitening_identity_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows: Vec<Vec<f64>> = (0..2000)
            .map(|_| {
                let z: Vec<f64> = (0..5).map(|_| StandardNormal.sample(&mut rng)).collect();
                vec![z[0], z[0] + 0.1 * z[1], 3.0 * z[2] - z[3], z[4] * 0.01, z[1] - z[2]]
            })
            .collect();
        let x = FeatureMatrix::from_rows(&rows).unwrap();
        let w = WhitenTransform::fit(&x).unwrap();
        let y = w.apply(&x).unwrap();
        let cov = covariance(&y, &column_means(&y));
        assert!(cov.max_abs_diff(&Matrix::identity(5)) <= 1e-6);
    }

    #[test]
    fn whitening_white_data_is_nearly_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(10_000);
        let rows: Vec<Vec<f64>> = (0..10_000)
            .map(|_| (0..4).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let x = FeatureMatrix::from_rows(&rows).unwrap();
        let w = WhitenTransform::fit(&x).unwrap();
        // total map M = basis·diag(scale); singular values are √eig(MᵀM)
        let mut m = w.pca.basis.clone();
        for i in 0..4 {
            for j in 0..4 {
                m[(i, j)] *= w.scale[j];
            }
        }
        let e = linalg::eigh(&m.transpose().matmul(&m).unwrap()).unwrap();
        for v in e.values {
            assert!((v.sqrt() - 1.0).abs() <= 5e-2, "{v}");
        }
    }

    #[test]
    fn whitening_suppresses_rank_deficient_dims() {
        let x = fm(&[&[1.0, 2.0], &[2.0, 4.0], &[-1.0, -2.0], &[0.5, 1.0]]);
        let w = WhitenTransform::fit(&x).unwrap();
        assert_eq!(w.retained(), 1);
        let y = w.apply(&x).unwrap();
        assert!((0..4).all(|i| y.get(i, 1) == 0.0));
    }

    fn laplace_matrix(seed: u64, t: usize, d: usize) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..t * d).map(|_| laplace(&mut rng)).collect();
        FeatureMatrix::new(t, d, v).unwrap()
    }

    /// min over signed permutations P of max |A − P|.
    fn signed_perm_distance(a: &Matrix) -> f64 {
        let n = a.rows();
        let mut best = f64::INFINITY;
        let mut perm: Vec<usize> = (0..n).collect();
        permute(&mut perm, 0, &mut |p| {
            let mut worst: f64 = 0.0;
            for i in 0..n {
                let s = a[(i, p[i])].signum();
                for j in 0..n {
                    let target = if j == p[i] { s } else { 0.0 };
                    worst = worst.max((a[(i, j)] - target).abs());
                }
            }
            best = best.min(worst);
        });
        best
    }

    fn permute(p: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
        if k == p.len() {
            f(p);
            return;
        }
        for i in k..p.len() {
            p.swap(k, i);
            permute(p, k + 1, f);
            p.swap(k, i);
        }
    }

    #[test]
    fn ica_on_independent_axes_stays_near_identity() {
        let x = laplace_matrix(20_000, 20_000, 2);
        let fit = IcaTransform::fit_traced(&x, 100).unwrap();
        // the whitening rotation is part of the recovered map; compare the
        // total map from raw axes to components
        let w = &fit.transform;
        let mut total = w.whiten.pca.basis.clone();
        for i in 0..2 {
            for j in 0..2 {
                total[(i, j)] *= w.whiten.scale[j];
            }
        }
        let total = w.demixing.matmul(&total.transpose()).unwrap();
        // sources have unit-scale Laplace variance 2, so normalize rows
        let mut normed = total.clone();
        for i in 0..2 {
            let n = linalg::norm(total.row(i));
            for j in 0..2 {
                normed[(i, j)] /= n;
            }
        }
        assert!(signed_perm_distance(&normed) <= 0.1, "{normed:?}");
    }

    #[test]
    fn ica_log_likelihood_is_monotone() {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = laplace_matrix(seed + 100, 3000, 3);
            let mix: Vec<f64> = (0..9).map(|_| StandardNormal.sample(&mut rng)).collect();
            let a = Matrix::from_vec(3, 3, mix).unwrap();
            let x: Vec<f64> = s.row_iter().flat_map(|r| a.mul_vec(r)).collect();
            let x = FeatureMatrix::new(3000, 3, x).unwrap();
            let fit = IcaTransform::fit_traced(&x, 30).unwrap();
            assert_eq!(fit.log_likelihood.len(), 31);
            for w in fit.log_likelihood.windows(2) {
                assert!(w[1] >= w[0] - 1e-9, "{:?}", fit.log_likelihood);
            }
            for n in &fit.row_norms {
                assert!((n - 1.0).abs() < 1e-6);
            }
            let replay = fit.transform.apply(&x).unwrap();
            assert_eq!(replay, fit.sources);
        }
    }

    #[test]
    fn ica_identity_demixing_matches_whitening() {
        let x = laplace_matrix(5, 200, 3);
        let whiten = WhitenTransform::fit(&x).unwrap();
        let ica = IcaTransform {
            whiten: whiten.clone(),
            demixing: Matrix::identity(3),
        };
        assert_eq!(ica.apply(&x).unwrap(), whiten.apply(&x).unwrap());
        let mean_row = FeatureMatrix::new(1, 3, whiten.pca.mean.clone()).unwrap();
        assert!(ica.apply(&mean_row).unwrap().values().iter().all(|&v| v == 0.0));
        assert!(matches!(IcaTransform::fit(&x, 0), Err(Error::Param(_))));
    }

    #[test]
    fn ica_with_degenerate_dimension() {
        let s = laplace_matrix(6, 1000, 2);
        let rows: Vec<Vec<f64>> = s.row_iter().map(|r| vec![r[0], r[1], r[0] - r[1]]).collect();
        let x = FeatureMatrix::from_rows(&rows).unwrap();
        let fit = IcaTransform::fit_traced(&x, 20).unwrap();
        assert_eq!(fit.transform.whiten.retained(), 2);
        assert!((0..1000).all(|i| fit.sources.get(i, 2) == 0.0));
    }

    #[test]
    fn fits_are_deterministic() {
        let x = laplace_matrix(7, 3000, 4);
        let a = IcaTransform::fit(&x, 10).unwrap();
        let b = rayon::ThreadPoolBuilder::new()
            .num_threads(3)
            .build()
            .unwrap()
            .install(|| IcaTransform::fit(&x, 10).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn transform_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let x = laplace_matrix(8, 300, 3);
        for kind in [
            PreprocessKind::Standardize,
            PreprocessKind::Pca,
            PreprocessKind::Whiten,
            PreprocessKind::Ica,
        ] {
            let t = Transform::fit(kind, &x, 5).unwrap().unwrap();
            let p = dir.path().join(format!("{kind}.dsut"));
            t.save(&p).unwrap();
            let back = Transform::load(&p).unwrap();
            assert_eq!(back, t);
            assert_eq!(back.kind(), kind);
            assert_eq!(back.apply(&x).unwrap(), t.apply(&x).unwrap());
            let wide = laplace_matrix(9, 5, 4);
            assert!(matches!(back.apply(&wide), Err(Error::Dimension { .. })));
        }
        assert!(Transform::fit(PreprocessKind::None, &x, 5).unwrap().is_none());
    }

    #[test]
    fn transform_file_errors() {
        let x = laplace_matrix(8, 50, 2);
        let bytes = Transform::fit(PreprocessKind::Pca, &x, 1).unwrap().unwrap().to_bytes();
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"NOPE");
        assert!(matches!(Transform::from_bytes(&bad), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(Transform::from_bytes(&bad).unwrap_err().to_string().contains("version"));
        let mut bad = bytes.clone();
        bad.pop();
        assert!(matches!(Transform::from_bytes(&bad), Err(Error::Format { .. })));
        let mut bad = bytes;
        bad.push(0);
        assert!(matches!(Transform::from_bytes(&bad), Err(Error::Format { .. })));
    }
}
