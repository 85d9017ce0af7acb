//! Dense linear algebra kernels: a row-major square/rectangular matrix, a
//! cyclic Jacobi eigensolver for symmetric matrices, and the small solves
//! used by the ICA updates.

use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

/// Relative off-diagonal Frobenius norm at which Jacobi sweeps stop.
pub const JACOBI_TOL: f64 = 1e-12;
/// Hard cap on Jacobi sweeps.
pub const JACOBI_MAX_SWEEPS: usize = 100;
/// Relative pivot threshold for [`solve_row`] and [`log_abs_det`].
pub const PIVOT_TOL: f64 = 1e-12;
const SIGN_TIE_TOL: f64 = 1e-12;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(Error::param(format!(
                "{} values do not fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.as_ref().len() != cols {
                return Err(Error::param("ragged rows"));
            }
            data.extend_from_slice(r.as_ref());
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Dimension {
                expected: self.cols,
                actual: other.rows,
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · v` for a column vector `v`.
    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.cols);
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    /// Largest absolute entry of `self - other`.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Eigendecomposition of a symmetric matrix.
///
/// Eigenvalues are sorted in descending order (ties keep their diagonal
/// order) and column `j` of `vectors` belongs to `values[j]`. Each
/// eigenvector's largest-magnitude entry is positive, the lowest index
/// winning ties.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

impl SymmetricEigen {
    /// `V · diag(λ) · Vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let n = self.values.len();
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let s: f64 = (0..n)
                    .map(|k| self.vectors[(i, k)] * self.values[k] * self.vectors[(j, k)])
                    .sum();
                out[(i, j)] = s;
                out[(j, i)] = s;
            }
        }
        out
    }
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// The input is symmetrized as `(A + Aᵀ)/2` first. Sweeps stop once the
/// off-diagonal Frobenius norm drops below `1e-12·‖A‖_F`, or after 100
/// sweeps.
pub fn eigh(a: &Matrix) -> Result<SymmetricEigen> {
    if !a.is_square() {
        return Err(Error::param(format!(
            "eigh needs a square matrix, got {}x{}",
            a.rows, a.cols
        )));
    }
    if a.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::param("eigh input contains non-finite values"));
    }
    let n = a.rows;
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            m[(i, j)] = 0.5 * (a[(i, j)] + a[(j, i)]);
        }
    }
    let mut v = Matrix::identity(n);
    let scale = m.frobenius();

    if scale > 0.0 {
        for _ in 0..JACOBI_MAX_SWEEPS {
            if off_diagonal_norm(&m) < JACOBI_TOL * scale {
                break;
            }
            for p in 0..n.saturating_sub(1) {
                for q in p + 1..n {
                    rotate(&mut m, &mut v, p, q);
                }
            }
        }
    }

    let diag: Vec<f64> = (0..n).map(|i| m[(i, i)]).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // stable: equal eigenvalues keep diagonal order
    order.sort_by(|&i, &j| diag[j].total_cmp(&diag[i]));

    let values: Vec<f64> = order.iter().map(|&i| diag[i]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        // entries within rounding of the maximum count as ties
        let peak = (0..n).fold(0.0f64, |m, k| m.max(v[(k, src)].abs()));
        let pivot = (0..n)
            .find(|&k| v[(k, src)].abs() >= peak * (1.0 - SIGN_TIE_TOL))
            .unwrap_or(0);
        let sign = if v[(pivot, src)] < 0.0 { -1.0 } else { 1.0 };
        for k in 0..n {
            vectors[(k, dst)] = sign * v[(k, src)];
        }
    }
    Ok(SymmetricEigen { values, vectors })
}

fn off_diagonal_norm(m: &Matrix) -> f64 {
    let n = m.rows;
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += m[(i, j)] * m[(i, j)];
            }
        }
    }
    s.sqrt()
}

/// Applies the rotation in the (p, q) plane that annihilates `m[p][q]`:
/// `m ← Jᵀ m J`, `v ← v J`.
fn rotate(m: &mut Matrix, v: &mut Matrix, p: usize, q: usize) {
    let apq = m[(p, q)];
    if apq == 0.0 {
        return;
    }
    let n = m.rows;
    let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
    let t = if theta.is_finite() {
        theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
    } else {
        0.0
    };
    if t == 0.0 {
        return;
    }
    let c = 1.0 / (t * t + 1.0).sqrt();
    let s = t * c;

    for k in 0..n {
        let kp = m[(k, p)];
        let kq = m[(k, q)];
        m[(k, p)] = c * kp - s * kq;
        m[(k, q)] = s * kp + c * kq;
    }
    for k in 0..n {
        let pk = m[(p, k)];
        let qk = m[(q, k)];
        m[(p, k)] = c * pk - s * qk;
        m[(q, k)] = s * pk + c * qk;
    }
    m[(p, q)] = 0.0;
    m[(q, p)] = 0.0;
    for k in 0..n {
        let kp = v[(k, p)];
        let kq = v[(k, q)];
        v[(k, p)] = c * kp - s * kq;
        v[(k, q)] = s * kp + c * kq;
    }
}

/// LU factorization with partial pivoting, in place. Returns the row
/// permutation parity, or the column at which a pivot fell below
/// `PIVOT_TOL` times its row's original max-abs norm.
fn lu_in_place(a: &mut Matrix, perm: &mut [usize]) -> std::result::Result<f64, usize> {
    let n = a.rows;
    let row_norms: Vec<f64> = (0..n)
        .map(|i| a.row(i).iter().fold(0.0f64, |m, v| m.max(v.abs())))
        .collect();
    let mut parity = 1.0;
    for (i, p) in perm.iter_mut().enumerate() {
        *p = i;
    }
    for col in 0..n {
        let mut best = col;
        for r in col + 1..n {
            if a[(r, col)].abs() > a[(best, col)].abs() {
                best = r;
            }
        }
        if best != col {
            for j in 0..n {
                a.data.swap(col * n + j, best * n + j);
            }
            perm.swap(col, best);
            parity = -parity;
        }
        let pivot = a[(col, col)];
        let norm = row_norms[perm[col]];
        if norm == 0.0 || pivot.abs() < PIVOT_TOL * norm {
            return Err(col);
        }
        for r in col + 1..n {
            let f = a[(r, col)] / pivot;
            if f == 0.0 {
                continue;
            }
            a[(r, col)] = f;
            for j in col + 1..n {
                let u = a[(col, j)];
                a[(r, j)] -= f * u;
            }
        }
    }
    Ok(parity)
}

/// Solves `m · x = b` for square `m`.
pub fn solve(m: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    if !m.is_square() || b.len() != m.rows {
        return Err(Error::Dimension {
            expected: m.rows,
            actual: b.len(),
        });
    }
    let n = m.rows;
    let mut lu = m.clone();
    let mut perm = vec![0; n];
    lu_in_place(&mut lu, &mut perm)
        .map_err(|col| Error::Numerical(format!("singular system at pivot {col}")))?;
    let mut x: Vec<f64> = perm.iter().map(|&p| b[p]).collect();
    for i in 0..n {
        let s: f64 = (0..i).map(|j| lu[(i, j)] * x[j]).sum();
        x[i] -= s;
    }
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|j| lu[(i, j)] * x[j]).sum();
        x[i] = (x[i] - s) / lu[(i, i)];
    }
    Ok(x)
}

/// `log |det m|`.
pub fn log_abs_det(m: &Matrix) -> Result<f64> {
    if !m.is_square() {
        return Err(Error::param("determinant of a non-square matrix"));
    }
    let mut lu = m.clone();
    let mut perm = vec![0; m.rows];
    lu_in_place(&mut lu, &mut perm)
        .map_err(|col| Error::Numerical(format!("singular matrix at pivot {col}")))?;
    Ok((0..m.rows).map(|i| lu[(i, i)].abs().ln()).sum())
}

/// Iterative-projection row update: solves `(W·V)·w = e_d` and rescales
/// the solution so that `wᵀ·V·w = 1`.
pub fn solve_row(w: &Matrix, v: &Matrix, d: usize) -> Result<Vec<f64>> {
    let n = w.rows;
    if !w.is_square() || !v.is_square() || v.rows != n {
        return Err(Error::Dimension {
            expected: n,
            actual: v.rows,
        });
    }
    if d >= n {
        return Err(Error::param(format!("component {d} out of range for {n}")));
    }
    let wv = w.matmul(v)?;
    let mut e = vec![0.0; n];
    e[d] = 1.0;
    let x = solve(&wv, &e)
        .map_err(|_| Error::Numerical(format!("singular W·V system for component {d}")))?;
    let quad = dot(&x, &v.mul_vec(&x));
    if !(quad > 0.0 && quad.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-positive quadratic form {quad} for component {d}"
        )));
    }
    let s = quad.sqrt();
    Ok(x.into_iter().map(|xi| xi / s).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_symmetric(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
        let mut a = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = rng.random_range(-1.0..1.0);
                a[(i, j)] = v;
                a[(j, i)] = v;
            }
        }
        a
    }

    #[test]
    fn identity_is_fixed() {
        let e = eigh(&Matrix::identity(3)).unwrap();
        assert_eq!(e.values, vec![1.0, 1.0, 1.0]);
        assert_eq!(e.vectors, Matrix::identity(3));
    }

    #[test]
    fn diagonal_sorted() {
        let e = eigh(&Matrix::diag(&[1.0, 4.0])).unwrap();
        assert_eq!(e.values, vec![4.0, 1.0]);
        assert_eq!(e.vectors, Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap());
    }

    #[test]
    fn two_by_two_hand_solution() {
        // characteristic polynomial (2-λ)² - 1 = 0 → λ ∈ {3, 1}
        let a = Matrix::from_rows(&[[2.0, 1.0], [1.0, 2.0]]).unwrap();
        let e = eigh(&a).unwrap();
        assert!((e.values[0] - 3.0).abs() < 1e-14);
        assert!((e.values[1] - 1.0).abs() < 1e-14);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        // column 1 is (1,-1)/√2 up to sign; the convention picks the first
        // entry on the magnitude tie
        let expect = Matrix::from_rows(&[[h, h], [h, -h]]).unwrap();
        assert!(e.vectors.max_abs_diff(&expect) < 1e-14, "{:?}", e.vectors);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(eigh(&Matrix::zeros(2, 3)).is_err());
        let mut a = Matrix::identity(2);
        a[(0, 1)] = f64::NAN;
        assert!(eigh(&a).is_err());
    }

    #[test]
    fn zero_matrix() {
        let e = eigh(&Matrix::zeros(3, 3)).unwrap();
        assert_eq!(e.values, vec![0.0; 3]);
        assert_eq!(e.vectors, Matrix::identity(3));
    }

    #[test]
    fn random_reconstruction_and_orthogonality() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [1, 2, 5, 17, 40] {
            let a = random_symmetric(&mut rng, n);
            let e = eigh(&a).unwrap();
            assert!(e.reconstruct().max_abs_diff(&a) <= 1e-8 * a.max_abs());
            let vtv = e.vectors.transpose().matmul(&e.vectors).unwrap();
            assert!(vtv.max_abs_diff(&Matrix::identity(n)) < 1e-10);
            assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
            for j in 0..n {
                let col = e.vectors.column(j);
                let av = a.mul_vec(&col);
                let resid: f64 = av
                    .iter()
                    .zip(&col)
                    .map(|(x, c)| (x - e.values[j] * c).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!(resid <= 1e-8 * a.frobenius().max(1.0));
            }
        }
    }

    #[test]
    fn deterministic_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_symmetric(&mut rng, 20);
        let e1 = eigh(&a).unwrap();
        let e2 = std::thread::spawn(move || eigh(&a).unwrap()).join().unwrap();
        assert_eq!(e1, e2);
    }

    #[test]
    fn solve_row_cases() {
        let i2 = Matrix::identity(2);
        assert_eq!(solve_row(&i2, &i2, 0).unwrap(), vec![1.0, 0.0]);
        // (W·V) w = e0 gives (0.25, 0); wᵀVw = 0.25, so w / 0.5 = (0.5, 0)
        let v = Matrix::diag(&[4.0, 1.0]);
        let w = solve_row(&i2, &v, 0).unwrap();
        assert_eq!(w, vec![0.5, 0.0]);
        assert!((dot(&w, &v.mul_vec(&w)) - 1.0).abs() < 1e-15);
        assert!(matches!(
            solve_row(&i2, &Matrix::zeros(2, 2), 1),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn solve_and_det() {
        let a = Matrix::from_rows(&[[0.0, 2.0], [3.0, 1.0]]).unwrap();
        let x = solve(&a, &[4.0, 5.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-15 && (x[1] - 2.0).abs() < 1e-15);
        assert!((log_abs_det(&a).unwrap() - 6f64.ln()).abs() < 1e-14);
        assert!(log_abs_det(&Matrix::from_rows(&[[1.0, 2.0], [2.0, 4.0]]).unwrap()).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn trace_matches_eigenvalue_sum(n in 1usize..24, seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = random_symmetric(&mut rng, n);
                let e = eigh(&a).unwrap();
                let sum: f64 = e.values.iter().sum();
                let tr = a.trace();
                prop_assert!((sum - tr).abs() <= 1e-9 * tr.abs().max(a.frobenius()));
                prop_assert!(e.reconstruct().max_abs_diff(&a) <= 1e-8 * a.max_abs());
            }
        }
    }
}
