//! Minimal dense linear algebra: orthonormalization, a symmetric eigensolver,
//! least squares, and subspace angles.
//!
//! Everything is plain `f64`, row-major, and deterministic. The sizes we care
//! about are small (d ≤ 2048, r ≤ 64), so the solvers favour simplicity:
//! modified Gram–Schmidt with one reorthogonalization pass for QR, and cyclic
//! Jacobi rotations for the eigensolver.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumlinError {
    #[error("matrix is rank deficient (pivot norm {0:.3e} below 1e-12)")]
    RankDeficient(f64),
    #[error("matrix is not symmetric (max asymmetry {0:.3e})")]
    NotSymmetric(f64),
    #[error("eigensolver failed to converge within {0} sweeps")]
    NoConvergence(usize),
    #[error("normal equations numerically singular (condition estimate {0:.3e})")]
    Singular(f64),
    #[error("input columns are not orthonormal (defect {0:.3e})")]
    NotOrthonormal(f64),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
}

/// Dense row-major matrix of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        assert!(!rows.is_empty(), "from_rows: empty row set");
        let cols = rows[0].len();
        assert!(rows.iter().all(|r| r.len() == cols), "from_rows: ragged rows");
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            data.extend_from_slice(r);
        }
        Matrix { rows: rows.len(), cols, data }
    }

    /// Column vector from a slice.
    pub fn column(v: &[f64]) -> Self {
        Matrix { rows: v.len(), cols: 1, data: v.to_vec() }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul: inner dimension mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let out_row = out.row_mut(i);
                for (o, &b) in out_row.iter_mut().zip(orow.iter()) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec: dimension mismatch");
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    /// `selfᵀ · v` without forming the transpose.
    pub fn tr_matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, v.len(), "tr_matvec: dimension mismatch");
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            let vi = v[i];
            if vi == 0.0 {
                continue;
            }
            for (o, &a) in out.iter_mut().zip(self.row(i).iter()) {
                *o += vi * a;
            }
        }
        out
    }

    /// `self + s · other`, shapes must match.
    pub fn add_scaled(&self, other: &Matrix, s: f64) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| a + s * b)
            .collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        let data = self.data.iter().map(|&a| a * s).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|&a| a * a).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, &a| m.max(a.abs()))
    }

    pub fn trace(&self) -> f64 {
        assert_eq!(self.rows, self.cols, "trace: matrix not square");
        (0..self.rows).map(|i| self.get(i, i)).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|a| a.is_finite())
    }

    /// Spectral norm of a symmetric matrix (largest |eigenvalue|).
    pub fn sym_spectral_norm(&self) -> Result<f64, NumlinError> {
        let spec = symmetric_eig(self)?;
        Ok(spec
            .eigenvalues
            .iter()
            .fold(0.0_f64, |m, &l| m.max(l.abs())))
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b.iter()).map(|(&x, &y)| x * y).sum()
}

#[inline]
pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `a + s·b` elementwise.
pub fn axpy(a: &[f64], b: &[f64], s: f64) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b.iter()).map(|(&x, &y)| x + s * y).collect()
}

/// Eigendecomposition of a symmetric matrix, eigenvalues sorted descending,
/// eigenvector columns orthonormal and aligned with the eigenvalues.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Matrix,
}

impl Spectrum {
    /// Smallest eigenvalue (last entry).
    pub fn min_eigenvalue(&self) -> f64 {
        *self.eigenvalues.last().expect("empty spectrum")
    }

    /// Largest eigenvalue (first entry).
    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues[0]
    }
}

const QR_PIVOT_TOL: f64 = 1e-12;
const JACOBI_SWEEP_CAP: usize = 100;
const JACOBI_OFF_TOL: f64 = 1e-12;
const SYMMETRY_TOL: f64 = 1e-10;
const ORTHONORMAL_TOL: f64 = 1e-8;
const CONDITION_CAP: f64 = 1e14;

/// Orthonormalize the columns of a full-column-rank d×r matrix (d ≥ r) by
/// modified Gram–Schmidt with one reorthogonalization pass. The result has
/// the same column span.
pub fn qr_orthonormalize(m: &Matrix) -> Result<Matrix, NumlinError> {
    let (d, r) = (m.rows(), m.cols());
    if d < r {
        return Err(NumlinError::DimMismatch(format!(
            "qr_orthonormalize needs rows >= cols, got {d}x{r}"
        )));
    }
    let mut cols: Vec<Vec<f64>> = (0..r).map(|j| m.col(j)).collect();
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(r);
    for j in 0..r {
        let mut v = cols[j].clone();
        // two passes of projection removal
        for _ in 0..2 {
            for qk in &q {
                let c = dot(&v, qk);
                for (vi, qi) in v.iter_mut().zip(qk.iter()) {
                    *vi -= c * qi;
                }
            }
        }
        let n = norm2(&v);
        if n < QR_PIVOT_TOL {
            return Err(NumlinError::RankDeficient(n));
        }
        for vi in v.iter_mut() {
            *vi /= n;
        }
        q.push(v);
        cols[j].clear();
    }
    Ok(Matrix::from_fn(d, r, |i, j| q[j][i]))
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// The sweep loop stops when the off-diagonal Frobenius mass falls below
/// `1e-12 · ‖S‖_F`; more than 100 sweeps signals pathological input.
pub fn symmetric_eig(s: &Matrix) -> Result<Spectrum, NumlinError> {
    let n = s.rows();
    if s.cols() != n {
        return Err(NumlinError::DimMismatch(format!(
            "symmetric_eig needs a square matrix, got {}x{}",
            s.rows(),
            s.cols()
        )));
    }
    let mut asym = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            asym = asym.max((s.get(i, j) - s.get(j, i)).abs());
        }
    }
    if asym >= SYMMETRY_TOL {
        return Err(NumlinError::NotSymmetric(asym));
    }

    let mut a = s.clone();
    // symmetrize exactly so rotations stay consistent
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a.get(i, j) + a.get(j, i));
            a.set(i, j, v);
            a.set(j, i, v);
        }
    }
    let mut v = Matrix::identity(n);
    let fro = a.frobenius_norm();
    let tol = JACOBI_OFF_TOL * fro;

    let off = |a: &Matrix| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a.get(i, j) * a.get(i, j);
                }
            }
        }
        s.sqrt()
    };

    if fro > 0.0 {
        let mut converged = false;
        for _sweep in 0..JACOBI_SWEEP_CAP {
            if off(&a) <= tol {
                converged = true;
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = a.get(p, q);
                    if apq.abs() <= tol / (n as f64) {
                        continue;
                    }
                    let app = a.get(p, p);
                    let aqq = a.get(q, q);
                    let theta = (aqq - app) / (2.0 * apq);
                    // smaller-magnitude root keeps rotations stable
                    let t = if theta >= 0.0 {
                        1.0 / (theta + (1.0 + theta * theta).sqrt())
                    } else {
                        1.0 / (theta - (1.0 + theta * theta).sqrt())
                    };
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s_ = t * c;
                    for k in 0..n {
                        let akp = a.get(k, p);
                        let akq = a.get(k, q);
                        a.set(k, p, c * akp - s_ * akq);
                        a.set(k, q, s_ * akp + c * akq);
                    }
                    for k in 0..n {
                        let apk = a.get(p, k);
                        let aqk = a.get(q, k);
                        a.set(p, k, c * apk - s_ * aqk);
                        a.set(q, k, s_ * apk + c * aqk);
                    }
                    for k in 0..n {
                        let vkp = v.get(k, p);
                        let vkq = v.get(k, q);
                        v.set(k, p, c * vkp - s_ * vkq);
                        v.set(k, q, s_ * vkp + c * vkq);
                    }
                }
            }
        }
        if !converged && off(&a) > tol {
            return Err(NumlinError::NoConvergence(JACOBI_SWEEP_CAP));
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        a.get(j, j)
            .partial_cmp(&a.get(i, i))
            .expect("eigenvalues must be comparable")
    });
    let eigenvalues: Vec<f64> = order.iter().map(|&i| a.get(i, i)).collect();
    let eigenvectors = Matrix::from_fn(n, n, |i, j| v.get(i, order[j]));
    Ok(Spectrum { eigenvalues, eigenvectors })
}

/// Ridge least squares: argmin ‖Ax − b‖² + ridge·‖x‖².
///
/// Solved through the eigendecomposition of the normal equations (the Gaussian
/// elimination route is reserved for test oracles). With `ridge = 0` a
/// condition estimate above 1e14 is reported as `Singular`.
pub fn least_squares(a: &Matrix, b: &[f64], ridge: f64) -> Result<Vec<f64>, NumlinError> {
    if a.rows() != b.len() {
        return Err(NumlinError::DimMismatch(format!(
            "least_squares: {} rows vs {} targets",
            a.rows(),
            b.len()
        )));
    }
    if ridge < 0.0 {
        return Err(NumlinError::DimMismatch("negative ridge".into()));
    }
    let p = a.cols();
    let mut gram = Matrix::zeros(p, p);
    for i in 0..a.rows() {
        let row = a.row(i);
        for j in 0..p {
            let rj = row[j];
            if rj == 0.0 {
                continue;
            }
            for k in j..p {
                let v = gram.get(j, k) + rj * row[k];
                gram.set(j, k, v);
            }
        }
    }
    for j in 0..p {
        for k in 0..j {
            gram.set(j, k, gram.get(k, j));
        }
    }
    let atb = a.tr_matvec(b);
    let spec = symmetric_eig(&gram)?;
    let lmax = spec.max_eigenvalue().max(0.0);
    let lmin = spec.min_eigenvalue();
    if ridge == 0.0 {
        let cond = if lmin <= 0.0 { f64::INFINITY } else { lmax / lmin };
        if cond > CONDITION_CAP {
            return Err(NumlinError::Singular(cond));
        }
    }
    // x = V diag(1/(λ+ridge)) Vᵀ Aᵀb
    let vt_atb = spec.eigenvectors.tr_matvec(&atb);
    let scaled: Vec<f64> = vt_atb
        .iter()
        .zip(spec.eigenvalues.iter())
        .map(|(&c, &l)| c / (l + ridge))
        .collect();
    Ok(spec.eigenvectors.matvec(&scaled))
}

/// Sine of the largest principal angle between the column spans of two
/// orthonormal d×r matrices: ‖(I − B₁B₁ᵀ)B₂‖₂, computed from the Gram matrix
/// B₁ᵀB₂ as √(1 − σ_min(B₁ᵀB₂)²).
pub fn subspace_sine(b1: &Matrix, b2: &Matrix) -> Result<f64, NumlinError> {
    if b1.rows() != b2.rows() || b1.cols() != b2.cols() {
        return Err(NumlinError::DimMismatch(format!(
            "subspace_sine: {}x{} vs {}x{}",
            b1.rows(),
            b1.cols(),
            b2.rows(),
            b2.cols()
        )));
    }
    for b in [b1, b2] {
        let defect = orthonormal_defect(b);
        if defect >= ORTHONORMAL_TOL {
            return Err(NumlinError::NotOrthonormal(defect));
        }
    }
    let g = b1.transpose().matmul(b2);
    let gtg = g.transpose().matmul(&g);
    let spec = symmetric_eig(&gtg)?;
    let lmin = spec.min_eigenvalue().clamp(0.0, 1.0);
    Ok((1.0 - lmin).max(0.0).sqrt())
}

/// max |BᵀB − I| entry, used to validate orthonormality preconditions.
pub fn orthonormal_defect(b: &Matrix) -> f64 {
    let g = b.transpose().matmul(b);
    let mut defect = 0.0_f64;
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            let target = if i == j { 1.0 } else { 0.0 };
            defect = defect.max((g.get(i, j) - target).abs());
        }
    }
    defect
}
