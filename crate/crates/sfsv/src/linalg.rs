//! Dense linear-algebra kernels with the numerical-stability policy used by
//! the compressor: SVD with a deterministic sign convention, symmetric
//! positive-(semi)definite factorization with an escalating jitter schedule
//! and an eigendecomposition fallback, and factor solves that never form an
//! explicit inverse.
//!
//! All kernels operate on 64-bit reals. The raw decompositions are delegated
//! to `nalgebra`; this module owns the contracts, conventions and fallbacks.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Jitter multipliers (times the mean diagonal) tried in order before the
/// eigendecomposition fallback kicks in.
pub const DEFAULT_JITTER_SCHEDULE: [f64; 5] = [0.0, 1e-12, 1e-10, 1e-8, 1e-6];

/// Relative cutoff under which a factor is treated as singular.
const SINGULAR_CUTOFF: f64 = 1e-12;

/// Dense row-major matrix of 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Build a matrix from row-major data. Fails when the length does not
    /// match or an entry is non-finite.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Contract(format!(
                "matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("matrix entry {v}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
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
        Self { rows, cols, data }
    }

    /// Square matrix with `d` on the diagonal.
    pub fn diag(d: &[f64]) -> Self {
        let n = d.len();
        Self::from_fn(n, n, |i, j| if i == j { d[i] } else { 0.0 })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
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

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Matrix product; panics on a dimension mismatch (internal contract).
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(
            self.cols, other.rows,
            "matmul dimension mismatch: {}x{} * {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let row = k * other.cols;
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.data[row + j];
                }
            }
        }
        out
    }

    /// Matrix-vector product.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, x.len(), "mul_vec dimension mismatch");
        let mut out = vec![0.0; self.rows];
        for i in 0..self.rows {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            out[i] = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
        out
    }

    /// Transposed matrix-vector product `self^T * x`.
    pub fn mul_vec_transposed(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, x.len(), "mul_vec_transposed dimension mismatch");
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            let xi = x[i];
            if xi == 0.0 {
                continue;
            }
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * xi;
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        self.add_scaled(other, 1.0)
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        self.add_scaled(other, -1.0)
    }

    /// `self + s * other`.
    pub fn add_scaled(&self, other: &Matrix, s: f64) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + s * b)
            .collect();
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn trace(&self) -> f64 {
        assert_eq!(self.rows, self.cols, "trace of a non-square matrix");
        (0..self.rows).map(|i| self.get(i, i)).sum()
    }

    /// Max asymmetry relative to the Frobenius norm; 0 for empty matrices.
    pub fn relative_asymmetry(&self) -> f64 {
        assert_eq!(self.rows, self.cols);
        let norm = self.frobenius_norm();
        if norm == 0.0 {
            return 0.0;
        }
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst / norm
    }

    fn to_na(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    fn from_na(m: &DMatrix<f64>) -> Matrix {
        Matrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Thin SVD `a = u * diag(s) * vt` with `r = min(rows, cols)`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Matrix,
    pub singular_values: Vec<f64>,
    pub vt: Matrix,
}

/// How a symmetric factorization was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorMode {
    Cholesky,
    EvdFallback,
}

impl FactorMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FactorMode::Cholesky => "cholesky",
            FactorMode::EvdFallback => "evd_fallback",
        }
    }
}

/// Square factor with `factor * factor^T` reconstructing the (jittered)
/// input. In `Cholesky` mode the factor is lower-triangular.
#[derive(Debug, Clone)]
pub struct FactorResult {
    pub factor: Matrix,
    pub mode: FactorMode,
    pub jitter_used: f64,
}

impl FactorResult {
    /// Identity factor of order `n` (Cholesky mode, no jitter).
    pub fn identity(n: usize) -> Self {
        Self {
            factor: Matrix::identity(n),
            mode: FactorMode::Cholesky,
            jitter_used: 0.0,
        }
    }

    /// Whitening matrix `G = factor^T`, so that the factored input satisfies
    /// `input = G^T G`. Norms measured through `G` realize the quadratic form
    /// of the factored matrix.
    pub fn whitener(&self) -> Matrix {
        self.factor.transpose()
    }

    pub fn order(&self) -> usize {
        self.factor.rows()
    }
}

/// Which inverse application a factor solve performs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveSide {
    /// `factor^{-1} * b`
    LeftInverse,
    /// `factor^{-T} * b`
    LeftInverseTranspose,
    /// `b * factor^{-1}`
    RightInverse,
    /// `b * factor^{-T}`
    RightInverseTranspose,
}

/// Full thin SVD with singular values sorted descending and a deterministic
/// sign convention: the largest-magnitude entry of each left singular vector
/// is nonnegative.
pub fn svd(a: &Matrix) -> Result<SvdResult> {
    svd_role(a, "matrix")
}

/// Same as [`svd`] with a role label used in diagnostics.
pub fn svd_role(a: &Matrix, role: &str) -> Result<SvdResult> {
    if a.rows() == 0 || a.cols() == 0 {
        return Err(Error::Contract(format!(
            "svd of empty {role} ({}x{})",
            a.rows(),
            a.cols()
        )));
    }
    let na = a.to_na();
    let svd = nalgebra::linalg::SVD::try_new(na, true, true, f64::EPSILON, 0).ok_or_else(|| {
        Error::SvdNonConvergence {
            role: role.to_string(),
            rows: a.rows(),
            cols: a.cols(),
        }
    })?;
    let u_na = svd.u.expect("u requested");
    let vt_na = svd.v_t.expect("v_t requested");
    let r = svd.singular_values.len();

    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&i, &j| {
        svd.singular_values[j]
            .partial_cmp(&svd.singular_values[i])
            .expect("finite singular values")
    });

    let mut u = Matrix::zeros(a.rows(), r);
    let mut vt = Matrix::zeros(r, a.cols());
    let mut s = Vec::with_capacity(r);
    for (dst, &src) in order.iter().enumerate() {
        s.push(svd.singular_values[src]);
        // Sign convention on the left singular vector.
        let mut peak = 0.0f64;
        let mut flip = 1.0f64;
        for i in 0..a.rows() {
            let v = u_na[(i, src)];
            if v.abs() > peak {
                peak = v.abs();
                flip = if v < 0.0 { -1.0 } else { 1.0 };
            }
        }
        for i in 0..a.rows() {
            u.set(i, dst, flip * u_na[(i, src)]);
        }
        for j in 0..a.cols() {
            vt.set(dst, j, flip * vt_na[(src, j)]);
        }
    }
    Ok(SvdResult {
        u,
        singular_values: s,
        vt,
    })
}

/// Rank-`k` truncation `(u_k * s_k^{1/2}, s_k^{1/2} * vt_k)`; the product of
/// the two factors is the Frobenius-optimal rank-`k` approximation.
pub fn truncated_svd(a: &Matrix, k: usize) -> Result<(Matrix, Matrix)> {
    let r = a.rows().min(a.cols());
    if k < 1 || k > r {
        return Err(Error::Contract(format!(
            "truncation rank {} out of range 1..={} for {}x{}",
            k,
            r,
            a.rows(),
            a.cols()
        )));
    }
    let dec = svd(a)?;
    let mut left = Matrix::zeros(a.rows(), k);
    let mut right = Matrix::zeros(k, a.cols());
    for c in 0..k {
        let root = dec.singular_values[c].max(0.0).sqrt();
        for i in 0..a.rows() {
            left.set(i, c, dec.u.get(i, c) * root);
        }
        for j in 0..a.cols() {
            right.set(c, j, dec.vt.get(c, j) * root);
        }
    }
    Ok((left, right))
}

/// Factor a symmetric PSD matrix as `factor * factor^T`.
///
/// Tries Cholesky with jitter `eps * I`, escalating through `schedule`
/// (multipliers of the mean diagonal). On persistent failure falls back to a
/// symmetric eigendecomposition with negative eigenvalues clamped to zero and
/// `factor = U * Lambda^{1/2}`.
pub fn factor_spd(s: &Matrix, schedule: &[f64]) -> Result<FactorResult> {
    factor_spd_role(s, schedule, "symmetric matrix")
}

/// Same as [`factor_spd`] with a role label used in diagnostics.
pub fn factor_spd_role(s: &Matrix, schedule: &[f64], role: &str) -> Result<FactorResult> {
    if s.rows() != s.cols() || s.rows() == 0 {
        return Err(Error::Contract(format!(
            "factor_spd needs a nonempty square matrix, got {}x{} ({role})",
            s.rows(),
            s.cols()
        )));
    }
    if s.relative_asymmetry() > 1e-9 {
        return Err(Error::Contract(format!(
            "factor_spd input is not symmetric ({role}, relative asymmetry {:.3e})",
            s.relative_asymmetry()
        )));
    }
    let n = s.rows();
    let mean_diag = s.trace() / n as f64;
    let unit = if mean_diag.abs() > 0.0 {
        mean_diag.abs()
    } else {
        1.0
    };

    for &factor in schedule {
        let eps = factor * unit;
        let jittered = if eps == 0.0 {
            s.to_na()
        } else {
            let mut m = s.to_na();
            for i in 0..n {
                m[(i, i)] += eps;
            }
            m
        };
        if let Some(chol) = nalgebra::linalg::Cholesky::new(jittered) {
            return Ok(FactorResult {
                factor: Matrix::from_na(&chol.l()),
                mode: FactorMode::Cholesky,
                jitter_used: eps,
            });
        }
    }

    // Eigendecomposition fallback on the unjittered input.
    let eig = nalgebra::linalg::SymmetricEigen::try_new(s.to_na(), f64::EPSILON, 0).ok_or_else(
        || Error::EigenFailure {
            role: role.to_string(),
            order: n,
        },
    )?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .partial_cmp(&eig.eigenvalues[i])
            .expect("finite eigenvalues")
    });
    let mut factor = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let root = eig.eigenvalues[src].max(0.0).sqrt();
        let mut peak = 0.0f64;
        let mut flip = 1.0f64;
        for i in 0..n {
            let v = eig.eigenvectors[(i, src)];
            if v.abs() > peak {
                peak = v.abs();
                flip = if v < 0.0 { -1.0 } else { 1.0 };
            }
        }
        for i in 0..n {
            factor.set(i, dst, flip * eig.eigenvectors[(i, src)] * root);
        }
    }
    Ok(FactorResult {
        factor,
        mode: FactorMode::EvdFallback,
        jitter_used: 0.0,
    })
}

/// Apply an inverse of the factor to `b` without forming the inverse.
///
/// Cholesky factors use triangular substitution and reject near-singular
/// diagonals. Eigendecomposition factors apply the Moore-Penrose
/// pseudoinverse (components below `1e-12` of the top singular value are
/// dropped), which is what makes rank-deficient calibration statistics
/// usable.
pub fn solve_factor(f: &FactorResult, b: &Matrix, side: SolveSide) -> Result<Matrix> {
    let n = f.order();
    let contracted = match side {
        SolveSide::LeftInverse | SolveSide::LeftInverseTranspose => b.rows(),
        SolveSide::RightInverse | SolveSide::RightInverseTranspose => b.cols(),
    };
    if contracted != n {
        return Err(Error::Contract(format!(
            "solve_factor dimension mismatch: factor order {} vs operand {}x{}",
            n,
            b.rows(),
            b.cols()
        )));
    }
    match f.mode {
        FactorMode::Cholesky => {
            let mut min_diag = f64::INFINITY;
            let mut max_diag = 0.0f64;
            for i in 0..n {
                let d = f.factor.get(i, i).abs();
                min_diag = min_diag.min(d);
                max_diag = max_diag.max(d);
            }
            if min_diag <= SINGULAR_CUTOFF * max_diag || max_diag == 0.0 {
                return Err(Error::SingularFactor(format!(
                    "triangular factor diagonal ratio {:.3e}",
                    if max_diag == 0.0 {
                        0.0
                    } else {
                        min_diag / max_diag
                    }
                )));
            }
            Ok(match side {
                SolveSide::LeftInverse => solve_lower(&f.factor, b),
                SolveSide::LeftInverseTranspose => solve_lower_transposed(&f.factor, b),
                SolveSide::RightInverse => {
                    solve_lower_transposed(&f.factor, &b.transpose()).transpose()
                }
                SolveSide::RightInverseTranspose => {
                    solve_lower(&f.factor, &b.transpose()).transpose()
                }
            })
        }
        FactorMode::EvdFallback => {
            let pinv = pseudo_inverse(&f.factor)?;
            Ok(match side {
                SolveSide::LeftInverse => pinv.matmul(b),
                SolveSide::LeftInverseTranspose => pinv.transpose().matmul(b),
                SolveSide::RightInverse => b.matmul(&pinv),
                SolveSide::RightInverseTranspose => b.matmul(&pinv.transpose()),
            })
        }
    }
}

/// Forward substitution: solve `L * x = b` for lower-triangular `L`.
fn solve_lower(l: &Matrix, b: &Matrix) -> Matrix {
    let n = l.rows();
    let mut x = b.clone();
    for col in 0..b.cols() {
        for i in 0..n {
            let mut acc = x.get(i, col);
            for k in 0..i {
                acc -= l.get(i, k) * x.get(k, col);
            }
            x.set(i, col, acc / l.get(i, i));
        }
    }
    x
}

/// Back substitution: solve `L^T * x = b` for lower-triangular `L`.
fn solve_lower_transposed(l: &Matrix, b: &Matrix) -> Matrix {
    let n = l.rows();
    let mut x = b.clone();
    for col in 0..b.cols() {
        for i in (0..n).rev() {
            let mut acc = x.get(i, col);
            for k in (i + 1)..n {
                acc -= l.get(k, i) * x.get(k, col);
            }
            x.set(i, col, acc / l.get(i, i));
        }
    }
    x
}

fn pseudo_inverse(m: &Matrix) -> Result<Matrix> {
    let dec = svd_role(m, "eigendecomposition factor")?;
    let top = dec.singular_values.first().copied().unwrap_or(0.0);
    let cutoff = SINGULAR_CUTOFF * top;
    let r = dec.singular_values.len();
    // pinv = V * S^+ * U^T
    let mut scaled_vt = Matrix::zeros(r, m.cols());
    for c in 0..r {
        let s = dec.singular_values[c];
        let inv = if s > cutoff { 1.0 / s } else { 0.0 };
        for j in 0..m.cols() {
            scaled_vt.set(c, j, dec.vt.get(c, j) * inv);
        }
    }
    Ok(scaled_vt.transpose().matmul(&dec.u.transpose()))
}
