//! Small dense real-matrix arithmetic: the full-rank pseudoinverse, angular
//! distance between matrices seen as vectors, and a finite-difference
//! gradient checker used to validate every analytic gradient in the crate.
//!
//! Everything here is f64 and dependency-free. The pseudoinverse goes through
//! the normal equations with a k x k Gaussian elimination; all callers have
//! k <= 3 and well-conditioned systems.

use thiserror::Error;

/// Clamp distance from +-1 for the arccos argument. The gradient at the
/// clamp boundary uses the clamped value, which is finite (large) instead of
/// infinite, so optimization stays defined when two matrices align exactly.
pub const COS_CLAMP: f64 = 1e-12;

/// Pivot magnitude below which Gaussian elimination reports a singular system.
pub const PIVOT_EPS: f64 = 1e-14;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("matrix data length {len} does not match {rows}x{cols}")]
    DimensionMismatch { len: usize, rows: usize, cols: usize },
    #[error("matrix entries must be finite")]
    NonFinite,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("normal matrix is numerically singular (pivot {pivot:e})")]
    SingularSystem { pivot: f64 },
    #[error("angular distance is undefined for a zero matrix")]
    ZeroMatrix,
}

/// Dense row-major matrix of 64-bit reals. Constructors reject non-finite
/// entries; dimensions are fixed after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        if data.len() != rows * cols || rows == 0 || cols == 0 {
            return Err(NumericsError::DimensionMismatch { len: data.len(), rows, cols });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(NumericsError::NonFinite);
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
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
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix, NumericsError> {
        if self.cols != other.rows {
            return Err(NumericsError::ShapeMismatch(format!(
                "{}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let orow = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &o) in dst.iter_mut().zip(orow) {
                    *d += a * o;
                }
            }
        }
        Ok(out)
    }

    pub fn scaled(&self, c: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &Matrix, c: f64) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (d, &o) in self.data.iter_mut().zip(&other.data) {
            *d += c * o;
        }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        debug_assert_eq!(self.data.len(), other.data.len());
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    /// Frobenius norm (2-norm of the matrix seen as a vector).
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Dot product of two equally shaped matrices seen as vectors.
    pub fn vdot(&self, other: &Matrix) -> f64 {
        debug_assert_eq!(self.data.len(), other.data.len());
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

/// Moore-Penrose pseudoinverse of a full-column-rank m x k matrix (m >= k):
/// `(A^T A)^-1 A^T`, computed by solving the k x k normal system with
/// partially pivoted Gaussian elimination.
pub fn pseudoinverse(a: &Matrix) -> Result<Matrix, NumericsError> {
    let (m, k) = (a.rows(), a.cols());
    if m < k {
        return Err(NumericsError::ShapeMismatch(format!(
            "pseudoinverse requires rows >= cols, got {m}x{k}"
        )));
    }
    // Normal matrix N = A^T A (k x k) and right-hand side A^T (k x m),
    // eliminated together as an augmented system.
    let mut aug = vec![0.0; k * (k + m)];
    let w = k + m;
    for i in 0..k {
        for j in 0..k {
            let mut s = 0.0;
            for r in 0..m {
                s += a[(r, i)] * a[(r, j)];
            }
            aug[i * w + j] = s;
        }
        for r in 0..m {
            aug[i * w + k + r] = a[(r, i)];
        }
    }
    // Forward elimination with partial pivoting.
    for col in 0..k {
        let (mut piv_row, mut piv_val) = (col, aug[col * w + col].abs());
        for r in col + 1..k {
            let v = aug[r * w + col].abs();
            if v > piv_val {
                piv_row = r;
                piv_val = v;
            }
        }
        if piv_val < PIVOT_EPS {
            return Err(NumericsError::SingularSystem { pivot: piv_val });
        }
        if piv_row != col {
            for j in 0..w {
                aug.swap(col * w + j, piv_row * w + j);
            }
        }
        let piv = aug[col * w + col];
        for r in 0..k {
            if r == col {
                continue;
            }
            let factor = aug[r * w + col] / piv;
            if factor == 0.0 {
                continue;
            }
            for j in col..w {
                aug[r * w + j] -= factor * aug[col * w + j];
            }
        }
    }
    // Back-substitute (the matrix is diagonal after Gauss-Jordan).
    let mut out = Matrix::zeros(k, m);
    for i in 0..k {
        let piv = aug[i * w + i];
        for j in 0..m {
            out[(i, j)] = aug[i * w + k + j] / piv;
        }
    }
    Ok(out)
}

fn clamped_cosine(u: &Matrix, v: &Matrix) -> Result<(f64, f64, f64), NumericsError> {
    if u.rows() != v.rows() || u.cols() != v.cols() {
        return Err(NumericsError::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            u.rows(),
            u.cols(),
            v.rows(),
            v.cols()
        )));
    }
    let nu = u.norm();
    let nv = v.norm();
    if nu == 0.0 || nv == 0.0 {
        return Err(NumericsError::ZeroMatrix);
    }
    let rho = (u.vdot(v) / (nu * nv)).clamp(-1.0 + COS_CLAMP, 1.0 - COS_CLAMP);
    Ok((rho, nu, nv))
}

/// Angle in [0, pi] between two equally shaped matrices seen as vectors:
/// `arccos(U.V / (|U| |V|))`, with the cosine clamped away from +-1.
pub fn angular_distance(u: &Matrix, v: &Matrix) -> Result<f64, NumericsError> {
    let (rho, _, _) = clamped_cosine(u, v)?;
    Ok(rho.acos())
}

/// Angular distance with its gradients in both arguments. The clamped cosine
/// is used consistently in the value and the gradient.
pub fn angular_distance_grad(
    u: &Matrix,
    v: &Matrix,
) -> Result<(f64, Matrix, Matrix), NumericsError> {
    let (rho, nu, nv) = clamped_cosine(u, v)?;
    let value = rho.acos();
    // d acos(rho)/d rho = -1 / sqrt(1 - rho^2)
    let dacos = -1.0 / (1.0 - rho * rho).sqrt();
    // d rho / dU = V/(|U||V|) - rho U/|U|^2, symmetric in (U, V).
    let mut du = v.scaled(1.0 / (nu * nv));
    du.add_scaled(u, -rho / (nu * nu));
    let mut dv = u.scaled(1.0 / (nu * nv));
    dv.add_scaled(v, -rho / (nv * nv));
    Ok((value, du.scaled(dacos), dv.scaled(dacos)))
}

/// Compares an analytic gradient against central finite differences of `f`
/// at `x`. Returns the max over entries of |analytic - numeric| scaled by
/// max(1, |numeric|).
pub fn grad_check(
    f: impl Fn(&Matrix) -> f64,
    analytic: &Matrix,
    x: &Matrix,
    eps: f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for idx in 0..x.data().len() {
        let orig = probe.data()[idx];
        probe.data_mut()[idx] = orig + eps;
        let fp = f(&probe);
        probe.data_mut()[idx] = orig - eps;
        let fm = f(&probe);
        probe.data_mut()[idx] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let err = (analytic.data()[idx] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random_matrix(rng: &mut SplitMix64, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.uniform(lo, hi))
    }

    #[test]
    fn constructor_rejects_bad_input() {
        assert!(matches!(
            Matrix::new(2, 2, vec![1.0; 3]),
            Err(NumericsError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            Matrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(NumericsError::NonFinite)
        ));
    }

    #[test]
    fn pseudoinverse_identity() {
        let p = pseudoinverse(&Matrix::identity(3)).unwrap();
        assert!(p.max_abs_diff(&Matrix::identity(3)) < 1e-15);
    }

    #[test]
    fn pseudoinverse_diagonal_embedding() {
        let a = Matrix::new(3, 2, vec![2.0, 0.0, 0.0, 4.0, 0.0, 0.0]).unwrap();
        let p = pseudoinverse(&a).unwrap();
        let expected = Matrix::new(2, 3, vec![0.5, 0.0, 0.0, 0.0, 0.25, 0.0]).unwrap();
        assert!(p.max_abs_diff(&expected) < 1e-15);
    }

    /// Brute-force least-squares oracle: solve A x = e_i for each basis
    /// column with an independent normal-equation elimination, column by
    /// column, and compare against the pseudoinverse rows.
    fn least_squares_columns(a: &Matrix) -> Matrix {
        let (m, k) = (a.rows(), a.cols());
        let mut out = Matrix::zeros(k, m);
        for col in 0..m {
            // normal system N x = A^T e_col
            let mut n = vec![vec![0.0; k + 1]; k];
            for i in 0..k {
                for j in 0..k {
                    for r in 0..m {
                        n[i][j] += a[(r, i)] * a[(r, j)];
                    }
                }
                n[i][k] = a[(col, i)];
            }
            // plain elimination without pivoting (oracle only)
            for p in 0..k {
                for r in p + 1..k {
                    let f = n[r][p] / n[p][p];
                    for j in p..=k {
                        n[r][j] -= f * n[p][j];
                    }
                }
            }
            let mut x = vec![0.0; k];
            for p in (0..k).rev() {
                let mut s = n[p][k];
                for j in p + 1..k {
                    s -= n[p][j] * x[j];
                }
                x[p] = s / n[p][p];
            }
            for i in 0..k {
                out[(i, col)] = x[i];
            }
        }
        out
    }

    #[test]
    fn pseudoinverse_random_31x3() {
        let mut rng = SplitMix64::new(11);
        for _ in 0..20 {
            let a = random_matrix(&mut rng, 31, 3, 0.1, 1.0);
            let p = pseudoinverse(&a).unwrap();
            let pa = p.matmul(&a).unwrap();
            assert!(pa.max_abs_diff(&Matrix::identity(3)) < 1e-9);
            let oracle = least_squares_columns(&a);
            assert!(p.max_abs_diff(&oracle) < 1e-9);
        }
    }

    #[test]
    fn pseudoinverse_square_matches_inverse() {
        let a = Matrix::new(3, 3, vec![2.0, 1.0, 0.0, 0.0, 3.0, 1.0, 1.0, 0.0, 2.0]).unwrap();
        let p = pseudoinverse(&a).unwrap();
        let ap = a.matmul(&p).unwrap();
        assert!(ap.max_abs_diff(&Matrix::identity(3)) < 1e-12);
    }

    #[test]
    fn pseudoinverse_singular_errors() {
        let a = Matrix::new(3, 2, vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(matches!(
            pseudoinverse(&a),
            Err(NumericsError::SingularSystem { .. })
        ));
    }

    #[test]
    fn angular_identical_inputs() {
        let u = Matrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let d = angular_distance(&u, &u).unwrap();
        assert!(d < 2e-6, "clamp-limited zero, got {d}");
    }

    #[test]
    fn angular_orthogonal() {
        let u = Matrix::new(1, 2, vec![1.0, 0.0]).unwrap();
        let v = Matrix::new(1, 2, vec![0.0, 1.0]).unwrap();
        let d = angular_distance(&u, &v).unwrap();
        assert!((d - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn angular_scale_invariance_and_symmetry() {
        let mut rng = SplitMix64::new(5);
        for _ in 0..50 {
            let u = random_matrix(&mut rng, 3, 2, -1.0, 1.0);
            let v = random_matrix(&mut rng, 3, 2, -1.0, 1.0);
            let c = rng.uniform(0.1, 10.0);
            let d = angular_distance(&u, &v).unwrap();
            assert!((0.0..=std::f64::consts::PI).contains(&d));
            assert_eq!(d, angular_distance(&v, &u).unwrap());
            let ds = angular_distance(&u.scaled(c), &v).unwrap();
            assert!((d - ds).abs() < 1e-9);
        }
        let u = Matrix::new(1, 2, vec![1.0, 1.0]).unwrap();
        let v = Matrix::new(1, 2, vec![3.0, 3.0]).unwrap();
        assert!(angular_distance(&u, &v).unwrap() < 2e-6);
    }

    #[test]
    fn angular_zero_matrix_errors() {
        let u = Matrix::zeros(2, 2);
        let v = Matrix::new(2, 2, vec![1.0; 4]).unwrap();
        assert!(matches!(
            angular_distance(&u, &v),
            Err(NumericsError::ZeroMatrix)
        ));
    }

    #[test]
    fn grad_check_quadratic() {
        let mut rng = SplitMix64::new(9);
        let x = random_matrix(&mut rng, 4, 3, -2.0, 2.0);
        // f(X) = 0.5 |X|^2 has gradient X and the central difference is exact.
        let err = grad_check(|m| 0.5 * m.norm().powi(2), &x, &x, 1e-5);
        assert!(err < 1e-8, "relative error {err}");
    }

    #[test]
    fn grad_check_angular_distance() {
        let mut rng = SplitMix64::new(13);
        for _ in 0..20 {
            let x = random_matrix(&mut rng, 3, 3, 0.1, 1.0);
            let v = random_matrix(&mut rng, 3, 3, 0.1, 1.0);
            let (_, du, _) = angular_distance_grad(&x, &v).unwrap();
            let err = grad_check(|m| angular_distance(m, &v).unwrap(), &du, &x, 1e-6);
            assert!(err < 1e-5, "relative error {err}");
        }
    }

    #[test]
    fn grad_check_angular_second_argument() {
        let mut rng = SplitMix64::new(17);
        let u = random_matrix(&mut rng, 5, 3, 0.1, 1.0);
        let x = random_matrix(&mut rng, 5, 3, 0.1, 1.0);
        let (_, _, dv) = angular_distance_grad(&u, &x).unwrap();
        let err = grad_check(|m| angular_distance(&u, m).unwrap(), &dv, &x, 1e-6);
        assert!(err < 1e-5, "relative error {err}");
    }
}
