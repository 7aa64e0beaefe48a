//! Dense symmetric-matrix kernel.
//!
//! Everything the identities need lives here: a cyclic Jacobi eigensolver,
//! PSD tests, spectral functions (square roots, inverse square roots,
//! inverses), norms, Givens rotations and Haar-random orthogonal matrices.
//! Storage is plain row-major `Vec<f64>`; no external linear algebra.

use crate::error::{Error, Result};
use crate::rng::NormalStream;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

pub fn norm(a: &[f64]) -> f64 {
    norm_sq(a).sqrt()
}

pub fn scaled(a: &[f64], s: f64) -> Vec<f64> {
    a.iter().map(|x| s * x).collect()
}

/// Dense general matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(d: usize) -> Self {
        let mut m = Self::zeros(d, d);
        for i in 0..d {
            m.data[i * d + i] = 1.0;
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

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows);
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let row = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, r) in dst.iter_mut().zip(row) {
                    *d += a * r;
                }
            }
        }
        out
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, x.len());
        (0..self.rows)
            .map(|i| dot(&self.data[i * self.cols..(i + 1) * self.cols], x))
            .collect()
    }

    /// `selfᵀ x`
    pub fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, x.len());
        let mut out = vec![0.0; self.cols];
        for (i, xi) in x.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(&self.data[i * self.cols..(i + 1) * self.cols]) {
                *o += a * xi;
            }
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn sub(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    /// ‖selfᵀ self − I‖_F
    pub fn orthogonality_defect(&self) -> f64 {
        self.transpose().matmul(self).sub(&Mat::identity(self.cols)).frobenius_norm()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Dense symmetric matrix. Symmetry is exact: it is checked on construction
/// from raw entries and preserved by construction everywhere else.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(dim: usize) -> Self {
        assert!(dim >= 1, "dimension must be positive");
        Self { dim, data: vec![0.0; dim * dim] }
    }

    pub fn identity(dim: usize) -> Self {
        Self::scaled_identity(dim, 1.0)
    }

    pub fn scaled_identity(dim: usize, s: f64) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.data[i * dim + i] = s;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len());
        for (i, v) in values.iter().enumerate() {
            m.data[i * values.len() + i] = *v;
        }
        m
    }

    /// Builds from the upper triangle of `f` (`i <= j`) and mirrors it.
    pub fn from_upper_fn(dim: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            for j in i..dim {
                let v = f(i, j);
                m.data[i * dim + j] = v;
                m.data[j * dim + i] = v;
            }
        }
        m
    }

    /// Takes a full row-major array; rejects any asymmetry.
    pub fn from_row_major(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() != dim * dim {
            return Err(Error::BadDimension(format!(
                "{} entries for dimension {dim}",
                data.len()
            )));
        }
        for i in 0..dim {
            for j in (i + 1)..dim {
                if data[i * dim + j] != data[j * dim + i] {
                    return Err(Error::NotSymmetric { row: i, col: j });
                }
            }
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.len();
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::BadDimension("ragged rows".into()));
        }
        Self::from_row_major(dim, rows.concat())
    }

    /// Outer product `s · v vᵀ`.
    pub fn outer(v: &[f64], s: f64) -> Self {
        Self::from_upper_fn(v.len(), |i, j| s * v[i] * v[j])
    }

    /// `Oᵀ H O` for a square `O`.
    pub fn congruence(&self, o: &Mat) -> SymMatrix {
        assert_eq!(o.rows(), self.dim);
        let ho = self.as_mat().matmul(o);
        let d = o.cols();
        SymMatrix::from_upper_fn(d, |i, j| (0..self.dim).map(|k| o.get(k, i) * ho.get(k, j)).sum())
    }

    /// `O H Oᵀ`
    pub fn congruence_t(&self, o: &Mat) -> SymMatrix {
        self.congruence(&o.transpose())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mat(&self) -> Mat {
        Mat { rows: self.dim, cols: self.dim, data: self.data.clone() }
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|x| !x.is_finite()) {
            Some(k) => Err(Error::NonFinite { row: k / self.dim, col: k % self.dim }),
            None => Ok(()),
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    pub fn mean_eigenvalue(&self) -> f64 {
        self.trace() / self.dim as f64
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.dim);
        (0..self.dim).map(|i| dot(self.row(i), x)).collect()
    }

    /// `xᵀ H x`
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.dim);
        let mut total = 0.0;
        for i in 0..self.dim {
            total += x[i] * dot(self.row(i), x);
        }
        total
    }

    /// `xᵀ H y`
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        dot(x, &self.matvec(y))
    }

    pub fn add(&self, other: &SymMatrix) -> SymMatrix {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &SymMatrix) -> SymMatrix {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> SymMatrix {
        SymMatrix { dim: self.dim, data: self.data.iter().map(|x| s * x).collect() }
    }

    /// `a·self + b·I`
    pub fn affine_identity(&self, a: f64, b: f64) -> SymMatrix {
        let mut m = self.scale(a);
        for i in 0..self.dim {
            m.data[i * self.dim + i] += b;
        }
        m
    }

    fn zip_with(&self, other: &SymMatrix, f: impl Fn(f64, f64) -> f64) -> SymMatrix {
        assert_eq!(self.dim, other.dim);
        SymMatrix {
            dim: self.dim,
            data: self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect(),
        }
    }

    /// Sub-block `rows × cols` as a general matrix.
    pub fn block(&self, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Mat {
        Mat::from_fn(rows.len(), cols.len(), |i, j| self.get(rows.start + i, cols.start + j))
    }

    /// Principal sub-block.
    pub fn principal(&self, range: std::ops::Range<usize>) -> SymMatrix {
        let s = range.start;
        SymMatrix::from_upper_fn(range.len(), |i, j| self.get(s + i, s + j))
    }

    /// Spectral norm (max |eigenvalue|).
    pub fn op_norm(&self) -> Result<f64> {
        let e = eig_sym(self)?;
        Ok(e.eigenvalues.iter().fold(0.0f64, |m, l| m.max(l.abs())))
    }
}

/// Eigen-decomposition `H = V diag(λ) Vᵀ`, eigenvalues ascending, eigenvectors
/// stored as the columns of `eigenvectors`.
#[derive(Debug, Clone)]
pub struct SpectralDecomp {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Mat,
}

impl SpectralDecomp {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn min(&self) -> f64 {
        self.eigenvalues[0]
    }

    pub fn max(&self) -> f64 {
        *self.eigenvalues.last().unwrap()
    }

    pub fn max_abs(&self) -> f64 {
        self.eigenvalues.iter().fold(0.0f64, |m, l| m.max(l.abs()))
    }

    pub fn vector(&self, k: usize) -> Vec<f64> {
        self.eigenvectors.column(k)
    }

    /// `V diag(f(λ)) Vᵀ`
    pub fn map(&self, f: impl Fn(f64) -> f64) -> SymMatrix {
        let d = self.dim();
        let fl: Vec<f64> = self.eigenvalues.iter().map(|&l| f(l)).collect();
        let v = &self.eigenvectors;
        SymMatrix::from_upper_fn(d, |i, j| (0..d).map(|k| v.get(i, k) * fl[k] * v.get(j, k)).sum())
    }

    pub fn reconstruct(&self) -> SymMatrix {
        self.map(|l| l)
    }
}

/// Cyclic Jacobi eigendecomposition with threshold sweeps.
pub fn eig_sym(m: &SymMatrix) -> Result<SpectralDecomp> {
    m.check_finite()?;
    let d = m.dim();
    let mut a = m.data.clone();
    let mut v = Mat::identity(d);
    let scale = m.frobenius_norm();

    if scale > 0.0 {
        for sweep in 0..100 {
            let mut off = 0.0;
            for p in 0..d {
                for q in (p + 1)..d {
                    off += a[p * d + q] * a[p * d + q];
                }
            }
            if off.sqrt() <= 1e-15 * scale {
                break;
            }
            // early sweeps skip rotations that are small relative to the mean
            // off-diagonal magnitude
            let threshold = if sweep < 3 { 0.2 * off.sqrt() / (d * d) as f64 } else { 0.0 };
            for p in 0..d {
                for q in (p + 1)..d {
                    let apq = a[p * d + q];
                    if apq.abs() <= threshold || apq == 0.0 {
                        continue;
                    }
                    let app = a[p * d + p];
                    let aqq = a[q * d + q];
                    let g100 = 100.0 * apq.abs();
                    if sweep > 3 && app.abs() + g100 == app.abs() && aqq.abs() + g100 == aqq.abs() {
                        a[p * d + q] = 0.0;
                        a[q * d + p] = 0.0;
                        continue;
                    }
                    let theta = (aqq - app) / (2.0 * apq);
                    let t = if theta.abs() > 1e150 {
                        0.5 / theta
                    } else {
                        theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                    };
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    let tau = s / (1.0 + c);

                    a[p * d + p] = app - t * apq;
                    a[q * d + q] = aqq + t * apq;
                    a[p * d + q] = 0.0;
                    a[q * d + p] = 0.0;
                    for r in 0..d {
                        if r == p || r == q {
                            continue;
                        }
                        let g = a[r * d + p];
                        let h = a[r * d + q];
                        let new_p = g - s * (h + g * tau);
                        let new_q = h + s * (g - h * tau);
                        a[r * d + p] = new_p;
                        a[p * d + r] = new_p;
                        a[r * d + q] = new_q;
                        a[q * d + r] = new_q;
                    }
                    for r in 0..d {
                        let g = v.get(r, p);
                        let h = v.get(r, q);
                        v.set(r, p, g - s * (h + g * tau));
                        v.set(r, q, h + s * (g - h * tau));
                    }
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| a[i * d + i].total_cmp(&a[j * d + j]));
    let eigenvalues = order.iter().map(|&k| a[k * d + k]).collect();
    let eigenvectors = Mat::from_fn(d, d, |i, j| v.get(i, order[j]));
    Ok(SpectralDecomp { eigenvalues, eigenvectors })
}

/// `true` iff the smallest eigenvalue is at least `-tol · max(1, |λ|_max)`.
pub fn psd_check(m: &SymMatrix, tol: f64) -> bool {
    match eig_sym(m) {
        Ok(e) => e.min() >= -tol * e.max_abs().max(1.0),
        Err(_) => false,
    }
}

pub fn require_psd(m: &SymMatrix, tol: f64) -> Result<SpectralDecomp> {
    let e = eig_sym(m)?;
    if e.min() < -tol * e.max_abs().max(1.0) {
        return Err(Error::NotPsd { min_eigenvalue: e.min() });
    }
    Ok(e)
}

fn require_pd(m: &SymMatrix) -> Result<SpectralDecomp> {
    let e = eig_sym(m)?;
    if e.min() <= 0.0 {
        return Err(Error::NotPd { min_eigenvalue: e.min() });
    }
    Ok(e)
}

/// `m^{-1/2}` for strictly positive definite `m`. Refuses near-singular input
/// instead of regularizing.
pub fn inv_sqrt(m: &SymMatrix) -> Result<SymMatrix> {
    Ok(require_pd(m)?.map(|l| 1.0 / l.sqrt()))
}

pub fn inverse_pd(m: &SymMatrix) -> Result<SymMatrix> {
    Ok(require_pd(m)?.map(|l| 1.0 / l))
}

/// Principal square root of a PSD matrix; tiny negative eigenvalues from
/// rounding (within `1e-12` relative) are clamped to zero.
pub fn sqrt_psd(m: &SymMatrix) -> Result<SymMatrix> {
    Ok(require_psd(m, 1e-12)?.map(|l| l.max(0.0).sqrt()))
}

/// A Givens rotation acting in the coordinate plane `(i, j)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneRotation {
    dim: usize,
    i: usize,
    j: usize,
    cos: f64,
    sin: f64,
}

pub fn plane_rotation(dim: usize, i: usize, j: usize, angle: f64) -> Result<PlaneRotation> {
    if !(i < j && j < dim) {
        return Err(Error::IndexOutOfRange { i, j, dim });
    }
    Ok(PlaneRotation { dim, i, j, cos: angle.cos(), sin: angle.sin() })
}

impl PlaneRotation {
    pub fn apply(&self, x: &mut [f64]) {
        assert_eq!(x.len(), self.dim);
        let (a, b) = (x[self.i], x[self.j]);
        x[self.i] = self.cos * a - self.sin * b;
        x[self.j] = self.sin * a + self.cos * b;
    }

    pub fn to_mat(&self) -> Mat {
        let mut m = Mat::identity(self.dim);
        m.set(self.i, self.i, self.cos);
        m.set(self.i, self.j, -self.sin);
        m.set(self.j, self.i, self.sin);
        m.set(self.j, self.j, self.cos);
        m
    }
}

/// Haar-distributed orthogonal matrix: Householder QR of a Gaussian matrix
/// with the sign convention `diag(R) > 0`.
pub fn random_orthogonal(d: usize, stream: &mut NormalStream) -> Mat {
    let mut a = Mat::zeros(d, d);
    stream.fill_normal(&mut a.data);
    let mut q = Mat::identity(d);
    for k in 0..d.saturating_sub(1) {
        let x: Vec<f64> = (k..d).map(|i| a.get(i, k)).collect();
        let alpha = -x[0].signum() * norm(&x);
        let mut u = x.clone();
        u[0] -= alpha;
        let un = norm(&u);
        if un == 0.0 {
            continue;
        }
        for ui in u.iter_mut() {
            *ui /= un;
        }
        // A <- (I - 2uuᵀ) A on rows k..d
        for j in 0..d {
            let s: f64 = (k..d).map(|i| u[i - k] * a.get(i, j)).sum();
            for i in k..d {
                a.set(i, j, a.get(i, j) - 2.0 * u[i - k] * s);
            }
        }
        // Q <- Q (I - 2uuᵀ) on columns k..d
        for i in 0..d {
            let s: f64 = (k..d).map(|j| q.get(i, j) * u[j - k]).sum();
            for j in k..d {
                q.set(i, j, q.get(i, j) - 2.0 * s * u[j - k]);
            }
        }
    }
    // fix signs so that R has a positive diagonal
    for j in 0..d {
        if a.get(j, j) < 0.0 {
            for i in 0..d {
                q.set(i, j, -q.get(i, j));
            }
        }
    }
    q
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{domain, StreamSeed};
    use proptest::prelude::*;

    fn random_sym(d: usize, seed: u64) -> SymMatrix {
        let mut st = StreamSeed::new(seed, domain::TEST).stream(0, 0);
        let raw = st.normal_vec(d * d);
        SymMatrix::from_upper_fn(d, |i, j| raw[i * d + j])
    }

    fn random_pd(d: usize, seed: u64) -> SymMatrix {
        let mut st = StreamSeed::new(seed, domain::TEST).stream(1, 0);
        let b = Mat::from_fn(d, d, |_, _| st.normal());
        let bbt = b.matmul(&b.transpose());
        SymMatrix::from_upper_fn(d, |i, j| bbt.get(i, j) + if i == j { 0.5 } else { 0.0 })
    }

    #[test]
    fn eig_diagonal() {
        let e = eig_sym(&SymMatrix::diag(&[2.0, 0.0])).unwrap();
        assert_eq!(e.eigenvalues, vec![0.0, 2.0]);
        assert_eq!(e.vector(0).iter().map(|x| x.abs()).collect::<Vec<_>>(), vec![0.0, 1.0]);
        assert_eq!(e.vector(1).iter().map(|x| x.abs()).collect::<Vec<_>>(), vec![1.0, 0.0]);
    }

    #[test]
    fn eig_identity() {
        let e = eig_sym(&SymMatrix::identity(3)).unwrap();
        assert_eq!(e.eigenvalues, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn eig_random_8_reconstructs() {
        let h = random_sym(8, 7);
        let e = eig_sym(&h).unwrap();
        let resid = e.reconstruct().sub(&h).frobenius_norm();
        assert!(resid <= 1e-10 * h.frobenius_norm().max(1.0), "residual {resid}");
        assert!(e.eigenvectors.orthogonality_defect() <= 1e-10 * 8.0);
        assert!(e.eigenvalues.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn eig_rejects_nan() {
        let h = SymMatrix::diag(&[1.0, f64::NAN]);
        assert!(matches!(eig_sym(&h), Err(Error::NonFinite { row: 1, col: 1 })));
    }

    #[test]
    fn eig_large_dim() {
        let h = random_sym(96, 3);
        let e = eig_sym(&h).unwrap();
        let resid = e.reconstruct().sub(&h).frobenius_norm();
        assert!(resid <= 1e-10 * h.frobenius_norm(), "residual {resid}");
        assert!(e.eigenvectors.orthogonality_defect() <= 1e-10 * 96.0);
    }

    #[test]
    fn rejects_asymmetric_rows() {
        let r = SymMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0 + 1e-16 * 4.0, 1.0]]);
        assert!(matches!(r, Err(Error::NotSymmetric { row: 0, col: 1 })));
    }

    #[test]
    fn psd_examples() {
        assert!(psd_check(&SymMatrix::diag(&[1.0, 2.0]), 1e-12));
        assert!(!psd_check(&SymMatrix::diag(&[1.0, -1.0]), 1e-12));
        assert!(psd_check(&SymMatrix::diag(&[0.0, 0.0]), 1e-12));
    }

    #[test]
    fn inv_sqrt_examples() {
        let r = inv_sqrt(&SymMatrix::diag(&[4.0, 9.0])).unwrap();
        assert!((r.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((r.get(1, 1) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.get(0, 1), 0.0);
        assert_eq!(inv_sqrt(&SymMatrix::identity(3)).unwrap(), SymMatrix::identity(3));
        assert!(matches!(
            inv_sqrt(&SymMatrix::diag(&[1.0, 0.0])),
            Err(Error::NotPd { .. })
        ));
    }

    #[test]
    fn inv_sqrt_random_pd() {
        let m = random_pd(6, 3);
        let r = inv_sqrt(&m).unwrap();
        let rmr = m.congruence(&r.as_mat());
        assert!(rmr.sub(&SymMatrix::identity(6)).frobenius_norm() <= 1e-8 * 6.0);
        let comm = r.as_mat().matmul(&m.as_mat()).sub(&m.as_mat().matmul(&r.as_mat()));
        assert!(comm.frobenius_norm() <= 1e-8 * m.frobenius_norm());
    }

    #[test]
    fn sqrt_psd_squares_back() {
        let m = random_pd(5, 9);
        let s = sqrt_psd(&m).unwrap();
        let back = s.as_mat().matmul(&s.as_mat());
        assert!(back.sub(&m.as_mat()).frobenius_norm() < 1e-10 * m.frobenius_norm());
    }

    #[test]
    fn rotation_examples() {
        let r = plane_rotation(2, 0, 1, std::f64::consts::FRAC_PI_2).unwrap();
        let mut x = vec![1.0, 0.0];
        r.apply(&mut x);
        assert!(x[0].abs() < 1e-15 && (x[1].abs() - 1.0).abs() < 1e-15);

        let id = plane_rotation(3, 0, 2, 0.0).unwrap();
        let mut y = vec![1.0, 2.0, 3.0];
        id.apply(&mut y);
        assert_eq!(y, vec![1.0, 2.0, 3.0]);

        let mut z = StreamSeed::new(4, domain::TEST).stream(0, 0).normal_vec(4);
        let before = norm(&z);
        plane_rotation(4, 1, 3, 0.3).unwrap().apply(&mut z);
        assert!((norm(&z) - before).abs() <= 1e-14 * before);

        assert!(matches!(plane_rotation(4, 2, 2, 0.1), Err(Error::IndexOutOfRange { .. })));
        assert!(matches!(plane_rotation(4, 1, 4, 0.1), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn haar_orthogonal_is_orthogonal() {
        let mut st = StreamSeed::new(5, domain::ROTATION).stream(0, 0);
        let o = random_orthogonal(40, &mut st);
        assert!(o.orthogonality_defect() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn trace_and_opnorm_match_spectrum(d in 2usize..12, seed in 0u64..10_000) {
            let h = random_sym(d, seed);
            let e = eig_sym(&h).unwrap();
            let sum: f64 = e.eigenvalues.iter().sum();
            let scale = h.frobenius_norm().max(1.0);
            prop_assert!((sum - h.trace()).abs() <= 1e-10 * scale);
            let op = h.op_norm().unwrap();
            prop_assert!((op - e.max_abs()).abs() <= 1e-10 * op.max(1.0));
            prop_assert!(e.reconstruct().sub(&h).frobenius_norm() <= 1e-10 * scale);
        }

        #[test]
        fn inv_sqrt_commutes(d in 2usize..9, seed in 0u64..10_000) {
            let m = random_pd(d, seed);
            let r = inv_sqrt(&m).unwrap();
            let comm = r.as_mat().matmul(&m.as_mat()).sub(&m.as_mat().matmul(&r.as_mat()));
            prop_assert!(comm.frobenius_norm() <= 1e-8 * m.frobenius_norm());
        }
    }
}
