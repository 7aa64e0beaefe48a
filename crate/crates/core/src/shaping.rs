//! Gaussian direction batches and the shapes they induce.
//!
//! A batch of `q` standard-normal directions `z_1..z_q` in `R^d` defines the
//! raw shape `Z = q⁻¹ Σ z_r z_rᵀ`. Raw ZO keeps the incoming signal in mean
//! (`E[Z] = I`) but inflates the squared norm by `κ = (q+d+1)/q`; the
//! norm-matched shape `P = κ^{-1/2} Z` fixes `E‖Pg‖² = ‖g‖²` at the price of a
//! shrunken mean `√(q/(q+d+1)) g`.

use crate::error::{Error, Result};
use crate::rng::NormalStream;
use crate::symkernel::{dot, inv_sqrt, Mat, SymMatrix};

/// Norm inflation `κ = (q+d+1)/q`.
pub fn kappa(d: usize, q: usize) -> f64 {
    (q + d + 1) as f64 / q as f64
}

/// Mixing weight `τ = d/(q+d+1)`.
pub fn tau(d: usize, q: usize) -> f64 {
    d as f64 / (q + d + 1) as f64
}

/// Mean shrinkage of the norm-matched shape, `a = κ^{-1/2} = √(q/(q+d+1))`.
pub fn mean_shrink(d: usize, q: usize) -> f64 {
    (q as f64 / (q + d + 1) as f64).sqrt()
}

pub type TauFn = fn(usize, usize) -> f64;

fn check_dims(d: usize, q: usize) -> Result<()> {
    if d < 2 {
        return Err(Error::BadDimension(format!("d = {d}, need d >= 2")));
    }
    if q < 1 {
        return Err(Error::BadDimension("q = 0, need at least one direction".into()));
    }
    Ok(())
}

fn require_nonzero(g: &[f64]) -> Result<()> {
    if g.iter().all(|x| *x == 0.0) {
        return Err(Error::ZeroGradient);
    }
    Ok(())
}

/// `q` directions of length `d`, stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionBatch {
    dim: usize,
    count: usize,
    directions: Vec<f64>,
}

impl DirectionBatch {
    pub fn sample(d: usize, q: usize, stream: &mut NormalStream) -> Self {
        let mut directions = vec![0.0; d * q];
        stream.fill_normal(&mut directions);
        Self { dim: d, count: q, directions }
    }

    /// Wraps caller-supplied directions (used to inject deterministic batches).
    pub fn from_directions(dim: usize, dirs: &[Vec<f64>]) -> Result<Self> {
        if dirs.is_empty() {
            return Err(Error::BadDimension("empty direction batch".into()));
        }
        if let Some(bad) = dirs.iter().find(|z| z.len() != dim) {
            return Err(Error::DimensionMismatch { expected: dim, got: bad.len() });
        }
        Ok(Self { dim, count: dirs.len(), directions: dirs.concat() })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn direction(&self, r: usize) -> &[f64] {
        &self.directions[r * self.dim..(r + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.directions.chunks_exact(self.dim)
    }

    /// `Z g` without materializing `Z`.
    pub fn raw_apply(&self, g: &[f64]) -> Vec<f64> {
        debug_assert_eq!(g.len(), self.dim);
        let mut out = vec![0.0; self.dim];
        for z in self.iter() {
            let c = dot(z, g);
            for (o, zi) in out.iter_mut().zip(z) {
                *o += c * zi;
            }
        }
        let inv_q = 1.0 / self.count as f64;
        out.iter_mut().for_each(|o| *o *= inv_q);
        out
    }

    /// `P g = κ^{-1/2} Z g`
    pub fn norm_matched_apply(&self, g: &[f64]) -> Vec<f64> {
        let s = mean_shrink(self.dim, self.count);
        let mut out = self.raw_apply(g);
        out.iter_mut().for_each(|o| *o *= s);
        out
    }

    pub fn raw_shape(&self) -> SymMatrix {
        let d = self.dim;
        let inv_q = 1.0 / self.count as f64;
        SymMatrix::from_upper_fn(d, |i, j| {
            self.iter().map(|z| z[i] * z[j]).sum::<f64>() * inv_q
        })
    }
}

/// One sampled shape: the direction batch, the materialized raw shape `Z`,
/// and the calibration constants for its `(d, q)`.
#[derive(Debug, Clone)]
pub struct ShapeSample {
    pub batch: DirectionBatch,
    pub raw_z: SymMatrix,
    pub kappa: f64,
    pub tau: f64,
}

pub fn sample_shape(d: usize, q: usize, stream: &mut NormalStream) -> Result<ShapeSample> {
    check_dims(d, q)?;
    Ok(ShapeSample::from_batch(DirectionBatch::sample(d, q, stream)))
}

impl ShapeSample {
    pub fn from_batch(batch: DirectionBatch) -> Self {
        let (d, q) = (batch.dim(), batch.count());
        let raw_z = batch.raw_shape();
        Self { batch, raw_z, kappa: kappa(d, q), tau: tau(d, q) }
    }

    pub fn dim(&self) -> usize {
        self.batch.dim()
    }

    pub fn queries(&self) -> usize {
        self.batch.count()
    }

    /// `Z g`
    pub fn apply_raw(&self, g: &[f64]) -> Result<Vec<f64>> {
        self.check_gradient(g)?;
        Ok(self.batch.raw_apply(g))
    }

    /// `P g = κ^{-1/2} Z g`
    pub fn apply_norm_matched(&self, g: &[f64]) -> Result<Vec<f64>> {
        self.check_gradient(g)?;
        Ok(self.batch.norm_matched_apply(g))
    }

    /// The norm-matched shape `P` as a matrix.
    pub fn norm_matched(&self) -> SymMatrix {
        self.raw_z.scale(1.0 / self.kappa.sqrt())
    }

    fn check_gradient(&self, g: &[f64]) -> Result<()> {
        if g.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: g.len() });
        }
        require_nonzero(g)
    }
}

/// Additive zero-mean Gaussian noise on every function evaluation.
pub struct ObservationNoise<'a> {
    pub sigma: f64,
    pub stream: &'a mut NormalStream,
}

/// Output of the two-point estimator. `raw_part` and `residual` are present
/// only when the true gradient at `θ` was supplied.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedEstimate {
    pub estimate: Vec<f64>,
    pub raw_part: Option<Vec<f64>>,
    pub residual: Option<Vec<f64>>,
    pub mu: f64,
}

/// `ĝ_μ = q⁻¹ Σ_r (f(θ+μz_r) − f(θ−μz_r)) / (2μ) · z_r`, optionally split into
/// `Z g + r_μ` against the supplied true gradient `g`.
pub fn two_point_estimate(
    f: &dyn Fn(&[f64]) -> f64,
    theta: &[f64],
    mu: f64,
    batch: &DirectionBatch,
    true_gradient: Option<&[f64]>,
    mut noise: Option<ObservationNoise<'_>>,
) -> Result<SmoothedEstimate> {
    if !(mu > 0.0 && mu.is_finite()) {
        return Err(Error::Config(format!("smoothing radius must be positive, got {mu}")));
    }
    let d = batch.dim();
    if theta.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: theta.len() });
    }
    let mut estimate = vec![0.0; d];
    let mut plus = vec![0.0; d];
    let mut minus = vec![0.0; d];
    for (r, z) in batch.iter().enumerate() {
        for i in 0..d {
            plus[i] = theta[i] + mu * z[i];
            minus[i] = theta[i] - mu * z[i];
        }
        let mut fp = f(&plus);
        let mut fm = f(&minus);
        if let Some(n) = noise.as_mut() {
            fp += n.sigma * n.stream.normal();
            fm += n.sigma * n.stream.normal();
        }
        if !fp.is_finite() {
            return Err(Error::NonFiniteFunctionValue { query: 2 * r });
        }
        if !fm.is_finite() {
            return Err(Error::NonFiniteFunctionValue { query: 2 * r + 1 });
        }
        let c = (fp - fm) / (2.0 * mu);
        for (e, zi) in estimate.iter_mut().zip(z) {
            *e += c * zi;
        }
    }
    let inv_q = 1.0 / batch.count() as f64;
    estimate.iter_mut().for_each(|e| *e *= inv_q);

    let (raw_part, residual) = match true_gradient {
        Some(g) => {
            if g.len() != d {
                return Err(Error::DimensionMismatch { expected: d, got: g.len() });
            }
            let raw = batch.raw_apply(g);
            let res = estimate.iter().zip(&raw).map(|(e, z)| e - z).collect();
            (Some(raw), Some(res))
        }
        None => (None, None),
    };
    Ok(SmoothedEstimate { estimate, raw_part, residual, mu })
}

/// Full-information whitening reference `P★ = √λ̄ H^{-1/2} O`, which realizes
/// `P★ᵀ H P★ = λ̄ I`.
pub fn whitening_reference(h: &SymMatrix, o: &Mat) -> Result<Mat> {
    if o.rows() != h.dim() || o.cols() != h.dim() {
        return Err(Error::DimensionMismatch { expected: h.dim(), got: o.rows() });
    }
    let lambda_bar = h.mean_eigenvalue();
    let r = inv_sqrt(h)?;
    let mut p = r.as_mat().matmul(o);
    let s = lambda_bar.sqrt();
    p = Mat::from_fn(p.rows(), p.cols(), |i, j| s * p.get(i, j));
    Ok(p)
}
