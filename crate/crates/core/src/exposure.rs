//! Second-moment exposure when the curvature is unknown.
//!
//! A shaped direction `x` with `E‖x‖² = ‖g‖²` exposes `M = E[xxᵀ]` to the
//! retention curvature: `E[Q(−ηx)] = (η²/2) tr(HM)`. Against every `H ⪰ 0`
//! with `tr H = dλ̄` the worst case is `(η²/2) d λ̄ λ_max(M)`, minimized only by
//! the isotropic `M★ = (‖g‖²/d) I`. Norm-matched ZO sits on the segment from
//! `ggᵀ` to `M★` at weight `τ`.

use crate::error::{Error, Result};
use crate::shaping;
use crate::symkernel::{eig_sym, norm_sq, require_psd, SymMatrix};

const TRACE_TOL: f64 = 1e-10;

/// A second moment together with the trace budget `‖g‖²` it must meet.
#[derive(Debug, Clone, PartialEq)]
pub struct ExposureMoment {
    pub m: SymMatrix,
    pub trace_budget: f64,
}

impl ExposureMoment {
    /// Checks `M ⪰ 0` and `tr M = trace_budget`.
    pub fn new(m: SymMatrix, trace_budget: f64) -> Result<Self> {
        m.check_finite()?;
        require_psd(&m, TRACE_TOL)?;
        if (m.trace() - trace_budget).abs() > TRACE_TOL * trace_budget.abs().max(f64::MIN_POSITIVE) {
            return Err(Error::Config(format!(
                "moment trace {} does not match budget {trace_budget}",
                m.trace()
            )));
        }
        Ok(Self { m, trace_budget })
    }

    pub fn dim(&self) -> usize {
        self.m.dim()
    }

    pub fn lambda_max(&self) -> Result<f64> {
        Ok(eig_sym(&self.m)?.max())
    }
}

fn nonzero(g: &[f64]) -> Result<f64> {
    let n = norm_sq(g);
    if n == 0.0 {
        return Err(Error::ZeroGradient);
    }
    Ok(n)
}

/// `sup_{H ⪰ 0, tr H = dλ̄} (η²/2) tr(HM) = (η²/2) d λ̄ λ_max(M)`; the sup is
/// attained by `dλ̄ uuᵀ` on the top eigenvector `u` of `M`.
pub fn worst_case_exposure(m: &ExposureMoment, lambda_bar: f64, eta: f64) -> Result<f64> {
    if !(lambda_bar > 0.0) {
        return Err(Error::Config(format!("mean curvature must be positive, got {lambda_bar}")));
    }
    let e = require_psd(&m.m, TRACE_TOL)?;
    Ok(0.5 * eta * eta * m.dim() as f64 * lambda_bar * e.max())
}

/// `M★ = (‖g‖²/d) I`
pub fn isotropic_moment(g: &[f64]) -> Result<ExposureMoment> {
    let gg = nonzero(g)?;
    Ok(ExposureMoment { m: SymMatrix::scaled_identity(g.len(), gg / g.len() as f64), trace_budget: gg })
}

/// `M^FO = ggᵀ`
pub fn fo_moment(g: &[f64]) -> Result<ExposureMoment> {
    let gg = nonzero(g)?;
    Ok(ExposureMoment { m: SymMatrix::outer(g, 1.0), trace_budget: gg })
}

/// `M_q^ZO = E[(Pg)(Pg)ᵀ] = (1−τ)ggᵀ + τ(‖g‖²/d)I`
pub fn zo_exposure(g: &[f64], q: usize) -> Result<ExposureMoment> {
    let gg = nonzero(g)?;
    let d = g.len();
    let t = shaping::tau(d, q);
    let m = SymMatrix::outer(g, 1.0).affine_identity(1.0 - t, t * gg / d as f64);
    Ok(ExposureMoment { m, trace_budget: gg })
}

/// `(𝓡(M_q^ZO) − 𝓡(M★)) / (𝓡(M^FO) − 𝓡(M★))`, measured from the three
/// moments. Equals `1 − τ = (q+1)/(q+d+1)`.
pub fn gap_closing_factor(g: &[f64], q: usize, lambda_bar: f64, eta: f64) -> Result<f64> {
    if g.len() < 2 {
        return Err(Error::DegenerateDimension(format!(
            "d = {}: FO and isotropic exposures coincide",
            g.len()
        )));
    }
    if q < 1 {
        return Err(Error::BadDimension("q = 0, need at least one direction".into()));
    }
    let zo = worst_case_exposure(&zo_exposure(g, q)?, lambda_bar, eta)?;
    let fo = worst_case_exposure(&fo_moment(g)?, lambda_bar, eta)?;
    let star = worst_case_exposure(&isotropic_moment(g)?, lambda_bar, eta)?;
    Ok((zo - star) / (fo - star))
}

/// Minimax value and one optimal moment when the shaped direction must keep
/// mean `αg`: value `(η²/2) d λ̄ ‖g‖² max{α², 1/d}`.
pub fn aligned_benchmark(g: &[f64], alpha: f64, lambda_bar: f64, eta: f64) -> Result<(f64, ExposureMoment)> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::BadAlpha(alpha));
    }
    let d = g.len();
    if d < 2 {
        return Err(Error::DegenerateDimension(format!("d = {d}, need d >= 2")));
    }
    let gg = nonzero(g)?;
    let a2 = alpha * alpha;
    let df = d as f64;
    let value = 0.5 * eta * eta * df * lambda_bar * gg * a2.max(1.0 / df);
    let moment = if a2 <= 1.0 / df {
        isotropic_moment(g)?
    } else {
        // α²ggᵀ + (1−α²)‖g‖²/(d−1) (I − ggᵀ/‖g‖²)
        let floor = (1.0 - a2) * gg / (df - 1.0);
        let m = SymMatrix::outer(g, a2 - floor / gg).affine_identity(1.0, floor);
        ExposureMoment { m, trace_budget: gg }
    };
    Ok((value, moment))
}

/// `Cov(Pg) = (ggᵀ + ‖g‖²I)/(q+d+1)`
pub fn centered_covariance(g: &[f64], q: usize) -> Result<SymMatrix> {
    let gg = nonzero(g)?;
    let denom = (q + g.len() + 1) as f64;
    Ok(SymMatrix::outer(g, 1.0 / denom).affine_identity(1.0, gg / denom))
}

/// Outcome of comparing random feasible moments against `M★`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct UniquenessCheck {
    pub samples: usize,
    /// Smallest `𝓡(M) − 𝓡(M★)` seen, relative to `𝓡(M★)`.
    pub min_relative_excess: f64,
    /// Samples with `𝓡(M) ≤ 𝓡(M★)`.
    pub violations: usize,
}

/// A feasible moment `O diag(w) Oᵀ` with Haar `O` and Dirichlet-like weights
/// summing to `‖g‖²`.
pub fn random_feasible_moment(g: &[f64], stream: &mut crate::rng::NormalStream) -> Result<ExposureMoment> {
    let gg = nonzero(g)?;
    let d = g.len();
    let o = crate::symkernel::random_orthogonal(d, stream);
    let raw: Vec<f64> = (0..d).map(|_| -stream.uniform_open0().ln()).collect();
    let sum: f64 = raw.iter().sum();
    let vals: Vec<f64> = raw.iter().map(|v| gg * v / sum).collect();
    Ok(ExposureMoment { m: SymMatrix::diag(&vals).congruence_t(&o), trace_budget: gg })
}

/// Draws `samples` random feasible moments (sample `k` from
/// `seeds.stream(k, 0)`) and checks each is strictly worse than `M★`.
pub fn isotropic_uniqueness(g: &[f64], samples: usize, seeds: crate::rng::StreamSeed) -> Result<UniquenessCheck> {
    let star = worst_case_exposure(&isotropic_moment(g)?, 1.0, 1.0)?;
    let mut min_rel = f64::INFINITY;
    let mut violations = 0;
    for k in 0..samples {
        let m = random_feasible_moment(g, &mut seeds.stream(k as u64, 0))?;
        let v = worst_case_exposure(&m, 1.0, 1.0)?;
        let rel = (v - star) / star;
        min_rel = min_rel.min(rel);
        if v <= star {
            violations += 1;
        }
    }
    Ok(UniquenessCheck { samples, min_relative_excess: min_rel, violations })
}
