//! Finite-query and finite-smoothing accounting around the mean gap.
//!
//! One sampled batch realizes `Q^FO − Q̂^ZO = G_q − (query deviation) −
//! (smoothing perturbation)`. The query deviation is bounded with probability
//! `1 − δ_q` by `B_q(δ_q)`; the smoothing perturbation is bounded in
//! expectation by `B_μ`, hence by `B_μ/δ_μ` with probability `1 − δ_μ`.
//!
//! The constant `C` in both bounds is not numeric in theory. The crate ships a
//! value calibrated by one-batch coverage (see `sandbox::calibrate_constant`).

use crate::error::{Error, Result};
use crate::mc;
use crate::retention::DamageContext;
use crate::rng::StreamSeed;
use crate::shaping::{self, two_point_estimate, DirectionBatch};

/// Calibrated constant: smallest grid value reaching 95% one-batch coverage
/// at `δ = 0.05` on `scenarios/calibration.json` (d ∈ {8,16,32},
/// q ∈ {1,4,16}, seed 0). Grid point `10^(72/50 − 2)`.
pub const DEFAULT_C: f64 = 0.2754228703338166;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DeviationBudget {
    pub delta_q: f64,
    pub delta_mu: f64,
    pub c_universal: f64,
    pub smoothness_l: f64,
    /// Smoothing radius; `0` is the zero-smoothing setting (`B_μ = 0`).
    pub mu: f64,
    pub sigma_f: Option<f64>,
}

impl DeviationBudget {
    /// Zero-smoothing budget.
    pub fn new(delta_q: f64, c_universal: f64) -> Result<Self> {
        let b = Self { delta_q, delta_mu: 0.0, c_universal, smoothness_l: 0.0, mu: 0.0, sigma_f: None };
        b.validate()?;
        Ok(b)
    }

    pub fn with_smoothing(mut self, smoothness_l: f64, mu: f64, delta_mu: f64) -> Result<Self> {
        self.smoothness_l = smoothness_l;
        self.mu = mu;
        self.delta_mu = delta_mu;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        check_probability(self.delta_q)?;
        if self.mu > 0.0 {
            check_probability(self.delta_mu)?;
        } else if !(0.0..1.0).contains(&self.delta_mu) {
            return Err(Error::BadProbability(self.delta_mu));
        }
        if self.delta_q + self.delta_mu >= 1.0 {
            return Err(Error::BadProbability(self.delta_q + self.delta_mu));
        }
        if !(self.c_universal > 0.0 && self.c_universal.is_finite()) {
            return Err(Error::Config(format!("constant C must be positive, got {}", self.c_universal)));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) || !(self.smoothness_l >= 0.0) {
            return Err(Error::Config("smoothing radius and L must be non-negative".into()));
        }
        if let Some(s) = self.sigma_f {
            if !(s >= 0.0) {
                return Err(Error::Config(format!("sigma_f must be non-negative, got {s}")));
            }
        }
        Ok(())
    }

    pub fn zero_smoothing(&self) -> bool {
        self.mu == 0.0
    }
}

fn check_probability(p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::BadProbability(p))
    }
}

/// `ψ_q(δ) = √((d + ln(1/δ))/q) + (d + ln(1/δ) + 1)/q`
pub fn psi_q(d: usize, q: usize, delta: f64) -> Result<f64> {
    check_probability(delta)?;
    let s = d as f64 + (1.0 / delta).ln();
    let q = q as f64;
    Ok((s / q).sqrt() + (s + 1.0) / q)
}

/// `(η²/2)‖g‖²λ_max(ψ + ψ²)`: the bound with `C = 1`.
fn deviation_scale(ctx: &DamageContext, q: usize, delta: f64) -> Result<f64> {
    ctx.require_psd()?;
    let psi = psi_q(ctx.dim(), q, delta)?;
    let lmax = ctx.lambda_max()?.max(0.0);
    Ok(0.5 * ctx.eta() * ctx.eta() * ctx.g_norm_sq() * lmax * (psi + psi * psi))
}

/// `B_q(δ_q) = C(η²/2)‖g‖²λ_max(ψ + ψ²)`
pub fn deviation_bound(ctx: &DamageContext, q: usize, budget: &DeviationBudget) -> Result<f64> {
    Ok(budget.c_universal * deviation_scale(ctx, q, budget.delta_q)?)
}

/// `κ^{-1/2}Lμd^{3/2}‖g‖ + κ⁻¹L²μ²d³`
fn smoothing_bracket(d: usize, q: usize, l: f64, mu: f64, g_norm: f64) -> f64 {
    let k = shaping::kappa(d, q);
    let d = d as f64;
    let lin = l * mu * d.powf(1.5) * g_norm / k.sqrt();
    let quad = l * l * mu * mu * d.powi(3) / k;
    lin + quad
}

/// `B_μ = C(η²/2)λ_max[κ^{-1/2}Lμd^{3/2}‖g‖ + κ⁻¹L²μ²d³]`
pub fn smoothing_damage_bound(ctx: &DamageContext, q: usize, budget: &DeviationBudget) -> Result<f64> {
    if budget.zero_smoothing() || budget.smoothness_l == 0.0 {
        return Ok(0.0);
    }
    let lmax = ctx.lambda_max()?.max(0.0);
    let bracket = smoothing_bracket(ctx.dim(), q, budget.smoothness_l, budget.mu, ctx.g_norm_sq().sqrt());
    Ok(budget.c_universal * 0.5 * ctx.eta() * ctx.eta() * lmax * bracket)
}

/// Bound on `|E‖x̂_μ‖² − ‖g‖²|`.
pub fn norm_mismatch_bound(budget: &DeviationBudget, d: usize, q: usize, g_norm: f64) -> f64 {
    budget.c_universal * smoothing_bracket(d, q, budget.smoothness_l, budget.mu, g_norm)
}

/// `σ_f² d / (2μ²q)`
pub fn noise_residual_second_moment(sigma_f: f64, d: usize, mu: f64, q: usize) -> f64 {
    sigma_f * sigma_f * d as f64 / (2.0 * mu * mu * q as f64)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CertificateReport {
    pub mean_gap: f64,
    pub bound_q: f64,
    /// `B_μ/δ_μ`, zero in the zero-smoothing setting.
    pub bound_mu: f64,
    pub certified: bool,
    /// Filled in by [`check_sign_certificate`].
    pub empirical_sign_agreement: Option<f64>,
}

impl CertificateReport {
    /// Confidence level the certificate promises.
    pub fn required_agreement(budget: &DeviationBudget) -> f64 {
        1.0 - budget.delta_q - if budget.zero_smoothing() { 0.0 } else { budget.delta_mu }
    }
}

/// Certified iff `|G_q| > B_q(δ_q) + B_μ/δ_μ`.
pub fn sign_certificate(ctx: &DamageContext, q: usize, budget: &DeviationBudget) -> Result<CertificateReport> {
    budget.validate()?;
    ctx.require_psd()?;
    let mean_gap = ctx.mean_gap(q);
    let bound_q = deviation_bound(ctx, q, budget)?;
    let bound_mu = if budget.zero_smoothing() {
        0.0
    } else {
        smoothing_damage_bound(ctx, q, budget)? / budget.delta_mu
    };
    Ok(CertificateReport {
        mean_gap,
        bound_q,
        bound_mu,
        certified: mean_gap.abs() > bound_q + bound_mu,
        empirical_sign_agreement: None,
    })
}

/// The function queried by a finite-difference batch, with the point at
/// which `g` is its gradient.
pub struct SmoothedOracle<'a> {
    pub f: &'a (dyn Fn(&[f64]) -> f64 + Sync),
    pub theta: &'a [f64],
}

/// Realized gap `Q^FO − Q̂^ZO` for trial `t`. With an oracle and `μ > 0` the
/// step is the norm-matched finite-difference direction `κ^{-1/2} ĝ_μ`;
/// otherwise the zero-smoothing `P g`.
fn realized_gap(
    ctx: &DamageContext,
    q: usize,
    batch: &DirectionBatch,
    mu: f64,
    oracle: Option<&SmoothedOracle<'_>>,
) -> Result<f64> {
    let q_hat = match oracle {
        Some(o) if mu > 0.0 => {
            let est = two_point_estimate(o.f, o.theta, mu, batch, None, None)?;
            let s = shaping::mean_shrink(ctx.dim(), q);
            let step: Vec<f64> = est.estimate.iter().map(|x| -ctx.eta() * s * x).collect();
            ctx.quadratic_damage(&step)?
        }
        _ => ctx.zo_damage(batch),
    };
    Ok(ctx.fo_damage() - q_hat)
}

/// Runs `n` one-batch trials and records how often the realized gap has the
/// sign of `G_q`.
pub fn check_sign_certificate(
    ctx: &DamageContext,
    q: usize,
    budget: &DeviationBudget,
    n: u64,
    seeds: StreamSeed,
    oracle: Option<&SmoothedOracle<'_>>,
) -> Result<CertificateReport> {
    let mut report = sign_certificate(ctx, q, budget)?;
    if n == 0 {
        return Err(Error::TooFewTrials { required: 1, got: 0 });
    }
    let sign = report.mean_gap.signum();
    let gaps = mc::map_trials(n, |t| {
        let batch = DirectionBatch::sample(ctx.dim(), q, &mut seeds.stream(t, 0));
        realized_gap(ctx, q, &batch, budget.mu, oracle)
    });
    let mut agree = 0u64;
    for g in gaps {
        if g?.signum() == sign && sign != 0.0 {
            agree += 1;
        }
    }
    report.empirical_sign_agreement = Some(agree as f64 / n as f64);
    Ok(report)
}

/// Per-trial terms of the realized-gap accounting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapAccounting {
    /// `Q^FO − Q̂^ZO`
    pub realized_gap: f64,
    pub mean_gap: f64,
    /// `Q^ZO − E[Q^ZO]`
    pub query_deviation: f64,
    /// `Q̂^ZO − Q^ZO`
    pub smoothing_perturbation: f64,
}

impl GapAccounting {
    /// `realized − (G − query − smoothing)`; zero up to rounding.
    pub fn residual(&self) -> f64 {
        self.realized_gap - (self.mean_gap - self.query_deviation - self.smoothing_perturbation)
    }

    /// Magnitude against which [`residual`](Self::residual) is judged.
    pub fn scale(&self) -> f64 {
        self.realized_gap.abs() + self.mean_gap.abs() + self.query_deviation.abs() + self.smoothing_perturbation.abs()
    }
}

/// Splits one trial's realized gap. `x_hat` is the norm-matched
/// finite-difference direction; `None` means zero smoothing.
pub fn account(ctx: &DamageContext, q: usize, batch: &DirectionBatch, x_hat: Option<&[f64]>) -> Result<GapAccounting> {
    let q_zo = ctx.zo_damage(batch);
    let q_hat = match x_hat {
        Some(x) => {
            let step: Vec<f64> = x.iter().map(|v| -ctx.eta() * v).collect();
            ctx.quadratic_damage(&step)?
        }
        None => q_zo,
    };
    Ok(GapAccounting {
        realized_gap: ctx.fo_damage() - q_hat,
        mean_gap: ctx.mean_gap(q),
        query_deviation: q_zo - ctx.zo_mean_damage(q),
        smoothing_perturbation: q_hat - q_zo,
    })
}

/// `|Q^ZO − E[Q^ZO]|` divided by the `C = 1` bound, one value per trial. The
/// coverage of a constant `C` is the fraction of values `≤ C`.
pub fn normalized_deviations(ctx: &DamageContext, q: usize, delta: f64, n: u64, seeds: StreamSeed) -> Result<Vec<f64>> {
    let scale = deviation_scale(ctx, q, delta)?;
    if scale == 0.0 {
        return Err(Error::Config("deviation scale is zero (H = 0)".into()));
    }
    let mean = ctx.zo_mean_damage(q);
    Ok(mc::map_trials(n, |t| {
        let batch = DirectionBatch::sample(ctx.dim(), q, &mut seeds.stream(t, 0));
        (ctx.zo_damage(&batch) - mean).abs() / scale
    }))
}

/// Fraction of `normalized` values covered by `c`.
pub fn coverage(normalized: &[f64], c: f64) -> f64 {
    normalized.iter().filter(|x| **x <= c).count() as f64 / normalized.len() as f64
}
