//! Quadratic forgetting damage and the zero-smoothing mean identities.
//!
//! Damage of an update `Δ` is `Q(Δ) = ½ ΔᵀHΔ`. Along the incoming gradient
//! the relevant scalars are the directional curvature `λ = gᵀHg/‖g‖²` and the
//! mean curvature `λ̄ = tr(H)/d`. Norm-matched ZO replaces `H` in expectation
//! by `(1−τ)H + τλ̄I`, which is where every closed form below comes from.

use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::mc;
use crate::rng::StreamSeed;
use crate::shaping::{self, DirectionBatch, TauFn};
use crate::symkernel::{dot, eig_sym, norm_sq, require_psd, SpectralDecomp, SymMatrix};

/// Relative tolerance used when an op needs `H ⪰ 0`.
pub const PSD_TOL: f64 = 1e-10;

/// `(H, g, η)` with `λ`, `λ̄` fixed at construction.
#[derive(Debug)]
pub struct DamageContext {
    h: SymMatrix,
    g: Vec<f64>,
    eta: f64,
    g_norm_sq: f64,
    lambda: f64,
    lambda_bar: f64,
    spectrum: OnceLock<Result<SpectralDecomp>>,
}

impl Clone for DamageContext {
    fn clone(&self) -> Self {
        let spectrum = OnceLock::new();
        if let Some(s) = self.spectrum.get() {
            let _ = spectrum.set(s.clone());
        }
        Self { h: self.h.clone(), g: self.g.clone(), spectrum, ..*self }
    }
}

impl DamageContext {
    pub fn new(h: SymMatrix, g: Vec<f64>, eta: f64) -> Result<Self> {
        let d = h.dim();
        if d < 2 {
            return Err(Error::BadDimension(format!("d = {d}, need d >= 2")));
        }
        if g.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: g.len() });
        }
        h.check_finite()?;
        if let Some(i) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite { row: i, col: 0 });
        }
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {eta}")));
        }
        let g_norm_sq = norm_sq(&g);
        if g_norm_sq == 0.0 {
            return Err(Error::ZeroGradient);
        }
        let lambda = h.quad_form(&g) / g_norm_sq;
        let lambda_bar = h.mean_eigenvalue();
        Ok(Self { h, g, eta, g_norm_sq, lambda, lambda_bar, spectrum: OnceLock::new() })
    }

    pub fn h(&self) -> &SymMatrix {
        &self.h
    }

    pub fn g(&self) -> &[f64] {
        &self.g
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn dim(&self) -> usize {
        self.g.len()
    }

    pub fn g_norm_sq(&self) -> f64 {
        self.g_norm_sq
    }

    /// Directional curvature `gᵀHg/‖g‖²`.
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Mean curvature `tr(H)/d`.
    pub fn lambda_bar(&self) -> f64 {
        self.lambda_bar
    }

    pub fn spectrum(&self) -> Result<&SpectralDecomp> {
        self.spectrum.get_or_init(|| eig_sym(&self.h)).as_ref().map_err(Clone::clone)
    }

    pub fn lambda_max(&self) -> Result<f64> {
        Ok(self.spectrum()?.max())
    }

    /// Fails with `NotPsd` unless `H ⪰ 0` (relative tolerance [`PSD_TOL`]).
    pub fn require_psd(&self) -> Result<()> {
        let e = self.spectrum()?;
        if e.min() < -PSD_TOL * e.max_abs().max(1.0) {
            return Err(Error::NotPsd { min_eigenvalue: e.min() });
        }
        Ok(())
    }

    /// `½ δᵀHδ`
    pub fn quadratic_damage(&self, delta: &[f64]) -> Result<f64> {
        if delta.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: delta.len() });
        }
        Ok(0.5 * self.h.quad_form(delta))
    }

    /// Damage of the FO step `−ηg`: `(η²/2)‖g‖²λ`.
    pub fn fo_damage(&self) -> f64 {
        0.5 * self.eta * self.eta * self.g_norm_sq * self.lambda
    }

    /// `E[Q(−ηPg)] = (η²/2)‖g‖²((1−τ)λ + τλ̄)`.
    pub fn zo_mean_damage(&self, q: usize) -> f64 {
        let t = shaping::tau(self.dim(), q);
        0.5 * self.eta * self.eta * self.g_norm_sq * ((1.0 - t) * self.lambda + t * self.lambda_bar)
    }

    /// `G_q = Q^FO − E[Q^ZO] = (η²/2)τ‖g‖²(λ − λ̄)`.
    pub fn mean_gap(&self, q: usize) -> f64 {
        let t = shaping::tau(self.dim(), q);
        0.5 * self.eta * self.eta * t * self.g_norm_sq * (self.lambda - self.lambda_bar)
    }

    /// `τ(1 − λ̄/λ)`, the gap as a fraction of FO damage.
    pub fn relative_reduction(&self, q: usize) -> Result<f64> {
        self.require_psd()?;
        if self.lambda <= 0.0 {
            return Err(Error::NonPositiveDirectionalCurvature(self.lambda));
        }
        Ok(shaping::tau(self.dim(), q) * (1.0 - self.lambda_bar / self.lambda))
    }

    /// Damage of the norm-matched step `−η P g` for one sampled batch.
    pub fn zo_damage(&self, batch: &DirectionBatch) -> f64 {
        let step = batch.norm_matched_apply(&self.g);
        0.5 * self.eta * self.eta * self.h.quad_form(&step)
    }
}

/// `(1−τ)H + τλ̄I`
pub fn expected_shaped_curvature(h: &SymMatrix, q: usize) -> SymMatrix {
    expected_shaped_curvature_with(h, q, shaping::tau)
}

/// Same identity with a caller-supplied `τ(d, q)`; lets the self-test inject
/// a faulty formula.
pub fn expected_shaped_curvature_with(h: &SymMatrix, q: usize, tau_fn: TauFn) -> SymMatrix {
    let t = tau_fn(h.dim(), q);
    h.affine_identity(1.0 - t, t * h.mean_eigenvalue())
}

/// Eigenvalues of the expected shaped curvature, ascending like `eig_sym(h)`.
pub fn equalized_spectrum(h: &SymMatrix, q: usize) -> Result<Vec<f64>> {
    let e = eig_sym(h)?;
    let t = shaping::tau(h.dim(), q);
    let lbar = h.mean_eigenvalue();
    Ok(e.eigenvalues.iter().map(|l| (1.0 - t) * l + t * lbar).collect())
}

/// Adds `PᵀHP` for one batch into `acc` (row-major, `d×d`). Uses
/// `ZHZ = q⁻² Σ_{r,s} (z_rᵀHz_s) z_r z_sᵀ`, so the cost is `O(q d²)`.
fn add_shaped_curvature(h: &SymMatrix, batch: &DirectionBatch, acc: &mut [f64]) {
    let d = batch.dim();
    let q = batch.count();
    let hz: Vec<Vec<f64>> = batch.iter().map(|z| h.matvec(z)).collect();
    let scale = 1.0 / (shaping::kappa(d, q) * (q * q) as f64);
    for zr in batch.iter() {
        // w_r = Σ_s (z_rᵀ H z_s) z_s
        let mut w = vec![0.0; d];
        for (s, zs) in batch.iter().enumerate() {
            let c = dot(zr, &hz[s]);
            for (wi, zi) in w.iter_mut().zip(zs) {
                *wi += c * zi;
            }
        }
        for i in 0..d {
            let a = scale * zr[i];
            let row = &mut acc[i * d..(i + 1) * d];
            for (x, wj) in row.iter_mut().zip(&w) {
                *x += a * wj;
            }
        }
    }
}

/// `PᵀHP` for one batch.
pub fn realized_shaped_curvature(h: &SymMatrix, batch: &DirectionBatch) -> SymMatrix {
    let d = h.dim();
    let mut acc = vec![0.0; d * d];
    add_shaped_curvature(h, batch, &mut acc);
    symmetrize(d, acc)
}

fn symmetrize(d: usize, m: Vec<f64>) -> SymMatrix {
    SymMatrix::from_upper_fn(d, |i, j| 0.5 * (m[i * d + j] + m[j * d + i]))
}

/// One point of an operator-residual curve.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ResidualPoint {
    pub n: u64,
    /// `‖Ê − E‖_F`
    pub frobenius: f64,
    /// `‖Ê − E‖_F / ‖E‖_F`
    pub relative: f64,
}

#[derive(Debug, Clone)]
pub struct CurvatureEstimate {
    pub estimate: SymMatrix,
    pub target: SymMatrix,
    pub curve: Vec<ResidualPoint>,
}

impl CurvatureEstimate {
    pub fn final_relative_residual(&self) -> f64 {
        self.curve.last().map_or(f64::NAN, |p| p.relative)
    }

    pub fn eigenvalue_error(&self) -> Result<f64> {
        relative_eigenvalue_error(&self.estimate, &self.target)
    }
}

/// Monte Carlo mean of `PᵀHP` over trials `0..n` (trial `t` uses
/// `seeds.stream(t, 0)`), compared against the closed form at each checkpoint.
pub fn estimate_shaped_curvature(
    h: &SymMatrix,
    q: usize,
    n: u64,
    checkpoints: &[u64],
    seeds: StreamSeed,
) -> Result<CurvatureEstimate> {
    let d = h.dim();
    if d < 2 || q < 1 {
        return Err(Error::BadDimension(format!("d = {d}, q = {q}")));
    }
    if n == 0 {
        return Err(Error::TooFewTrials { required: 1, got: 0 });
    }
    h.check_finite()?;
    let target = expected_shaped_curvature(h, q);
    let tnorm = target.frobenius_norm();
    let points = mc::vector_mean(n, d * d, checkpoints, |t, acc| {
        let batch = DirectionBatch::sample(d, q, &mut seeds.stream(t, 0));
        add_shaped_curvature(h, &batch, acc);
    });
    let mut curve = Vec::with_capacity(points.len());
    let mut estimate = None;
    for p in points {
        let m = symmetrize(d, p.mean);
        let frobenius = m.sub(&target).frobenius_norm();
        curve.push(ResidualPoint { n: p.n, frobenius, relative: frobenius / tnorm });
        estimate = Some(m);
    }
    Ok(CurvatureEstimate { estimate: estimate.expect("n > 0"), target, curve })
}

/// `‖λ(A) − λ(B)‖₂ / ‖λ(B)‖₂` over ascending spectra.
pub fn relative_eigenvalue_error(estimate: &SymMatrix, target: &SymMatrix) -> Result<f64> {
    let a = eig_sym(estimate)?;
    let b = eig_sym(target)?;
    let num: f64 = a.eigenvalues.iter().zip(&b.eigenvalues).map(|(x, y)| (x - y).powi(2)).sum();
    Ok((num / norm_sq(&b.eigenvalues)).sqrt())
}

/// PSD check shared by damage-interpreting ops on a bare matrix.
pub fn require_psd_curvature(h: &SymMatrix) -> Result<SpectralDecomp> {
    require_psd(h, PSD_TOL)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::domain;
    use crate::stats::summarize;
    use crate::symkernel::random_orthogonal;

    fn toy() -> DamageContext {
        DamageContext::new(SymMatrix::diag(&[2.0, 0.0]), vec![1.0, 0.0], 1.0).unwrap()
    }

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-300)
    }

    fn random_sym(d: usize, seed: u64) -> SymMatrix {
        let mut st = StreamSeed::new(seed, domain::TEST).stream(0, 0);
        let v = st.normal_vec(d * d);
        SymMatrix::from_upper_fn(d, |i, j| v[i * d + j])
    }

    fn random_psd(d: usize, seed: u64) -> SymMatrix {
        let mut st = StreamSeed::new(seed, domain::TEST).stream(1, 0);
        let o = random_orthogonal(d, &mut st);
        let vals: Vec<f64> = (0..d).map(|_| 2.0 * st.uniform()).collect();
        SymMatrix::diag(&vals).congruence_t(&o)
    }

    #[test]
    fn context_caches_consistent_scalars() {
        let h = random_sym(5, 1);
        let g = vec![0.3, -1.0, 2.0, 0.1, 0.7];
        let ctx = DamageContext::new(h.clone(), g.clone(), 0.5).unwrap();
        assert!(close(ctx.lambda(), h.quad_form(&g) / norm_sq(&g), 1e-12));
        assert!(close(ctx.lambda_bar(), h.trace() / 5.0, 1e-12));
    }

    #[test]
    fn context_rejects_bad_input() {
        let h = SymMatrix::identity(2);
        assert_eq!(DamageContext::new(h.clone(), vec![0.0, 0.0], 1.0).unwrap_err(), Error::ZeroGradient);
        assert!(matches!(
            DamageContext::new(h.clone(), vec![1.0], 1.0),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(DamageContext::new(h, vec![1.0, 0.0], 0.0).is_err());
        assert!(DamageContext::new(SymMatrix::identity(1), vec![1.0], 1.0).is_err());
    }

    #[test]
    fn quadratic_damage_examples() {
        let ctx = DamageContext::new(SymMatrix::identity(2), vec![1.0, 0.0], 1.0).unwrap();
        assert_eq!(ctx.quadratic_damage(&[3.0, 4.0]).unwrap(), 12.5);
        assert_eq!(ctx.quadratic_damage(&[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(toy().quadratic_damage(&[0.0, 1.0]).unwrap(), 0.0);
        assert!(matches!(toy().quadratic_damage(&[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn fo_damage_examples() {
        assert_eq!(toy().fo_damage(), 1.0);
        let flat = DamageContext::new(SymMatrix::diag(&[2.0, 0.0]), vec![0.0, 1.0], 1.0).unwrap();
        assert_eq!(flat.fo_damage(), 0.0);
        let ctx = DamageContext::new(random_sym(6, 2), vec![1.0, 2.0, -1.0, 0.5, 0.0, 3.0], 0.3).unwrap();
        let step: Vec<f64> = ctx.g().iter().map(|x| -0.3 * x).collect();
        assert!(close(ctx.fo_damage(), ctx.quadratic_damage(&step).unwrap(), 1e-12));
    }

    #[test]
    fn expected_curvature_examples() {
        let iso = SymMatrix::scaled_identity(4, 1.5);
        assert_eq!(expected_shaped_curvature(&iso, 3), iso);
        let e = expected_shaped_curvature(&SymMatrix::diag(&[2.0, 0.0]), 1);
        assert_eq!(e, SymMatrix::diag(&[1.5, 0.5]));
    }

    #[test]
    fn equalized_spectrum_examples() {
        let s = equalized_spectrum(&SymMatrix::diag(&[0.0, 2.0]), 1).unwrap();
        assert_eq!(s, vec![0.5, 1.5]);

        let h = random_sym(6, 3);
        let base = eig_sym(&h).unwrap().eigenvalues;
        let big_q = equalized_spectrum(&h, 1_000_000).unwrap();
        for (a, b) in big_q.iter().zip(&base) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0));
        }
        let eq = equalized_spectrum(&h, 3).unwrap();
        assert!(close(eq.iter().sum::<f64>(), base.iter().sum::<f64>(), 1e-12));
    }

    #[test]
    fn zo_mean_and_gap_examples() {
        let ctx = toy();
        assert!(close(ctx.zo_mean_damage(1), 0.75, 1e-15));
        assert!(close(ctx.mean_gap(1), 0.25, 1e-15));
        let flipped = DamageContext::new(SymMatrix::diag(&[2.0, 0.0]), vec![0.0, 1.0], 1.0).unwrap();
        assert!(close(flipped.mean_gap(1), -0.25, 1e-15));

        let iso = DamageContext::new(SymMatrix::scaled_identity(3, 2.0), vec![1.0, 2.0, 3.0], 0.7).unwrap();
        assert_eq!(iso.zo_mean_damage(5), iso.fo_damage());
        assert_eq!(iso.mean_gap(5), 0.0);
    }

    #[test]
    fn relative_reduction_examples() {
        assert!(close(toy().relative_reduction(1).unwrap(), 0.25, 1e-15));
        let iso = DamageContext::new(SymMatrix::identity(2), vec![1.0, 1.0], 1.0).unwrap();
        assert_eq!(iso.relative_reduction(2).unwrap(), 0.0);
        let flat = DamageContext::new(SymMatrix::diag(&[2.0, 0.0]), vec![0.0, 1.0], 1.0).unwrap();
        assert!(matches!(flat.relative_reduction(1), Err(Error::NonPositiveDirectionalCurvature(_))));
        let indefinite = DamageContext::new(SymMatrix::diag(&[2.0, -1.0]), vec![1.0, 0.0], 1.0).unwrap();
        assert!(matches!(indefinite.relative_reduction(1), Err(Error::NotPsd { .. })));

        let ctx = DamageContext::new(random_psd(8, 4), (0..8).map(|i| i as f64 - 2.5).collect(), 0.2).unwrap();
        assert!(close(ctx.relative_reduction(3).unwrap(), ctx.mean_gap(3) / ctx.fo_damage(), 1e-12));
    }

    #[test]
    fn zo_mean_damage_monte_carlo() {
        let ctx = toy();
        let seeds = StreamSeed::new(21, domain::TEST);
        let samples = mc::map_trials(1_000_000, |t| ctx.zo_damage(&DirectionBatch::sample(2, 1, &mut seeds.stream(t, 0))));
        let s = summarize(&samples);
        assert!((s.mean - 0.75).abs() <= 3.0 * s.se, "{} ± {}", s.mean, s.se);
    }

    #[test]
    fn gap_scales_with_eta_and_g() {
        let h = random_sym(5, 6);
        let g: Vec<f64> = vec![1.0, -0.5, 0.2, 2.0, 0.3];
        let a = DamageContext::new(h.clone(), g.clone(), 0.1).unwrap();
        let b = DamageContext::new(h.clone(), g.clone(), 0.3).unwrap();
        let c = DamageContext::new(h, g.iter().map(|x| 2.0 * x).collect(), 0.1).unwrap();
        assert!(close(b.mean_gap(2), 9.0 * a.mean_gap(2), 1e-12));
        assert!(close(c.mean_gap(2), 4.0 * a.mean_gap(2), 1e-12));
        assert!(close(c.lambda(), a.lambda(), 1e-12));
    }

    #[test]
    fn floor_preservation() {
        for seed in 0..10 {
            let d = 2 + seed as usize;
            let h = random_sym(d, 100 + seed);
            let g: Vec<f64> = StreamSeed::new(seed, domain::GRADIENT).stream(0, 0).normal_vec(d);
            let lbar = h.mean_eigenvalue();
            let gg = norm_sq(&g);
            for q in [1, 3, 8] {
                let e = expected_shaped_curvature(&h, q);
                let lhs = e.quad_form(&g) - lbar * gg;
                let rhs = (1.0 - shaping::tau(d, q)) * (h.quad_form(&g) - lbar * gg);
                assert!((lhs - rhs).abs() <= 1e-12 * (h.frobenius_norm() * gg).max(1.0));
            }
        }
    }

    #[test]
    fn orthogonal_equivariance_closed_form() {
        let h = random_sym(7, 8);
        let o = random_orthogonal(7, &mut StreamSeed::new(9, domain::ROTATION).stream(0, 0));
        let lhs = expected_shaped_curvature(&h.congruence(&o), 3);
        let rhs = expected_shaped_curvature(&h, 3).congruence(&o);
        assert!(lhs.sub(&rhs).frobenius_norm() <= 1e-12 * h.frobenius_norm().max(1.0));
    }

    #[test]
    fn realized_curvature_matches_dense_product() {
        let h = random_sym(5, 10);
        let batch = DirectionBatch::sample(5, 3, &mut StreamSeed::new(11, domain::TEST).stream(0, 0));
        let p = shaping::ShapeSample::from_batch(batch.clone()).norm_matched();
        let dense = h.congruence(&p.as_mat());
        let fast = realized_shaped_curvature(&h, &batch);
        assert!(dense.sub(&fast).frobenius_norm() <= 1e-12 * dense.frobenius_norm());
    }

    #[test]
    fn mc_residual_shrinks() {
        let h = random_psd(8, 12);
        let est = estimate_shaped_curvature(&h, 2, 20_000, &[200, 2_000], StreamSeed::new(13, domain::OPERATOR)).unwrap();
        assert_eq!(est.curve.iter().map(|p| p.n).collect::<Vec<_>>(), vec![200, 2_000, 20_000]);
        assert!(est.curve[2].frobenius < est.curve[0].frobenius);
        assert!(est.final_relative_residual() < 3e-2);
    }

    #[test]
    fn expected_curvature_with_faulty_tau_disagrees() {
        let h = SymMatrix::diag(&[2.0, 0.0]);
        let bad = expected_shaped_curvature_with(&h, 1, |d, q| d as f64 / (q + d) as f64);
        assert_ne!(bad, expected_shaped_curvature(&h, 1));
    }
}
