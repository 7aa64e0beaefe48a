//! Operator, gap-sweep, variance, exposure and blockwise experiments.

use serde::{Deserialize, Serialize};

use super::report::{fmt, CsvTable};
use super::scenario::Scenario;
use crate::deviation::{self, CertificateReport, DeviationBudget};
use crate::error::{Error, Result};
use crate::exposure::{self, UniquenessCheck};
use crate::mc;
use crate::retention::{self, DamageContext, ResidualPoint};
use crate::rise::{self, BlockCurvatureView, BlockDeviationBound, BlockGap, BlockScores, CouplingReport, MeanResidual};
use crate::rng::{domain, StreamSeed};
use crate::shaping::{self, DirectionBatch};
use crate::stats::{quantile_higher, r_squared, summarize, Summary};
use crate::symkernel::{eig_sym, random_orthogonal};

fn default_checkpoints(n: u64, extra: &[u64]) -> Vec<u64> {
    let mut c: Vec<u64> = if extra.is_empty() { vec![100, 1_000, 10_000] } else { extra.to_vec() };
    c.retain(|x| *x > 0 && *x < n);
    c.push(n);
    c.sort_unstable();
    c.dedup();
    c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorArm {
    pub label: String,
    pub eigenvalue_error: f64,
    pub curve: Vec<ResidualPoint>,
    /// Checkpoints whose residual exceeds the previous one.
    pub inversions: usize,
    pub original_eigenvalues: Vec<f64>,
    pub target_eigenvalues: Vec<f64>,
    pub estimate_eigenvalues: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorReport {
    pub d: usize,
    pub q: usize,
    pub n: u64,
    pub tau: f64,
    pub lambda_bar: f64,
    /// `H ∝ I`: the contraction target equals `H`.
    pub degenerate_target: bool,
    pub arms: Vec<OperatorArm>,
}

impl OperatorReport {
    pub fn max_eigenvalue_error(&self) -> f64 {
        self.arms.iter().map(|a| a.eigenvalue_error).fold(0.0, f64::max)
    }
}

impl CsvTable for OperatorReport {
    fn header(&self) -> Vec<&'static str> {
        vec!["arm", "n", "frobenius", "relative", "eigenvalue_error"]
    }

    fn rows(&self) -> Vec<Vec<String>> {
        let mut rows = Vec::new();
        for a in &self.arms {
            for p in &a.curve {
                rows.push(vec![a.label.clone(), p.n.to_string(), fmt(p.frobenius), fmt(p.relative), fmt(a.eigenvalue_error)]);
            }
        }
        rows
    }
}

/// Monte Carlo `E[PᵀHP]` against `(1−τ)H + τλ̄I`, on `H` and on a Haar
/// rotation of it.
pub fn run_operator_validation(sc: &Scenario) -> Result<OperatorReport> {
    if sc.trials < 1_000 {
        return Err(Error::Config(format!("operator validation needs at least 1000 trials, got {}", sc.trials)));
    }
    let h = sc.curvature()?;
    let vals = sc.eigenvalues()?;
    let (lo, hi) = vals.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    let checkpoints = default_checkpoints(sc.trials, &sc.checkpoints);
    let rot = random_orthogonal(sc.dim, &mut StreamSeed::new(sc.seed, domain::ROTATION).stream(1, 0));
    let variants = [("base", h.clone()), ("rotated", h.congruence_t(&rot))];
    let mut arms = Vec::new();
    for (k, (label, hm)) in variants.into_iter().enumerate() {
        let seeds = StreamSeed::new(sc.seed, domain::OPERATOR).child(k as u64);
        let est = retention::estimate_shaped_curvature(&hm, sc.q, sc.trials, &checkpoints, seeds)?;
        let inversions = est.curve.windows(2).filter(|w| w[1].relative > w[0].relative).count();
        arms.push(OperatorArm {
            label: label.to_string(),
            eigenvalue_error: est.eigenvalue_error()?,
            inversions,
            original_eigenvalues: eig_sym(&hm)?.eigenvalues,
            target_eigenvalues: eig_sym(&est.target)?.eigenvalues,
            estimate_eigenvalues: eig_sym(&est.estimate)?.eigenvalues,
            curve: est.curve,
        });
    }
    Ok(OperatorReport {
        d: sc.dim,
        q: sc.q,
        n: sc.trials,
        tau: shaping::tau(sc.dim, sc.q),
        lambda_bar: h.mean_eigenvalue(),
        degenerate_target: hi - lo <= 1e-12 * hi.abs().max(1.0),
        arms,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub angle: f64,
    pub lambda: f64,
    pub delta_lambda: f64,
    /// `G_q`
    pub predicted: f64,
    pub empirical: Summary,
    /// `(empirical − predicted)/SE`
    pub z: f64,
    /// Quantiles of `|Q^ZO − E Q^ZO|` over the `C = 1` bound.
    pub normalized_deviation_q50: f64,
    pub normalized_deviation_q95: f64,
    pub certificate: CertificateReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub d: usize,
    pub q: usize,
    pub eta: f64,
    pub lambda_bar: f64,
    pub r_squared: f64,
    pub points: Vec<SweepPoint>,
    /// Index of the point with `G_q = 0`, if the grid hits it.
    pub zero_point: Option<usize>,
    /// Sign changes of the predicted gap along the grid.
    pub sign_changes: usize,
}

impl GapReport {
    pub fn has_both_signs(&self) -> bool {
        self.points.iter().any(|p| p.predicted > 0.0) && self.points.iter().any(|p| p.predicted < 0.0)
    }
}

impl CsvTable for GapReport {
    fn header(&self) -> Vec<&'static str> {
        vec!["angle", "lambda", "delta_lambda", "predicted", "empirical_mean", "empirical_se", "trials", "z", "certified"]
    }

    fn rows(&self) -> Vec<Vec<String>> {
        self.points
            .iter()
            .map(|p| {
                vec![
                    fmt(p.angle),
                    fmt(p.lambda),
                    fmt(p.delta_lambda),
                    fmt(p.predicted),
                    fmt(p.empirical.mean),
                    fmt(p.empirical.se),
                    p.empirical.n.to_string(),
                    fmt(p.z),
                    p.certificate.certified.to_string(),
                ]
            })
            .collect()
    }
}

/// Realized one-batch gaps `Q^FO − Q^ZO` for trials `start..end`.
fn realized_gaps(ctx: &DamageContext, q: usize, seeds: StreamSeed, start: u64, end: u64) -> Vec<f64> {
    let fo = ctx.fo_damage();
    mc::map_trials(end - start, |t| {
        let batch = DirectionBatch::sample(ctx.dim(), q, &mut seeds.stream(start + t, 0));
        fo - ctx.zo_damage(&batch)
    })
}

/// Rotates `g` from the top to the bottom eigenvector of `H` and compares the
/// empirical mean gap with `G_q` at every angle. Trial counts grow from
/// `sc.trials` until `|G_q| ≥ 4 SE` (capped at `sc.max_trials`, default
/// `100 × sc.trials`). Steps are zero-smoothing.
pub fn run_gap_sweep(sc: &Scenario, c_universal: f64) -> Result<GapReport> {
    let angles = sc.sweep_angles()?;
    let h = sc.curvature()?;
    let vals = sc.eigenvalues()?;
    let (lo, hi) = vals.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    if hi - lo <= 1e-12 * hi.abs().max(1.0) {
        return Err(Error::DegenerateSpectrum);
    }
    let cap = sc.max_trials.unwrap_or(sc.trials.saturating_mul(100)).max(sc.trials);
    let budget = DeviationBudget::new(sc.delta, c_universal)?;
    let unit = DeviationBudget::new(sc.delta, 1.0)?;
    let mut points = Vec::with_capacity(angles.len());
    let mut scale_max: f64 = 0.0;
    for (k, theta) in angles.iter().enumerate() {
        let g = sc.sweep_gradient(*theta)?;
        let ctx = DamageContext::new(h.clone(), g, sc.eta)?;
        let predicted = ctx.mean_gap(sc.q);
        scale_max = scale_max.max(predicted.abs());
        let seeds = StreamSeed::new(sc.seed, domain::SWEEP).child(k as u64);
        let mut gaps = realized_gaps(&ctx, sc.q, seeds, 0, sc.trials);
        let pilot = summarize(&gaps);
        let zero = predicted.abs() <= 1e-12 * ctx.fo_damage();
        if !zero && pilot.std > 0.0 {
            let needed = (16.0 * pilot.std * pilot.std / (predicted * predicted)).ceil() as u64;
            let n = needed.clamp(sc.trials, cap);
            if n > sc.trials {
                gaps.extend(realized_gaps(&ctx, sc.q, seeds, sc.trials, n));
            }
        }
        let empirical = summarize(&gaps);
        let scale = deviation::deviation_bound(&ctx, sc.q, &unit)?;
        let normalized: Vec<f64> = gaps.iter().map(|x| (x - predicted).abs() / scale).collect();
        let mut certificate = deviation::sign_certificate(&ctx, sc.q, &budget)?;
        let sign = predicted.signum();
        let agree = gaps.iter().filter(|x| sign != 0.0 && x.signum() == sign).count();
        certificate.empirical_sign_agreement = Some(agree as f64 / gaps.len() as f64);
        points.push(SweepPoint {
            angle: *theta,
            lambda: ctx.lambda(),
            delta_lambda: ctx.lambda() - ctx.lambda_bar(),
            predicted,
            z: if empirical.se > 0.0 { (empirical.mean - predicted) / empirical.se } else { 0.0 },
            normalized_deviation_q50: quantile_higher(&normalized, 0.5),
            normalized_deviation_q95: quantile_higher(&normalized, 0.95),
            empirical,
            certificate,
        });
    }
    let observed: Vec<f64> = points.iter().map(|p| p.empirical.mean).collect();
    let predicted: Vec<f64> = points.iter().map(|p| p.predicted).collect();
    let zero_point = points.iter().position(|p| p.predicted.abs() <= 1e-9 * scale_max);
    let signs: Vec<f64> = predicted.iter().filter(|p| p.abs() > 1e-9 * scale_max).map(|p| p.signum()).collect();
    let sign_changes = signs.windows(2).filter(|w| w[0] != w[1]).count();
    Ok(GapReport {
        d: sc.dim,
        q: sc.q,
        eta: sc.eta,
        lambda_bar: h.mean_eigenvalue(),
        r_squared: r_squared(&observed, &predicted),
        points,
        zero_point,
        sign_changes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub q: usize,
    /// Centered one-batch damage `Q − E Q`, global shape.
    pub global: Summary,
    /// Same for the blockwise shape.
    pub blockwise: Summary,
    /// `std(blockwise)/std(global)`
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub d: usize,
    pub block_sizes: Vec<usize>,
    pub rows: Vec<VarianceRow>,
}

impl CsvTable for VarianceReport {
    fn header(&self) -> Vec<&'static str> {
        vec!["q", "global_std", "blockwise_std", "ratio", "trials"]
    }

    fn rows(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| vec![r.q.to_string(), fmt(r.global.std), fmt(r.blockwise.std), fmt(r.ratio), r.global.n.to_string()])
            .collect()
    }
}

/// Spread of the centered one-batch damage under global and blockwise
/// shaping, per `q` in `sc.q_grid` (or just `sc.q`). Every block uses the
/// same `q` as the global arm.
pub fn run_variance_comparison(sc: &Scenario) -> Result<VarianceReport> {
    let spec = sc.partition.as_ref().ok_or_else(|| Error::Config("variance comparison needs a partition".into()))?;
    let h = sc.curvature()?;
    let g = sc.gradient()?;
    let ctx = DamageContext::new(h.clone(), g.clone(), sc.eta)?;
    let grid = if sc.q_grid.is_empty() { vec![sc.q] } else { sc.q_grid.clone() };
    let half_eta2 = 0.5 * sc.eta * sc.eta;
    let mut rows = Vec::new();
    let mut block_sizes = Vec::new();
    for q in grid {
        let p = spec.build_with_q(sc.dim, q)?;
        block_sizes = p.sizes().to_vec();
        let view = BlockCurvatureView::from_full(&h, &p)?;
        let e_blk = rise::blockwise_expected_curvature(&view, &p)?;
        let mean_blk = half_eta2 * e_blk.quad_form(&g);
        let mean_glob = ctx.zo_mean_damage(q);

        let gs = StreamSeed::new(sc.seed, domain::VARIANCE_GLOBAL).child(q as u64);
        let global: Vec<f64> = mc::map_trials(sc.trials, |t| {
            let batch = DirectionBatch::sample(sc.dim, q, &mut gs.stream(t, 0));
            ctx.zo_damage(&batch) - mean_glob
        });
        let bs = StreamSeed::new(sc.seed, domain::VARIANCE_BLOCK).child(q as u64);
        let blockwise: Vec<f64> = mc::map_trials(sc.trials, |t| {
            let x = rise::rise_shape(&g, &p, bs, t).expect("partition matches g");
            half_eta2 * h.quad_form(&x) - mean_blk
        });
        let (global, blockwise) = (summarize(&global), summarize(&blockwise));
        rows.push(VarianceRow { q, ratio: blockwise.std / global.std, global, blockwise });
    }
    Ok(VarianceReport { d: sc.dim, block_sizes, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedRow {
    pub alpha_sq: f64,
    pub value: f64,
    /// `𝓡` of the returned optimal moment.
    pub attained: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposureReport {
    pub d: usize,
    pub q: usize,
    pub lambda_bar: f64,
    pub tau: f64,
    pub worst_fo: f64,
    pub worst_zo: f64,
    pub worst_isotropic: f64,
    pub gap_closing_factor: f64,
    pub one_minus_tau: f64,
    pub aligned: Vec<AlignedRow>,
    pub uniqueness: UniquenessCheck,
    /// Actual damage of the three moments under the scenario's `H`.
    pub damage_fo: f64,
    pub damage_zo: f64,
    pub damage_isotropic: f64,
}

impl CsvTable for ExposureReport {
    fn header(&self) -> Vec<&'static str> {
        vec!["alpha_sq", "value", "attained"]
    }

    fn rows(&self) -> Vec<Vec<String>> {
        self.aligned.iter().map(|r| vec![fmt(r.alpha_sq), fmt(r.value), fmt(r.attained)]).collect()
    }
}

/// Worst-case exposures of the FO, ZO and isotropic moments, the aligned
/// benchmark on an `α²` grid straddling `1/d`, and a uniqueness check of
/// `M★` over `min(trials, 1000)` random feasible moments.
pub fn run_exposure(sc: &Scenario) -> Result<ExposureReport> {
    let h = sc.curvature()?;
    let g = sc.gradient()?;
    let lb = h.mean_eigenvalue();
    let eta = sc.eta;
    let fo = exposure::fo_moment(&g)?;
    let zo = exposure::zo_exposure(&g, sc.q)?;
    let star = exposure::isotropic_moment(&g)?;
    let worst = |m: &exposure::ExposureMoment| exposure::worst_case_exposure(m, lb, eta);
    let damage = |m: &exposure::ExposureMoment| {
        let prod = h.as_mat().matmul(&m.m.as_mat());
        0.5 * eta * eta * (0..sc.dim).map(|i| prod.get(i, i)).sum::<f64>()
    };
    let d = sc.dim as f64;
    let mut aligned = Vec::new();
    for a2 in [0.0, 0.5 / d, 1.0 / d, 2.0 / d, 0.5, 1.0] {
        let a2: f64 = f64::min(a2, 1.0);
        let (value, m) = exposure::aligned_benchmark(&g, a2.sqrt(), lb, eta)?;
        aligned.push(AlignedRow { alpha_sq: a2, value, attained: worst(&m)? });
    }
    let samples = sc.trials.min(1_000) as usize;
    Ok(ExposureReport {
        d: sc.dim,
        q: sc.q,
        lambda_bar: lb,
        tau: shaping::tau(sc.dim, sc.q),
        worst_fo: worst(&fo)?,
        worst_zo: worst(&zo)?,
        worst_isotropic: worst(&star)?,
        gap_closing_factor: exposure::gap_closing_factor(&g, sc.q, lb, eta)?,
        one_minus_tau: 1.0 - shaping::tau(sc.dim, sc.q),
        aligned,
        uniqueness: exposure::isotropic_uniqueness(&g, samples, StreamSeed::new(sc.seed, domain::PROBE))?,
        damage_fo: damage(&fo),
        damage_zo: damage(&zo),
        damage_isotropic: damage(&star),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlocksReport {
    pub d: usize,
    pub sizes: Vec<usize>,
    pub queries: Vec<usize>,
    pub eta: f64,
    pub gap: BlockGap,
    /// `Q^FO − Q^RISE` over `sc.trials` draws.
    pub empirical_gap: Summary,
    pub z: f64,
    pub deviation_bound: BlockDeviationBound,
    pub scores: BlockScores,
    pub shape_aware_coupling: Option<Vec<f64>>,
    pub coupling: CouplingReport,
    pub decomposition: MeanResidual,
}

impl CsvTable for BlocksReport {
    fn header(&self) -> Vec<&'static str> {
        vec!["block", "size", "q", "within_gap", "s_rise", "damage_density", "flat_signal", "coupling_raw"]
    }

    fn rows(&self) -> Vec<Vec<String>> {
        (0..self.sizes.len())
            .map(|b| {
                vec![
                    b.to_string(),
                    self.sizes[b].to_string(),
                    self.queries[b].to_string(),
                    fmt(self.gap.within[b]),
                    fmt(self.scores.s_rise[b]),
                    fmt(self.scores.damage_density[b]),
                    fmt(self.scores.flat_signal[b]),
                    self.scores.coupling.as_ref().map_or(String::new(), |c| fmt(c[b])),
                ]
            })
            .collect()
    }
}

const DECOMPOSITION_TRIALS: u64 = 100_000;

/// Blockwise identities for the scenario's `(H, g, partition)`: mean gap
/// against Monte Carlo, deviation bound at `δ` split evenly over blocks,
/// block scores, coupling, and the mean-residual split.
pub fn run_blocks(sc: &Scenario, c_universal: f64) -> Result<BlocksReport> {
    let p = sc.block_partition()?;
    let h = sc.curvature()?;
    let g = sc.gradient()?;
    let view = BlockCurvatureView::from_full(&h, &p)?;
    let eta = sc.eta;
    let gap = rise::blockwise_mean_gap(&g, &view, &p, eta)?;
    let fo = 0.5 * eta * eta * h.quad_form(&g);
    let seeds = StreamSeed::new(sc.seed, domain::BLOCKS);
    let gaps = mc::map_trials(sc.trials, |t| {
        let x = rise::rise_shape(&g, &p, seeds, t).expect("partition matches g");
        fo - 0.5 * eta * eta * h.quad_form(&x)
    });
    let empirical_gap = summarize(&gaps);
    let deltas = vec![sc.delta / p.len() as f64; p.len()];
    let deviation_bound = rise::blockwise_deviation_bound(&g, &view, &p, &deltas, c_universal, eta)?;
    let scores = rise::block_scores(&g, &view, &p, eta, sc.rho, None)?;
    let sig = rise::rise_step_covariances(&g, &p, eta)?;
    let shape_aware_coupling = rise::block_scores(&g, &view, &p, eta, sc.rho, Some(&sig))?.coupling;
    let coupling = rise::coupling_coefficient(&view, &p, StreamSeed::new(sc.seed, domain::PROBE))?;
    let n_dec = sc.trials.clamp(100, DECOMPOSITION_TRIALS);
    let steps = mc::map_trials(n_dec, |t| {
        rise::rise_shape(&g, &p, seeds, t)
            .expect("partition matches g")
            .into_iter()
            .map(|x| -eta * x)
            .collect::<Vec<f64>>()
    });
    let decomposition = rise::mean_residual_decomposition(&steps, &view, &p)?;
    Ok(BlocksReport {
        d: sc.dim,
        sizes: p.sizes().to_vec(),
        queries: p.queries().to_vec(),
        eta,
        z: if empirical_gap.se > 0.0 { (empirical_gap.mean - gap.total) / empirical_gap.se } else { 0.0 },
        gap,
        empirical_gap,
        deviation_bound,
        scores,
        shape_aware_coupling,
        coupling,
        decomposition,
    })
}
