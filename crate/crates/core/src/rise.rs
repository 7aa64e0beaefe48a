//! Blockwise randomized shaping of exact gradients.
//!
//! The gradient is cut into contiguous blocks `g_b` of size `d_b`. Each block
//! gets its own norm-matched shape `P_b = κ_b^{-1/2} Z_b` built from `q_b`
//! Gaussian directions, independently across blocks, and the shaped blocks
//! are concatenated. In expectation the diagonal curvature blocks contract
//! toward `λ̄_b I_b` with weight `τ_b`, while cross blocks shrink by `a_b a_c`.
//!
//! The controls mirror the first two moments of the wrapper: `scaled_fo`
//! matches the mean, `cov_matched_noise` matches mean and covariance.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::rng::{NormalStream, StreamSeed};
use crate::shaping::{self, DirectionBatch};
use crate::symkernel::{dot, eig_sym, inv_sqrt, inverse_pd, norm_sq, sqrt_psd, Mat, SymMatrix};

/// Ordered contiguous blocks with per-block query counts.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockPartition {
    sizes: Vec<usize>,
    queries: Vec<usize>,
    offsets: Vec<usize>,
}

impl BlockPartition {
    pub fn new(sizes: Vec<usize>, queries: Vec<usize>) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::PartitionMismatch("no blocks".into()));
        }
        if sizes.len() != queries.len() {
            return Err(Error::PartitionMismatch(format!(
                "{} block sizes but {} query counts",
                sizes.len(),
                queries.len()
            )));
        }
        if let Some(b) = sizes.iter().position(|s| *s == 0) {
            return Err(Error::PartitionMismatch(format!("block {b} is empty")));
        }
        if let Some(b) = queries.iter().position(|q| *q == 0) {
            return Err(Error::PartitionMismatch(format!("block {b} has no queries")));
        }
        let mut offsets = Vec::with_capacity(sizes.len() + 1);
        offsets.push(0);
        for s in &sizes {
            offsets.push(offsets.last().unwrap() + s);
        }
        Ok(Self { sizes, queries, offsets })
    }

    /// Same `q` in every block.
    pub fn uniform(sizes: Vec<usize>, q: usize) -> Result<Self> {
        let n = sizes.len();
        Self::new(sizes, vec![q; n])
    }

    /// `d / block` equal blocks (the last one takes the remainder).
    pub fn equal(d: usize, block: usize, q: usize) -> Result<Self> {
        if block == 0 || d == 0 {
            return Err(Error::PartitionMismatch(format!("d = {d}, block size {block}")));
        }
        let mut sizes = vec![block; d / block];
        if d % block != 0 {
            sizes.push(d % block);
        }
        Self::uniform(sizes, q)
    }

    pub fn dim(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn queries(&self) -> &[usize] {
        &self.queries
    }

    pub fn range(&self, b: usize) -> Range<usize> {
        self.offsets[b]..self.offsets[b + 1]
    }

    pub fn kappa(&self, b: usize) -> f64 {
        shaping::kappa(self.sizes[b], self.queries[b])
    }

    pub fn tau(&self, b: usize) -> f64 {
        shaping::tau(self.sizes[b], self.queries[b])
    }

    /// Mean shrinkage `a_b = κ_b^{-1/2}`.
    pub fn a(&self, b: usize) -> f64 {
        shaping::mean_shrink(self.sizes[b], self.queries[b])
    }

    pub fn check(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.dim() {
            return Err(Error::PartitionMismatch(format!(
                "vector has length {}, partition covers {}",
                v.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    pub fn blocks<'a>(&'a self, v: &'a [f64]) -> impl Iterator<Item = &'a [f64]> + 'a {
        (0..self.len()).map(move |b| &v[self.range(b)])
    }
}

/// Block view of a retention curvature. Cross blocks may be unknown.
#[derive(Debug, Clone)]
pub struct BlockCurvatureView {
    diag: Vec<SymMatrix>,
    /// `H_bc` for `b < c`, in row-major pair order; `None` when not supplied.
    cross: Option<Vec<Mat>>,
    lambda_bar: Vec<f64>,
}

fn pair_index(n: usize, b: usize, c: usize) -> usize {
    debug_assert!(b < c && c < n);
    b * n - b * (b + 1) / 2 + (c - b - 1)
}

impl BlockCurvatureView {
    pub fn from_full(h: &SymMatrix, p: &BlockPartition) -> Result<Self> {
        if h.dim() != p.dim() {
            return Err(Error::PartitionMismatch(format!("H is {0}x{0}, partition covers {1}", h.dim(), p.dim())));
        }
        let diag: Vec<SymMatrix> = (0..p.len()).map(|b| h.principal(p.range(b))).collect();
        let mut cross = Vec::new();
        for b in 0..p.len() {
            for c in (b + 1)..p.len() {
                cross.push(h.block(p.range(b), p.range(c)));
            }
        }
        Ok(Self::assemble(diag, Some(cross)))
    }

    /// Only the diagonal blocks; cross-block terms will be reported as absent.
    pub fn from_diagonal(diag: Vec<SymMatrix>, p: &BlockPartition) -> Result<Self> {
        if diag.len() != p.len() {
            return Err(Error::PartitionMismatch(format!("{} blocks for {} partition cells", diag.len(), p.len())));
        }
        for (b, h) in diag.iter().enumerate() {
            if h.dim() != p.sizes()[b] {
                return Err(Error::PartitionMismatch(format!("block {b} is {} but partition says {}", h.dim(), p.sizes()[b])));
            }
        }
        Ok(Self::assemble(diag, None))
    }

    /// Declares the unknown cross blocks to be zero.
    pub fn assume_block_diagonal(mut self) -> Self {
        if self.cross.is_none() {
            let n = self.diag.len();
            let mut cross = Vec::new();
            for b in 0..n {
                for c in (b + 1)..n {
                    cross.push(Mat::zeros(self.diag[b].dim(), self.diag[c].dim()));
                }
            }
            self.cross = Some(cross);
        }
        self
    }

    fn assemble(diag: Vec<SymMatrix>, cross: Option<Vec<Mat>>) -> Self {
        let lambda_bar = diag.iter().map(|h| h.mean_eigenvalue()).collect();
        Self { diag, cross, lambda_bar }
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    pub fn diag(&self, b: usize) -> &SymMatrix {
        &self.diag[b]
    }

    /// `λ̄_b = tr(H_bb)/d_b`
    pub fn lambda_bar(&self, b: usize) -> f64 {
        self.lambda_bar[b]
    }

    pub fn has_cross(&self) -> bool {
        self.cross.is_some()
    }

    /// `H_bc` for `b < c`.
    pub fn cross(&self, b: usize, c: usize) -> Option<&Mat> {
        self.cross.as_ref().map(|x| &x[pair_index(self.len(), b, c)])
    }

    fn check(&self, p: &BlockPartition) -> Result<()> {
        if self.len() != p.len() || (0..p.len()).any(|b| self.diag[b].dim() != p.sizes()[b]) {
            return Err(Error::PartitionMismatch("curvature view and partition disagree".into()));
        }
        Ok(())
    }

    /// `H_blk = blkdiag(H_11, …, H_BB)`
    pub fn block_diagonal(&self, p: &BlockPartition) -> SymMatrix {
        let d = p.dim();
        let mut full = vec![0.0; d * d];
        for b in 0..p.len() {
            let r = p.range(b);
            for i in r.clone() {
                for j in r.clone() {
                    full[i * d + j] = self.diag[b].get(i - r.start, j - r.start);
                }
            }
        }
        SymMatrix::from_row_major(d, full).expect("blocks are symmetric")
    }

    /// Reassembles `H`; needs the cross blocks.
    pub fn full(&self, p: &BlockPartition) -> Result<SymMatrix> {
        self.assemble_with(p, |_, h| h.clone(), |_, _, m| m.clone())
    }

    fn assemble_with(
        &self,
        p: &BlockPartition,
        on_diag: impl Fn(usize, &SymMatrix) -> SymMatrix,
        on_cross: impl Fn(usize, usize, &Mat) -> Mat,
    ) -> Result<SymMatrix> {
        self.check(p)?;
        let cross = self.cross.as_ref().ok_or(Error::MissingCrossBlocks)?;
        let d = p.dim();
        let mut full = vec![0.0; d * d];
        for b in 0..p.len() {
            let rb = p.range(b);
            let hb = on_diag(b, &self.diag[b]);
            for i in 0..rb.len() {
                for j in 0..rb.len() {
                    full[(rb.start + i) * d + rb.start + j] = hb.get(i, j);
                }
            }
            for c in (b + 1)..p.len() {
                let rc = p.range(c);
                let m = on_cross(b, c, &cross[pair_index(p.len(), b, c)]);
                for i in 0..rb.len() {
                    for j in 0..rc.len() {
                        let v = m.get(i, j);
                        full[(rb.start + i) * d + rc.start + j] = v;
                        full[(rc.start + j) * d + rb.start + i] = v;
                    }
                }
            }
        }
        SymMatrix::from_row_major(d, full)
    }
}

fn scale_mat(m: &Mat, s: f64) -> Mat {
    Mat::from_fn(m.rows(), m.cols(), |i, j| s * m.get(i, j))
}

/// Shapes block `b` of `g` with its own direction batch drawn from `stream`.
fn shape_block(gb: &[f64], q: usize, stream: &mut NormalStream) -> Vec<f64> {
    if gb.iter().all(|x| *x == 0.0) {
        return vec![0.0; gb.len()];
    }
    DirectionBatch::sample(gb.len(), q, stream).norm_matched_apply(gb)
}

/// `g̃ = (κ_b^{-1/2} Z_b g_b)_b`. Block `b` of trial `t` draws from
/// `seeds.stream(t, b)`; all-zero blocks pass through without sampling.
pub fn rise_shape(g: &[f64], p: &BlockPartition, seeds: StreamSeed, trial: u64) -> Result<Vec<f64>> {
    p.check(g)?;
    let mut out = Vec::with_capacity(g.len());
    for (b, gb) in p.blocks(g).enumerate() {
        out.extend(shape_block(gb, p.queries()[b], &mut seeds.stream(trial, b as u64)));
    }
    Ok(out)
}

/// The block-diagonal shape `P_blk` for trial `t` as a dense matrix.
pub fn rise_shape_matrix(p: &BlockPartition, seeds: StreamSeed, trial: u64) -> SymMatrix {
    let d = p.dim();
    let mut full = vec![0.0; d * d];
    for b in 0..p.len() {
        let r = p.range(b);
        let batch = DirectionBatch::sample(r.len(), p.queries()[b], &mut seeds.stream(trial, b as u64));
        let pb = shaping::ShapeSample::from_batch(batch).norm_matched();
        for i in 0..r.len() {
            for j in 0..r.len() {
                full[(r.start + i) * d + r.start + j] = pb.get(i, j);
            }
        }
    }
    SymMatrix::from_row_major(d, full).expect("blocks are symmetric")
}

/// `E[P_blkᵀ H P_blk]`: diagonal blocks `(1−τ_b)H_bb + τ_bλ̄_b I_b`, cross
/// blocks `a_b a_c H_bc`.
pub fn blockwise_expected_curvature(view: &BlockCurvatureView, p: &BlockPartition) -> Result<SymMatrix> {
    view.assemble_with(
        p,
        |b, h| {
            let t = p.tau(b);
            h.affine_identity(1.0 - t, t * h.mean_eigenvalue())
        },
        |b, c, m| scale_mat(m, p.a(b) * p.a(c)),
    )
}

/// `Q^FO − E[Q^RISE]` split into within-block and cross-block parts.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BlockGap {
    /// `(η²/2) τ_b g_bᵀ(H_bb − λ̄_b I)g_b`
    pub within: Vec<f64>,
    /// `η² Σ_{b<c} (1 − a_b a_c) g_bᵀ H_bc g_c`; `None` when cross blocks are unknown.
    pub cross: Option<f64>,
    /// Within plus cross; only the within part when `partial`.
    pub total: f64,
    pub partial: bool,
}

pub fn blockwise_mean_gap(g: &[f64], view: &BlockCurvatureView, p: &BlockPartition, eta: f64) -> Result<BlockGap> {
    p.check(g)?;
    view.check(p)?;
    let e2 = eta * eta;
    let within: Vec<f64> = p
        .blocks(g)
        .enumerate()
        .map(|(b, gb)| 0.5 * e2 * p.tau(b) * (view.diag(b).quad_form(gb) - view.lambda_bar(b) * norm_sq(gb)))
        .collect();
    let cross = view.has_cross().then(|| {
        let mut s = 0.0;
        for b in 0..p.len() {
            for c in (b + 1)..p.len() {
                let hbc = view.cross(b, c).unwrap();
                let gb = &g[p.range(b)];
                let gc = &g[p.range(c)];
                s += (1.0 - p.a(b) * p.a(c)) * dot(gb, &hbc.matvec(gc));
            }
        }
        e2 * s
    });
    let within_sum: f64 = within.iter().sum();
    Ok(BlockGap { total: within_sum + cross.unwrap_or(0.0), partial: cross.is_none(), within, cross })
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BlockDeviationBound {
    pub diagonal: f64,
    /// Omitted (and flagged) when cross blocks are unknown.
    pub cross: Option<f64>,
    pub total: f64,
}

/// One-batch deviation bound for the blockwise wrapper, with per-block
/// failure probabilities `deltas` (union confidence `1 − Σδ_b`).
pub fn blockwise_deviation_bound(
    g: &[f64],
    view: &BlockCurvatureView,
    p: &BlockPartition,
    deltas: &[f64],
    c_universal: f64,
    eta: f64,
) -> Result<BlockDeviationBound> {
    p.check(g)?;
    view.check(p)?;
    if deltas.len() != p.len() {
        return Err(Error::PartitionMismatch(format!("{} deltas for {} blocks", deltas.len(), p.len())));
    }
    let psi: Vec<f64> = (0..p.len())
        .map(|b| crate::deviation::psi_q(p.sizes()[b], p.queries()[b], deltas[b]))
        .collect::<Result<_>>()?;
    let gn: Vec<f64> = p.blocks(g).map(norm_sq).collect();
    let mut diagonal = 0.0;
    for b in 0..p.len() {
        let op = view.diag(b).op_norm()?;
        diagonal += c_universal * gn[b] * op * (psi[b] + psi[b] * psi[b]);
    }
    diagonal *= 0.5 * eta * eta;
    let cross = if view.has_cross() {
        let mut s = 0.0;
        for b in 0..p.len() {
            for c in (b + 1)..p.len() {
                let op = mat_op_norm(view.cross(b, c).unwrap())?;
                s += p.a(b) * p.a(c) * (gn[b] * gn[c]).sqrt() * op * (psi[b] + psi[c] + psi[b] * psi[c]);
            }
        }
        Some(eta * eta * s)
    } else {
        None
    };
    Ok(BlockDeviationBound { diagonal, cross, total: diagonal + cross.unwrap_or(0.0) })
}

/// Largest singular value of a general matrix, via `eig(MᵀM)`.
fn mat_op_norm(m: &Mat) -> Result<f64> {
    let mtm = m.transpose().matmul(m);
    let s = SymMatrix::from_upper_fn(m.cols(), |i, j| mtm.get(i, j));
    Ok(eig_sym(&s)?.max().max(0.0).sqrt())
}

/// Expected damage of a randomized adaptation split as
/// `½ mᵀHm + ½ Σ_b tr(H_bb Σ_b)`, from samples.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MeanResidual {
    pub mean_term: f64,
    pub residual_term: f64,
    /// Sample mean of `½ ΔᵀHΔ` and its standard error.
    pub empirical_mean: f64,
    pub empirical_se: f64,
}

/// Splits the mean damage of the sampled adaptations `deltas`. Moments use
/// the `1/n` normalization, so with full `Σ` the split would reproduce the
/// sample mean exactly; the block-diagonal `Σ` differs by sampled cross
/// covariance only.
pub fn mean_residual_decomposition(deltas: &[Vec<f64>], view: &BlockCurvatureView, p: &BlockPartition) -> Result<MeanResidual> {
    const MIN_TRIALS: usize = 100;
    if deltas.len() < MIN_TRIALS {
        return Err(Error::TooFewTrials { required: MIN_TRIALS, got: deltas.len() });
    }
    for x in deltas {
        p.check(x)?;
    }
    let h = view.full(p)?;
    let n = deltas.len() as f64;
    let d = p.dim();
    let mut m = vec![0.0; d];
    for x in deltas {
        for (mi, xi) in m.iter_mut().zip(x) {
            *mi += xi / n;
        }
    }
    let mean_term = 0.5 * h.quad_form(&m);
    let mut residual_term = 0.0;
    for b in 0..p.len() {
        let r = p.range(b);
        let hb = view.diag(b);
        // tr(H_bb Σ_b) = mean over samples of ε_bᵀ H_bb ε_b
        let mut acc = 0.0;
        for x in deltas {
            let e: Vec<f64> = r.clone().map(|i| x[i] - m[i]).collect();
            acc += hb.quad_form(&e);
        }
        residual_term += 0.5 * acc / n;
    }
    let damages: Vec<f64> = deltas.iter().map(|x| 0.5 * h.quad_form(x)).collect();
    let s = crate::stats::summarize(&damages);
    Ok(MeanResidual { mean_term, residual_term, empirical_mean: s.mean, empirical_se: s.se })
}

/// Per-block covariances of the wrapper's step `−η P_b g_b`:
/// `η² (g_b g_bᵀ + ‖g_b‖² I)/(q_b + d_b + 1)`.
pub fn rise_step_covariances(g: &[f64], p: &BlockPartition, eta: f64) -> Result<Vec<SymMatrix>> {
    p.check(g)?;
    Ok(p
        .blocks(g)
        .enumerate()
        .map(|(b, gb)| {
            let denom = (p.queries()[b] + gb.len() + 1) as f64;
            SymMatrix::outer(gb, eta * eta / denom).affine_identity(1.0, eta * eta * norm_sq(gb) / denom)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingVariant {
    /// `Σ_{c≠b} ‖H_bc‖_F`
    Raw,
    /// `Σ_{c≠b} ‖Σ_b^{1/2} H_bc Σ_c^{1/2}‖_F`
    ShapeAware,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BlockScores {
    /// `S_b = (η²/2) τ_b ‖g_b‖² (λ_b − λ̄_b)`
    pub s_rise: Vec<f64>,
    /// `D_b = tr(H_bb)/d_b`
    pub damage_density: Vec<f64>,
    /// `R_b(ρ) = g_bᵀ(H_bb + ρI)⁻¹g_b`
    pub flat_signal: Vec<f64>,
    pub rho: f64,
    /// `C_b`; `None` when cross blocks are unknown.
    pub coupling: Option<Vec<f64>>,
    pub coupling_variant: CouplingVariant,
}

pub fn block_scores(
    g: &[f64],
    view: &BlockCurvatureView,
    p: &BlockPartition,
    eta: f64,
    rho: f64,
    sigma_blocks: Option<&[SymMatrix]>,
) -> Result<BlockScores> {
    p.check(g)?;
    view.check(p)?;
    if !(rho >= 0.0) {
        return Err(Error::Config(format!("damping must be non-negative, got {rho}")));
    }
    let mut s_rise = Vec::with_capacity(p.len());
    let mut flat_signal = Vec::with_capacity(p.len());
    for (b, gb) in p.blocks(g).enumerate() {
        let hb = view.diag(b);
        s_rise.push(0.5 * eta * eta * p.tau(b) * (hb.quad_form(gb) - view.lambda_bar(b) * norm_sq(gb)));
        let damped = hb.affine_identity(1.0, rho);
        let inv = inverse_pd(&damped).map_err(|e| match e {
            Error::NotPd { min_eigenvalue } => Error::NotPdWithDamping { block: b, min_eigenvalue },
            other => other,
        })?;
        flat_signal.push(inv.quad_form(gb));
    }
    let damage_density = (0..p.len()).map(|b| view.lambda_bar(b)).collect();

    let (coupling_variant, roots) = match sigma_blocks {
        Some(sig) => {
            if sig.len() != p.len() {
                return Err(Error::PartitionMismatch(format!("{} covariances for {} blocks", sig.len(), p.len())));
            }
            let roots: Vec<SymMatrix> = sig.iter().map(sqrt_psd).collect::<Result<_>>()?;
            (CouplingVariant::ShapeAware, Some(roots))
        }
        None => (CouplingVariant::Raw, None),
    };
    let coupling = view.has_cross().then(|| {
        let mut c_b = vec![0.0; p.len()];
        for b in 0..p.len() {
            for c in (b + 1)..p.len() {
                let hbc = view.cross(b, c).unwrap();
                let f = match &roots {
                    Some(r) => r[b].as_mat().matmul(hbc).matmul(&r[c].as_mat()).frobenius_norm(),
                    None => hbc.frobenius_norm(),
                };
                c_b[b] += f;
                c_b[c] += f;
            }
        }
        c_b
    });
    Ok(BlockScores { s_rise, damage_density, flat_signal, rho, coupling, coupling_variant })
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SandwichCheck {
    pub probes: usize,
    /// Largest relative excursion outside `[(1+ε)⁻¹, (1−ε)⁻¹]`; `≤ 0` means inside.
    pub worst_excursion: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CouplingReport {
    /// `ε_blk = ‖H_blk^{-1/2} E H_blk^{-1/2}‖_op`
    pub epsilon: f64,
    /// Present only when `ε_blk < 1`.
    pub sandwich: Option<SandwichCheck>,
}

impl CouplingReport {
    pub fn too_large(&self) -> bool {
        self.epsilon >= 1.0
    }
}

pub const SANDWICH_PROBES: usize = 100;
const SANDWICH_TOL: f64 = 1e-8;

/// `ε_blk`, plus a probe check of
/// `(1+ε)⁻¹ vᵀH_blk⁻¹v ≤ vᵀH⁻¹v ≤ (1−ε)⁻¹ vᵀH_blk⁻¹v` when `ε < 1`.
/// For `ε ≥ 1` the coefficient is still returned, without the check.
pub fn coupling_coefficient(view: &BlockCurvatureView, p: &BlockPartition, probes: StreamSeed) -> Result<CouplingReport> {
    let h = view.full(p)?;
    let h_blk = view.block_diagonal(p);
    let w = inv_sqrt(&h_blk)?;
    let e = h.sub(&h_blk);
    let normalized = e.congruence(&w.as_mat());
    let epsilon = normalized.op_norm()?;
    if epsilon >= 1.0 {
        return Ok(CouplingReport { epsilon, sandwich: None });
    }
    let h_inv = inverse_pd(&h)?;
    let blk_inv = inverse_pd(&h_blk)?;
    let (lo, hi) = (1.0 / (1.0 + epsilon), 1.0 / (1.0 - epsilon));
    let mut worst = f64::NEG_INFINITY;
    for k in 0..SANDWICH_PROBES {
        let v = probes.stream(k as u64, 0).normal_vec(p.dim());
        let full = h_inv.quad_form(&v);
        let base = blk_inv.quad_form(&v);
        let ratio = full / base;
        worst = worst.max(lo - ratio).max(ratio - hi);
    }
    Ok(CouplingReport {
        epsilon,
        sandwich: Some(SandwichCheck { probes: SANDWICH_PROBES, worst_excursion: worst, holds: worst <= SANDWICH_TOL * hi }),
    })
}

/// Adaptation rules that consume an exact gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptationKind {
    RawFo,
    ScaledFo,
    IsoNoise,
    CovMatchedNoise,
    Rise,
}

impl AdaptationKind {
    pub fn name(&self) -> &'static str {
        match self {
            AdaptationKind::RawFo => "raw_fo",
            AdaptationKind::ScaledFo => "scaled_fo",
            AdaptationKind::IsoNoise => "iso_noise",
            AdaptationKind::CovMatchedNoise => "cov_matched_noise",
            AdaptationKind::Rise => "rise",
        }
    }
}

/// Maps an exact gradient to the direction an optimizer should step along.
/// Randomized rules draw block `b` of trial `t` from `seeds.stream(t, b)`.
pub trait GradientTransformer {
    fn transform(&self, g: &[f64], p: &BlockPartition, seeds: StreamSeed, trial: u64) -> Result<Vec<f64>>;
}

impl GradientTransformer for AdaptationKind {
    fn transform(&self, g: &[f64], p: &BlockPartition, seeds: StreamSeed, trial: u64) -> Result<Vec<f64>> {
        match self {
            AdaptationKind::Rise => rise_shape(g, p, seeds, trial),
            other => control_adaptation(g, p, *other, seeds, trial),
        }
    }
}

/// Moment-matched controls for the blockwise wrapper.
///
/// * `raw_fo`: `g`
/// * `scaled_fo`: `a_b g_b` per block (the wrapper's mean)
/// * `iso_noise`: `a_b g_b + ζ_b`, `ζ_b ~ N(0, σ_b² I)` with
///   `σ_b² = (1 − a_b²)‖g_b‖²/d_b`, so each block keeps the wrapper's mean and
///   its squared-norm budget `‖g_b‖²`
/// * `cov_matched_noise`: `a_b g_b + ξ_b` with
///   `Cov(ξ_b) = (g_b g_bᵀ + ‖g_b‖² I)/(q_b + d_b + 1)`
pub fn control_adaptation(
    g: &[f64],
    p: &BlockPartition,
    kind: AdaptationKind,
    seeds: StreamSeed,
    trial: u64,
) -> Result<Vec<f64>> {
    p.check(g)?;
    let noisy = matches!(kind, AdaptationKind::IsoNoise | AdaptationKind::CovMatchedNoise);
    if noisy && g.iter().all(|x| *x == 0.0) {
        return Err(Error::ZeroGradient);
    }
    let mut out = Vec::with_capacity(g.len());
    for (b, gb) in p.blocks(g).enumerate() {
        let a = p.a(b);
        match kind {
            AdaptationKind::RawFo => out.extend_from_slice(gb),
            AdaptationKind::ScaledFo => out.extend(gb.iter().map(|x| a * x)),
            AdaptationKind::Rise => out.extend(shape_block(gb, p.queries()[b], &mut seeds.stream(trial, b as u64))),
            AdaptationKind::IsoNoise => {
                let gg = norm_sq(gb);
                let sigma = ((1.0 - a * a) * gg / gb.len() as f64).sqrt();
                let mut st = seeds.stream(trial, b as u64);
                out.extend(gb.iter().map(|x| a * x + sigma * st.normal()));
            }
            AdaptationKind::CovMatchedNoise => {
                // Cov = c(ggᵀ + ‖g‖²I) = (√c‖g‖(I + (√2−1)ĝĝᵀ))²
                let gg = norm_sq(gb);
                let c = 1.0 / (p.queries()[b] + gb.len() + 1) as f64;
                let gn = gg.sqrt();
                let w = seeds.stream(trial, b as u64).normal_vec(gb.len());
                let proj = if gn > 0.0 { dot(gb, &w) / gn } else { 0.0 };
                let s = c.sqrt() * gn;
                let k = std::f64::consts::SQRT_2 - 1.0;
                for (i, x) in gb.iter().enumerate() {
                    let dir = if gn > 0.0 { x / gn } else { 0.0 };
                    out.push(a * x + s * (w[i] + k * proj * dir));
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retention::expected_shaped_curvature;
    use crate::rng::domain;
    use crate::stats::summarize;
    use crate::symkernel::random_orthogonal;

    fn random_psd(d: usize, seed: u64) -> SymMatrix {
        let mut st = StreamSeed::new(seed, domain::TEST).stream(0, 0);
        let o = random_orthogonal(d, &mut st);
        let vals: Vec<f64> = (0..d).map(|_| 0.2 + 2.0 * st.uniform()).collect();
        SymMatrix::diag(&vals).congruence_t(&o)
    }

    fn g8() -> Vec<f64> {
        vec![1.0, -0.5, 0.3, 2.0, -1.2, 0.7, 0.1, 0.9]
    }

    #[test]
    fn partition_constants() {
        let p = BlockPartition::new(vec![3, 5], vec![2, 7]).unwrap();
        assert_eq!(p.dim(), 8);
        assert_eq!(p.range(1), 3..8);
        assert_eq!(p.kappa(0), 6.0 / 2.0);
        assert_eq!(p.tau(1), 5.0 / 13.0);
        assert!((p.a(1) - (7.0f64 / 13.0).sqrt()).abs() < 1e-14);
        assert!(BlockPartition::new(vec![3, 0], vec![1, 1]).is_err());
        assert!(BlockPartition::new(vec![3], vec![1, 1]).is_err());
        assert!(matches!(rise_shape(&[1.0; 7], &p, StreamSeed::new(0, 0), 0), Err(Error::PartitionMismatch(_))));
        let e = BlockPartition::equal(10, 4, 2).unwrap();
        assert_eq!(e.sizes(), &[4, 4, 2]);
    }

    #[test]
    fn single_block_is_global_shape() {
        let g = g8();
        let p = BlockPartition::uniform(vec![8], 3).unwrap();
        let seeds = StreamSeed::new(4, domain::SHAPE);
        let shaped = rise_shape(&g, &p, seeds, 9).unwrap();
        let direct = DirectionBatch::sample(8, 3, &mut seeds.stream(9, 0)).norm_matched_apply(&g);
        assert_eq!(shaped, direct);
    }

    #[test]
    fn zero_block_passes_through() {
        let p = BlockPartition::uniform(vec![2, 2], 1).unwrap();
        let out = rise_shape(&[0.0, 0.0, 1.0, 2.0], &p, StreamSeed::new(1, domain::SHAPE), 0).unwrap();
        assert_eq!(&out[..2], &[0.0, 0.0]);
    }

    #[test]
    fn blockwise_mean_and_norm_monte_carlo() {
        let g = g8();
        let p = BlockPartition::new(vec![3, 5], vec![2, 1]).unwrap();
        let seeds = StreamSeed::new(5, domain::BLOCKS);
        let xs = crate::mc::map_trials(100_000, |t| rise_shape(&g, &p, seeds, t).unwrap());
        for b in 0..2 {
            let r = p.range(b);
            for i in r.clone() {
                let s = summarize(&xs.iter().map(|x| x[i]).collect::<Vec<_>>());
                assert!((s.mean - p.a(b) * g[i]).abs() <= 3.0 * s.se, "coord {i}");
            }
            let norms: Vec<f64> = xs.iter().map(|x| norm_sq(&x[r.clone()])).collect();
            let s = summarize(&norms);
            let target = norm_sq(&g[r.clone()]);
            assert!((s.mean - target).abs() <= 0.01 * target, "block {b}: {} vs {target}", s.mean);
        }
    }

    #[test]
    fn expected_curvature_block_diagonal_reduces() {
        let p = BlockPartition::new(vec![3, 5], vec![2, 4]).unwrap();
        let diag = vec![random_psd(3, 1), random_psd(5, 2)];
        let view = BlockCurvatureView::from_diagonal(diag.clone(), &p).unwrap();
        assert_eq!(blockwise_expected_curvature(&view, &p).unwrap_err(), Error::MissingCrossBlocks);
        let view = view.assume_block_diagonal();
        let e = blockwise_expected_curvature(&view, &p).unwrap();
        for b in 0..2 {
            let want = expected_shaped_curvature(&diag[b], p.queries()[b]);
            assert!(e.principal(p.range(b)).sub(&want).frobenius_norm() < 1e-14);
        }
    }

    #[test]
    fn expected_curvature_cross_scaling() {
        let p = BlockPartition::uniform(vec![2, 2], 1).unwrap();
        let h = random_psd(4, 3);
        let view = BlockCurvatureView::from_full(&h, &p).unwrap();
        let e = blockwise_expected_curvature(&view, &p).unwrap();
        for i in 0..2 {
            for j in 2..4 {
                assert_eq!(e.get(i, j), 0.25 * h.get(i, j));
            }
        }
        assert!(view.full(&p).unwrap().sub(&h).frobenius_norm() == 0.0);
    }

    #[test]
    fn expected_curvature_monte_carlo() {
        let p = BlockPartition::uniform(vec![4, 4], 2).unwrap();
        let h = random_psd(8, 4);
        let view = BlockCurvatureView::from_full(&h, &p).unwrap();
        let target = blockwise_expected_curvature(&view, &p).unwrap();
        let seeds = StreamSeed::new(6, domain::BLOCKS);
        let mean = crate::mc::vector_mean(20_000, 64, &[], |t, acc| {
            let pm = rise_shape_matrix(&p, seeds, t);
            let php = h.congruence(&pm.as_mat());
            for (a, v) in acc.iter_mut().zip(php.as_slice()) {
                *a += v;
            }
        });
        let est = SymMatrix::from_row_major(8, mean[0].mean.clone()).unwrap();
        let rel = est.sub(&target).frobenius_norm() / target.frobenius_norm();
        assert!(rel <= 3e-2, "relative residual {rel}");
    }

    #[test]
    fn shape_matrix_matches_shape_action() {
        let g = g8();
        let p = BlockPartition::new(vec![3, 5], vec![2, 1]).unwrap();
        let seeds = StreamSeed::new(7, domain::BLOCKS);
        let pm = rise_shape_matrix(&p, seeds, 3);
        let a = pm.matvec(&g);
        let b = rise_shape(&g, &p, seeds, 3).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_gap_special_cases() {
        let p = BlockPartition::uniform(vec![4, 4], 2).unwrap();
        let diag = vec![random_psd(4, 8), random_psd(4, 9)];
        let g = g8();
        let bd = BlockCurvatureView::from_diagonal(diag.clone(), &p).unwrap().assume_block_diagonal();
        let gap = blockwise_mean_gap(&g, &bd, &p, 0.7).unwrap();
        assert_eq!(gap.cross, Some(0.0));
        let per_block: f64 = (0..2)
            .map(|b| {
                let ctx = crate::retention::DamageContext::new(diag[b].clone(), g[p.range(b)].to_vec(), 0.7).unwrap();
                ctx.mean_gap(2)
            })
            .sum();
        assert!((gap.total - per_block).abs() < 1e-12 * per_block.abs().max(1.0));

        let iso = vec![SymMatrix::scaled_identity(4, 1.5), SymMatrix::scaled_identity(4, 0.5)];
        let mut h = random_psd(8, 10);
        // overwrite the diagonal blocks with isotropic ones, keep the coupling
        let full = {
            let mut v = h.as_slice().to_vec();
            for b in 0..2 {
                for i in p.range(b) {
                    for j in p.range(b) {
                        v[i * 8 + j] = iso[b].get(i - p.range(b).start, j - p.range(b).start);
                    }
                }
            }
            SymMatrix::from_row_major(8, v).unwrap()
        };
        h = full;
        let view = BlockCurvatureView::from_full(&h, &p).unwrap();
        let gap = blockwise_mean_gap(&g, &view, &p, 1.0).unwrap();
        assert!(gap.within.iter().all(|w| w.abs() < 1e-15));
        assert!(gap.cross.unwrap() != 0.0);

        let partial = BlockCurvatureView::from_diagonal(diag, &p).unwrap();
        let gap = blockwise_mean_gap(&g, &partial, &p, 1.0).unwrap();
        assert!(gap.partial && gap.cross.is_none());
    }

    #[test]
    fn deviation_bound_reductions() {
        let g = g8();
        let p1 = BlockPartition::uniform(vec![8], 3).unwrap();
        let h = random_psd(8, 11);
        let view = BlockCurvatureView::from_full(&h, &p1).unwrap();
        let b = blockwise_deviation_bound(&g, &view, &p1, &[0.05], 1.7, 0.4).unwrap();
        let ctx = crate::retention::DamageContext::new(h, g.clone(), 0.4).unwrap();
        let global = crate::deviation::deviation_bound(&ctx, 3, &crate::deviation::DeviationBudget::new(0.05, 1.7).unwrap()).unwrap();
        assert!((b.total - global).abs() < 1e-12 * global);

        let p = BlockPartition::uniform(vec![4, 4], 2).unwrap();
        let zero = BlockCurvatureView::from_full(&SymMatrix::zeros(8), &p).unwrap();
        assert_eq!(blockwise_deviation_bound(&g, &zero, &p, &[0.05, 0.05], 1.0, 1.0).unwrap().total, 0.0);
    }

    #[test]
    fn decomposition_examples() {
        let p = BlockPartition::uniform(vec![4, 4], 2).unwrap();
        let h = random_psd(8, 12);
        let view = BlockCurvatureView::from_full(&h, &p).unwrap();
        let fixed = vec![g8(); 100];
        let r = mean_residual_decomposition(&fixed, &view, &p).unwrap();
        assert!(r.residual_term.abs() < 1e-20);
        assert!((r.mean_term - 0.5 * h.quad_form(&g8())).abs() < 1e-12);
        assert!(matches!(
            mean_residual_decomposition(&fixed[..50], &view, &p),
            Err(Error::TooFewTrials { required: 100, got: 50 })
        ));
    }

    #[test]
    fn isotropic_covariance_residual_is_density_weighted() {
        // Σ_b = α_b I ⇒ ½ Σ_b tr(H_bb Σ_b) = ½ Σ_b α_b tr(H_bb)
        let p = BlockPartition::uniform(vec![3, 5], 1).unwrap();
        let h = random_psd(8, 13);
        let view = BlockCurvatureView::from_full(&h, &p).unwrap();
        let alphas = [0.3, 1.7];
        let closed: f64 = (0..2).map(|b| 0.5 * alphas[b] * view.diag(b).trace()).sum();
        let via_density: f64 = (0..2).map(|b| 0.5 * alphas[b] * p.sizes()[b] as f64 * view.lambda_bar(b)).sum();
        let trace_form: f64 = (0..2)
            .map(|b| {
                let sig = SymMatrix::scaled_identity(p.sizes()[b], alphas[b]);
                let prod = view.diag(b).as_mat().matmul(&sig.as_mat());
                0.5 * (0..p.sizes()[b]).map(|i| prod.get(i, i)).sum::<f64>()
            })
            .sum();
        assert!((closed - via_density).abs() < 1e-12);
        assert!((closed - trace_form).abs() < 1e-12);
    }

    #[test]
    fn decomposition_monte_carlo() {
        let p = BlockPartition::uniform(vec![4, 4], 2).unwrap();
        let h = random_psd(8, 14);
        let view = BlockCurvatureView::from_full(&h, &p).unwrap();
        let g = g8();
        let eta = 0.5;
        let seeds = StreamSeed::new(15, domain::BLOCKS);
        let deltas = crate::mc::map_trials(100_000, |t| {
            rise_shape(&g, &p, seeds, t).unwrap().into_iter().map(|x| -eta * x).collect::<Vec<_>>()
        });
        let r = mean_residual_decomposition(&deltas, &view, &p).unwrap();
        let sum = r.mean_term + r.residual_term;
        assert!((sum - r.empirical_mean).abs() <= 3.0 * r.empirical_se, "{sum} vs {} ± {}", r.empirical_mean, r.empirical_se);
    }

    #[test]
    fn fluctuation_split_per_trial() {
        let p = BlockPartition::new(vec![3, 2, 3], vec![1, 2, 2]).unwrap();
        let h = random_psd(8, 16);
        let view = BlockCurvatureView::from_full(&h, &p).unwrap();
        let sig = rise_step_covariances(&g8(), &p, 1.0).unwrap();
        let tr_blocks: f64 = (0..3)
            .map(|b| {
                let prod = view.diag(b).as_mat().matmul(&sig[b].as_mat());
                (0..p.sizes()[b]).map(|i| prod.get(i, i)).sum::<f64>()
            })
            .sum();
        let seeds = StreamSeed::new(17, domain::BLOCKS);
        let mean: Vec<f64> = (0..3).flat_map(|b| g8()[p.range(b)].iter().map(|x| -p.a(b) * x).collect::<Vec<_>>()).collect();
        for t in 0..100 {
            let delta: Vec<f64> = rise_shape(&g8(), &p, seeds, t).unwrap().iter().map(|x| -x).collect();
            let eps: Vec<f64> = delta.iter().zip(&mean).map(|(x, m)| x - m).collect();
            let lhs = 0.5 * h.quad_form(&eps) - 0.5 * tr_blocks;
            let mut rhs = 0.0;
            for b in 0..3 {
                rhs += 0.5 * view.diag(b).quad_form(&eps[p.range(b)]);
            }
            rhs -= 0.5 * tr_blocks;
            for b in 0..3 {
                for c in (b + 1)..3 {
                    rhs += dot(&eps[p.range(b)], &view.cross(b, c).unwrap().matvec(&eps[p.range(c)]));
                }
            }
            assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn scores_examples() {
        let p = BlockPartition::uniform(vec![4, 4], 2).unwrap();
        let g = g8();
        let iso = BlockCurvatureView::from_diagonal(
            vec![SymMatrix::scaled_identity(4, 2.0), SymMatrix::scaled_identity(4, 0.5)],
            &p,
        )
        .unwrap()
        .assume_block_diagonal();
        let s = block_scores(&g, &iso, &p, 1.0, 0.1, None).unwrap();
        assert_eq!(s.s_rise, vec![0.0, 0.0]);
        assert_eq!(s.damage_density, vec![2.0, 0.5]);
        assert!((s.flat_signal[0] - norm_sq(&g[..4]) / 2.1).abs() < 1e-12);
        assert_eq!(s.coupling, Some(vec![0.0, 0.0]));
        assert_eq!(s.coupling_variant, CouplingVariant::Raw);

        let h = random_psd(8, 18);
        let view = BlockCurvatureView::from_full(&h, &p).unwrap();
        let s = block_scores(&g, &view, &p, 0.6, 0.0, None).unwrap();
        let gap = blockwise_mean_gap(&g, &view, &p, 0.6).unwrap();
        let within: f64 = gap.within.iter().sum();
        assert!((s.s_rise.iter().sum::<f64>() - within).abs() <= 1e-12 * within.abs().max(1.0));
        for b in 0..2 {
            let gb = &g[p.range(b)];
            let lb = view.diag(b).quad_form(gb) / norm_sq(gb);
            assert_eq!(s.s_rise[b].signum(), (lb - view.lambda_bar(b)).signum());
            assert!((s.damage_density[b] - view.diag(b).trace() / 4.0).abs() < 1e-12);
        }

        let sig = rise_step_covariances(&g, &p, 0.6).unwrap();
        let aware = block_scores(&g, &view, &p, 0.6, 0.0, Some(&sig)).unwrap();
        assert_eq!(aware.coupling_variant, CouplingVariant::ShapeAware);

        let singular = BlockCurvatureView::from_diagonal(vec![SymMatrix::diag(&[1.0, 0.0, 1.0, 1.0]), SymMatrix::identity(4)], &p).unwrap();
        assert!(matches!(
            block_scores(&g, &singular, &p, 1.0, 0.0, None),
            Err(Error::NotPdWithDamping { block: 0, .. })
        ));
        assert!(block_scores(&g, &singular, &p, 1.0, 1e-3, None).is_ok());
    }

    #[test]
    fn coupling_examples() {
        let p = BlockPartition::uniform(vec![1, 1], 1).unwrap();
        for rho in [0.0, 0.3, -0.6] {
            let h = SymMatrix::from_rows(&[vec![1.0, rho], vec![rho, 1.0]]).unwrap();
            let view = BlockCurvatureView::from_full(&h, &p).unwrap();
            let r = coupling_coefficient(&view, &p, StreamSeed::new(1, domain::PROBE)).unwrap();
            assert!((r.epsilon - rho.abs()).abs() < 1e-12);
            assert!(r.sandwich.unwrap().holds);
        }

        let p = BlockPartition::uniform(vec![4, 4], 1).unwrap();
        let bd = BlockCurvatureView::from_diagonal(vec![random_psd(4, 19), random_psd(4, 20)], &p)
            .unwrap()
            .assume_block_diagonal();
        let r = coupling_coefficient(&bd, &p, StreamSeed::new(2, domain::PROBE)).unwrap();
        assert!(r.epsilon < 1e-12);
        assert!(r.sandwich.unwrap().holds);

        // weakly coupled: scale off-diagonal blocks of a random PSD matrix
        let h = random_psd(8, 21);
        let weak = SymMatrix::from_upper_fn(8, |i, j| if (i < 4) == (j < 4) { h.get(i, j) } else { 0.2 * h.get(i, j) });
        let view = BlockCurvatureView::from_full(&weak, &p).unwrap();
        let r = coupling_coefficient(&view, &p, StreamSeed::new(3, domain::PROBE)).unwrap();
        assert!(r.epsilon < 1.0);
        assert!(r.sandwich.as_ref().unwrap().holds, "{r:?}");

        let strong = SymMatrix::from_rows(&[vec![1.0, 1.5], vec![1.5, 1.0]]).unwrap();
        let p2 = BlockPartition::uniform(vec![1, 1], 1).unwrap();
        let r = coupling_coefficient(&BlockCurvatureView::from_full(&strong, &p2).unwrap(), &p2, StreamSeed::new(4, domain::PROBE)).unwrap();
        assert!(r.too_large() && r.sandwich.is_none());

        let missing = BlockCurvatureView::from_diagonal(vec![SymMatrix::identity(1), SymMatrix::identity(1)], &p2).unwrap();
        assert_eq!(coupling_coefficient(&missing, &p2, StreamSeed::new(4, domain::PROBE)).unwrap_err(), Error::MissingCrossBlocks);
    }

    #[test]
    fn controls_examples() {
        let p = BlockPartition::uniform(vec![2], 1).unwrap();
        let g = [2.0, -4.0];
        let s = StreamSeed::new(1, domain::STREAM_METHOD);
        assert_eq!(control_adaptation(&g, &p, AdaptationKind::ScaledFo, s, 0).unwrap(), vec![1.0, -2.0]);
        assert_eq!(control_adaptation(&g, &p, AdaptationKind::RawFo, s, 0).unwrap(), g.to_vec());
        assert_eq!(control_adaptation(&[0.0, 0.0], &p, AdaptationKind::IsoNoise, s, 0).unwrap_err(), Error::ZeroGradient);
        assert_eq!(control_adaptation(&[0.0, 0.0], &p, AdaptationKind::CovMatchedNoise, s, 0).unwrap_err(), Error::ZeroGradient);
        assert_eq!(AdaptationKind::Rise.transform(&g, &p, s, 4).unwrap(), rise_shape(&g, &p, s, 4).unwrap());
    }

    #[test]
    fn cov_matched_noise_moments() {
        let g = g8();
        let p = BlockPartition::new(vec![3, 5], vec![2, 1]).unwrap();
        let seeds = StreamSeed::new(22, domain::STREAM_METHOD);
        let xs = crate::mc::map_trials(100_000, |t| control_adaptation(&g, &p, AdaptationKind::CovMatchedNoise, seeds, t).unwrap());
        for b in 0..2 {
            let r = p.range(b);
            let a = p.a(b);
            for i in r.clone() {
                let s = summarize(&xs.iter().map(|x| x[i]).collect::<Vec<_>>());
                assert!((s.mean - a * g[i]).abs() <= 3.0 * s.se);
            }
            let gb = &g[r.clone()];
            let denom = (p.queries()[b] + gb.len() + 1) as f64;
            let target = SymMatrix::outer(gb, 1.0 / denom).affine_identity(1.0, norm_sq(gb) / denom);
            let (mut err, mut var) = (0.0, 0.0);
            for i in 0..gb.len() {
                for j in 0..gb.len() {
                    let v: Vec<f64> = xs
                        .iter()
                        .map(|x| (x[r.start + i] - a * gb[i]) * (x[r.start + j] - a * gb[j]))
                        .collect();
                    let s = summarize(&v);
                    err += (s.mean - target.get(i, j)).powi(2);
                    var += s.se * s.se;
                }
            }
            assert!(err.sqrt() <= 3.0 * var.sqrt(), "block {b}");
        }
    }

    #[test]
    fn iso_noise_keeps_budget() {
        let g = g8();
        let p = BlockPartition::new(vec![3, 5], vec![2, 1]).unwrap();
        let seeds = StreamSeed::new(23, domain::STREAM_METHOD);
        let xs = crate::mc::map_trials(100_000, |t| control_adaptation(&g, &p, AdaptationKind::IsoNoise, seeds, t).unwrap());
        for b in 0..2 {
            let r = p.range(b);
            let s = summarize(&xs.iter().map(|x| norm_sq(&x[r.clone()])).collect::<Vec<_>>());
            let target = norm_sq(&g[r.clone()]);
            assert!((s.mean - target).abs() <= 3.0 * s.se, "block {b}: {} vs {target}", s.mean);
        }
    }

    #[test]
    fn rise_and_cov_matched_agree_on_block_diagonal_h() {
        // identical first two moments ⇒ identical mean damage when H is block diagonal
        let p = BlockPartition::new(vec![3, 5], vec![2, 1]).unwrap();
        let view = BlockCurvatureView::from_diagonal(vec![random_psd(3, 24), random_psd(5, 25)], &p)
            .unwrap()
            .assume_block_diagonal();
        let h = view.full(&p).unwrap();
        let g = g8();
        let closed: f64 = {
            let mean: Vec<f64> = (0..2).flat_map(|b| g[p.range(b)].iter().map(|x| p.a(b) * x).collect::<Vec<_>>()).collect();
            let sig = rise_step_covariances(&g, &p, 1.0).unwrap();
            let tr: f64 = (0..2)
                .map(|b| {
                    let prod = view.diag(b).as_mat().matmul(&sig[b].as_mat());
                    (0..p.sizes()[b]).map(|i| prod.get(i, i)).sum::<f64>()
                })
                .sum();
            0.5 * h.quad_form(&mean) + 0.5 * tr
        };
        let run = |kind: AdaptationKind, dom: u64| {
            let seeds = StreamSeed::new(26, dom);
            crate::mc::map_trials(100_000, |t| 0.5 * h.quad_form(&kind.transform(&g, &p, seeds, t).unwrap()))
        };
        let a = run(AdaptationKind::Rise, domain::BLOCKS);
        let b = run(AdaptationKind::CovMatchedNoise, domain::STREAM_METHOD);
        let (sa, sb) = (summarize(&a), summarize(&b));
        assert!((sa.mean - closed).abs() <= 3.0 * sa.se);
        assert!((sb.mean - closed).abs() <= 3.0 * sb.se);
        assert!((sa.mean - sb.mean).abs() <= 3.0 * (sa.se * sa.se + sb.se * sb.se).sqrt());
    }

    #[test]
    fn refinement_changes_tau_per_formula() {
        let h = SymMatrix::diag(&[4.0, 1.0, 0.5, 0.5, 2.0, 2.0, 0.1, 3.0]);
        let g = g8();
        let coarse = BlockPartition::uniform(vec![8], 2).unwrap();
        let fine = BlockPartition::uniform(vec![4, 4], 2).unwrap();
        let gc = blockwise_mean_gap(&g, &BlockCurvatureView::from_full(&h, &coarse).unwrap(), &coarse, 1.0).unwrap();
        let gf = blockwise_mean_gap(&g, &BlockCurvatureView::from_full(&h, &fine).unwrap(), &fine, 1.0).unwrap();
        assert!((coarse.tau(0) - 8.0 / 11.0).abs() < 1e-15);
        assert!((fine.tau(0) - 4.0 / 7.0).abs() < 1e-15);
        let manual: f64 = (0..2)
            .map(|b| {
                let r = fine.range(b);
                let hb = h.principal(r.clone());
                0.5 * (4.0 / 7.0) * (hb.quad_form(&g[r.clone()]) - hb.mean_eigenvalue() * norm_sq(&g[r]))
            })
            .sum();
        assert!((gf.total - manual).abs() < 1e-12);
        assert_eq!(gf.cross, Some(0.0));
        let ctx = crate::retention::DamageContext::new(h, g, 1.0).unwrap();
        assert!((gc.total - ctx.mean_gap(2)).abs() < 1e-12);
    }
}
