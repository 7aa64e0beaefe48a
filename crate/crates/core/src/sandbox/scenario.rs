//! Serializable experiment descriptions and the objects they determine.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rise::BlockPartition;
use crate::rng::{domain, NormalStream, StreamSeed};
use crate::symkernel::{norm, random_orthogonal, Mat, SymMatrix};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpectrumSpec {
    Explicit { values: Vec<f64> },
    /// `lo + (hi − lo) i/(d − 1)`, ascending.
    LinearRamp { lo: f64, hi: f64 },
    /// `d − high_count` eigenvalues at `low`, the rest at `high`.
    TwoCluster { low: f64, high: f64, high_count: usize },
}

impl SpectrumSpec {
    pub fn eigenvalues(&self, d: usize) -> Result<Vec<f64>> {
        let vals = match self {
            SpectrumSpec::Explicit { values } => {
                if values.len() != d {
                    return Err(Error::Config(format!("explicit spectrum has {} values for d = {d}", values.len())));
                }
                values.clone()
            }
            SpectrumSpec::LinearRamp { lo, hi } => {
                (0..d).map(|i| lo + (hi - lo) * i as f64 / (d - 1) as f64).collect()
            }
            SpectrumSpec::TwoCluster { low, high, high_count } => {
                if *high_count > d {
                    return Err(Error::Config(format!("high_count {high_count} exceeds d = {d}")));
                }
                (0..d).map(|i| if i < d - high_count { *low } else { *high }).collect()
            }
        };
        if let Some(v) = vals.iter().find(|v| !v.is_finite()) {
            return Err(Error::Config(format!("non-finite eigenvalue {v}")));
        }
        Ok(vals)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GradientSpec {
    /// Along eigenvector `index` (in spectrum order).
    EigenAligned { index: usize },
    /// `cos θ u_top + sin θ u_bottom` on `points` angles in `[0, π/2]`.
    AngleSweep { points: usize },
    /// Isotropic Gaussian direction.
    Random,
    /// Gaussian on the leading `count` coordinates, zero elsewhere.
    Support { count: usize },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sizes: Option<Vec<usize>>,
    /// Per-block queries; defaults to the scenario's `q` everywhere.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queries: Option<Vec<usize>>,
}

impl PartitionSpec {
    pub fn build(&self, d: usize, q: usize) -> Result<BlockPartition> {
        let sizes = match (&self.block_size, &self.sizes) {
            (Some(b), None) => {
                if *b == 0 || d % b != 0 {
                    return Err(Error::Config(format!("block size {b} does not divide d = {d}")));
                }
                vec![*b; d / b]
            }
            (None, Some(s)) => s.clone(),
            _ => return Err(Error::Config("partition needs exactly one of block_size or sizes".into())),
        };
        let queries = self.queries.clone().unwrap_or_else(|| vec![q; sizes.len()]);
        let p = BlockPartition::new(sizes, queries).map_err(|e| Error::Config(e.to_string()))?;
        if p.dim() != d {
            return Err(Error::Config(format!("partition covers {} of d = {d}", p.dim())));
        }
        Ok(p)
    }

    /// Same block sizes with every `q_b` replaced by `q`.
    pub fn build_with_q(&self, d: usize, q: usize) -> Result<BlockPartition> {
        let p = self.build(d, q)?;
        BlockPartition::uniform(p.sizes().to_vec(), q)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Every task lives in one shared subspace, so the incoming gradient sits
    /// in the high-curvature part of the history (`λ > λ̄`).
    AboveMean,
    /// Tasks occupy mutually orthogonal subspaces (`λ = 0 < λ̄`).
    BelowMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    RawFo,
    ScaledFo,
    IsoNoise,
    CovMatchedNoise,
    FiniteDiffZo,
    Rise,
}

impl MethodKind {
    pub fn name(&self) -> &'static str {
        match self {
            MethodKind::RawFo => "raw_fo",
            MethodKind::ScaledFo => "scaled_fo",
            MethodKind::IsoNoise => "iso_noise",
            MethodKind::CovMatchedNoise => "cov_matched_noise",
            MethodKind::FiniteDiffZo => "finite_diff_zo",
            MethodKind::Rise => "rise",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSpec {
    pub regime: Regime,
    pub tasks: usize,
    /// Rank of every task's curvature `A_t = B_t diag(curvatures) B_tᵀ`.
    pub curvatures: Vec<f64>,
    pub steps: usize,
    /// Independent task draws; methods are compared pairwise across them.
    pub seeds: usize,
    pub methods: Vec<MethodKind>,
    /// Function-value noise for `finite_diff_zo`.
    #[serde(default)]
    pub noise_sigma: f64,
    /// Scale of the task optima `x★_t`.
    #[serde(default = "one")]
    pub target_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSpec {
    pub dims: Vec<usize>,
    pub queries: Vec<usize>,
    pub target: f64,
    /// One-batch draws per grid scenario, for fitting and for the holdout.
    pub trials: u64,
    /// Draws used to estimate sign agreement on certified scenarios.
    #[serde(default = "default_certificate_trials")]
    pub certificate_trials: u64,
}

fn one() -> f64 {
    1.0
}

fn default_delta() -> f64 {
    0.05
}

fn default_certificate_trials() -> u64 {
    10_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    pub dim: usize,
    pub spectrum: SpectrumSpec,
    /// Seed of a Haar rotation of the eigenbasis; `None` keeps `H` diagonal.
    #[serde(default)]
    pub rotation_seed: Option<u64>,
    pub gradient: GradientSpec,
    #[serde(default = "one")]
    pub g_norm: f64,
    pub q: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub q_grid: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<PartitionSpec>,
    #[serde(default)]
    pub mu: f64,
    #[serde(default = "one")]
    pub eta: f64,
    pub trials: u64,
    /// Cap for auto-scaled trial counts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_trials: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub checkpoints: Vec<u64>,
    pub seed: u64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// Damping for the flat-signal score.
    #[serde(default)]
    pub rho: f64,
    /// Consolidation residual of the history; recorded, never used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consolidation_eps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stream: Option<StreamSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<CalibrationSpec>,
}

fn config<E: std::fmt::Display>(e: E) -> Error {
    Error::Config(e.to_string())
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        let sc: Scenario = serde_json::from_str(text).map_err(config)?;
        sc.validate()?;
        Ok(sc)
    }

    /// Reads a scenario file, or the scenario recorded in a report's metadata.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let inner = match value.get("metadata").and_then(|m| m.get("scenario")) {
            Some(s) => s.clone(),
            None => value,
        };
        let sc: Scenario = serde_json::from_value(inner).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.dim < 2 {
            return Err(Error::Config(format!("dim must be at least 2, got {}", self.dim)));
        }
        if self.q == 0 || self.q_grid.contains(&0) {
            return Err(Error::Config("query counts must be positive".into()));
        }
        if self.trials == 0 {
            return Err(Error::Config("trials must be positive".into()));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be positive, got {}", self.eta)));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::Config(format!("mu must be non-negative, got {}", self.mu)));
        }
        if !(self.g_norm > 0.0 && self.g_norm.is_finite()) {
            return Err(Error::Config(format!("g_norm must be positive, got {}", self.g_norm)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        if !(self.rho >= 0.0) {
            return Err(Error::Config(format!("rho must be non-negative, got {}", self.rho)));
        }
        self.spectrum.eigenvalues(self.dim)?;
        match &self.gradient {
            GradientSpec::EigenAligned { index } if *index >= self.dim => {
                return Err(Error::Config(format!("eigen index {index} out of range for d = {}", self.dim)))
            }
            GradientSpec::AngleSweep { points } if *points < 2 => {
                return Err(Error::Config("angle sweep needs at least 2 points".into()))
            }
            GradientSpec::Support { count } if *count == 0 || *count > self.dim => {
                return Err(Error::Config(format!("support count {count} out of range for d = {}", self.dim)))
            }
            _ => {}
        }
        if let Some(p) = &self.partition {
            p.build(self.dim, self.q)?;
        }
        if let Some(s) = &self.stream {
            if s.tasks == 0 {
                return Err(Error::EmptyStream);
            }
            if s.curvatures.is_empty() || s.curvatures.iter().any(|c| !(*c >= 0.0)) {
                return Err(Error::Config("stream curvatures must be non-empty and non-negative".into()));
            }
            if s.regime == Regime::BelowMean && s.tasks * s.curvatures.len() > self.dim {
                return Err(Error::Config(format!(
                    "{} orthogonal rank-{} tasks do not fit in d = {}",
                    s.tasks,
                    s.curvatures.len(),
                    self.dim
                )));
            }
            if s.methods.is_empty() || s.seeds == 0 {
                return Err(Error::Config("stream needs at least one method and one seed".into()));
            }
        }
        if let Some(c) = &self.calibration {
            if !(c.target > 0.5 && c.target < 1.0) {
                return Err(Error::Config(format!("target coverage must lie in (0.5, 1), got {}", c.target)));
            }
            if c.dims.is_empty() || c.queries.is_empty() || c.trials == 0 {
                return Err(Error::Config("calibration grid is empty".into()));
            }
            if c.dims.iter().any(|d| *d < 2) || c.queries.contains(&0) {
                return Err(Error::Config("calibration grid needs d >= 2 and q >= 1".into()));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn eigenvalues(&self) -> Result<Vec<f64>> {
        self.spectrum.eigenvalues(self.dim)
    }

    /// Eigenbasis columns: identity, or a Haar rotation from `rotation_seed`.
    pub fn basis(&self) -> Mat {
        match self.rotation_seed {
            Some(s) => random_orthogonal(self.dim, &mut NormalStream::new(s, domain::ROTATION, 0, 0)),
            None => Mat::identity(self.dim),
        }
    }

    pub fn curvature(&self) -> Result<SymMatrix> {
        let vals = self.eigenvalues()?;
        Ok(match self.rotation_seed {
            Some(_) => SymMatrix::diag(&vals).congruence_t(&self.basis()),
            None => SymMatrix::diag(&vals),
        })
    }

    /// Indices of the largest and smallest eigenvalues.
    pub fn extreme_indices(&self) -> Result<(usize, usize)> {
        let vals = self.eigenvalues()?;
        let top = (0..vals.len()).max_by(|a, b| vals[*a].total_cmp(&vals[*b])).unwrap();
        let bottom = (0..vals.len()).min_by(|a, b| vals[*a].total_cmp(&vals[*b])).unwrap();
        Ok((top, bottom))
    }

    /// The incoming gradient; angle sweeps need [`Scenario::sweep_gradient`].
    pub fn gradient(&self) -> Result<Vec<f64>> {
        let d = self.dim;
        let raw = match &self.gradient {
            GradientSpec::EigenAligned { index } => self.basis().column(*index),
            GradientSpec::Random => StreamSeed::new(self.seed, domain::GRADIENT).stream(0, 0).normal_vec(d),
            GradientSpec::Support { count } => {
                let mut v = StreamSeed::new(self.seed, domain::GRADIENT).stream(0, 0).normal_vec(*count);
                v.resize(d, 0.0);
                v
            }
            GradientSpec::AngleSweep { .. } => {
                return Err(Error::Config("angle sweep gradients are only defined inside gap-sweep".into()))
            }
        };
        let n = norm(&raw);
        Ok(raw.into_iter().map(|x| self.g_norm * x / n).collect())
    }

    pub fn sweep_angles(&self) -> Result<Vec<f64>> {
        match &self.gradient {
            GradientSpec::AngleSweep { points } => Ok((0..*points)
                .map(|k| std::f64::consts::FRAC_PI_2 * k as f64 / (*points - 1) as f64)
                .collect()),
            _ => Err(Error::Config("gap-sweep needs an angle_sweep gradient".into())),
        }
    }

    /// `‖g‖ (cos θ u_top + sin θ u_bottom)`
    pub fn sweep_gradient(&self, theta: f64) -> Result<Vec<f64>> {
        let (top, bottom) = self.extreme_indices()?;
        let o = self.basis();
        let (ut, ub) = (o.column(top), o.column(bottom));
        Ok(ut.iter().zip(&ub).map(|(a, b)| self.g_norm * (theta.cos() * a + theta.sin() * b)).collect())
    }

    pub fn block_partition(&self) -> Result<BlockPartition> {
        self.partition
            .as_ref()
            .ok_or_else(|| Error::Config("scenario has no partition".into()))?
            .build(self.dim, self.q)
    }
}
