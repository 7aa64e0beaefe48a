//! Quadratic continual-task streams.
//!
//! Task `t` has loss `f_t(x) = ½(x − x★_t)ᵀA_t(x − x★_t)`; training visits the
//! tasks in order from `x = 0`, taking `steps` updates `x ← x − η u` per task
//! where `u` is the method's transform of `∇f_t(x)`. The historical loss is
//! the unweighted sum of past task losses, so its Hessian is `Σ_{s<t} A_s`.

use serde::{Deserialize, Serialize};

use super::report::{fmt, CsvTable};
use super::scenario::{MethodKind, Regime, Scenario, StreamSpec};
use crate::deviation;
use crate::error::{Error, Result};
use crate::mc;
use crate::retention::DamageContext;
use crate::rise::{AdaptationKind, BlockPartition, GradientTransformer};
use crate::rng::{domain, StreamSeed};
use crate::shaping::{self, two_point_estimate, DirectionBatch, ObservationNoise};
use crate::stats::{summarize, Summary};
use crate::symkernel::{norm_sq, random_orthogonal, SymMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct StreamTask {
    pub index: usize,
    pub a: SymMatrix,
    pub target: Vec<f64>,
    pub steps: usize,
}

impl StreamTask {
    pub fn loss(&self, x: &[f64]) -> f64 {
        let r: Vec<f64> = x.iter().zip(&self.target).map(|(a, b)| a - b).collect();
        0.5 * self.a.quad_form(&r)
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let r: Vec<f64> = x.iter().zip(&self.target).map(|(a, b)| a - b).collect();
        self.a.matvec(&r)
    }
}

/// Draws the task list for one stream seed.
pub fn build_tasks(d: usize, spec: &StreamSpec, seeds: StreamSeed) -> Result<Vec<StreamTask>> {
    if spec.tasks == 0 {
        return Err(Error::EmptyStream);
    }
    let r = spec.curvatures.len();
    let o = random_orthogonal(d, &mut seeds.stream(0, 0));
    let mut tasks = Vec::with_capacity(spec.tasks);
    for t in 0..spec.tasks {
        let offset = match spec.regime {
            Regime::AboveMean => 0,
            Regime::BelowMean => t * r,
        };
        if offset + r > d {
            return Err(Error::Config(format!("task {t} needs columns {offset}..{} of d = {d}", offset + r)));
        }
        let cols: Vec<Vec<f64>> = (offset..offset + r).map(|k| o.column(k)).collect();
        let a = SymMatrix::from_upper_fn(d, |i, j| (0..r).map(|k| spec.curvatures[k] * cols[k][i] * cols[k][j]).sum());
        let coef = seeds.stream(t as u64 + 1, 0).normal_vec(r);
        let target = (0..d)
            .map(|i| spec.target_scale * (0..r).map(|k| coef[k] * cols[k][i]).sum::<f64>())
            .collect();
        tasks.push(StreamTask { index: t, a, target, steps: spec.steps });
    }
    Ok(tasks)
}

/// Metrics of one method on one stream draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRun {
    pub method: MethodKind,
    /// `final_losses[s] = f_s(x_final)`
    pub final_losses: Vec<f64>,
    /// `learned_losses[s] = f_s(x right after task s)`
    pub learned_losses: Vec<f64>,
    pub avg: f64,
    pub last: f64,
    pub fgt: f64,
    /// Mean over earlier tasks of `½ (x_final − x_s)ᵀ A_s (x_final − x_s)`.
    pub quad_damage: f64,
    /// Largest per-step relative residual of the realized-gap accounting
    /// (`finite_diff_zo` only).
    pub accounting_residual: Option<f64>,
}

fn method_slot(m: MethodKind) -> u64 {
    match m {
        MethodKind::RawFo => 0,
        MethodKind::ScaledFo => 1,
        MethodKind::IsoNoise => 2,
        MethodKind::CovMatchedNoise => 3,
        MethodKind::FiniteDiffZo => 4,
        MethodKind::Rise => 5,
    }
}

fn as_adaptation(m: MethodKind) -> Option<AdaptationKind> {
    match m {
        MethodKind::RawFo => Some(AdaptationKind::RawFo),
        MethodKind::ScaledFo => Some(AdaptationKind::ScaledFo),
        MethodKind::IsoNoise => Some(AdaptationKind::IsoNoise),
        MethodKind::CovMatchedNoise => Some(AdaptationKind::CovMatchedNoise),
        MethodKind::Rise => Some(AdaptationKind::Rise),
        MethodKind::FiniteDiffZo => None,
    }
}

/// Settings shared by every method in a stream run.
#[derive(Debug, Clone)]
pub struct StreamSettings {
    pub eta: f64,
    /// Global query count for `finite_diff_zo`.
    pub q: usize,
    pub mu: f64,
    pub noise_sigma: f64,
    pub partition: BlockPartition,
}

/// Trains one method through `tasks`. Step `k` of the whole run draws from
/// trial `k` of `seeds`; function-value noise uses `noise_seeds`.
pub fn run_method(
    tasks: &[StreamTask],
    method: MethodKind,
    settings: &StreamSettings,
    seeds: StreamSeed,
    noise_seeds: StreamSeed,
) -> Result<MethodRun> {
    if tasks.is_empty() {
        return Err(Error::EmptyStream);
    }
    let d = tasks[0].target.len();
    let eta = settings.eta;
    if method == MethodKind::FiniteDiffZo && !(settings.mu > 0.0) {
        return Err(Error::Config("finite_diff_zo needs mu > 0".into()));
    }
    let mut x = vec![0.0; d];
    let mut snapshots: Vec<Vec<f64>> = Vec::with_capacity(tasks.len());
    let mut learned = Vec::with_capacity(tasks.len());
    let mut history = SymMatrix::zeros(d);
    let mut worst_accounting: Option<f64> = None;
    let mut k = 0u64;
    for task in tasks {
        for _ in 0..task.steps {
            let g = task.gradient(&x);
            if norm_sq(&g) == 0.0 {
                k += 1;
                continue;
            }
            let u = match as_adaptation(method) {
                Some(kind) => kind.transform(&g, &settings.partition, seeds, k)?,
                None => {
                    let batch = DirectionBatch::sample(d, settings.q, &mut seeds.stream(k, 0));
                    let mut ns = noise_seeds.stream(k, 0);
                    let noise = (settings.noise_sigma > 0.0).then(|| ObservationNoise { sigma: settings.noise_sigma, stream: &mut ns });
                    let f = |z: &[f64]| task.loss(z);
                    let est = two_point_estimate(&f, &x, settings.mu, &batch, None, noise)?;
                    let s = shaping::mean_shrink(d, settings.q);
                    let x_hat: Vec<f64> = est.estimate.iter().map(|v| s * v).collect();
                    if task.index > 0 {
                        let ctx = DamageContext::new(history.clone(), g.clone(), eta)?;
                        let acc = deviation::account(&ctx, settings.q, &batch, Some(&x_hat))?;
                        let rel = if acc.scale() > 0.0 { acc.residual().abs() / acc.scale() } else { 0.0 };
                        worst_accounting = Some(worst_accounting.unwrap_or(0.0).max(rel));
                    }
                    x_hat
                }
            };
            for (xi, ui) in x.iter_mut().zip(&u) {
                *xi -= eta * ui;
            }
            k += 1;
        }
        learned.push(task.loss(&x));
        snapshots.push(x.clone());
        history = history.add(&task.a);
    }
    let t_count = tasks.len();
    let final_losses: Vec<f64> = tasks.iter().map(|t| t.loss(&x)).collect();
    let avg = final_losses.iter().sum::<f64>() / t_count as f64;
    let last = final_losses[t_count - 1];
    let (fgt, quad_damage) = if t_count == 1 {
        (0.0, 0.0)
    } else {
        let n = (t_count - 1) as f64;
        let fgt = (0..t_count - 1).map(|s| final_losses[s] - learned[s]).sum::<f64>() / n;
        let quad = (0..t_count - 1)
            .map(|s| {
                let dx: Vec<f64> = x.iter().zip(&snapshots[s]).map(|(a, b)| a - b).collect();
                0.5 * tasks[s].a.quad_form(&dx)
            })
            .sum::<f64>()
            / n;
        (fgt, quad)
    };
    Ok(MethodRun {
        method,
        final_losses,
        learned_losses: learned,
        avg,
        last,
        fgt,
        quad_damage,
        accounting_residual: worst_accounting,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: MethodKind,
    pub avg: Summary,
    pub last: Summary,
    pub fgt: Summary,
    pub quad_damage: Summary,
    /// Per task: mean over seeds of the final loss and of the forgetting.
    pub task_final_loss: Vec<f64>,
    pub task_forgetting: Vec<f64>,
    pub accounting_residual: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Lower,
    Higher,
    Inconclusive,
}

/// Paired comparison `metric(a) − metric(b)` across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: MethodKind,
    pub b: MethodKind,
    pub metric: String,
    pub diff: Summary,
    pub ci95: (f64, f64),
    /// Whether `a` is lower or higher than `b` at two-sided 95%.
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamReport {
    pub regime: Regime,
    pub tasks: usize,
    pub seeds: usize,
    pub methods: Vec<MethodSummary>,
    pub comparisons: Vec<Comparison>,
    /// Mean over seeds and tasks `t ≥ 1` of `λ − λ̄` for the FO gradient at the
    /// start of each task, against the history Hessian.
    pub mean_delta_lambda: f64,
}

impl StreamReport {
    pub fn method(&self, m: MethodKind) -> Option<&MethodSummary> {
        self.methods.iter().find(|s| s.method == m)
    }

    pub fn comparison(&self, a: MethodKind, b: MethodKind, metric: &str) -> Option<&Comparison> {
        self.comparisons.iter().find(|c| c.a == a && c.b == b && c.metric == metric)
    }
}

impl CsvTable for StreamReport {
    fn header(&self) -> Vec<&'static str> {
        vec!["method", "task", "final_loss", "forgetting", "avg", "last", "fgt", "fgt_se"]
    }

    fn rows(&self) -> Vec<Vec<String>> {
        let mut rows = Vec::new();
        for m in &self.methods {
            for t in 0..m.task_final_loss.len() {
                rows.push(vec![
                    m.method.name().to_string(),
                    t.to_string(),
                    fmt(m.task_final_loss[t]),
                    fmt(m.task_forgetting[t]),
                    fmt(m.avg.mean),
                    fmt(m.last.mean),
                    fmt(m.fgt.mean),
                    fmt(m.fgt.se),
                ]);
            }
        }
        rows
    }
}

const Z95: f64 = 1.959963984540054;

fn compare(a: MethodKind, b: MethodKind, metric: &str, xa: &[f64], xb: &[f64]) -> Comparison {
    let diffs: Vec<f64> = xa.iter().zip(xb).map(|(x, y)| x - y).collect();
    let diff = summarize(&diffs);
    let ci95 = (diff.mean - Z95 * diff.se, diff.mean + Z95 * diff.se);
    let verdict = if ci95.1 < 0.0 {
        Verdict::Lower
    } else if ci95.0 > 0.0 {
        Verdict::Higher
    } else {
        Verdict::Inconclusive
    };
    Comparison { a, b, metric: metric.to_string(), diff, ci95, verdict }
}

fn stream_settings(sc: &Scenario, spec: &StreamSpec) -> Result<StreamSettings> {
    let partition = match &sc.partition {
        Some(p) => p.build(sc.dim, sc.q)?,
        None => BlockPartition::uniform(vec![sc.dim], sc.q)?,
    };
    if spec.methods.contains(&MethodKind::FiniteDiffZo) && !(sc.mu > 0.0) {
        return Err(Error::Config("finite_diff_zo needs mu > 0".into()));
    }
    Ok(StreamSettings { eta: sc.eta, q: sc.q, mu: sc.mu, noise_sigma: spec.noise_sigma, partition })
}

/// `λ − λ̄` against the history Hessian for the FO gradient at the start of
/// each task `t ≥ 1`, along the raw-FO trajectory.
fn regime_check(tasks: &[StreamTask], eta: f64) -> Vec<f64> {
    let d = tasks[0].target.len();
    let mut x = vec![0.0; d];
    let mut history = SymMatrix::zeros(d);
    let mut out = Vec::new();
    for (t, task) in tasks.iter().enumerate() {
        if t > 0 {
            let g = task.gradient(&x);
            let gg = norm_sq(&g);
            if gg > 0.0 {
                out.push(history.quad_form(&g) / gg - history.mean_eigenvalue());
            }
        }
        for _ in 0..task.steps {
            let g = task.gradient(&x);
            for (xi, gi) in x.iter_mut().zip(&g) {
                *xi -= eta * gi;
            }
        }
        history = history.add(&task.a);
    }
    out
}

/// Runs every method in `sc.stream` on `seeds` independent task draws and
/// compares `rise` against the others, paired by seed.
pub fn run_continual_stream(sc: &Scenario) -> Result<StreamReport> {
    let spec = sc.stream.as_ref().ok_or_else(|| Error::Config("scenario has no stream section".into()))?;
    if spec.tasks == 0 {
        return Err(Error::EmptyStream);
    }
    let settings = stream_settings(sc, spec)?;
    let per_seed: Vec<Result<(Vec<MethodRun>, Vec<f64>)>> = mc::map_trials(spec.seeds as u64, |s| {
        let tasks = build_tasks(sc.dim, spec, StreamSeed::new(sc.seed, domain::STREAM_TASKS).child(s))?;
        let base = StreamSeed::new(sc.seed, domain::STREAM_METHOD).child(s);
        let noise = StreamSeed::new(sc.seed, domain::NOISE).child(s);
        let runs = spec
            .methods
            .iter()
            .map(|m| run_method(&tasks, *m, &settings, base.child(method_slot(*m)), noise))
            .collect::<Result<Vec<_>>>()?;
        Ok((runs, regime_check(&tasks, sc.eta)))
    });
    let per_seed = per_seed.into_iter().collect::<Result<Vec<_>>>()?;
    let deltas: Vec<f64> = per_seed.iter().flat_map(|(_, d)| d.iter().copied()).collect();
    let mean_delta_lambda = if deltas.is_empty() { 0.0 } else { summarize(&deltas).mean };

    let column = |mi: usize, f: &dyn Fn(&MethodRun) -> f64| -> Vec<f64> { per_seed.iter().map(|(r, _)| f(&r[mi])).collect() };
    let mut methods = Vec::new();
    for (mi, m) in spec.methods.iter().enumerate() {
        let task_final_loss = (0..spec.tasks)
            .map(|t| summarize(&column(mi, &|r| r.final_losses[t])).mean)
            .collect();
        let task_forgetting = (0..spec.tasks)
            .map(|t| summarize(&column(mi, &|r| r.final_losses[t] - r.learned_losses[t])).mean)
            .collect();
        let acc: Vec<f64> = per_seed.iter().filter_map(|(r, _)| r[mi].accounting_residual).collect();
        methods.push(MethodSummary {
            method: *m,
            avg: summarize(&column(mi, &|r| r.avg)),
            last: summarize(&column(mi, &|r| r.last)),
            fgt: summarize(&column(mi, &|r| r.fgt)),
            quad_damage: summarize(&column(mi, &|r| r.quad_damage)),
            task_final_loss,
            task_forgetting,
            accounting_residual: (!acc.is_empty()).then(|| acc.iter().copied().fold(0.0, f64::max)),
        });
    }
    let mut comparisons = Vec::new();
    if let Some(ri) = spec.methods.iter().position(|m| *m == MethodKind::Rise) {
        for (mi, m) in spec.methods.iter().enumerate() {
            if mi == ri {
                continue;
            }
            for (metric, f) in [("fgt", (|r: &MethodRun| r.fgt) as fn(&MethodRun) -> f64), ("last", |r: &MethodRun| r.last)] {
                comparisons.push(compare(MethodKind::Rise, *m, metric, &column(ri, &f), &column(mi, &f)));
            }
        }
    }
    Ok(StreamReport { regime: spec.regime, tasks: spec.tasks, seeds: spec.seeds, methods, comparisons, mean_delta_lambda })
}
