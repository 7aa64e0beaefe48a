//! Command-line front end.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::deviation::DEFAULT_C;
use crate::error::Error;
use crate::exposure;
use crate::retention::{self, DamageContext};
use crate::rise::{self, AdaptationKind, BlockPartition, GradientTransformer};
use crate::rng::{domain, StreamSeed};
use crate::sandbox::{self, CsvTable, Report, Scenario};
use crate::shaping::{self, TauFn};
use crate::symkernel::{eig_sym, norm_sq, random_orthogonal, SymMatrix};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "gradshape", version, about = "Randomized gradient shaping: identities and quadratic sandbox")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Closed-form identity cross-checks.
    Selftest {
        #[arg(long)]
        json: bool,
        /// Replace τ by a wrong formula (mutation check of the suite itself).
        #[arg(long, hide = true)]
        corrupt_tau: bool,
    },
    /// Fit the deviation constant on a calibration grid.
    Calibrate(CommonArgs),
    /// Run one sandbox experiment.
    Run {
        experiment: Experiment,
        #[command(flatten)]
        common: CommonArgs,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Experiment {
    Operator,
    GapSweep,
    Variance,
    Stream,
    Exposure,
    Blocks,
}

impl Experiment {
    fn stem(&self) -> &'static str {
        match self {
            Experiment::Operator => "operator",
            Experiment::GapSweep => "gap-sweep",
            Experiment::Variance => "variance",
            Experiment::Stream => "stream",
            Experiment::Exposure => "exposure",
            Experiment::Blocks => "blocks",
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Scenario JSON, or a report whose metadata should be re-run.
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long, default_value = "reports")]
    pub out: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (0: one per core). Never changes results.
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
    /// Print the full report as JSON instead of a summary line.
    #[arg(long)]
    pub json: bool,
    /// Also write a CSV table.
    #[arg(long)]
    pub csv: bool,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::EmptyStream => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match cli.command {
        Command::Selftest { json, corrupt_tau } => cmd_selftest(json, corrupt_tau),
        Command::Calibrate(common) => dispatch(None, &common),
        Command::Run { experiment, common } => dispatch(Some(experiment), &common),
    }
}

fn dispatch(experiment: Option<Experiment>, common: &CommonArgs) -> i32 {
    let result = load(common).and_then(|sc| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(common.workers)
            .build()
            .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
        pool.install(|| match experiment {
            None => {
                let r = sandbox::calibrate_constant(&sc)?;
                emit("calibrate", &sc, r.c, r, common, summary_calibration)
            }
            Some(x) => run_experiment(x, &sc, common),
        })
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn load(common: &CommonArgs) -> crate::Result<Scenario> {
    if !common.scenario.exists() {
        return Err(Error::Config(format!("scenario file not found: {}", common.scenario.display())));
    }
    let mut sc = Scenario::load(&common.scenario)?;
    if let Some(s) = common.seed {
        sc.seed = s;
    }
    Ok(sc)
}

fn run_experiment(x: Experiment, sc: &Scenario, common: &CommonArgs) -> crate::Result<()> {
    let stem = x.stem();
    match x {
        Experiment::Operator => emit(stem, sc, DEFAULT_C, sandbox::run_operator_validation(sc)?, common, summary_operator),
        Experiment::GapSweep => emit(stem, sc, DEFAULT_C, sandbox::run_gap_sweep(sc, DEFAULT_C)?, common, summary_sweep),
        Experiment::Variance => emit(stem, sc, DEFAULT_C, sandbox::run_variance_comparison(sc)?, common, summary_variance),
        Experiment::Stream => emit(stem, sc, DEFAULT_C, sandbox::run_continual_stream(sc)?, common, summary_stream),
        Experiment::Exposure => emit(stem, sc, DEFAULT_C, sandbox::run_exposure(sc)?, common, summary_exposure),
        Experiment::Blocks => emit(stem, sc, DEFAULT_C, sandbox::run_blocks(sc, DEFAULT_C)?, common, summary_blocks),
    }
}

fn emit<T: Serialize + CsvTable>(
    stem: &str,
    sc: &Scenario,
    c: f64,
    result: T,
    common: &CommonArgs,
    summary: fn(&T) -> String,
) -> crate::Result<()> {
    let report = Report::new(stem, sc, c, result);
    let written = sandbox::write_outputs(&report, &common.out, stem, common.csv)?;
    if common.json {
        println!("{}", report.to_json());
    } else {
        println!("{}", summary(&report.result));
        for p in written {
            println!("wrote {}", p.display());
        }
    }
    Ok(())
}

fn summary_operator(r: &sandbox::OperatorReport) -> String {
    let arms: Vec<String> = r.arms.iter().map(|a| format!("{}={:.3e}", a.label, a.eigenvalue_error)).collect();
    format!("operator d={} q={} n={}: relative eigenvalue error {}", r.d, r.q, r.n, arms.join(" "))
}

fn summary_sweep(r: &sandbox::GapReport) -> String {
    let zero = r
        .zero_point
        .map(|i| format!(", zero-gap point z={:.2}", r.points[i].z))
        .unwrap_or_default();
    format!("gap-sweep d={} q={} points={}: R²={:.6}{zero}", r.d, r.q, r.points.len(), r.r_squared)
}

fn summary_variance(r: &sandbox::VarianceReport) -> String {
    let rows: Vec<String> = r.rows.iter().map(|x| format!("q={} ratio={:.3}", x.q, x.ratio)).collect();
    format!("variance d={}: blockwise/global std {}", r.d, rows.join(", "))
}

fn summary_stream(r: &sandbox::StreamReport) -> String {
    let mut s = format!("stream {:?} tasks={} seeds={}\n", r.regime, r.tasks, r.seeds);
    s.push_str(&format!("{:<18} {:>12} {:>12} {:>12} {:>12}\n", "method", "Avg", "Last", "Fgt", "Fgt SE"));
    for m in &r.methods {
        s.push_str(&format!(
            "{:<18} {:>12.5e} {:>12.5e} {:>12.5e} {:>12.3e}\n",
            m.method.name(),
            m.avg.mean,
            m.last.mean,
            m.fgt.mean,
            m.fgt.se
        ));
    }
    s.trim_end().to_string()
}

fn summary_exposure(r: &sandbox::ExposureReport) -> String {
    format!(
        "exposure d={} q={}: gap-closing factor {:.12} (1-τ = {:.12}), uniqueness violations {}",
        r.d, r.q, r.gap_closing_factor, r.one_minus_tau, r.uniqueness.violations
    )
}

fn summary_blocks(r: &sandbox::BlocksReport) -> String {
    format!(
        "blocks d={} blocks={}: gap {:.6e} empirical {:.6e} ± {:.2e} (z={:.2}), ε_blk={:.4}",
        r.d,
        r.sizes.len(),
        r.gap.total,
        r.empirical_gap.mean,
        r.empirical_gap.se,
        r.z,
        r.coupling.epsilon
    )
}

fn summary_calibration(r: &sandbox::CalibrationReport) -> String {
    format!(
        "calibrate: C={:.6} (target {:.2} at δ={}), min coverage fit={:.4} holdout={:.4}, certified {}",
        r.c, r.target, r.delta, r.min_fit_coverage, r.min_holdout_coverage, r.certified
    )
}

/// One line of the self-test table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentityCheck {
    pub name: &'static str,
    pub residual: f64,
    pub tolerance: f64,
    pub pass: bool,
}

fn wrong_tau(d: usize, q: usize) -> f64 {
    d as f64 / (q + d) as f64
}

fn test_curvatures() -> Vec<SymMatrix> {
    [(2usize, 1u64), (5, 2), (16, 3)]
        .iter()
        .map(|&(d, s)| {
            let mut st = StreamSeed::new(s, domain::TEST).stream(0, 0);
            let o = random_orthogonal(d, &mut st);
            let vals: Vec<f64> = (0..d).map(|_| 3.0 * st.uniform()).collect();
            SymMatrix::diag(&vals).congruence_t(&o)
        })
        .collect()
}

fn test_gradient(d: usize) -> Vec<f64> {
    StreamSeed::new(d as u64, domain::TEST).stream(1, 0).normal_vec(d)
}

const QUERIES: [usize; 3] = [1, 3, 10];

/// Each identity is checked by an independent route; the residual is the
/// largest relative disagreement over a few fixed instances.
pub fn selftest_checks(tau_fn: TauFn) -> crate::Result<Vec<IdentityCheck>> {
    let hs = test_curvatures();
    let mut out = Vec::new();
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-300);

    // norm matching: κ(1−τ) = (q+1)/q, a² = 1/κ, E‖Zg‖² = κ‖g‖² from Wishart moments
    let mut r: f64 = 0.0;
    for d in [2usize, 7, 64] {
        for q in QUERIES {
            let (k, t, a) = (shaping::kappa(d, q), shaping::tau(d, q), shaping::mean_shrink(d, q));
            let (df, qf) = (d as f64, q as f64);
            r = r.max(rel(k * (1.0 - t), (qf + 1.0) / qf));
            r = r.max(rel(a * a, 1.0 / k));
            // E[Z²] = ((q + d + 1)/q) I for Z = q⁻¹ Σ z zᵀ
            r = r.max(rel(k, 1.0 + (df + 1.0) / qf));
        }
    }
    out.push(check("norm-matching", r, 1e-14));

    // expected curvature: κ⁻¹ E[ZHZ] with E[ZHZ] = ((q+1)/q) H + (tr H/q) I
    let mut r: f64 = 0.0;
    for h in &hs {
        for q in QUERIES {
            let qf = q as f64;
            let wishart = h
                .affine_identity((qf + 1.0) / qf, h.trace() / qf)
                .scale(1.0 / shaping::kappa(h.dim(), q));
            let closed = retention::expected_shaped_curvature_with(h, q, tau_fn);
            r = r.max(closed.sub(&wishart).frobenius_norm() / wishart.frobenius_norm());
        }
    }
    out.push(check("expected-curvature", r, 1e-12));

    // eigenvalue contraction: spectrum of the closed form vs mapped eigenvalues
    let mut r: f64 = 0.0;
    for h in &hs {
        for q in QUERIES {
            let closed = retention::expected_shaped_curvature_with(h, q, tau_fn);
            let got = eig_sym(&closed)?.eigenvalues;
            let want = retention::equalized_spectrum(h, q)?;
            let num: f64 = got.iter().zip(&want).map(|(a, b)| (a - b).powi(2)).sum();
            r = r.max((num / norm_sq(&want).max(1e-300)).sqrt());
        }
    }
    out.push(check("eigenvalue-contraction", r, 1e-10));

    // mean gap: ½η² gᵀ(H − E[PᵀHP])g vs (η²/2)τ‖g‖²(λ − λ̄)
    let mut r: f64 = 0.0;
    for h in &hs {
        let g = test_gradient(h.dim());
        let eta = 0.3;
        let ctx = DamageContext::new(h.clone(), g.clone(), eta)?;
        for q in QUERIES {
            let e = retention::expected_shaped_curvature_with(h, q, tau_fn);
            let direct = 0.5 * eta * eta * (h.quad_form(&g) - e.quad_form(&g));
            r = r.max((direct - ctx.mean_gap(q)).abs() / ctx.fo_damage());
        }
    }
    out.push(check("mean-gap", r, 1e-12));

    // gap closing: measured factor vs 1 − τ, and M_ZO = a²ggᵀ + Cov(Pg)
    let mut r: f64 = 0.0;
    for h in &hs {
        let g = test_gradient(h.dim());
        for q in QUERIES {
            let t = tau_fn(h.dim(), q);
            let f = exposure::gap_closing_factor(&g, q, h.mean_eigenvalue().max(0.1), 1.0)?;
            r = r.max(rel(f, 1.0 - t));
            let a = shaping::mean_shrink(h.dim(), q);
            let m = SymMatrix::outer(&g, a * a).add(&exposure::centered_covariance(&g, q)?);
            let zo = exposure::zo_exposure(&g, q)?.m;
            r = r.max(m.sub(&zo).frobenius_norm() / zo.frobenius_norm());
        }
    }
    out.push(check("exposure-gap-closing", r, 1e-12));

    // covariance control: blockwise second moment a_b²g_bg_bᵀ + Σ_b equals the
    // per-block ZO exposure, so the control and the wrapper share two moments
    let mut r: f64 = 0.0;
    let g = test_gradient(12);
    let p = BlockPartition::new(vec![3, 4, 5], vec![1, 3, 10])?;
    let sig = rise::rise_step_covariances(&g, &p, 1.0)?;
    for b in 0..p.len() {
        let gb = &g[p.range(b)];
        let m = SymMatrix::outer(gb, p.a(b) * p.a(b)).add(&sig[b]);
        let zo = exposure::zo_exposure(gb, p.queries()[b])?.m;
        r = r.max(m.sub(&zo).frobenius_norm() / zo.frobenius_norm());
    }
    // the scaled control is the wrapper's mean, block by block
    let scaled = AdaptationKind::ScaledFo.transform(&g, &p, StreamSeed::new(0, domain::TEST), 0)?;
    for b in 0..p.len() {
        for i in p.range(b) {
            r = r.max(rel(scaled[i], p.a(b) * g[i]));
        }
    }
    out.push(check("covariance-control", r, 1e-12));
    Ok(out)
}

fn check(name: &'static str, residual: f64, tolerance: f64) -> IdentityCheck {
    IdentityCheck { name, residual, tolerance, pass: residual <= tolerance }
}

fn cmd_selftest(json: bool, corrupt_tau: bool) -> i32 {
    let tau_fn: TauFn = if corrupt_tau { wrong_tau } else { shaping::tau };
    let checks = match selftest_checks(tau_fn) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_RUNTIME;
        }
    };
    if json {
        println!("{}", serde_json::to_string_pretty(&checks).expect("checks serialize"));
    } else {
        println!("{:<24} {:>12} {:>10}  status", "identity", "residual", "tol");
        for c in &checks {
            println!("{:<24} {:>12.3e} {:>10.0e}  {}", c.name, c.residual, c.tolerance, if c.pass { "ok" } else { "FAIL" });
        }
    }
    match checks.iter().find(|c| !c.pass) {
        Some(c) => {
            eprintln!("selftest failed: {}", c.name);
            EXIT_RUNTIME
        }
        None => EXIT_OK,
    }
}
