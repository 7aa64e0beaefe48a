//! Runs the gap sweep from a scenario file and writes JSON and CSV reports.

use gradshape::deviation::DEFAULT_C;
use gradshape::sandbox::{run_gap_sweep, write_outputs, Report, Scenario};

fn main() -> gradshape::Result<()> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios/gap_sweep.json");
    let mut sc = Scenario::load(std::path::Path::new(path))?;
    sc.trials = 20_000;
    sc.max_trials = Some(100_000);
    let result = run_gap_sweep(&sc, DEFAULT_C)?;
    for p in &result.points {
        println!("angle {:.3}  predicted {:+.4}  empirical {:+.4} ± {:.4}", p.angle, p.predicted, p.empirical.mean, p.empirical.se);
    }
    println!("R² = {:.5}", result.r_squared);
    let out = std::env::temp_dir().join("gradshape-example");
    for f in write_outputs(&Report::new("gap-sweep", &sc, DEFAULT_C, result), &out, "gap-sweep", true)? {
        println!("wrote {}", f.display());
    }
    Ok(())
}
