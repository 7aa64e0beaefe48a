//! Quadratic task stream comparing the adaptation rules.

use gradshape::sandbox::{run_continual_stream, Scenario};

fn main() -> gradshape::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios/stream_above_mean.json").into());
    let sc = Scenario::load(std::path::Path::new(&path))?;
    let r = run_continual_stream(&sc)?;
    println!("{:?}, mean lambda - mean = {:.3}", r.regime, r.mean_delta_lambda);
    for m in &r.methods {
        println!("{:<18} Avg {:.4}  Last {:.4}  Fgt {:.4} ± {:.4}", m.method.name(), m.avg.mean, m.last.mean, m.fgt.mean, m.fgt.se);
    }
    for c in r.comparisons.iter().filter(|c| c.metric == "fgt") {
        println!("Fgt rise - {}: {:+.4} {:?}", c.b.name(), c.diff.mean, c.verdict);
    }
    Ok(())
}
