//! One-batch deviation bound, coverage of sampled deviations, and the sign
//! certificate at the shipped constant.

use gradshape::deviation::{coverage, deviation_bound, normalized_deviations, psi_q, sign_certificate, DeviationBudget, DEFAULT_C};
use gradshape::retention::DamageContext;
use gradshape::rng::{domain, StreamSeed};
use gradshape::symkernel::SymMatrix;

fn main() -> gradshape::Result<()> {
    let d = 16;
    let vals: Vec<f64> = (0..d).map(|i| if i == 0 { 10.0 } else { 0.1 }).collect();
    let mut g = vec![0.0; d];
    g[0] = 1.0;
    let ctx = DamageContext::new(SymMatrix::diag(&vals), g, 1.0)?;
    let budget = DeviationBudget::new(0.05, DEFAULT_C)?;
    for q in [1, 16, 256] {
        let cert = sign_certificate(&ctx, q, &budget)?;
        let dev = normalized_deviations(&ctx, q, 0.05, 5000, StreamSeed::new(q as u64, domain::CALIBRATION))?;
        println!(
            "q={q:>3}: psi={:.3} G={:.4} B={:.4} certified={} coverage at C={:.3}: {:.3}",
            psi_q(d, q, 0.05)?,
            cert.mean_gap,
            deviation_bound(&ctx, q, &budget)?,
            cert.certified,
            DEFAULT_C,
            coverage(&dev, DEFAULT_C)
        );
    }
    Ok(())
}
