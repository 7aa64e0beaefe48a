//! Mean forgetting gap between first-order and shaped steps: positive when the
//! gradient sits in above-average curvature, negative below.

use gradshape::retention::DamageContext;
use gradshape::symkernel::SymMatrix;

fn main() -> gradshape::Result<()> {
    let h = SymMatrix::diag(&[4.0, 1.0, 0.5, 0.5]);
    let q = 2;
    for (label, g) in [("sharp", vec![1.0, 0.0, 0.0, 0.0]), ("flat", vec![0.0, 0.0, 1.0, 0.0]), ("mixed", vec![0.5, 0.5, 0.5, 0.5])] {
        let ctx = DamageContext::new(h.clone(), g, 0.1)?;
        println!(
            "{label:>5}: lambda={:.3} mean={:.3}  Q_FO={:.5}  E Q_ZO={:.5}  gap={:+.5}",
            ctx.lambda(),
            ctx.lambda_bar(),
            ctx.fo_damage(),
            ctx.zo_mean_damage(q),
            ctx.mean_gap(q)
        );
    }
    Ok(())
}
