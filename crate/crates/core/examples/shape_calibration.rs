//! Norm-matched shaping constants and one shaped gradient, exact and from
//! finite differences.

use gradshape::rng::{domain, StreamSeed};
use gradshape::shaping::{kappa, mean_shrink, tau, two_point_estimate, DirectionBatch};
use gradshape::symkernel::{norm, norm_sq};

fn main() -> gradshape::Result<()> {
    let (d, q) = (32, 4);
    println!("d={d} q={q}: kappa={:.4} tau={:.4} a={:.4}", kappa(d, q), tau(d, q), mean_shrink(d, q));

    let g: Vec<f64> = (0..d).map(|i| (i as f64 * 0.3).sin()).collect();
    let mut stream = StreamSeed::new(0, domain::SHAPE).stream(0, 0);
    let batch = DirectionBatch::sample(d, q, &mut stream);
    let pg = batch.norm_matched_apply(&g);
    println!("|g|^2 = {:.4}, |Pg|^2 = {:.4} (equal in expectation)", norm_sq(&g), norm_sq(&pg));

    // f(x) = gᵀx + ½‖x‖²: central differences are exact on quadratics
    let f = |x: &[f64]| x.iter().zip(&g).map(|(xi, gi)| gi * xi + 0.5 * xi * xi).sum::<f64>();
    let theta = vec![0.0; d];
    let est = two_point_estimate(&f, &theta, 1e-2, &batch, Some(&g), None)?;
    let residual = est.residual.expect("true gradient supplied");
    println!("two-point estimate vs Zg: |r_mu| = {:.2e}", norm(&residual));
    Ok(())
}
