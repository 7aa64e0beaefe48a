//! Monte Carlo consistency of the closed-form curvature identities over many
//! random curvatures, and equivariance under rotation.

use gradshape::retention::{estimate_shaped_curvature, expected_shaped_curvature};
use gradshape::rng::{domain, StreamSeed};
use gradshape::symkernel::{random_orthogonal, SymMatrix};

fn random_psd(d: usize, seed: u64) -> SymMatrix {
    let mut st = StreamSeed::new(seed, domain::TEST).stream(0, 0);
    let o = random_orthogonal(d, &mut st);
    let vals: Vec<f64> = (0..d).map(|_| 0.1 + 1.9 * st.uniform()).collect();
    SymMatrix::diag(&vals).congruence_t(&o)
}

#[test]
fn two_hundred_random_curvatures() {
    let mut k = 0u64;
    let mut log_ratios = Vec::new();
    let mut worst: f64 = 0.0;
    for d in [2usize, 4, 8, 16, 32] {
        for q in [1usize, 2, 4, 8] {
            // per-trial spread is largest at small q
            let n: u64 = if q <= 2 { 100_000 } else if d == 32 { 50_000 } else { 20_000 };
            let checkpoints = [n / 16, n];
            for _ in 0..10 {
                let h = random_psd(d, 1000 + k);
                let est = estimate_shaped_curvature(&h, q, n, &checkpoints, StreamSeed::new(k, domain::SHAPE)).unwrap();
                let early = est.curve[0].frobenius;
                let late = est.curve[1].frobenius;
                log_ratios.push((early / late).ln());
                worst = worst.max(est.final_relative_residual());
                k += 1;
            }
        }
    }
    assert_eq!(k, 200);
    assert!(worst <= 3e-2, "worst final relative residual {worst}");
    // 16× more trials: residual should shrink by about 4 on average
    let mean_ratio = (log_ratios.iter().sum::<f64>() / log_ratios.len() as f64).exp();
    assert!((3.0..5.5).contains(&mean_ratio), "mean residual shrink {mean_ratio}");
}

#[test]
fn rotation_equivariance() {
    let d = 24;
    let q = 4;
    let h = random_psd(d, 7);
    let o = random_orthogonal(d, &mut StreamSeed::new(8, domain::ROTATION).stream(0, 0));
    let rotated = h.congruence(&o);
    let lhs = expected_shaped_curvature(&rotated, q);
    let rhs = expected_shaped_curvature(&h, q).congruence(&o);
    assert!(lhs.sub(&rhs).frobenius_norm() <= 1e-12 * rhs.frobenius_norm());

    let n = 20_000;
    let a = estimate_shaped_curvature(&h, q, n, &[n], StreamSeed::new(1, domain::SHAPE)).unwrap();
    let b = estimate_shaped_curvature(&rotated, q, n, &[n], StreamSeed::new(2, domain::SHAPE)).unwrap();
    let (ra, rb) = (a.final_relative_residual(), b.final_relative_residual());
    assert!(ra < 3e-2 && rb < 3e-2, "{ra} {rb}");
    assert!((0.5..2.0).contains(&(ra / rb)), "residuals differ: {ra} vs {rb}");
    assert!(b.eigenvalue_error().unwrap() < 2e-2);
}
