//! Monte Carlo mean of PᵀHP against (1−τ)H + τλ̄I, with the residual curve.

use gradshape::retention::{equalized_spectrum, estimate_shaped_curvature};
use gradshape::rng::{domain, StreamSeed};
use gradshape::symkernel::{eig_sym, random_orthogonal, SymMatrix};

fn main() -> gradshape::Result<()> {
    let (d, q) = (16, 4);
    let vals: Vec<f64> = (0..d).map(|i| 0.1 + 1.9 * i as f64 / (d - 1) as f64).collect();
    let o = random_orthogonal(d, &mut StreamSeed::new(1, domain::ROTATION).stream(0, 0));
    let h = SymMatrix::diag(&vals).congruence_t(&o);

    let est = estimate_shaped_curvature(&h, q, 20_000, &[100, 1000, 10_000, 20_000], StreamSeed::new(0, domain::SHAPE))?;
    for p in &est.curve {
        println!("n={:>6}  relative residual {:.3e}", p.n, p.relative);
    }
    let mc = eig_sym(&est.estimate)?.eigenvalues;
    let target = equalized_spectrum(&h, q)?;
    println!("lambda   mapped   monte-carlo");
    for i in [0, d / 2, d - 1] {
        println!("{:.3}   {:.3}    {:.3}", vals[i], target[i], mc[i]);
    }
    println!("relative eigenvalue error {:.3e}", est.eigenvalue_error()?);
    Ok(())
}
