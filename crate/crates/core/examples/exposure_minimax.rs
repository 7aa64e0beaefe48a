//! Worst-case exposure of first-order, shaped and isotropic step moments.

use gradshape::exposure::{fo_moment, gap_closing_factor, isotropic_moment, worst_case_exposure, zo_exposure};
use gradshape::shaping::tau;

fn main() -> gradshape::Result<()> {
    let g = vec![1.0, -2.0, 0.5, 0.0, 1.5, 0.3, -0.7, 0.2];
    let (lbar, eta) = (1.0, 0.1);
    let fo = worst_case_exposure(&fo_moment(&g)?, lbar, eta)?;
    let iso = worst_case_exposure(&isotropic_moment(&g)?, lbar, eta)?;
    println!("FO {fo:.5}  isotropic {iso:.5}");
    for q in [1, 4, 16, 64] {
        let zo = worst_case_exposure(&zo_exposure(&g, q)?, lbar, eta)?;
        println!(
            "q={q:>2}: shaped {zo:.5}  closing factor {:.4} (1 - tau = {:.4})",
            gap_closing_factor(&g, q, lbar, eta)?,
            1.0 - tau(g.len(), q)
        );
    }
    Ok(())
}
