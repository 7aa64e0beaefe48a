//! Blockwise shaping of an exact gradient, with per-block scores and the
//! coupling check for the block-diagonal approximation.

use gradshape::rise::{block_scores, blockwise_mean_gap, coupling_coefficient, rise_shape, BlockCurvatureView, BlockPartition};
use gradshape::rng::{domain, StreamSeed};
use gradshape::symkernel::SymMatrix;

fn main() -> gradshape::Result<()> {
    let p = BlockPartition::new(vec![2, 3, 3], vec![2, 2, 4])?;
    let h = SymMatrix::from_upper_fn(8, |i, j| if i == j { 1.0 + i as f64 * 0.4 } else { 0.05 });
    let g: Vec<f64> = (0..8).map(|i| 1.0 - 0.2 * i as f64).collect();
    let view = BlockCurvatureView::from_full(&h, &p)?;

    let shaped = rise_shape(&g, &p, StreamSeed::new(0, domain::BLOCKS), 0)?;
    println!("g      {:?}", g.iter().map(|x| format!("{x:+.2}")).collect::<Vec<_>>());
    println!("shaped {:?}", shaped.iter().map(|x| format!("{x:+.2}")).collect::<Vec<_>>());

    let gap = blockwise_mean_gap(&g, &view, &p, 0.1)?;
    println!("within gaps {:?}, cross {:?}, total {:.5}", gap.within, gap.cross, gap.total);
    let scores = block_scores(&g, &view, &p, 0.1, 0.1, None)?;
    for b in 0..p.len() {
        println!(
            "block {b}: S={:+.5} D={:.3} R={:.3}",
            scores.s_rise[b], scores.damage_density[b], scores.flat_signal[b]
        );
    }
    let c = coupling_coefficient(&view, &p, StreamSeed::new(0, domain::PROBE))?;
    println!("eps_blk = {:.4}, sandwich {:?}", c.epsilon, c.sandwich.map(|s| s.holds));
    Ok(())
}
