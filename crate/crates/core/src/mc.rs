//! Deterministic parallel Monte Carlo drivers.
//!
//! Trials are addressed by index and draw from their own streams, so a trial's
//! value is fixed. Accumulation happens over fixed segments of the trial range
//! (independent of the worker count) and segments are combined in index order,
//! so sums are bit-identical for any pool size.

use rayon::prelude::*;
use std::ops::Range;

/// Trials per accumulation segment.
pub const SEGMENT: u64 = 256;

/// Evaluates `f` on every trial index; output is in trial order.
pub fn map_trials<T: Send>(n: u64, f: impl Fn(u64) -> T + Sync + Send) -> Vec<T> {
    (0..n as usize).into_par_iter().map(|t| f(t as u64)).collect()
}

/// Cuts `0..n` at every multiple of [`SEGMENT`] and at every checkpoint.
fn segments(n: u64, checkpoints: &[u64]) -> Vec<Range<u64>> {
    let mut cuts: Vec<u64> = (1..=n / SEGMENT).map(|k| k * SEGMENT).collect();
    cuts.extend(checkpoints.iter().copied().filter(|c| *c > 0 && *c < n));
    cuts.push(n);
    cuts.sort_unstable();
    cuts.dedup();
    let mut start = 0;
    cuts.into_iter()
        .map(|end| {
            let r = start..end;
            start = end;
            r
        })
        .collect()
}

/// Running mean of a vector-valued trial function.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub n: u64,
    pub mean: Vec<f64>,
}

/// Mean of `f` over trials `0..n`, also reported at each checkpoint below `n`.
/// `f(t, acc)` must add trial `t`'s value into `acc`. The last entry is the
/// full-run mean.
pub fn vector_mean(
    n: u64,
    len: usize,
    checkpoints: &[u64],
    f: impl Fn(u64, &mut [f64]) + Sync + Send,
) -> Vec<Checkpoint> {
    assert!(n > 0, "need at least one trial");
    let segs = segments(n, checkpoints);
    let sums: Vec<Vec<f64>> = segs
        .par_iter()
        .map(|r| {
            let mut acc = vec![0.0; len];
            for t in r.clone() {
                f(t, &mut acc);
            }
            acc
        })
        .collect();

    let mut total = vec![0.0; len];
    let mut out = Vec::new();
    for (r, s) in segs.iter().zip(&sums) {
        for (a, b) in total.iter_mut().zip(s) {
            *a += b;
        }
        if r.end == n || checkpoints.contains(&r.end) {
            let inv = 1.0 / r.end as f64;
            out.push(Checkpoint { n: r.end, mean: total.iter().map(|x| x * inv).collect() });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segments_cover_range() {
        let s = segments(1000, &[100, 1000, 5000]);
        assert_eq!(s.first().unwrap().start, 0);
        assert_eq!(s.last().unwrap().end, 1000);
        for w in s.windows(2) {
            assert_eq!(w[0].end, w[1].start);
        }
        assert!(s.iter().any(|r| r.end == 100));
    }

    #[test]
    fn vector_mean_checkpoints() {
        let out = vector_mean(1000, 1, &[10, 100], |t, acc| acc[0] += t as f64);
        assert_eq!(out.len(), 3);
        assert_eq!(out[0].n, 10);
        assert_eq!(out[0].mean[0], 4.5);
        assert_eq!(out[2].mean[0], 499.5);
    }

    #[test]
    fn pool_size_does_not_change_bits() {
        let f = |t: u64, acc: &mut [f64]| {
            acc[0] += (t as f64 * 0.1).sin();
            acc[1] += 1.0 / (1.0 + t as f64);
        };
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let many = rayon::ThreadPoolBuilder::new().num_threads(8).build().unwrap();
        let a = one.install(|| vector_mean(10_000, 2, &[1000], f));
        let b = many.install(|| vector_mean(10_000, 2, &[1000], f));
        assert_eq!(a, b);
    }
}
