//! Counter-based random streams.
//!
//! Every Monte Carlo draw in the crate comes from a [`NormalStream`] addressed
//! by `(seed, domain, trial, block)`. The address is hashed into a ChaCha8 key
//! and stream id, so each address owns an independent keystream and the value
//! of a trial never depends on which worker ran it or in what order.
//!
//! Standard normals are produced with the Box–Muller transform so the output
//! bits depend only on the keystream and IEEE arithmetic.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Named stream domains. Different experiment stages draw from disjoint
/// domains even under the same seed.
pub mod domain {
    pub const SHAPE: u64 = 0x5348_4150;
    pub const OPERATOR: u64 = 0x4f50_4552;
    pub const SWEEP: u64 = 0x5357_4550;
    pub const VARIANCE_GLOBAL: u64 = 0x5641_5247;
    pub const VARIANCE_BLOCK: u64 = 0x5641_5242;
    pub const STREAM_TASKS: u64 = 0x5354_5254;
    pub const STREAM_METHOD: u64 = 0x5354_524d;
    pub const CALIBRATION: u64 = 0x4341_4c49;
    pub const CERTIFICATE: u64 = 0x4345_5254;
    pub const ROTATION: u64 = 0x524f_5441;
    pub const GRADIENT: u64 = 0x4752_4144;
    pub const BLOCKS: u64 = 0x424c_4b53;
    pub const PROBE: u64 = 0x5052_4f42;
    pub const NOISE: u64 = 0x4e4f_4953;
    pub const TEST: u64 = 0x5445_5354;
}

/// Root of a family of streams: a user seed plus a domain tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamSeed {
    pub seed: u64,
    pub domain: u64,
}

impl StreamSeed {
    pub fn new(seed: u64, domain: u64) -> Self {
        Self { seed, domain }
    }

    /// The stream owned by `(trial, block)`.
    pub fn stream(&self, trial: u64, block: u64) -> NormalStream {
        NormalStream::new(self.seed, self.domain, trial, block)
    }

    /// A child family, for nesting (e.g. per sweep point, then per trial).
    pub fn child(&self, index: u64) -> StreamSeed {
        StreamSeed {
            seed: splitmix(self.seed ^ splitmix(index.wrapping_add(0x9e37_79b9))),
            domain: self.domain,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct NormalStream {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl NormalStream {
    pub fn new(seed: u64, domain: u64, trial: u64, block: u64) -> Self {
        let mut key = [0u8; 32];
        key[0..8].copy_from_slice(&seed.to_le_bytes());
        key[8..16].copy_from_slice(&domain.to_le_bytes());
        key[16..24].copy_from_slice(&trial.to_le_bytes());
        key[24..32].copy_from_slice(&splitmix(seed ^ domain ^ trial).to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(block);
        Self { rng, spare: None }
    }

    /// Uniform on (0, 1], 53 bits.
    pub fn uniform_open0(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on [0, 1), 53 bits.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.uniform_open0();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for x in out.iter_mut() {
            *x = self.normal();
        }
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        self.fill_normal(&mut v);
        v
    }
}
