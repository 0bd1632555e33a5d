//! Seed derivation and the normal-variate stream used by the simulator.
//!
//! Every stochastic component draws from a seed derived from the experiment's
//! `master_seed` through [`derive_seed`], keyed by a textual label and an
//! index. Derivation is a pure function, so any run, fold or permutation can
//! be reproduced in isolation and in any order.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const LABEL_SIMULATION: &str = "simulation";
pub const LABEL_FOLDS: &str = "folds";
pub const LABEL_PERMUTATION: &str = "permutation";

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Derives a child seed from `(master, label, index)`.
pub fn derive_seed(master: u64, label: &str, index: u64) -> u64 {
    let keyed = splitmix64(master ^ fnv1a(label));
    splitmix64(keyed.wrapping_add(splitmix64(index)))
}

/// Seed of run `index` in a simulation ensemble.
pub fn run_seed(master: u64, index: usize) -> u64 {
    derive_seed(master, LABEL_SIMULATION, index as u64)
}

/// ChaCha8 generator on a given stream of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform double in `[0, 1)` with 53 random bits.
pub fn unit_f64<R: RngCore>(rng: &mut R) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal variates by the Box–Muller transform on ChaCha8 uniforms.
///
/// Each pair of uniforms `(u1, u2)` yields `r·cos(2πu2)` followed by
/// `r·sin(2πu2)` with `r = √(−2 ln(1 − u1))`.
pub struct NormalStream {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl NormalStream {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: stream_rng(seed, 0),
            spare: None,
        }
    }

    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // 1 - u lies in (0, 1], so the logarithm is finite.
        let u1 = 1.0 - unit_f64(&mut self.rng);
        let u2 = unit_f64(&mut self.rng);
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        self.spare = Some(r * s);
        r * c
    }
}
