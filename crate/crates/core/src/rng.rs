//! Seeded random streams.
//!
//! Every stream is a ChaCha8 generator keyed by `(seed, stream)`, so trials
//! can be generated in any order (or concurrently) and still reproduce.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::numerics::{Mat, Vector};

pub type StreamRng = ChaCha8Rng;

/// Stream identifiers for the different consumers of randomness.
pub mod stream {
    pub const SYSTEM: u64 = 1;
    pub const OFFLINE_INPUT: u64 = 2;
    pub const PROCESS_NOISE: u64 = 3;
    pub const PROBE: u64 = 4;
    pub const BATCH: u64 = 5;
    pub const ZO_DIRECTIONS: u64 = 6;
    pub const ZO_ROLLOUTS: u64 = 7;
    pub const SWEEP: u64 = 8;
}

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream_rng(seed: u64, stream: u64) -> StreamRng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&mix(seed).to_le_bytes());
    key[8..16].copy_from_slice(&mix(stream ^ 0x5bd1_e995).to_le_bytes());
    key[16..24].copy_from_slice(&mix(seed ^ stream.rotate_left(32)).to_le_bytes());
    key[24..].copy_from_slice(&seed.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

pub fn normal_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

pub fn normal_vector<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Vector {
    Vector::from_fn(len, |_, _| rng.sample(StandardNormal))
}

/// Uniform draw from the unit Frobenius sphere.
pub fn unit_sphere_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Mat {
    loop {
        let g = normal_matrix(rng, rows, cols);
        let norm = g.norm();
        if norm > 1e-12 {
            return g / norm;
        }
    }
}
