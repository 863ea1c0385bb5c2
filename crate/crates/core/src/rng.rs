//! Named random streams derived from a single seed.
//!
//! Every consumer of randomness asks for a stream by name. The stream seed
//! is a hash of `(seed, name)`, so introducing a new stream never shifts the
//! values drawn by existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Stream name used for the initial latent noise of a sampling run.
pub const INIT_NOISE: &str = "init-noise";

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for the stream `name` under the root `seed`.
pub fn stream_seed(seed: u64, name: &str) -> u64 {
    splitmix64(seed ^ splitmix64(fnv1a(name.as_bytes())))
}

pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, name))
}

/// `len` standard normal draws from the named stream, scaled by `scale`.
pub fn normal_vec(seed: u64, name: &str, len: usize, scale: f32) -> Vec<f32> {
    let mut rng = stream(seed, name);
    (0..len)
        .map(|_| {
            let x: f32 = StandardNormal.sample(&mut rng);
            x * scale
        })
        .collect()
}
