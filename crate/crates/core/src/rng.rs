//! Seeded random streams.
//!
//! Every stochastic operation takes an explicit generator. Parallel work
//! derives an independent stream from `(seed, path)` so results never depend
//! on scheduling or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub type Rng = ChaCha20Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator seeded directly from `seed`.
pub fn from_seed(seed: u64) -> Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Generator for the work unit addressed by `path` under `seed`.
pub fn stream(seed: u64, path: &[u64]) -> Rng {
    let mut key = splitmix64(seed);
    for &p in path {
        key = splitmix64(key ^ splitmix64(p.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(key);
    rng.set_stream(path.first().copied().unwrap_or(0));
    rng
}

/// Fresh 64-bit seed drawn from a generator, for handing to a sub-operation.
pub fn child_seed(rng: &mut Rng) -> u64 {
    use rand::Rng as _;
    rng.random()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn streams_are_deterministic_and_distinct() {
        let a: u64 = stream(7, &[1, 2]).random();
        let b: u64 = stream(7, &[1, 2]).random();
        let c: u64 = stream(7, &[2, 1]).random();
        let d: u64 = stream(8, &[1, 2]).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
