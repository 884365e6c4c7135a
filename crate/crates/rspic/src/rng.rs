//! Reproducible per-path random streams.
//!
//! Every Monte Carlo path draws its noise from a ChaCha8 stream keyed by
//! `(seed, path_index)`. ChaCha is a counter-mode generator, so a path's
//! stream depends only on that pair and never on how paths are partitioned
//! across worker threads: path `k` produces the same increments whether the
//! batch runs on one thread or sixteen.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Random stream for one simulated path.
pub fn path_rng(seed: u64, path_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path_index);
    rng
}

/// Mixes auxiliary identifiers into a base seed (splitmix64 finalizer).
///
/// Used to derive independent-but-deterministic sub-seeds, e.g. one seed per
/// replicate or per memoized policy cell.
pub fn mix_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_key_same_stream() {
        let a: Vec<u64> = {
            let mut r = path_rng(7, 3);
            (0..32).map(|_| r.random()).collect()
        };
        let b: Vec<u64> = {
            let mut r = path_rng(7, 3);
            (0..32).map(|_| r.random()).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn distinct_paths_distinct_streams() {
        let mut r0 = path_rng(7, 0);
        let mut r1 = path_rng(7, 1);
        let a: Vec<u64> = (0..8).map(|_| r0.random()).collect();
        let b: Vec<u64> = (0..8).map(|_| r1.random()).collect();
        assert_ne!(a, b);
    }

    #[test]
    fn mix_seed_varies_with_salt() {
        assert_ne!(mix_seed(42, 0), mix_seed(42, 1));
        assert_eq!(mix_seed(42, 9), mix_seed(42, 9));
    }
}
