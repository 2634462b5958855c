//! Seed derivation and stream construction.
//!
//! Every random draw in the crate flows through a ChaCha8 stream whose seed is
//! derived from a root seed plus structural coordinates (iteration, layer id,
//! crossbar index, ...). Runs are therefore restartable and reproducible
//! without storing any sampled state.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; stable across platforms.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Collapse a root seed and a list of stream coordinates into one 64-bit seed.
pub fn derive_seed(root: u64, coords: &[u64]) -> u64 {
    let mut state = mix(root ^ 0x6a09_e667_f3bc_c908);
    for &c in coords {
        state = mix(state ^ mix(c));
    }
    state
}

/// Deterministic ChaCha8 stream for the given root seed and coordinates.
pub fn stream(root: u64, coords: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, coords))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_coords_same_stream() {
        let mut a = stream(7, &[1, 2, 3]);
        let mut b = stream(7, &[1, 2, 3]);
        for _ in 0..32 {
            assert_eq!(a.random::<u64>(), b.random::<u64>());
        }
    }

    #[test]
    fn coords_change_stream() {
        let mut a = stream(7, &[1, 2, 3]);
        let mut b = stream(7, &[1, 2, 4]);
        let va: Vec<u64> = (0..8).map(|_| a.random()).collect();
        let vb: Vec<u64> = (0..8).map(|_| b.random()).collect();
        assert_ne!(va, vb);
    }

    #[test]
    fn coord_list_is_not_flattened() {
        // [1, 2] and [mix-equivalent single coord] must not collide by construction
        assert_ne!(derive_seed(0, &[1, 2]), derive_seed(0, &[2, 1]));
        assert_ne!(derive_seed(0, &[0]), derive_seed(0, &[0, 0]));
    }
}
