//! Named deterministic RNG streams and sampling helpers.
//!
//! Every random draw in the crate flows through a ChaCha8 stream derived
//! from `(run seed, stream label, round)`. Streams are independent of each
//! other, so adding or removing consumers of one stream never perturbs the
//! others, and trajectories stay reproducible across worker counts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// FNV-1a 64-bit hash.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Derives the named RNG stream for one round of one run.
pub fn stream_rng(seed: u64, label: &str, round: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&fnv1a(label.as_bytes()).to_le_bytes());
    key[16..24].copy_from_slice(&round.to_le_bytes());
    key[24..32].copy_from_slice(&0x9e3779b97f4a7c15u64.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Uniform sample of `k` distinct indices from `0..n` (all of them if
/// `k >= n`), via partial Fisher-Yates.
pub fn sample_indices<R: Rng>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    let k = k.min(n);
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

/// Weighted sample of `k` distinct indices, sequential draws with
/// renormalization. Weights must be non-negative; if the remaining mass
/// hits zero the rest of the batch is drawn uniformly.
pub fn weighted_sample_indices<R: Rng>(rng: &mut R, weights: &[f64], k: usize) -> Vec<usize> {
    let n = weights.len();
    let k = k.min(n);
    let mut taken = vec![false; n];
    let mut remaining: f64 = weights.iter().sum();
    let mut picks = Vec::with_capacity(k);
    for _ in 0..k {
        let idx = if remaining > 0.0 {
            let u = rng.random::<f64>() * remaining;
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, &w) in weights.iter().enumerate() {
                if taken[i] {
                    continue;
                }
                acc += w;
                if u < acc {
                    chosen = Some(i);
                    break;
                }
            }
            // acc can undershoot u by rounding; fall back to the last free slot
            chosen.unwrap_or_else(|| (0..n).rev().find(|&i| !taken[i]).unwrap())
        } else {
            let free: Vec<usize> = (0..n).filter(|&i| !taken[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        taken[idx] = true;
        remaining -= weights[idx];
        picks.push(idx);
    }
    picks
}
