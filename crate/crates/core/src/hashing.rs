//! Deterministic hashing primitives: an avalanching integer hash for bucket
//! assignment, a family of keyed SipHash functions, and sign-of-random-projection
//! LSH codes.

use std::hash::Hasher;

use rand::Rng as _;
use rand_distr::StandardNormal;
use siphasher::sip::SipHasher24;

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

/// Three rounds of xorshift-multiply over 64 bits. Every step is invertible,
/// so the whole map is a bijection.
#[inline]
pub fn int_hash(x: u64) -> u64 {
    let mut x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^= x >> 31;
    x = x.wrapping_mul(0xd6e8_feb8_6659_fd93);
    x ^= x >> 32;
    x
}

/// `int_hash(x) mod buckets`.
#[inline]
pub fn bucket_of(x: u64, buckets: usize) -> usize {
    (int_hash(x) % buckets as u64) as usize
}

/// `K` SipHash-2-4 functions with distinct 128-bit keys drawn from a master seed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyedHashFamily {
    keys: Vec<(u64, u64)>,
}

impl KeyedHashFamily {
    pub fn new(master_seed: u64, count: usize) -> Self {
        let mut rng = stream_rng(master_seed, Stream::HashKeys, 0);
        let mut keys: Vec<(u64, u64)> = Vec::with_capacity(count);
        while keys.len() < count {
            let key = (rng.random(), rng.random());
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
        Self { keys }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn hash(&self, id: u64, k: usize) -> Result<u64> {
        let &(k0, k1) = self.keys.get(k).ok_or(Error::Index {
            index: k,
            len: self.keys.len(),
        })?;
        let mut h = SipHasher24::new_with_keys(k0, k1);
        h.write_u64(id);
        Ok(h.finish())
    }

    /// All `K` hashes of `id`, each mapped uniformly onto `[-1, 1)`.
    pub fn encode(&self, id: u64) -> Vec<f64> {
        (0..self.keys.len())
            .map(|k| {
                let h = self.hash(id, k).expect("index in range");
                2.0 * (h as f64 / 18_446_744_073_709_551_616.0) - 1.0
            })
            .collect()
    }
}

/// A binary LSH code; bit 0 is the first projection row.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LshCode(pub Vec<bool>);

impl LshCode {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count_ones(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn hamming(&self, other: &LshCode) -> usize {
        self.0.iter().zip(&other.0).filter(|(a, b)| a != b).count()
    }

    /// Packs the code into an integer with bit 0 as the most significant bit.
    pub fn to_index(&self) -> usize {
        assert!(self.0.len() < usize::BITS as usize, "code too long to index a table");
        self.0.iter().fold(0usize, |acc, &b| (acc << 1) | b as usize)
    }

    pub fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, &b)| b).map(|(j, _)| j)
    }
}

/// Fixed `p x d_feat` matrix of standard normal entries.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomProjection {
    bits: usize,
    input_dim: usize,
    matrix: Vec<f64>,
}

impl RandomProjection {
    /// Rebuilding with the same `(seed, tag, bits, input_dim)` is bit-identical.
    /// `tag` separates entity types.
    pub fn new(seed: u64, tag: u64, bits: usize, input_dim: usize) -> Self {
        let index = int_hash(tag) ^ int_hash(bits as u64).rotate_left(21) ^ int_hash(input_dim as u64).rotate_left(42);
        let mut rng = stream_rng(seed, Stream::Projection, index);
        let matrix = (0..bits * input_dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            bits,
            input_dim,
            matrix,
        }
    }

    /// A projection with explicit rows, mostly for tests.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let input_dim = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == input_dim), "ragged projection rows");
        Self {
            bits: rows.len(),
            input_dim,
            matrix: rows.concat(),
        }
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }
}

/// Bit `j` is set iff `(P x)_j >= 0`; an exact zero counts as set.
pub fn lsh_code(proj: &RandomProjection, features: &[f64]) -> Result<LshCode> {
    if features.len() != proj.input_dim {
        return Err(Error::Dimension {
            expected: proj.input_dim,
            found: features.len(),
        });
    }
    let d = proj.input_dim;
    Ok(LshCode(
        (0..proj.bits)
            .map(|j| {
                let row = &proj.matrix[j * d..(j + 1) * d];
                crate::tensor::dot(row, features) >= 0.0
            })
            .collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn chi_square_passes(counts: &[usize], alpha: f64) -> bool {
        let n: usize = counts.iter().sum();
        let expected = n as f64 / counts.len() as f64;
        let stat: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        let crit = ChiSquared::new((counts.len() - 1) as f64).unwrap().inverse_cdf(1.0 - alpha);
        stat < crit
    }

    #[test]
    fn int_hash_is_deterministic_and_in_range() {
        for x in [0u64, 1, 42, u64::MAX] {
            assert_eq!(int_hash(x), int_hash(x));
            for b in [1usize, 7, 100] {
                assert!(bucket_of(x, b) < b);
            }
        }
    }

    #[test]
    fn int_hash_avalanche() {
        let mut rng = stream_rng(1, Stream::Toy, 0);
        let trials = 10_000;
        let mut flipped = 0u64;
        for _ in 0..trials {
            let x: u64 = rng.random();
            let bit = rng.random_range(0..64);
            flipped += (int_hash(x) ^ int_hash(x ^ (1 << bit))).count_ones() as u64;
        }
        let rate = flipped as f64 / (trials as f64 * 64.0);
        assert!((rate - 0.5).abs() <= 0.02, "flip rate {rate}");
    }

    #[test]
    fn int_hash_sequential_ids_are_uniform() {
        for b in [16usize, 1000] {
            let mut counts = vec![0usize; b];
            for id in 0..100_000u64 {
                counts[bucket_of(id, b)] += 1;
            }
            assert!(chi_square_passes(&counts, 0.01), "b = {b}");
        }
    }

    #[test]
    fn keyed_hash_determinism_and_index_error() {
        let a = KeyedHashFamily::new(99, 4);
        let b = KeyedHashFamily::new(99, 4);
        assert_eq!(a.hash(7, 0).unwrap(), b.hash(7, 0).unwrap());
        assert!(matches!(a.hash(7, 4), Err(Error::Index { index: 4, len: 4 })));
    }

    #[test]
    fn keyed_hashes_differ_across_keys() {
        let collisions = (0..1000u64)
            .filter(|&seed| {
                let f = KeyedHashFamily::new(seed, 2);
                f.hash(7, 0).unwrap() == f.hash(7, 1).unwrap()
            })
            .count();
        assert_eq!(collisions, 0);
    }

    #[test]
    fn keyed_hash_outputs_uncorrelated() {
        let f = KeyedHashFamily::new(5, 2);
        let n = 10_000;
        let xs: Vec<f64> = (0..n).map(|id| f.hash(id, 0).unwrap() as f64).collect();
        let ys: Vec<f64> = (0..n).map(|id| f.hash(id, 1).unwrap() as f64).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (mx, my) = (mean(&xs), mean(&ys));
        let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
        let r = cov / (vx * vy).sqrt();
        assert!(r.abs() < 0.05, "correlation {r}");
    }

    #[test]
    fn encoding_lies_in_unit_interval() {
        let f = KeyedHashFamily::new(3, 64);
        for id in 0..100 {
            assert!(f.encode(id).iter().all(|&e| (-1.0..1.0).contains(&e)));
        }
    }

    #[test]
    fn identity_projection_signs() {
        let proj = RandomProjection::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(lsh_code(&proj, &[1.5, -2.0]).unwrap(), LshCode(vec![true, false]));
        assert_eq!(lsh_code(&proj, &[0.0, 0.0]).unwrap(), LshCode(vec![true, true]));
        assert!(matches!(lsh_code(&proj, &[1.0]), Err(Error::Dimension { expected: 2, found: 1 })));
    }

    #[test]
    fn bit_zero_is_most_significant() {
        assert_eq!(LshCode(vec![true, false]).to_index(), 2);
        assert_eq!(LshCode(vec![false, true, true]).to_index(), 3);
    }

    #[test]
    fn projection_rebuild_is_identical() {
        let a = RandomProjection::new(7, 1, 16, 5);
        assert_eq!(a, RandomProjection::new(7, 1, 16, 5));
        assert_ne!(a, RandomProjection::new(7, 2, 16, 5));
    }

    #[test]
    fn differing_bits_follow_angle() {
        let p = 4096;
        let proj = RandomProjection::new(11, 0, p, 2);
        let theta = 1.0f64; // radians
        let x = [1.0, 0.0];
        let y = [theta.cos(), theta.sin()];
        let cx = lsh_code(&proj, &x).unwrap();
        let cy = lsh_code(&proj, &y).unwrap();
        let frac = cx.hamming(&cy) as f64 / p as f64;
        assert!((frac - theta / std::f64::consts::PI).abs() < 0.02, "{frac}");
    }

    proptest! {
        #[test]
        fn code_invariant_under_positive_scaling(
            x in prop::collection::vec(-10.0f64..10.0, 6),
            c in 0.01f64..100.0,
        ) {
            let proj = RandomProjection::new(3, 0, 32, 6);
            let scaled: Vec<f64> = x.iter().map(|v| v * c).collect();
            prop_assert_eq!(lsh_code(&proj, &x).unwrap(), lsh_code(&proj, &scaled).unwrap());
        }
    }
}
