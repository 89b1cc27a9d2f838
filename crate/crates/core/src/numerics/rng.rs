use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Real, Tensor};

/// Seeded ChaCha8 stream. Platform independent for a given seed and call
/// sequence.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl PartialEq for Rng {
    fn eq(&self, other: &Self) -> bool {
        self.state() == other.state()
    }
}

/// Everything needed to resume an [`Rng`] mid-stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child generator keyed on this generator's seed and `tag`.
    ///
    /// Does not depend on (or advance) the parent's position, so consumers
    /// that split by purpose never perturb each other's streams.
    pub fn split(&self, tag: u64) -> Rng {
        Rng::new(splitmix64(
            self.seed ^ splitmix64(tag.wrapping_add(0x5DEE_CE66)),
        ))
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn from_state(state: RngState) -> Self {
        let mut rng = Rng::new(state.seed);
        rng.inner.set_word_pos(state.word_pos);
        rng
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> Real {
        self.inner.random::<f64>() as Real
    }

    pub fn range(&mut self, lo: Real, hi: Real) -> Real {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> Real {
        let v: f64 = self.inner.sample(StandardNormal);
        v as Real
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n as u64) as usize
    }

    pub fn bernoulli(&mut self, p: Real) -> bool {
        self.uniform() < p
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        p.shuffle(&mut self.inner);
        p
    }
}

impl Tensor {
    pub fn random_normal(shape: &[usize], std: Real, rng: &mut Rng) -> Tensor {
        let mut t = Tensor::zeros(shape);
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v = std * rng.normal());
        t
    }

    pub fn random_uniform(shape: &[usize], lo: Real, hi: Real, rng: &mut Rng) -> Tensor {
        let mut t = Tensor::zeros(shape);
        t.data_mut().iter_mut().for_each(|v| *v = rng.range(lo, hi));
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.normal().to_bits(), b.normal().to_bits());
        }
        assert_eq!(a.permutation(17), b.permutation(17));
    }

    #[test]
    fn state_round_trip_resumes_stream() {
        let mut a = Rng::new(7);
        for _ in 0..13 {
            a.uniform();
        }
        let mut b = Rng::from_state(a.state());
        for _ in 0..50 {
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
        }
    }

    #[test]
    fn split_is_positional_independent() {
        let a = Rng::new(3);
        let mut b = Rng::new(3);
        b.uniform();
        assert_eq!(a.split(9).uniform(), b.split(9).uniform());
        assert_ne!(a.split(9).uniform(), a.split(10).uniform());
    }

    #[test]
    fn permutation_is_a_bijection() {
        let mut rng = Rng::new(1);
        let mut p = rng.permutation(100);
        p.sort_unstable();
        assert_eq!(p, (0..100).collect::<Vec<_>>());
    }
}
