//! Seeded, platform-independent random streams.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::error::{HtpError, Result};
use crate::tensor::{Mat, Ten3};

/// A single-owner random stream. Parallel work derives child streams with
/// [`RngStream::child`] instead of sharing one.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    inner: ChaCha20Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream {
            seed,
            inner: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of 32-bit words consumed so far.
    pub fn counter(&self) -> u128 {
        self.inner.get_word_pos()
    }

    /// Independent stream for sub-task `index`, a pure function of `(seed, index)`.
    pub fn child(&self, index: u64) -> RngStream {
        RngStream::new(derive_seed(self.seed, index))
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform on `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    pub fn uniform_mat(&mut self, rows: usize, cols: usize, bound: f64) -> Mat {
        Mat::from_fn(rows, cols, |_, _| self.uniform(-bound, bound))
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }
}

/// SplitMix64-style mixing of a parent seed and a child index.
pub fn derive_seed(parent: u64, index: u64) -> u64 {
    let mut z = parent ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Standard normal tensor of the given shape.
pub fn gaussian(rng: &mut RngStream, shape: (usize, usize, usize)) -> Result<Ten3> {
    let (a, b, c) = shape;
    if a == 0 || b == 0 || c == 0 {
        return Err(HtpError::invalid(format!("gaussian: zero-sized shape {a}x{b}x{c}")));
    }
    Ten3::new(a, b, c, rng.normal_vec(a * b * c))
}
