//! Counter-based random stream with split-by-label derivation.
//!
//! Every consumer of randomness (init, beta sampling, reparameterization,
//! data shuffling) gets its own labelled child stream so that adding draws to
//! one purpose never perturbs the others. Identical seeds give bit-identical
//! sequences.

use crate::error::{Error, Result};
use crate::linalg::DiagonalVector;

const GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer; full-period bijective mixer.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

/// Deterministic counter-based generator. Output i is a pure function of
/// (key, i), so the stream is reproducible and cheap to fork by label.
#[derive(Debug, Clone)]
pub struct RngStream {
    key: u64,
    counter: u64,
    cached_normal: Option<f64>,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self { key: mix64(seed ^ GAMMA), counter: 0, cached_normal: None }
    }

    /// Independent child stream; a pure function of (parent key, label) that
    /// does not advance the parent.
    pub fn derive(&self, label: &str) -> Self {
        Self {
            key: mix64(self.key ^ mix64(fnv1a(label.as_bytes()))),
            counter: 0,
            cached_normal: None,
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    /// Uniform in [0, 1) with 53 random bits.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal via Box-Muller; the second draw of each pair is cached.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.cached_normal.take() {
            return z;
        }
        let u1 = 1.0 - self.next_f64(); // (0, 1]
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.cached_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = (self.next_u64() % (i as u64 + 1)) as usize;
            items.swap(i, j);
        }
    }
}

/// mean + diag_std .* eps with eps standard normal from the stream.
pub fn gaussian_sample(
    rng: &mut RngStream,
    mean: &[f64],
    diag_std: &DiagonalVector,
) -> Result<Vec<f64>> {
    if mean.len() != diag_std.dim() {
        return Err(Error::dimension(
            "gaussian_sample",
            format!("mean dim {} vs std dim {}", mean.len(), diag_std.dim()),
        ));
    }
    if diag_std.entries().iter().any(|&s| s < 0.0) {
        return Err(Error::domain("gaussian_sample", "negative standard deviation"));
    }
    Ok(mean
        .iter()
        .zip(diag_std.entries())
        .map(|(m, s)| m + s * rng.normal())
        .collect())
}
