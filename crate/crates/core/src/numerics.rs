//! Small math kernels shared by every other module, plus the seeded PRNG.
//!
//! Vectors are stored as `f32`; every reduction (norms, dot products,
//! log-sum-exp, entropy) accumulates in `f64`. Logs are natural logs.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{CapelError, Result};

/// Norms at or below this are treated as zero.
pub const ZERO_NORM_EPS: f64 = 1e-8;

pub fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| x as f64 * y as f64)
        .sum()
}

pub fn norm_f64(v: &[f32]) -> f64 {
    dot_f64(v, v).sqrt()
}

fn check_finite(v: &[f32], what: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(CapelError::NonFinite(what))
    }
}

/// Scales `v` to unit Euclidean length.
pub fn l2_normalize(v: &[f32]) -> Result<Vec<f32>> {
    check_finite(v, "l2_normalize input")?;
    let norm = norm_f64(v);
    if norm <= ZERO_NORM_EPS {
        return Err(CapelError::zero_norm(norm, ""));
    }
    Ok(v.iter().map(|&x| (x as f64 / norm) as f32).collect())
}

/// Cosine similarity, clamped to [-1, 1] against rounding.
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(CapelError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let (na, nb) = (norm_f64(a), norm_f64(b));
    for norm in [na, nb] {
        if norm <= ZERO_NORM_EPS {
            return Err(CapelError::zero_norm(norm, ""));
        }
    }
    Ok((dot_f64(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Max-shifted log-softmax over `f64` logits.
pub fn log_softmax_f64(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + v.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    v.iter().map(|&x| x - lse).collect()
}

pub fn softmax_f64(v: &[f64]) -> Vec<f64> {
    log_softmax_f64(v).into_iter().map(f64::exp).collect()
}

pub fn log_softmax(v: &[f32]) -> Result<Vec<f32>> {
    if v.is_empty() {
        return Err(CapelError::LengthMismatch { left: 0, right: 1 });
    }
    check_finite(v, "log_softmax input")?;
    let wide: Vec<f64> = v.iter().map(|&x| x as f64).collect();
    Ok(log_softmax_f64(&wide).into_iter().map(|x| x as f32).collect())
}

/// Shannon entropy (nats) of `softmax(v)`, computed as `-sum p * log p`
/// from the log-softmax. Never negative.
pub fn entropy_from_logits_f64(v: &[f64]) -> f64 {
    let h: f64 = log_softmax_f64(v)
        .into_iter()
        .map(|lp| -lp.exp() * lp)
        .sum();
    h.max(0.0)
}

pub fn entropy_from_logits(v: &[f32]) -> f64 {
    let wide: Vec<f64> = v.iter().map(|&x| x as f64).collect();
    entropy_from_logits_f64(&wide)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Seeded generator used for all sampling in the crate.
///
/// The raw stream is ChaCha8 seeded through `SeedableRng::seed_from_u64`,
/// which is value-stable across platforms. Derived draws:
///
/// * `uniform`: top 53 bits of a `u64`, scaled to `[0, 1)`.
/// * `below(n)`: rejection sampling on `u64` to remove modulo bias.
/// * `gaussian`: Box-Muller on two uniforms; the second variate is cached
///   and returned by the next call.
/// * `shuffle`: Fisher-Yates from the last position down.
/// * `choose_k`: the first `k` steps of a forward Fisher-Yates over `0..n`.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let r = self.next_u64();
            if r < zone {
                return (r % n) as usize;
            }
        }
    }

    pub fn gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // 1 - u keeps the log argument in (0, 1].
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct indices from `0..population`, in draw order.
    pub fn choose_k(&mut self, population: usize, k: usize) -> Result<Vec<usize>> {
        if k > population {
            return Err(CapelError::ChooseTooMany { k, population });
        }
        let mut pool: Vec<usize> = (0..population).collect();
        for i in 0..k {
            let j = i + self.below(population - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        Ok(pool)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Sub-seed for one stage of a run: `splitmix64(master ^ fnv1a64(tag))`.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    splitmix64(master ^ fnv1a64(tag.as_bytes()))
}
