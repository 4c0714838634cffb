//! Vocabulary, probability vectors and the sampling primitives every other
//! module builds on.
//!
//! Probabilities are `f64` in memory. The wire bit-width (`b_prob`) only
//! shows up through [`Precision::quantize`], which maps a value to what the
//! receiving endpoint will decode.

use std::fmt;

use half::f16;

use crate::error::{Error, Result};

/// Tolerance on `Σ probs = 1` accepted by [`Dist::new`].
pub const SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }

    /// Checked constructor against a vocabulary size.
    pub fn new(index: usize, vocab_size: usize) -> Result<Self> {
        if index >= vocab_size {
            return Err(Error::InvalidDist(format!(
                "token {index} outside vocabulary of {vocab_size}"
            )));
        }
        Ok(TokenId(index as u32))
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Numeric precision a probability has after crossing the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Precision {
    /// No wire in between: values are used as computed.
    Exact,
    /// IEEE binary16.
    Half,
    /// IEEE binary32.
    Single,
}

impl Precision {
    pub fn from_bits(bits: u32) -> Result<Self> {
        match bits {
            16 => Ok(Precision::Half),
            32 => Ok(Precision::Single),
            other => Err(Error::InvalidVocab(format!(
                "b_prob must be 16 or 32, got {other}"
            ))),
        }
    }

    /// Round-trips `x` through the wire format.
    ///
    /// A positive value that would round to zero is clamped to the smallest
    /// positive representable value, so a drafted token never arrives with
    /// zero draft probability. Idempotent.
    pub fn quantize(self, x: f64) -> f64 {
        if x == 0.0 {
            return x;
        }
        match self {
            Precision::Exact => x,
            Precision::Half => {
                let h = f16::from_f64(x);
                if x > 0.0 && h.to_f64() <= 0.0 {
                    f16::from_bits(1).to_f64()
                } else {
                    h.to_f64()
                }
            }
            Precision::Single => {
                let s = x as f32;
                if x > 0.0 && s <= 0.0 {
                    f32::from_bits(1) as f64
                } else {
                    s as f64
                }
            }
        }
    }
}

/// Shared vocabulary and the bit-width of one probability on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VocabConfig {
    pub size: usize,
    pub b_prob: u32,
}

impl VocabConfig {
    pub fn new(size: usize, b_prob: u32) -> Result<Self> {
        if size < 2 {
            return Err(Error::InvalidVocab(format!(
                "vocabulary needs at least 2 tokens, got {size}"
            )));
        }
        if size > u32::MAX as usize {
            return Err(Error::InvalidVocab(format!("vocabulary of {size} does not fit u32 ids")));
        }
        Precision::from_bits(b_prob)?;
        Ok(VocabConfig { size, b_prob })
    }

    pub fn precision(&self) -> Precision {
        if self.b_prob == 16 {
            Precision::Half
        } else {
            Precision::Single
        }
    }

    /// Bytes of one encoded probability.
    pub fn prob_bytes(&self) -> usize {
        self.b_prob as usize / 8
    }

    /// Bits of one full encoded distribution, `|V|·b_prob`.
    pub fn dist_bits(&self) -> u64 {
        self.size as u64 * self.b_prob as u64
    }

    pub fn contains(&self, token: TokenId) -> bool {
        token.index() < self.size
    }
}

/// A probability vector over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Dist {
    probs: Vec<f64>,
}

impl Dist {
    /// Validates non-negativity and unit mass within [`SUM_TOLERANCE`].
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDist("empty probability vector".into()));
        }
        if let Some(bad) = probs.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
            return Err(Error::InvalidDist(format!("entry {bad} is not a probability")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidDist(format!("entries sum to {total}")));
        }
        Ok(Dist { probs })
    }

    pub fn uniform(size: usize) -> Self {
        Dist {
            probs: vec![1.0 / size as f64; size],
        }
    }

    pub fn point_mass(size: usize, token: TokenId) -> Self {
        let mut probs = vec![0.0; size];
        probs[token.index()] = 1.0;
        Dist { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, token: TokenId) -> f64 {
        self.probs[token.index()]
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.probs
    }

    /// The distribution as the receiver of a wire message sees it.
    pub fn quantized(&self, precision: Precision) -> Vec<f64> {
        self.probs.iter().map(|&p| precision.quantize(p)).collect()
    }

    /// Number of entries with positive probability.
    pub fn support_size(&self) -> usize {
        self.probs.iter().filter(|p| **p > 0.0).count()
    }
}

impl AsRef<[f64]> for Dist {
    fn as_ref(&self) -> &[f64] {
        &self.probs
    }
}

/// Scales a non-negative vector to unit mass.
pub fn normalize(raw: &[f64]) -> Result<Dist> {
    if raw.is_empty() {
        return Err(Error::InvalidDist("empty probability vector".into()));
    }
    let mut total = 0.0;
    for &p in raw {
        if !(p.is_finite() && p >= 0.0) {
            return Err(Error::InvalidDist(format!("entry {p} is negative or not finite")));
        }
        total += p;
    }
    if total <= 0.0 {
        return Err(Error::ZeroMass);
    }
    if !total.is_finite() {
        // Rescale first so the sum itself does not overflow.
        let max = raw.iter().cloned().fold(0.0, f64::max);
        let scaled: Vec<f64> = raw.iter().map(|p| p / max).collect();
        return normalize(&scaled);
    }
    Ok(Dist {
        probs: raw.iter().map(|p| p / total).collect(),
    })
}

/// Inverse-CDF sampling: the smallest index whose running sum exceeds `r`,
/// accumulated left to right.
pub fn sample(d: &Dist, r: f64) -> TokenId {
    sample_slice(d.probs(), r)
}

pub(crate) fn sample_slice(probs: &[f64], r: f64) -> TokenId {
    let mut cumulative = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        cumulative += p;
        last_positive = i;
        if cumulative > r {
            return TokenId(i as u32);
        }
    }
    // Rounding left the total just under r.
    TokenId(last_positive as u32)
}

/// Keeps the `k` largest entries (ties to the lower index), sharpens by
/// `1/temperature` and renormalizes.
pub fn top_k_filter(d: &Dist, k: usize, temperature: f64) -> Result<Dist> {
    let n = d.len();
    if k == 0 || k > n {
        return Err(Error::config("top_k", format!("k={k} outside 1..={n}")));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::config("temperature", format!("{temperature} is not positive")));
    }
    let probs = d.probs();
    let mut kept = vec![0.0; n];
    // zeros never outrank a positive entry and stay zero, so only the
    // support competes
    let mut order: Vec<usize> = (0..n).filter(|&i| probs[i] > 0.0).collect();
    if order.len() > k {
        order.select_nth_unstable_by(k - 1, |&a, &b| {
            probs[b].total_cmp(&probs[a]).then(a.cmp(&b))
        });
        order.truncate(k);
    }
    for &i in &order {
        kept[i] = probs[i];
    }
    if temperature != 1.0 {
        let inv = 1.0 / temperature;
        for p in kept.iter_mut().filter(|p| **p > 0.0) {
            *p = p.powf(inv);
        }
    }
    normalize(&kept)
}

/// Top-k / temperature sampling settings applied to both models' outputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingConfig {
    pub top_k: usize,
    pub temperature: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            top_k: 10,
            temperature: 1.0,
        }
    }
}

impl SamplingConfig {
    /// No filtering at all.
    pub fn full() -> Self {
        SamplingConfig {
            top_k: usize::MAX,
            temperature: 1.0,
        }
    }

    pub fn apply(&self, d: &Dist) -> Result<Dist> {
        let k = self.top_k.min(d.len());
        if k == d.len() && self.temperature == 1.0 {
            return Ok(d.clone());
        }
        top_k_filter(d, k, self.temperature)
    }
}
