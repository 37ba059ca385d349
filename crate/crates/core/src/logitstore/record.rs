use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Bytes one record occupies in a shard: a 32-bit index and a 32-bit
/// probability per retained entry.
pub const fn record_payload_bytes(k: usize) -> usize {
    k * 8
}

/// The K largest teacher probabilities of one token, descending, as stored
/// (not renormalized).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseLogitRecord {
    pub indices: Vec<u32>,
    pub probs: Vec<f32>,
}

impl SparseLogitRecord {
    pub fn k(&self) -> usize {
        self.indices.len()
    }

    pub fn retained_mass(&self) -> f64 {
        self.probs.iter().map(|&p| f64::from(p)).sum()
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Format { what: "logit record", detail: m });
        if self.indices.len() != self.probs.len() {
            return bad("indices and probs differ in length".into());
        }
        if self.probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("probability outside [0, 1]".into());
        }
        if self.probs.windows(2).any(|w| w[0] < w[1]) {
            return bad("probabilities not descending".into());
        }
        // Single-precision softmax and storage leave up to a few ulps per entry.
        let slack = 2.0 * (self.k() as f64 + 1.0) * f64::from(f32::EPSILON);
        if self.retained_mass() > 1.0 + slack {
            return bad(format!("retained mass {} exceeds 1", self.retained_mass()));
        }
        let mut seen = self.indices.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return bad("duplicate index".into());
        }
        if let Some(&i) = seen.last().filter(|&&i| i as usize >= vocab) {
            return Err(Error::TokenOutOfRange { token: i, vocab });
        }
        Ok(())
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.indices == other.indices
            && self.probs.len() == other.probs.len()
            && self.probs.iter().zip(&other.probs).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Keeps the K largest probabilities (ties to the lower index), descending.
pub fn topk_sparsify<T: Scalar>(probs: &[T], k: usize) -> Result<SparseLogitRecord> {
    let vocab = probs.len();
    if k > vocab {
        return Err(Error::TopKTooLarge { k, vocab });
    }
    if probs.iter().any(|p| !(p.is_finite() && *p >= T::zero())) {
        return Err(Error::InvalidArgument("probabilities must be finite and nonnegative".into()));
    }
    let total: f64 = probs.iter().map(|p| p.as_f64()).sum();
    if (total - 1.0).abs() > 1e-5 {
        return Err(Error::InvalidArgument(format!("probabilities sum to {total}")));
    }
    let order = |&a: &usize, &b: &usize| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b));
    let mut idx: Vec<usize> = (0..vocab).collect();
    if k > 0 && k < vocab {
        idx.select_nth_unstable_by(k - 1, order);
        idx.truncate(k);
    }
    idx.sort_unstable_by(order);
    idx.truncate(k);
    Ok(SparseLogitRecord {
        indices: idx.iter().map(|&i| i as u32).collect(),
        probs: idx.iter().map(|&i| probs[i].as_f64() as f32).collect(),
    })
}
