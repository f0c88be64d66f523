//! Temperature-scaled contrastive classification of one positive target
//! against in-batch negatives.
//!
//! Scores enter as logits `phi = s_final / tau`. The loss for a query is the
//! negative log-probability of its positive under a softmax over all `B`
//! logits, computed max-shifted so large `|phi|` (tau defaults to 0.02, a
//! 50x blow-up) cannot overflow. The shift also keeps the single-precision
//! training path usable.

use crate::error::{Error, Result};
use crate::real::Real;

/// The logits of one query: its positive plus `B-1` negatives, with the
/// temperature that produced them. Construction enforces `tau > 0` and
/// finiteness of every logit.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchSimilarities<T: Real = f64> {
    phi_pos: T,
    phi_neg: Vec<T>,
    tau: T,
}

impl<T: Real> BatchSimilarities<T> {
    pub fn new(phi_pos: T, phi_neg: Vec<T>, tau: T) -> Result<Self> {
        if !(tau > T::zero()) || !tau.is_finite() {
            return Err(Error::Domain(format!(
                "temperature must be a positive finite real, got {tau}"
            )));
        }
        if !phi_pos.is_finite() || phi_neg.iter().any(|p| !p.is_finite()) {
            return Err(Error::Domain("non-finite logit".into()));
        }
        Ok(Self {
            phi_pos,
            phi_neg,
            tau,
        })
    }

    pub fn phi_pos(&self) -> T {
        self.phi_pos
    }

    pub fn phi_neg(&self) -> &[T] {
        &self.phi_neg
    }

    pub fn tau(&self) -> T {
        self.tau
    }

    /// Batch size `B` (positive included).
    pub fn len(&self) -> usize {
        self.phi_neg.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false // there is always the positive
    }
}

/// Softmax responsibilities over the batch logits. `p_pos + sum(p_neg) = 1`
/// up to rounding. `p_neg_reassigned` is filled by the hard-negative
/// amplification stage, never here.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchProbabilities<T: Real = f64> {
    pub p_pos: T,
    pub p_neg: Vec<T>,
    pub p_neg_reassigned: Option<Vec<T>>,
}

/// Temperature scaling of an aggregate similarity into a logit.
pub fn phi<T: Real>(s_final: T, tau: T) -> Result<T> {
    if !(tau > T::zero()) || !tau.is_finite() {
        return Err(Error::Domain(format!(
            "temperature must be a positive finite real, got {tau}"
        )));
    }
    if !s_final.is_finite() {
        return Err(Error::Domain("non-finite similarity".into()));
    }
    Ok(s_final / tau)
}

// One max-shifted pass shared by loss and probabilities so that
// `infonce_loss == -ln(p_pos)` holds to rounding, not just in exact math.
fn shifted_parts<T: Real>(b: &BatchSimilarities<T>) -> (T, T) {
    let m = b
        .phi_neg
        .iter()
        .copied()
        .fold(b.phi_pos, T::max);
    let mut sum = (b.phi_pos - m).exp();
    for &p in &b.phi_neg {
        sum = sum + (p - m).exp();
    }
    (m, sum)
}

/// `-ln softmax(phi_pos)` over the batch. Nonnegative; exactly zero when
/// there are no negatives.
pub fn infonce_loss<T: Real>(b: &BatchSimilarities<T>) -> T {
    let (m, sum) = shifted_parts(b);
    m + sum.ln() - b.phi_pos
}

/// Softmax responsibilities of the positive and each negative.
pub fn classification_probs<T: Real>(b: &BatchSimilarities<T>) -> BatchProbabilities<T> {
    let (m, sum) = shifted_parts(b);
    BatchProbabilities {
        p_pos: (b.phi_pos - m).exp() / sum,
        p_neg: b.phi_neg.iter().map(|&p| (p - m).exp() / sum).collect(),
        p_neg_reassigned: None,
    }
}
