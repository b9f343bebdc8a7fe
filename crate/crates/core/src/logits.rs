//! Per-step score vectors over the vocabulary.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Token index into a [`crate::model::Vocabulary`].
pub type TokenId = u32;

/// Stand-in for `-inf`.
///
/// Every masked or impossible entry carries exactly this value. It is large
/// enough that `exp(x - max)` underflows to `0.0` for any finite max, and
/// small enough that scaling by a guidance weight never overflows to `-inf`
/// (which would turn `-inf - -inf` into NaN).
pub const NEG_INF: f64 = -1.0e30;

/// Entries at or below this value are treated as impossible.
pub(crate) const NEG_INF_THRESHOLD: f64 = -1.0e29;

#[inline]
pub fn is_neg_inf(v: f64) -> bool {
    v <= NEG_INF_THRESHOLD
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LogitError {
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("non-finite score {value} at index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("every entry is -inf")]
    AllNegInf,
    #[error("empty input")]
    Empty,
    #[error("plausibility mask keeps no tokens")]
    EmptyMask,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Scores for every vocabulary entry at one decoding step.
///
/// `normalized` marks log-probability form (`exp(values)` sums to one).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitVector {
    values: Vec<f64>,
    normalized: bool,
}

impl LogitVector {
    /// Validates entries: NaN and `+inf` are rejected, `-inf` (or anything
    /// below the sentinel threshold) is mapped to [`NEG_INF`].
    pub fn new(values: Vec<f64>, normalized: bool) -> Result<Self, LogitError> {
        let mut values = values;
        for (index, v) in values.iter_mut().enumerate() {
            if v.is_nan() || *v == f64::INFINITY {
                return Err(LogitError::NonFinite { index, value: *v });
            }
            if is_neg_inf(*v) {
                *v = NEG_INF;
            }
        }
        Ok(LogitVector { values, normalized })
    }

    pub fn log_probs(values: Vec<f64>) -> Result<Self, LogitError> {
        Self::new(values, true)
    }

    pub fn raw(values: Vec<f64>) -> Result<Self, LogitError> {
        Self::new(values, false)
    }

    /// Log-probabilities from plain probabilities; zeros become [`NEG_INF`].
    pub fn from_probs(probs: &[f64]) -> Result<Self, LogitError> {
        let values = probs
            .iter()
            .map(|&p| if p > 0.0 { p.ln() } else { NEG_INF })
            .collect();
        Self::new(values, true)
    }

    pub(crate) fn from_parts_unchecked(values: Vec<f64>, normalized: bool) -> Self {
        LogitVector { values, normalized }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// `exp` of each entry. Only meaningful for normalized vectors.
    pub fn probs(&self) -> Vec<f64> {
        self.values
            .iter()
            .map(|&v| if is_neg_inf(v) { 0.0 } else { v.exp() })
            .collect()
    }

    /// Lowest-index argmax.
    pub fn argmax(&self) -> Option<TokenId> {
        let mut best: Option<(usize, f64)> = None;
        for (i, &v) in self.values.iter().enumerate() {
            match best {
                Some((_, b)) if v <= b => {}
                _ => best = Some((i, v)),
            }
        }
        best.map(|(i, _)| i as TokenId)
    }

    pub(crate) fn check_len(&self, expected: usize) -> Result<(), LogitError> {
        if self.values.len() != expected {
            return Err(LogitError::LengthMismatch {
                expected,
                got: self.values.len(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_nan_and_pos_inf() {
        assert!(LogitVector::raw(vec![0.0, f64::NAN]).is_err());
        assert!(LogitVector::raw(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn maps_neg_inf_to_sentinel() {
        let v = LogitVector::raw(vec![f64::NEG_INFINITY, 1.0]).unwrap();
        assert_eq!(v.values()[0], NEG_INF);
        assert_eq!(v.probs()[0], 0.0);
        assert_eq!((NEG_INF - 0.0f64).exp(), 0.0);
    }

    #[test]
    fn argmax_ties_pick_lowest_id() {
        let v = LogitVector::raw(vec![0.5, 0.5, 0.0]).unwrap();
        assert_eq!(v.argmax(), Some(0));
    }
}
