//! Per-step contrast strength traces.
//!
//! The raw value at a step is the largest absolute difference between the
//! scaled numerator scores and the weighted contrast term, taken before
//! normalization and over entries where neither side is masked.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::logits::{is_neg_inf, LogitVector, NEG_INF};

pub const DEFAULT_TRACE_BETA: f64 = 0.1;

/// Where the difference is measured relative to log-softmax.
pub const TRACE_NORMALIZATION: &str = "pre-normalization";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastTrace {
    pub beta: f64,
    /// `raw[m][t]`: value for sequence `m` at its `t`-th generated token.
    pub raw: Vec<Vec<f64>>,
    pub ema: Vec<Vec<f64>>,
}

impl ContrastTrace {
    pub fn new(sequences: usize, beta: f64) -> Self {
        assert!(beta > 0.0 && beta <= 1.0, "trace beta must lie in (0, 1]");
        ContrastTrace {
            beta,
            raw: vec![Vec::new(); sequences],
            ema: vec![Vec::new(); sequences],
        }
    }

    pub fn sequences(&self) -> usize {
        self.raw.len()
    }

    /// Appends one value; `ema_0 = v_0`, `ema_t = beta * v_t + (1 - beta) * ema_{t-1}`.
    pub fn push(&mut self, seq: usize, value: f64) {
        let next = match self.ema[seq].last() {
            Some(&prev) => self.beta * value + (1.0 - self.beta) * prev,
            None => value,
        };
        self.raw[seq].push(value);
        self.ema[seq].push(next);
    }

    /// Records `||scaled_numerator - contrast_term||_inf` for `seq`.
    pub fn record(&mut self, seq: usize, scaled_numerator: &[f64], contrast_term: &[f64]) {
        self.push(seq, contrast_gap(scaled_numerator, contrast_term));
    }

    /// `(sequence_index, step, raw_diff, ema_diff)` rows, steps 0-based.
    pub fn rows(&self) -> impl Iterator<Item = (usize, usize, f64, f64)> + '_ {
        self.raw
            .iter()
            .zip(&self.ema)
            .enumerate()
            .flat_map(|(m, (r, e))| {
                r.iter()
                    .zip(e)
                    .enumerate()
                    .map(move |(t, (&rv, &ev))| (m, t, rv, ev))
            })
    }

    pub fn row_count(&self) -> usize {
        self.raw.iter().map(Vec::len).sum()
    }

    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "sequence_index,step,raw_diff,ema_diff")?;
        for (m, t, r, e) in self.rows() {
            writeln!(w, "{m},{t},{r},{e}")?;
        }
        Ok(())
    }
}

/// `sum_n weights[n] * contrasts[n]`, with [`NEG_INF`] wherever a contrast
/// that carries weight is masked.
pub fn weighted_contrast_term(contrasts: &[&LogitVector], weights: &[f64], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for (c, &w) in contrasts.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        for (o, &v) in out.iter_mut().zip(c.values()) {
            if is_neg_inf(v) || is_neg_inf(*o) {
                *o = NEG_INF;
            } else {
                *o += w * v;
            }
        }
    }
    out
}

/// Infinity norm of the difference, skipping masked entries.
pub fn contrast_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .filter(|(x, y)| !is_neg_inf(**x) && !is_neg_inf(**y))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ema_hand_case() {
        let mut t = ContrastTrace::new(1, 0.5);
        t.push(0, 4.0);
        t.push(0, 0.0);
        assert_eq!(t.ema[0], vec![4.0, 2.0]);
    }

    #[test]
    fn beta_one_is_raw() {
        let mut t = ContrastTrace::new(1, 1.0);
        for v in [3.0, 1.0, 7.5] {
            t.push(0, v);
        }
        assert_eq!(t.ema[0], t.raw[0]);
    }

    #[test]
    fn constant_stream_converges() {
        let mut t = ContrastTrace::new(1, 0.1);
        t.push(0, 10.0);
        for _ in 0..400 {
            t.push(0, 2.5);
        }
        assert!((t.ema[0].last().unwrap() - 2.5).abs() < 1e-9);
    }

    #[test]
    fn gap_skips_masked_entries() {
        let a = [1.0, NEG_INF, -2.0];
        let b = [0.5, 0.0, 1.0];
        assert_eq!(contrast_gap(&a, &b), 3.0);
        assert!(contrast_gap(&a, &b) >= 0.0);
    }

    #[test]
    fn contrast_term_marks_masked_contributors() {
        let a = LogitVector::raw(vec![1.0, NEG_INF]).unwrap();
        let b = LogitVector::raw(vec![3.0, 2.0]).unwrap();
        let t = weighted_contrast_term(&[&a, &b], &[0.5, 0.25], 2);
        assert_eq!(t[0], 1.25);
        assert_eq!(t[1], NEG_INF);
        let t = weighted_contrast_term(&[&a, &b], &[0.0, 1.0], 2);
        assert_eq!(t, vec![3.0, 2.0]);
    }

    #[test]
    fn csv_shape() {
        let mut t = ContrastTrace::new(2, 0.5);
        t.push(0, 1.0);
        t.push(1, 2.0);
        t.push(1, 0.0);
        let mut out = Vec::new();
        t.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 1 + 3);
        assert_eq!(text.lines().nth(3).unwrap(), "1,1,0,1");
    }
}
