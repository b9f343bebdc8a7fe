//! Per-step guidance arithmetic.
//!
//! For sequence `m` at step `i` the guided scores are
//!
//! ```text
//! tilde_m = gamma * lg_m  -  sum_{n != m} gamma_{m,n} * lg_n
//! ```
//!
//! where `lg_n` are the next-token log-probabilities of sequence `n` under its
//! own prompt and partial generation. Exponentiating and renormalizing gives
//! `P_m^gamma / prod_n P_n^gamma_{m,n}`. The weights `gamma_{m,n}` are zero on
//! the diagonal and for finished sequences, and split a fixed budget
//! uniformly over the chosen contrast group.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::logits::{is_neg_inf, LogitError, LogitVector, NEG_INF};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GuidanceError {
    #[error("invalid guidance config: {0}")]
    InvalidConfig(String),
    #[error("sequence {0} is not active")]
    Inactive(usize),
    #[error("sequence index {index} out of range for {total} sequences")]
    OutOfRange { index: usize, total: usize },
    #[error("invalid (class, repeat) = ({class}, {repeat}) for K={num_classes}, R={repeats}")]
    InvalidClassRepeat {
        class: usize,
        repeat: usize,
        num_classes: usize,
        repeats: usize,
    },
    #[error(transparent)]
    Logits(#[from] LogitError),
}

/// Which generations contrast against which.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceMode {
    /// Every other active sequence, regardless of class.
    Uniform,
    /// Only sequences of other classes.
    Cross,
    /// Only other repeats of the same class.
    Intra,
    /// Same-class and other-class groups with separate budgets.
    Hybrid,
}

impl GuidanceMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            GuidanceMode::Uniform => "uniform",
            GuidanceMode::Cross => "cross",
            GuidanceMode::Intra => "intra",
            GuidanceMode::Hybrid => "hybrid",
        }
    }
}

/// Whether provider scores are renormalized to log-probabilities before
/// combination, or combined as raw logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LogitSpace {
    #[default]
    LogProbs,
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    /// Exponent on the sequence's own distribution.
    pub gamma: f64,
    /// `gamma - delta` is the total contrast weight (uniform, cross, intra).
    pub delta: f64,
    /// Hybrid only: total weight on same-class contrasts.
    pub gamma_intra: Option<f64>,
    /// Hybrid only: total weight on other-class contrasts.
    pub gamma_cross: Option<f64>,
    /// Plausibility threshold; `None` disables masking.
    pub alpha: Option<f64>,
    pub mode: GuidanceMode,
    /// Parallel generations per class.
    pub repeat: usize,
    #[serde(default)]
    pub logit_space: LogitSpace,
}

impl GuidanceConfig {
    pub fn new(mode: GuidanceMode, gamma: f64, delta: f64) -> Self {
        GuidanceConfig {
            gamma,
            delta,
            gamma_intra: None,
            gamma_cross: None,
            alpha: None,
            mode,
            repeat: 1,
            logit_space: LogitSpace::LogProbs,
        }
    }

    pub fn hybrid(gamma: f64, gamma_intra: f64, gamma_cross: f64) -> Self {
        GuidanceConfig {
            gamma_intra: Some(gamma_intra),
            gamma_cross: Some(gamma_cross),
            ..Self::new(GuidanceMode::Hybrid, gamma, gamma)
        }
    }

    pub fn with_alpha(mut self, alpha: Option<f64>) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_repeat(mut self, repeat: usize) -> Self {
        self.repeat = repeat;
        self
    }

    pub fn validate(&self) -> Result<(), GuidanceError> {
        let bad = |m: String| Err(GuidanceError::InvalidConfig(m));
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return bad(format!("gamma must be > 0, got {}", self.gamma));
        }
        if !(self.delta.is_finite() && self.delta >= 0.0 && self.delta <= self.gamma) {
            return bad(format!(
                "delta must lie in [0, gamma={}], got {}",
                self.gamma, self.delta
            ));
        }
        if let Some(a) = self.alpha {
            if !(0.0..=1.0).contains(&a) {
                return bad(format!("alpha must lie in [0, 1], got {a}"));
            }
        }
        if self.repeat < 1 {
            return bad("repeat must be >= 1".into());
        }
        if self.mode == GuidanceMode::Hybrid {
            match (self.gamma_intra, self.gamma_cross) {
                (Some(i), Some(c)) if i.is_finite() && c.is_finite() && i >= 0.0 && c >= 0.0 => {}
                (Some(_), Some(_)) => return bad("gamma_intra and gamma_cross must be >= 0".into()),
                _ => return bad("hybrid mode requires gamma_intra and gamma_cross".into()),
            }
        }
        Ok(())
    }
}

/// Sequences that have not yet emitted EOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActiveSet {
    flags: Vec<bool>,
    count: usize,
}

impl ActiveSet {
    pub fn all(total: usize) -> Self {
        ActiveSet {
            flags: vec![true; total],
            count: total,
        }
    }

    pub fn from_flags(flags: Vec<bool>) -> Self {
        let count = flags.iter().filter(|&&f| f).count();
        ActiveSet { flags, count }
    }

    pub fn total(&self) -> usize {
        self.flags.len()
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn contains(&self, m: usize) -> bool {
        self.flags.get(m).copied().unwrap_or(false)
    }

    pub fn members(&self) -> impl Iterator<Item = usize> + '_ {
        self.flags
            .iter()
            .enumerate()
            .filter_map(|(i, &f)| f.then_some(i))
    }

    /// Removing is the only mutation, so membership never grows.
    pub fn deactivate(&mut self, m: usize) {
        if let Some(f) = self.flags.get_mut(m) {
            if *f {
                *f = false;
                self.count -= 1;
            }
        }
    }
}

/// Contrast weights `gamma_{m,n}` for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaMatrix {
    weights: Vec<Vec<f64>>,
    step: usize,
}

impl GammaMatrix {
    /// Rows for inactive targets are all zero.
    pub fn build(
        cfg: &GuidanceConfig,
        class_of: &[usize],
        active: &ActiveSet,
        step: usize,
    ) -> Result<Self, GuidanceError> {
        let total = active.total();
        let mut weights = vec![vec![0.0; total]; total];
        for m in active.members() {
            weights[m] = partition_weights(m, class_of, active, cfg)?;
        }
        Ok(GammaMatrix { weights, step })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn size(&self) -> usize {
        self.weights.len()
    }

    pub fn get(&self, m: usize, n: usize) -> f64 {
        self.weights[m][n]
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m]
    }

    pub fn column_sum(&self, n: usize) -> f64 {
        self.weights.iter().map(|row| row[n]).sum()
    }
}

/// Splits `total` evenly over the active members of `group`, writing into
/// `row`.
fn split_uniform(row: &mut [f64], group: &[usize], total: f64) {
    if group.is_empty() {
        return;
    }
    let w = total / group.len() as f64;
    for &n in group {
        row[n] = w;
    }
}

/// `(gamma - delta) / (M_active - 1)` on every other active sequence.
pub fn uniform_weights(
    m: usize,
    active: &ActiveSet,
    gamma: f64,
    delta: f64,
) -> Result<Vec<f64>, GuidanceError> {
    if m >= active.total() {
        return Err(GuidanceError::OutOfRange {
            index: m,
            total: active.total(),
        });
    }
    if !active.contains(m) {
        return Err(GuidanceError::Inactive(m));
    }
    let mut row = vec![0.0; active.total()];
    let others: Vec<usize> = active.members().filter(|&n| n != m).collect();
    split_uniform(&mut row, &others, gamma - delta);
    Ok(row)
}

/// Weight row for target `m` under `cfg.mode`, grouping sequences by
/// `class_of`. Groups without active members contribute nothing.
pub fn partition_weights(
    m: usize,
    class_of: &[usize],
    active: &ActiveSet,
    cfg: &GuidanceConfig,
) -> Result<Vec<f64>, GuidanceError> {
    if cfg.mode == GuidanceMode::Uniform {
        return uniform_weights(m, active, cfg.gamma, cfg.delta);
    }
    if class_of.len() != active.total() {
        return Err(GuidanceError::InvalidConfig(format!(
            "class_of has {} entries for {} sequences",
            class_of.len(),
            active.total()
        )));
    }
    if m >= active.total() {
        return Err(GuidanceError::OutOfRange {
            index: m,
            total: active.total(),
        });
    }
    if !active.contains(m) {
        return Err(GuidanceError::Inactive(m));
    }
    let own = class_of[m];
    let (intra, cross): (Vec<usize>, Vec<usize>) = active
        .members()
        .filter(|&n| n != m)
        .partition(|&n| class_of[n] == own);
    let mut row = vec![0.0; active.total()];
    let budget = cfg.gamma - cfg.delta;
    match cfg.mode {
        GuidanceMode::Cross => split_uniform(&mut row, &cross, budget),
        GuidanceMode::Intra => split_uniform(&mut row, &intra, budget),
        GuidanceMode::Hybrid => {
            split_uniform(&mut row, &intra, cfg.gamma_intra.unwrap_or(0.0));
            split_uniform(&mut row, &cross, cfg.gamma_cross.unwrap_or(0.0));
        }
        GuidanceMode::Uniform => unreachable!(),
    }
    Ok(row)
}

/// Sequence-to-class map for the K·R layout: index `k * R + r` (0-based)
/// belongs to class `k`.
pub fn class_layout(num_classes: usize, repeat: usize) -> Vec<usize> {
    (0..num_classes * repeat).map(|m| m / repeat).collect()
}

/// [`partition_weights`] addressed by 0-based (class, repeat) in the K·R
/// layout.
pub fn partition_weights_kr(
    class: usize,
    repeat_index: usize,
    num_classes: usize,
    active: &ActiveSet,
    cfg: &GuidanceConfig,
) -> Result<Vec<f64>, GuidanceError> {
    let r = cfg.repeat;
    if class >= num_classes || repeat_index >= r || active.total() != num_classes * r {
        return Err(GuidanceError::InvalidClassRepeat {
            class,
            repeat: repeat_index,
            num_classes,
            repeats: r,
        });
    }
    partition_weights(
        class * r + repeat_index,
        &class_layout(num_classes, r),
        active,
        cfg,
    )
}

/// `gamma * numerator - sum_n weights[n] * contrasts[n]`, entrywise.
///
/// Tokens impossible under the numerator stay impossible whatever the
/// contrasts say.
pub fn combine_logits(
    numerator: &LogitVector,
    contrasts: &[&LogitVector],
    weights: &[f64],
    gamma: f64,
) -> Result<LogitVector, LogitError> {
    if contrasts.len() != weights.len() {
        return Err(LogitError::LengthMismatch {
            expected: contrasts.len(),
            got: weights.len(),
        });
    }
    let len = numerator.len();
    for c in contrasts {
        c.check_len(len)?;
    }
    let mut out: Vec<f64> = numerator.values().iter().map(|&v| gamma * v).collect();
    for (c, &w) in contrasts.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        for (o, &v) in out.iter_mut().zip(c.values()) {
            *o -= w * v;
        }
    }
    for (o, &v) in out.iter_mut().zip(numerator.values()) {
        if is_neg_inf(v) {
            *o = NEG_INF;
        }
    }
    Ok(LogitVector::from_parts_unchecked(out, false))
}

/// Entrywise mean of log-probabilities, i.e. the log of the pointwise
/// geometric mean (not renormalized).
pub fn geometric_mean_logprobs(vectors: &[&LogitVector]) -> Result<LogitVector, LogitError> {
    let first = vectors.first().ok_or(LogitError::Empty)?;
    let len = first.len();
    for v in vectors {
        v.check_len(len)?;
    }
    let n = vectors.len() as f64;
    let out = (0..len)
        .map(|j| {
            if vectors.iter().any(|v| is_neg_inf(v.values()[j])) {
                NEG_INF
            } else {
                vectors.iter().map(|v| v.values()[j]).sum::<f64>() / n
            }
        })
        .collect();
    Ok(LogitVector::from_parts_unchecked(out, false))
}

/// Tokens whose probability is at least `alpha` times the most likely
/// token's. Ties at the threshold are kept. `None` keeps everything.
pub fn plausible_set(base: &LogitVector, alpha: Option<f64>) -> Vec<bool> {
    let Some(alpha) = alpha else {
        return vec![true; base.len()];
    };
    let probs = match normalize(base) {
        Ok(n) => n.probs(),
        Err(_) => return vec![true; base.len()],
    };
    let max = probs.iter().copied().fold(0.0, f64::max);
    let threshold = alpha * max;
    probs.iter().map(|&p| p >= threshold).collect()
}

/// Sets masked-out entries to [`NEG_INF`].
pub fn apply_plausibility(tilde: &LogitVector, mask: &[bool]) -> Result<LogitVector, LogitError> {
    tilde.check_len(mask.len())?;
    if !mask.iter().any(|&k| k) {
        return Err(LogitError::EmptyMask);
    }
    let out = tilde
        .values()
        .iter()
        .zip(mask)
        .map(|(&v, &keep)| if keep { v } else { NEG_INF })
        .collect();
    Ok(LogitVector::from_parts_unchecked(
        out,
        tilde.is_normalized(),
    ))
}

/// Log-softmax with max subtraction.
pub fn normalize(tilde: &LogitVector) -> Result<LogitVector, LogitError> {
    let max = tilde
        .values()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if tilde.is_empty() || is_neg_inf(max) {
        return Err(LogitError::AllNegInf);
    }
    let sum: f64 = tilde
        .values()
        .iter()
        .filter(|v| !is_neg_inf(**v))
        .map(|&v| (v - max).exp())
        .sum();
    let lse = max + sum.ln();
    let out = tilde
        .values()
        .iter()
        .map(|&v| if is_neg_inf(v) { NEG_INF } else { v - lse })
        .collect();
    Ok(LogitVector::from_parts_unchecked(out, true))
}
