//! Temperature, nucleus truncation and per-sequence random streams.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::guidance::normalize;
use crate::logits::{is_neg_inf, LogitError, LogitVector, TokenId};

// Absorbs rounding in exp(ln p) when the cumulative mass should hit top_p
// exactly.
const CUMULATIVE_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub top_p: f64,
    pub temperature: f64,
    /// Argmax decoding (the zero-temperature limit). Ignores `top_p`,
    /// `temperature` and the RNG.
    #[serde(default)]
    pub greedy: bool,
    pub max_tokens: usize,
    pub seed: u64,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams {
            top_p: 0.9,
            temperature: 1.0,
            greedy: false,
            max_tokens: 256,
            seed: 0,
        }
    }
}

impl SamplingParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(format!("top_p must lie in (0, 1], got {}", self.top_p));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(format!("temperature must be > 0, got {}", self.temperature));
        }
        if self.max_tokens < 1 {
            return Err("max_tokens must be >= 1".into());
        }
        Ok(())
    }
}

/// Independent random stream for sequence `stream` under `seed`.
pub fn sequence_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// The distribution nucleus sampling actually draws from: `(token, prob)`
/// pairs sorted by descending probability (ties by ascending id), truncated
/// to the smallest prefix holding at least `top_p` of the mass, renormalized.
pub fn nucleus_distribution(
    dist: &LogitVector,
    top_p: f64,
    temperature: f64,
) -> Result<Vec<(TokenId, f64)>, LogitError> {
    if !(top_p > 0.0 && top_p <= 1.0) {
        return Err(LogitError::InvalidArgument(format!("top_p {top_p}")));
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(LogitError::InvalidArgument(format!(
            "temperature {temperature}"
        )));
    }
    let tempered = if temperature == 1.0 {
        normalize(dist)?
    } else {
        let scaled: Vec<f64> = dist
            .values()
            .iter()
            .map(|&v| if is_neg_inf(v) { v } else { v / temperature })
            .collect();
        normalize(&LogitVector::from_parts_unchecked(scaled, false))?
    };
    let mut ranked: Vec<(TokenId, f64)> = tempered
        .probs()
        .into_iter()
        .enumerate()
        .filter(|(_, p)| *p > 0.0)
        .map(|(i, p)| (i as TokenId, p))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut cumulative = 0.0;
    let mut keep = ranked.len();
    for (i, (_, p)) in ranked.iter().enumerate() {
        cumulative += p;
        if cumulative >= top_p - CUMULATIVE_SLACK {
            keep = i + 1;
            break;
        }
    }
    ranked.truncate(keep);
    let total: f64 = ranked.iter().map(|(_, p)| p).sum();
    for entry in ranked.iter_mut() {
        entry.1 /= total;
    }
    Ok(ranked)
}

/// Lowest-id argmax over non-masked entries.
pub fn greedy_token(dist: &LogitVector) -> Result<TokenId, LogitError> {
    if dist.values().iter().all(|&v| is_neg_inf(v)) {
        return Err(LogitError::AllNegInf);
    }
    dist.argmax().ok_or(LogitError::Empty)
}

pub fn nucleus_sample<R: Rng + ?Sized>(
    dist: &LogitVector,
    top_p: f64,
    temperature: f64,
    rng: &mut R,
) -> Result<TokenId, LogitError> {
    let support = nucleus_distribution(dist, top_p, temperature)?;
    let u: f64 = rng.gen();
    let mut cumulative = 0.0;
    for &(token, p) in &support {
        cumulative += p;
        if u < cumulative {
            return Ok(token);
        }
    }
    Ok(support.last().ok_or(LogitError::AllNegInf)?.0)
}

/// Greedy or nucleus per `params`.
pub fn sample_token<R: Rng + ?Sized>(
    dist: &LogitVector,
    params: &SamplingParams,
    rng: &mut R,
) -> Result<TokenId, LogitError> {
    if params.greedy {
        greedy_token(dist)
    } else {
        nucleus_sample(dist, params.top_p, params.temperature, rng)
    }
}
