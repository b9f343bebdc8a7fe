use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{LogitProvider, ModelError};
use crate::logits::{is_neg_inf, LogitVector, TokenId};

pub const LOGITS_PATH: &str = "/v1/logits";

/// Request body for `POST /v1/logits`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitsRequest {
    pub prefixes: Vec<Vec<TokenId>>,
}

/// One score on the wire: a JSON number, or the string `"-inf"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WireScore {
    Num(f64),
    Str(String),
}

impl WireScore {
    pub fn from_f64(v: f64) -> Self {
        if is_neg_inf(v) {
            WireScore::Str("-inf".to_string())
        } else {
            WireScore::Num(v)
        }
    }

    fn to_f64(&self) -> Option<f64> {
        match self {
            WireScore::Num(v) if v.is_finite() => Some(*v),
            WireScore::Str(s) if s == "-inf" => Some(f64::NEG_INFINITY),
            _ => None,
        }
    }
}

/// Reply body for `POST /v1/logits`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitsResponse {
    pub vocab_size: usize,
    pub logits: Vec<Vec<WireScore>>,
    pub normalized: bool,
}

impl LogitsResponse {
    /// Server-side helper: encode score vectors for the wire.
    pub fn from_vectors(vocab_size: usize, vectors: &[LogitVector]) -> Self {
        LogitsResponse {
            vocab_size,
            normalized: vectors.iter().all(LogitVector::is_normalized),
            logits: vectors
                .iter()
                .map(|v| v.values().iter().map(|&x| WireScore::from_f64(x)).collect())
                .collect(),
        }
    }

    /// Checks shape against the expected vocabulary and batch size and
    /// decodes scores.
    pub fn into_vectors(
        self,
        expected_vocab: usize,
        expected_count: usize,
    ) -> Result<Vec<LogitVector>, ModelError> {
        if self.vocab_size != expected_vocab {
            return Err(ModelError::Malformed(format!(
                "server vocab_size {} does not match expected {}",
                self.vocab_size, expected_vocab
            )));
        }
        if self.logits.len() != expected_count {
            return Err(ModelError::CountMismatch {
                expected: expected_count,
                got: self.logits.len(),
            });
        }
        self.logits
            .into_iter()
            .enumerate()
            .map(|(index, row)| {
                if row.len() != expected_vocab {
                    return Err(ModelError::LengthMismatch {
                        index,
                        expected: expected_vocab,
                        got: row.len(),
                    });
                }
                let values = row
                    .iter()
                    .enumerate()
                    .map(|(j, s)| {
                        s.to_f64().ok_or(ModelError::BadScores {
                            index,
                            source: crate::logits::LogitError::NonFinite {
                                index: j,
                                value: f64::NAN,
                            },
                        })
                    })
                    .collect::<Result<Vec<f64>, _>>()?;
                LogitVector::new(values, self.normalized)
                    .map_err(|source| ModelError::BadScores { index, source })
            })
            .collect()
    }
}

/// Client for a logits server speaking the `/v1/logits` JSON protocol.
///
/// The vocabulary size and EOS id are fixed at construction and every reply
/// is validated against them.
pub struct RemoteProvider {
    base_url: String,
    vocab_size: usize,
    eos_id: TokenId,
    agent: ureq::Agent,
}

impl std::fmt::Debug for RemoteProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteProvider")
            .field("base_url", &self.base_url)
            .field("vocab_size", &self.vocab_size)
            .finish()
    }
}

impl RemoteProvider {
    pub fn new(base_url: &str, vocab_size: usize, eos_id: TokenId) -> Self {
        Self::with_timeout(base_url, vocab_size, eos_id, Duration::from_secs(60))
    }

    pub fn with_timeout(
        base_url: &str,
        vocab_size: usize,
        eos_id: TokenId,
        timeout: Duration,
    ) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build();
        RemoteProvider {
            base_url: base_url.trim_end_matches('/').to_string(),
            vocab_size,
            eos_id,
            agent: ureq::Agent::new_with_config(config),
        }
    }

    pub fn url(&self) -> String {
        format!("{}{}", self.base_url, LOGITS_PATH)
    }

    /// One HTTP round trip for the whole batch.
    pub fn remote_next_logits(
        &self,
        prefixes: &[&[TokenId]],
    ) -> Result<Vec<LogitVector>, ModelError> {
        let request = LogitsRequest {
            prefixes: prefixes.iter().map(|p| p.to_vec()).collect(),
        };
        let mut response = self
            .agent
            .post(&self.url())
            .send_json(&request)
            .map_err(|e| ModelError::Transport(e.to_string()))?;
        let status = response.status().as_u16();
        if status != 200 {
            return Err(ModelError::HttpStatus(status));
        }
        let body = response
            .body_mut()
            .read_to_string()
            .map_err(|e| ModelError::Transport(e.to_string()))?;
        let reply: LogitsResponse =
            serde_json::from_str(&body).map_err(|e| ModelError::Malformed(e.to_string()))?;
        reply.into_vectors(self.vocab_size, prefixes.len())
    }
}

impl LogitProvider for RemoteProvider {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn eos_id(&self) -> TokenId {
        self.eos_id
    }

    fn describe(&self) -> String {
        format!("remote({})", self.base_url)
    }

    fn evaluate(&self, prefixes: &[&[TokenId]]) -> Result<Vec<LogitVector>, ModelError> {
        self.remote_next_logits(prefixes)
    }
}
