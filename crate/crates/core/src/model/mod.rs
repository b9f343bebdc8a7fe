//! Autoregressive model abstraction.
//!
//! Every algorithm in this crate consumes a model only through
//! [`Model::batch_next_logits`]: a list of token prefixes in, one score vector
//! per prefix out. Two concrete providers ship with the crate, an add-k
//! smoothed [`NGramModel`] and a [`RemoteProvider`] that speaks a small JSON
//! protocol over HTTP. [`FixedLengthProvider`] is a synthetic model used for
//! forward-pass accounting.

mod fixed;
mod ngram;
mod remote;
mod vocab;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use thiserror::Error;

use crate::logits::{LogitError, LogitVector, TokenId};

pub use fixed::{FixedLengthProvider, SEP_TOKEN};
pub use ngram::{train_ngram, NGramModel};
pub use remote::{LogitsRequest, LogitsResponse, RemoteProvider, WireScore, LOGITS_PATH};
pub use vocab::{TokenizerKind, Vocabulary, EOS_TOKEN, UNK_TOKEN};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),
    #[error("token {0:?} not in vocabulary")]
    UnknownToken(String),
    #[error("prefix {index}: token id {token} out of range for vocabulary of {vocab_size}")]
    InvalidToken {
        index: usize,
        token: TokenId,
        vocab_size: usize,
    },
    #[error("empty prefix batch")]
    EmptyBatch,
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error("n-gram order must be >= 1, got {0}")]
    InvalidOrder(usize),
    #[error("smoothing must be finite and >= 0, got {0}")]
    InvalidSmoothing(f64),
    #[error("prefix {index}: expected {expected} scores, got {got}")]
    LengthMismatch {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("expected {expected} score vectors, got {got}")]
    CountMismatch { expected: usize, got: usize },
    #[error("prefix {index}: {source}")]
    BadScores {
        index: usize,
        #[source]
        source: LogitError,
    },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("server returned HTTP {0}")]
    HttpStatus(u16),
    #[error("malformed reply: {0}")]
    Malformed(String),
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Cumulative number of single-prefix logit evaluations.
#[derive(Debug, Default)]
pub struct PassCounter {
    forward_passes: AtomicU64,
}

impl PassCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self) -> u64 {
        self.forward_passes.load(Ordering::SeqCst)
    }

    pub(crate) fn add(&self, n: u64) {
        self.forward_passes.fetch_add(n, Ordering::SeqCst);
    }
}

/// Something that maps token prefixes to next-token scores.
///
/// Implementations must be pure: the same prefix always yields bit-identical
/// scores. Prefixes passed in are already validated against
/// [`LogitProvider::vocab_size`].
pub trait LogitProvider: Send + Sync {
    fn vocab_size(&self) -> usize;

    fn eos_id(&self) -> TokenId;

    /// Short human-readable descriptor recorded in run manifests.
    fn describe(&self) -> String;

    fn evaluate(&self, prefixes: &[&[TokenId]]) -> Result<Vec<LogitVector>, ModelError>;
}

/// A provider plus its pass counter. Cheap to clone; clones share the counter.
#[derive(Clone)]
pub struct Model {
    provider: Arc<dyn LogitProvider>,
    counter: Arc<PassCounter>,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("provider", &self.provider.describe())
            .field("forward_passes", &self.counter.get())
            .finish()
    }
}

impl Model {
    pub fn new<P: LogitProvider + 'static>(provider: P) -> Self {
        Self::from_arc(Arc::new(provider))
    }

    pub fn from_arc(provider: Arc<dyn LogitProvider>) -> Self {
        Model {
            provider,
            counter: Arc::new(PassCounter::new()),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.provider.vocab_size()
    }

    pub fn eos_id(&self) -> TokenId {
        self.provider.eos_id()
    }

    pub fn describe(&self) -> String {
        self.provider.describe()
    }

    pub fn passes(&self) -> u64 {
        self.counter.get()
    }

    pub fn counter(&self) -> &PassCounter {
        &self.counter
    }

    pub fn next_logits(&self, prefix: &[TokenId]) -> Result<LogitVector, ModelError> {
        let mut out = self.batch_next_logits(&[prefix])?;
        Ok(out.pop().expect("one vector per prefix"))
    }

    /// One forward pass per prefix. The counter only moves when the whole
    /// batch succeeds.
    pub fn batch_next_logits<P: AsRef<[TokenId]>>(
        &self,
        prefixes: &[P],
    ) -> Result<Vec<LogitVector>, ModelError> {
        if prefixes.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let vocab_size = self.provider.vocab_size();
        let views: Vec<&[TokenId]> = prefixes.iter().map(AsRef::as_ref).collect();
        for (index, p) in views.iter().enumerate() {
            if let Some(&token) = p.iter().find(|&&t| t as usize >= vocab_size) {
                return Err(ModelError::InvalidToken {
                    index,
                    token,
                    vocab_size,
                });
            }
        }
        let out = self.provider.evaluate(&views)?;
        if out.len() != views.len() {
            return Err(ModelError::CountMismatch {
                expected: views.len(),
                got: out.len(),
            });
        }
        for (index, v) in out.iter().enumerate() {
            if v.len() != vocab_size {
                return Err(ModelError::LengthMismatch {
                    index,
                    expected: vocab_size,
                    got: v.len(),
                });
            }
        }
        self.counter.add(views.len() as u64);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Model {
        let vocab = Vocabulary::from_token_stream(["a", "b", "c"]);
        let corpus = vec![vec![2, 3], vec![2, 4]];
        Model::new(train_ngram(&corpus, vocab, 1, 0.0).unwrap())
    }

    #[test]
    fn batch_counts_every_prefix() {
        let m = tiny();
        m.batch_next_logits(&[vec![2], vec![], vec![3, 2]]).unwrap();
        assert_eq!(m.passes(), 3);
        m.next_logits(&[2]).unwrap();
        assert_eq!(m.passes(), 4);
    }

    #[test]
    fn singleton_batch_matches_next_logits() {
        let m = tiny();
        let a = m.batch_next_logits(&[vec![2u32]]).unwrap();
        let b = m.next_logits(&[2]).unwrap();
        assert_eq!(a, vec![b]);
    }

    #[test]
    fn duplicate_prefixes_give_identical_vectors() {
        let m = tiny();
        let out = m.batch_next_logits(&[vec![2u32, 3], vec![2, 3]]).unwrap();
        assert_eq!(out[0].values(), out[1].values());
    }

    #[test]
    fn rejects_out_of_range_tokens_with_index() {
        let m = tiny();
        let err = m.batch_next_logits(&[vec![2u32], vec![99]]).unwrap_err();
        assert!(matches!(
            err,
            ModelError::InvalidToken {
                index: 1,
                token: 99,
                ..
            }
        ));
        assert_eq!(m.passes(), 0);
    }

    #[test]
    fn empty_batch_is_an_error() {
        let m = tiny();
        let none: Vec<Vec<TokenId>> = vec![];
        assert!(matches!(
            m.batch_next_logits(&none),
            Err(ModelError::EmptyBatch)
        ));
    }

    #[test]
    fn clones_share_the_counter() {
        let m = tiny();
        let m2 = m.clone();
        m2.next_logits(&[]).unwrap();
        assert_eq!(m.passes(), 1);
    }
}
