use super::{LogitProvider, ModelError, Vocabulary};
use crate::logits::{LogitVector, TokenId, NEG_INF};

pub const SEP_TOKEN: &str = "<sep>";

/// Synthetic model whose generations always stop after exactly `length`
/// tokens (the last being EOS).
///
/// The generated part of a prefix is whatever follows the last `<sep>` token,
/// so prompts must end in `<sep>`. Before the final position the model is
/// uniform over its content tokens; EOS and `<sep>` have probability zero.
#[derive(Debug, Clone)]
pub struct FixedLengthProvider {
    vocab: Vocabulary,
    length: usize,
}

impl FixedLengthProvider {
    /// Vocabulary: `</s>`, `<sep>`, then `w0 .. w{content_tokens-1}`.
    pub fn new(length: usize, content_tokens: usize) -> Result<Self, ModelError> {
        if length < 1 {
            return Err(ModelError::InvalidVocabulary("length must be >= 1".into()));
        }
        if content_tokens < 1 {
            return Err(ModelError::InvalidVocabulary(
                "need at least one content token".into(),
            ));
        }
        let mut tokens = vec![super::EOS_TOKEN.to_string(), SEP_TOKEN.to_string()];
        tokens.extend((0..content_tokens).map(|i| format!("w{i}")));
        Ok(FixedLengthProvider {
            vocab: Vocabulary::new(tokens, 0)?,
            length,
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn sep_id(&self) -> TokenId {
        1
    }

    fn generated_len(&self, prefix: &[TokenId]) -> usize {
        match prefix.iter().rposition(|&t| t == self.sep_id()) {
            Some(pos) => prefix.len() - pos - 1,
            None => prefix.len(),
        }
    }

    fn log_probs(&self, prefix: &[TokenId]) -> Vec<f64> {
        let v = self.vocab.size();
        let mut out = vec![NEG_INF; v];
        if self.generated_len(prefix) + 1 >= self.length {
            out[self.vocab.eos_id() as usize] = 0.0;
        } else {
            let lp = -((v - 2) as f64).ln();
            for slot in out.iter_mut().skip(2) {
                *slot = lp;
            }
        }
        out
    }
}

impl LogitProvider for FixedLengthProvider {
    fn vocab_size(&self) -> usize {
        self.vocab.size()
    }

    fn eos_id(&self) -> TokenId {
        self.vocab.eos_id()
    }

    fn describe(&self) -> String {
        format!(
            "fixed-length(length={}, vocab={})",
            self.length,
            self.vocab.size()
        )
    }

    fn evaluate(&self, prefixes: &[&[TokenId]]) -> Result<Vec<LogitVector>, ModelError> {
        Ok(prefixes
            .iter()
            .map(|p| LogitVector::from_parts_unchecked(self.log_probs(p), true))
            .collect())
    }
}
