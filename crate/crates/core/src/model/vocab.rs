use std::collections::HashMap;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::ModelError;
use crate::logits::TokenId;

pub const EOS_TOKEN: &str = "</s>";
pub const UNK_TOKEN: &str = "<unk>";

/// Ordered token strings with a designated end-of-sequence id.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    eos_id: TokenId,
    unk_id: Option<TokenId>,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens && self.eos_id == other.eos_id
    }
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>, eos_id: TokenId) -> Result<Self, ModelError> {
        if tokens.len() < 2 {
            return Err(ModelError::InvalidVocabulary(format!(
                "need at least 2 tokens, got {}",
                tokens.len()
            )));
        }
        if eos_id as usize >= tokens.len() {
            return Err(ModelError::InvalidVocabulary(format!(
                "eos id {eos_id} out of range for {} tokens",
                tokens.len()
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(ModelError::InvalidVocabulary(format!(
                    "duplicate token {t:?}"
                )));
            }
        }
        let unk_id = index.get(UNK_TOKEN).copied();
        Ok(Vocabulary {
            tokens,
            index,
            eos_id,
            unk_id,
        })
    }

    /// `</s>` at 0, `<unk>` at 1, then every token in order of first appearance.
    pub fn from_token_stream<'a, I>(tokens: I) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut list = vec![EOS_TOKEN.to_string(), UNK_TOKEN.to_string()];
        let mut seen: HashMap<String, TokenId> = HashMap::new();
        seen.insert(EOS_TOKEN.to_string(), 0);
        seen.insert(UNK_TOKEN.to_string(), 1);
        for t in tokens {
            if !seen.contains_key(t) {
                seen.insert(t.to_string(), list.len() as TokenId);
                list.push(t.to_string());
            }
        }
        Vocabulary {
            tokens: list,
            index: seen,
            eos_id: 0,
            unk_id: Some(1),
        }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn eos_id(&self) -> TokenId {
        self.eos_id
    }

    pub fn unk_id(&self) -> Option<TokenId> {
        self.unk_id
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }
}

#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    tokens: Vec<String>,
    eos_id: TokenId,
}

impl Serialize for Vocabulary {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        VocabularyRepr {
            tokens: self.tokens.clone(),
            eos_id: self.eos_id,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocabulary {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let repr = VocabularyRepr::deserialize(d)?;
        Vocabulary::new(repr.tokens, repr.eos_id).map_err(serde::de::Error::custom)
    }
}

/// How text is split into vocabulary tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerKind {
    #[default]
    Whitespace,
    Char,
}

impl TokenizerKind {
    pub fn split<'a>(&self, text: &'a str) -> Vec<&'a str> {
        match self {
            TokenizerKind::Whitespace => text.split_whitespace().collect(),
            TokenizerKind::Char => text
                .char_indices()
                .map(|(i, c)| &text[i..i + c.len_utf8()])
                .collect(),
        }
    }

    /// Unknown pieces map to `<unk>` when the vocabulary has one.
    pub fn encode(&self, text: &str, vocab: &Vocabulary) -> Result<Vec<TokenId>, ModelError> {
        self.split(text)
            .into_iter()
            .map(|piece| {
                vocab
                    .id(piece)
                    .or(vocab.unk_id())
                    .ok_or_else(|| ModelError::UnknownToken(piece.to_string()))
            })
            .collect()
    }

    /// Drops EOS, joins pieces, trims surrounding whitespace.
    pub fn decode(&self, ids: &[TokenId], vocab: &Vocabulary) -> String {
        let pieces: Vec<&str> = ids
            .iter()
            .filter(|&&id| id != vocab.eos_id())
            .filter_map(|&id| vocab.token(id))
            .collect();
        let joined = match self {
            TokenizerKind::Whitespace => pieces.join(" "),
            TokenizerKind::Char => pieces.concat(),
        };
        joined.trim().to_string()
    }
}
