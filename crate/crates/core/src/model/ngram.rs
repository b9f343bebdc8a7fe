use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::{LogitProvider, ModelError, Vocabulary};
use crate::logits::{LogitVector, TokenId, NEG_INF};

const MAGIC: &[u8; 8] = b"CSNGRAM\0";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
struct ContextCounts {
    total: u64,
    next: BTreeMap<TokenId, u64>,
}

/// Add-k smoothed n-gram model over a fixed vocabulary.
///
/// `order` is the context length: an order-1 model conditions on the single
/// previous token. Counts are collected for every context length from 0 up
/// to `order`, so an empty prefix sees the corpus unigram distribution and a
/// short prefix sees its own exact context. Contexts never seen in training
/// back off to the uniform distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct NGramModel {
    order: usize,
    smoothing: f64,
    vocab: Vocabulary,
    counts: BTreeMap<Vec<TokenId>, ContextCounts>,
}

/// Every sequence gets EOS appended (unless it already ends with it) so the
/// model learns where sequences stop.
pub fn train_ngram(
    corpus: &[Vec<TokenId>],
    vocab: Vocabulary,
    order: usize,
    smoothing: f64,
) -> Result<NGramModel, ModelError> {
    if corpus.is_empty() {
        return Err(ModelError::EmptyCorpus);
    }
    if order < 1 {
        return Err(ModelError::InvalidOrder(order));
    }
    if !smoothing.is_finite() || smoothing < 0.0 {
        return Err(ModelError::InvalidSmoothing(smoothing));
    }
    let eos = vocab.eos_id();
    let mut counts: BTreeMap<Vec<TokenId>, ContextCounts> = BTreeMap::new();
    for (index, seq) in corpus.iter().enumerate() {
        if let Some(&token) = seq.iter().find(|&&t| t as usize >= vocab.size()) {
            return Err(ModelError::InvalidToken {
                index,
                token,
                vocab_size: vocab.size(),
            });
        }
        let mut seq = seq.clone();
        if seq.last() != Some(&eos) {
            seq.push(eos);
        }
        for j in 0..seq.len() {
            for len in 0..=order.min(j) {
                let entry = counts.entry(seq[j - len..j].to_vec()).or_default();
                entry.total += 1;
                *entry.next.entry(seq[j]).or_default() += 1;
            }
        }
    }
    Ok(NGramModel {
        order,
        smoothing,
        vocab,
        counts,
    })
}

impl NGramModel {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn context_count(&self) -> usize {
        self.counts.len()
    }

    /// Normalized next-token log-probabilities.
    pub fn log_probs(&self, prefix: &[TokenId]) -> Vec<f64> {
        let v = self.vocab.size();
        let ctx_len = self.order.min(prefix.len());
        let ctx = &prefix[prefix.len() - ctx_len..];
        match self.counts.get(ctx) {
            Some(c) if c.total > 0 => {
                let denom = c.total as f64 + self.smoothing * v as f64;
                (0..v as TokenId)
                    .map(|w| {
                        let n = c.next.get(&w).copied().unwrap_or(0) as f64 + self.smoothing;
                        if n > 0.0 {
                            (n / denom).ln()
                        } else {
                            NEG_INF
                        }
                    })
                    .collect()
            }
            _ => vec![-(v as f64).ln(); v],
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }

    /// Little-endian layout: magic, version, order, smoothing, eos id,
    /// vocabulary strings, then contexts with their next-token counts.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), ModelError> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.order as u32).to_le_bytes())?;
        w.write_all(&self.smoothing.to_le_bytes())?;
        w.write_all(&self.vocab.eos_id().to_le_bytes())?;
        w.write_all(&(self.vocab.size() as u32).to_le_bytes())?;
        for t in self.vocab.tokens() {
            w.write_all(&(t.len() as u32).to_le_bytes())?;
            w.write_all(t.as_bytes())?;
        }
        w.write_all(&(self.counts.len() as u64).to_le_bytes())?;
        for (ctx, c) in &self.counts {
            w.write_all(&(ctx.len() as u32).to_le_bytes())?;
            for id in ctx {
                w.write_all(&id.to_le_bytes())?;
            }
            w.write_all(&(c.next.len() as u32).to_le_bytes())?;
            for (id, n) in &c.next {
                w.write_all(&id.to_le_bytes())?;
                w.write_all(&n.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, ModelError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ModelError::Format("bad magic".into()));
        }
        let version = read_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(ModelError::Format(format!("unsupported version {version}")));
        }
        let order = read_u32(r)? as usize;
        let mut f = [0u8; 8];
        r.read_exact(&mut f)?;
        let smoothing = f64::from_le_bytes(f);
        let eos_id = read_u32(r)?;
        let n_tokens = read_u32(r)? as usize;
        let mut tokens = Vec::with_capacity(n_tokens);
        for _ in 0..n_tokens {
            let len = read_u32(r)? as usize;
            let mut s = vec![0u8; len];
            r.read_exact(&mut s)?;
            tokens.push(
                String::from_utf8(s)
                    .map_err(|e| ModelError::Format(format!("token utf-8: {e}")))?,
            );
        }
        let vocab = Vocabulary::new(tokens, eos_id)?;
        let n_ctx = read_u64(r)?;
        let mut counts = BTreeMap::new();
        for _ in 0..n_ctx {
            let len = read_u32(r)? as usize;
            let ctx = (0..len)
                .map(|_| read_u32(r))
                .collect::<Result<Vec<_>, _>>()?;
            let n_next = read_u32(r)?;
            let mut c = ContextCounts::default();
            for _ in 0..n_next {
                let id = read_u32(r)?;
                let n = read_u64(r)?;
                if id as usize >= vocab.size() {
                    return Err(ModelError::Format(format!("token id {id} out of range")));
                }
                c.total += n;
                c.next.insert(id, n);
            }
            counts.insert(ctx, c);
        }
        if order < 1 {
            return Err(ModelError::InvalidOrder(order));
        }
        if !smoothing.is_finite() || smoothing < 0.0 {
            return Err(ModelError::InvalidSmoothing(smoothing));
        }
        Ok(NGramModel {
            order,
            smoothing,
            vocab,
            counts,
        })
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, ModelError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, ModelError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

impl LogitProvider for NGramModel {
    fn vocab_size(&self) -> usize {
        self.vocab.size()
    }

    fn eos_id(&self) -> TokenId {
        self.vocab.eos_id()
    }

    fn describe(&self) -> String {
        format!(
            "ngram(order={}, smoothing={}, vocab={}, contexts={})",
            self.order,
            self.smoothing,
            self.vocab.size(),
            self.counts.len()
        )
    }

    fn evaluate(&self, prefixes: &[&[TokenId]]) -> Result<Vec<LogitVector>, ModelError> {
        Ok(prefixes
            .iter()
            .map(|p| LogitVector::from_parts_unchecked(self.log_probs(p), true))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // vocab: </s>=0 <unk>=1 a=2 b=3 c=4
    fn vocab() -> Vocabulary {
        Vocabulary::from_token_stream(["a", "b", "c"])
    }

    fn prob(m: &NGramModel, prefix: &[TokenId], w: TokenId) -> f64 {
        m.log_probs(prefix)[w as usize].exp()
    }

    #[test]
    fn repeated_pair_is_deterministic() {
        let m = train_ngram(&[vec![2, 3], vec![2, 3]], vocab(), 1, 0.0).unwrap();
        assert!((prob(&m, &[2], 3) - 1.0).abs() < 1e-15);
        assert_eq!(
            LogitVector::log_probs(m.log_probs(&[2])).unwrap().argmax(),
            Some(3)
        );
    }

    #[test]
    fn split_continuations() {
        let m = train_ngram(&[vec![2, 3], vec![2, 4]], vocab(), 1, 0.0).unwrap();
        assert!((prob(&m, &[2], 3) - 0.5).abs() < 1e-15);
        assert!((prob(&m, &[2], 4) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn empty_prefix_is_corpus_unigram() {
        // a b </s> a b </s>: six tokens, two of each of a, b, </s>
        let m = train_ngram(&[vec![2, 3], vec![2, 3]], vocab(), 1, 0.0).unwrap();
        let p: Vec<f64> = m.log_probs(&[]).iter().map(|v| v.exp()).collect();
        let expected = [1.0 / 3.0, 0.0, 1.0 / 3.0, 1.0 / 3.0, 0.0];
        for (a, b) in p.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn unseen_context_is_uniform() {
        let m = train_ngram(&[vec![2, 3]], vocab(), 2, 0.0).unwrap();
        let lp = m.log_probs(&[4, 4]);
        for v in lp {
            assert_eq!(v, -(5f64).ln());
        }
    }

    #[test]
    fn add_k_smoothing() {
        // context [a]: b twice; k=1, |V|=5 -> (2+1)/(2+5), others 1/7
        let m = train_ngram(&[vec![2, 3], vec![2, 3]], vocab(), 1, 1.0).unwrap();
        assert!((prob(&m, &[2], 3) - 3.0 / 7.0).abs() < 1e-15);
        assert!((prob(&m, &[2], 4) - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn longer_prefix_uses_trailing_context() {
        let m = train_ngram(&[vec![2, 3, 4], vec![4, 3, 2]], vocab(), 1, 0.0).unwrap();
        assert!((prob(&m, &[4, 2, 3], 4) - 0.5).abs() < 1e-15);
        assert!((prob(&m, &[4, 2, 3], 2) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            train_ngram(&[], vocab(), 1, 0.0),
            Err(ModelError::EmptyCorpus)
        ));
        assert!(matches!(
            train_ngram(&[vec![2]], vocab(), 0, 0.0),
            Err(ModelError::InvalidOrder(0))
        ));
        assert!(matches!(
            train_ngram(&[vec![2]], vocab(), 1, -1.0),
            Err(ModelError::InvalidSmoothing(_))
        ));
        assert!(train_ngram(&[vec![9]], vocab(), 1, 0.0).is_err());
    }

    #[test]
    fn binary_format_round_trips_and_is_stable() {
        let m = train_ngram(&[vec![2, 3, 4], vec![4, 4, 2]], vocab(), 2, 0.25).unwrap();
        let mut a = Vec::new();
        m.write_to(&mut a).unwrap();
        let back = NGramModel::read_from(&mut a.as_slice()).unwrap();
        assert_eq!(back, m);
        let mut b = Vec::new();
        back.write_to(&mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_magic() {
        let bytes = b"NOTAMODEL_______".to_vec();
        assert!(matches!(
            NGramModel::read_from(&mut bytes.as_slice()),
            Err(ModelError::Format(_))
        ));
    }

    proptest! {
        #[test]
        fn conditionals_sum_to_one(
            corpus in prop::collection::vec(prop::collection::vec(0u32..5, 0..6), 1..6),
            order in 1usize..4,
            k in prop_oneof![Just(0.0), 0.01f64..2.0],
            prefix in prop::collection::vec(0u32..5, 0..5),
        ) {
            let m = train_ngram(&corpus, vocab(), order, k).unwrap();
            let lp = m.log_probs(&prefix);
            let s: f64 = lp.iter().map(|v| if *v <= NEG_INF { 0.0 } else { v.exp() }).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            if k > 0.0 {
                prop_assert!(lp.iter().all(|v| *v > NEG_INF));
            }
            prop_assert_eq!(lp, m.log_probs(&prefix));
        }
    }
}
