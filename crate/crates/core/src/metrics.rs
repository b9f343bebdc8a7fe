//! Lexical diversity metrics over whitespace-tokenized corpora.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("corpus needs at least {needed} texts, got {got}")]
    TooFewTexts { needed: usize, got: usize },
    #[error("n must be >= 1")]
    InvalidN,
    #[error("no text has at least {0} tokens")]
    TooShort(usize),
    #[error("tagger failed: {0}")]
    Tagger(String),
}

pub fn words(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

fn ngram_counts<'a, 'b>(tokens: &'b [&'a str], n: usize) -> HashMap<&'b [&'a str], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence BLEU of `hyp` against `refs`: clipped n-gram precisions for
/// n = 1..=max_n with uniform weights, no smoothing, and the brevity penalty
/// against the reference length closest to the hypothesis (shorter wins
/// ties). Any zero precision makes the score 0. Orders longer than the
/// hypothesis have no n-grams and an undefined precision; they are left out
/// of the geometric mean.
pub fn sentence_bleu(hyp: &[&str], refs: &[Vec<&str>], max_n: usize) -> f64 {
    if hyp.is_empty() || refs.is_empty() {
        return 0.0;
    }
    let orders = max_n.min(hyp.len());
    let mut log_sum = 0.0;
    for n in 1..=orders {
        let hyp_counts = ngram_counts(hyp, n);
        let total: usize = hyp_counts.values().sum();
        let mut max_ref: HashMap<&[&str], usize> = HashMap::new();
        for r in refs {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let clipped: usize = hyp_counts
            .iter()
            .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
        if clipped == 0 {
            return 0.0;
        }
        log_sum += (clipped as f64 / total as f64).ln();
    }
    let c = hyp.len();
    let r = refs
        .iter()
        .map(Vec::len)
        .min_by_key(|&len| (len.abs_diff(c), len))
        .unwrap_or(0);
    let bp = if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    bp * (log_sum / orders as f64).exp()
}

/// Mean BLEU of each text against all the others.
pub fn self_bleu<S: AsRef<str>>(texts: &[S], max_n: usize) -> Result<f64, MetricsError> {
    if max_n < 1 {
        return Err(MetricsError::InvalidN);
    }
    if texts.len() < 2 {
        return Err(MetricsError::TooFewTexts {
            needed: 2,
            got: texts.len(),
        });
    }
    let tokenized: Vec<Vec<&str>> = texts.iter().map(|t| words(t.as_ref())).collect();
    let mut sum = 0.0;
    for (i, hyp) in tokenized.iter().enumerate() {
        let refs: Vec<Vec<&str>> = tokenized
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, r)| r.clone())
            .collect();
        sum += sentence_bleu(hyp, &refs, max_n);
    }
    Ok(sum / tokenized.len() as f64)
}

fn entropy_bits<I: IntoIterator<Item = usize>>(counts: I) -> f64 {
    let counts: Vec<usize> = counts.into_iter().collect();
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.log2()
        })
        .sum();
    // -0.0 for single-outcome distributions
    h.max(0.0)
}

/// Shannon entropy in bits of the word unigram distribution.
pub fn token_entropy<S: AsRef<str>>(texts: &[S]) -> Result<f64, MetricsError> {
    if texts.is_empty() {
        return Err(MetricsError::TooFewTexts { needed: 1, got: 0 });
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in texts {
        for w in words(t.as_ref()) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    Ok(entropy_bits(counts.into_values()))
}

/// Unique n-grams over total n-grams across the corpus.
pub fn distinct_n<S: AsRef<str>>(texts: &[S], n: usize) -> Result<f64, MetricsError> {
    if n < 1 {
        return Err(MetricsError::InvalidN);
    }
    if texts.is_empty() {
        return Err(MetricsError::TooFewTexts { needed: 1, got: 0 });
    }
    let mut seen = std::collections::HashSet::new();
    let mut total = 0usize;
    for t in texts {
        let w = words(t.as_ref());
        if w.len() >= n {
            for g in w.windows(n) {
                total += 1;
                seen.insert(g.join(" "));
            }
        }
    }
    if total == 0 {
        return Err(MetricsError::TooShort(n));
    }
    Ok(seen.len() as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntitySpan {
    pub kind: String,
    pub surface: String,
}

/// Span tagger hook; plug an external NER system in here.
pub trait EntityTagger {
    fn tag(&self, text: &str) -> Result<Vec<EntitySpan>, MetricsError>;
}

/// Maximal runs of capitalized words, all typed `ENT`. Leading and trailing
/// punctuation is stripped from each word before the check.
#[derive(Debug, Clone, Copy, Default)]
pub struct CapitalizationTagger;

pub const REFERENCE_ENTITY_TYPE: &str = "ENT";

impl EntityTagger for CapitalizationTagger {
    fn tag(&self, text: &str) -> Result<Vec<EntitySpan>, MetricsError> {
        let mut spans = Vec::new();
        let mut run: Vec<&str> = Vec::new();
        let flush = |run: &mut Vec<&str>, spans: &mut Vec<EntitySpan>| {
            if !run.is_empty() {
                spans.push(EntitySpan {
                    kind: REFERENCE_ENTITY_TYPE.into(),
                    surface: run.join(" "),
                });
                run.clear();
            }
        };
        for raw in text.split_whitespace() {
            let w = raw.trim_matches(|c: char| !c.is_alphanumeric());
            if w.chars().next().is_some_and(char::is_uppercase) {
                run.push(w);
            } else {
                flush(&mut run, &mut spans);
            }
            // punctuation after a word closes the run
            if !run.is_empty() && raw.ends_with(|c: char| !c.is_alphanumeric()) {
                flush(&mut run, &mut spans);
            }
        }
        flush(&mut run, &mut spans);
        Ok(spans)
    }
}

/// Per entity type, the entropy in bits of its surface-form distribution.
pub fn entity_entropy<S: AsRef<str>>(
    texts: &[S],
    tagger: &dyn EntityTagger,
) -> Result<BTreeMap<String, f64>, MetricsError> {
    let mut by_type: BTreeMap<String, HashMap<String, usize>> = BTreeMap::new();
    for t in texts {
        for span in tagger.tag(t.as_ref())? {
            *by_type
                .entry(span.kind)
                .or_default()
                .entry(span.surface)
                .or_insert(0) += 1;
        }
    }
    Ok(by_type
        .into_iter()
        .map(|(k, c)| (k, entropy_bits(c.into_values())))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub self_bleu_5: Option<f64>,
    pub token_entropy: f64,
    pub entity_entropy: BTreeMap<String, f64>,
    pub distinct_1: Option<f64>,
    pub distinct_2: Option<f64>,
    pub n_texts: usize,
    /// Not computed; always null.
    pub mauve: Option<f64>,
}

/// Full report with the reference tagger. Self-BLEU is null for a single
/// text and distinct-n is null when no text reaches length n.
pub fn compute_report<S: AsRef<str>>(texts: &[S]) -> Result<MetricsReport, MetricsError> {
    let optional = |r: Result<f64, MetricsError>| match r {
        Ok(v) => Ok(Some(v)),
        Err(MetricsError::TooShort(_)) | Err(MetricsError::TooFewTexts { needed: 2, .. }) => {
            Ok(None)
        }
        Err(e) => Err(e),
    };
    Ok(MetricsReport {
        token_entropy: token_entropy(texts)?,
        self_bleu_5: optional(self_bleu(texts, 5))?,
        entity_entropy: entity_entropy(texts, &CapitalizationTagger)?,
        distinct_1: optional(distinct_n(texts, 1))?,
        distinct_2: optional(distinct_n(texts, 2))?,
        n_texts: texts.len(),
        mauve: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bleu_identities() {
        let dup = ["the cat sat on the mat", "the cat sat on the mat"];
        assert_eq!(self_bleu(&dup, 5).unwrap(), 1.0);
        let disjoint = ["a b c d e", "f g h i j"];
        assert_eq!(self_bleu(&disjoint, 5).unwrap(), 0.0);
        assert!(self_bleu(&["only one"], 5).is_err());
        // shorter than max_n: only the defined orders count
        assert_eq!(self_bleu(&["a b c", "a b c"], 5).unwrap(), 1.0);
    }

    #[test]
    fn bleu_hand_case() {
        // max_n = 2
        // "a b c" vs {"a b d", "a c"}: p1 = 3/3, p2 = 1/2, closest ref len 3 -> bp 1
        //   bleu = sqrt(1/2)
        // "a b d" vs {"a b c", "a c"}: p1 = 2/3, p2 = 1/2, bp 1 -> sqrt(1/3)
        // "a c"   vs {"a b c", "a b d"}: p1 = 1, p2 = 0 -> 0
        let texts = ["a b c", "a b d", "a c"];
        let expected = (0.5f64.sqrt() + (1.0f64 / 3.0).sqrt()) / 3.0;
        assert!((self_bleu(&texts, 2).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn brevity_penalty_applies() {
        let hyp = words("a b");
        let refs = vec![words("a b c d")];
        let v = sentence_bleu(&hyp, &refs, 1);
        assert!((v - (1.0f64 - 2.0).exp()).abs() < 1e-15);
    }

    #[test]
    fn clipping_limits_repeats() {
        let hyp = words("the the the the");
        let refs = vec![words("the cat")];
        // p1 = 1/4, c > r so bp = 1
        assert!((sentence_bleu(&hyp, &refs, 1) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn entropy_cases() {
        assert_eq!(token_entropy(&["x x x"]).unwrap(), 0.0);
        assert_eq!(token_entropy(&["a b", "c d"]).unwrap(), 2.0);
        // counts a:2 b:1 c:1
        let expected = -(0.5f64 * 0.5f64.log2() + 2.0 * 0.25 * 0.25f64.log2());
        assert!((token_entropy(&["a b a c"]).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn distinct_cases() {
        assert_eq!(distinct_n(&["a b c"], 1).unwrap(), 1.0);
        assert_eq!(distinct_n(&["a b", "a b"], 1).unwrap(), 0.5);
        assert_eq!(distinct_n(&["a b", "a b"], 2).unwrap(), 0.5);
        assert_eq!(distinct_n(&["a b"], 3), Err(MetricsError::TooShort(3)));
    }

    #[test]
    fn reference_tagger() {
        let spans = CapitalizationTagger
            .tag("I met New York Giants fans, then Paris.")
            .unwrap();
        let s: Vec<&str> = spans.iter().map(|s| s.surface.as_str()).collect();
        assert_eq!(s, vec!["I", "New York Giants", "Paris"]);
    }

    #[test]
    fn entity_entropy_cases() {
        assert!(entity_entropy(&["no entities here"], &CapitalizationTagger)
            .unwrap()
            .is_empty());
        let one = entity_entropy(&["saw Paris", "saw Paris"], &CapitalizationTagger).unwrap();
        assert_eq!(one["ENT"], 0.0);
        let two = entity_entropy(&["saw Paris", "saw Rome"], &CapitalizationTagger).unwrap();
        assert_eq!(two["ENT"], 1.0);
    }

    #[test]
    fn report_json_keys() {
        let r = compute_report(&["a b c", "a b c"]).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        for k in [
            "self_bleu_5",
            "token_entropy",
            "entity_entropy",
            "distinct_1",
            "distinct_2",
            "n_texts",
            "mauve",
        ] {
            assert!(v.get(k).is_some(), "missing {k}");
        }
        assert_eq!(v["self_bleu_5"], 1.0);
        assert!(v["mauve"].is_null());
    }

    fn corpus() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec(
            prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d"]), 1..8)
                .prop_map(|w| w.join(" ")),
            2..6,
        )
    }

    proptest! {
        #[test]
        fn self_bleu_permutation_invariant(texts in corpus(), rot in 0usize..6) {
            let mut shuffled = texts.clone();
            let k = rot % shuffled.len();
            shuffled.rotate_left(k);
            shuffled.reverse();
            let a = self_bleu(&texts, 3).unwrap();
            let b = self_bleu(&shuffled, 3).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        // Equal lengths keep the brevity penalty at 1 and every text long
        // enough to score, so a duplicate can only add matches.
        #[test]
        fn duplicate_does_not_lower_self_bleu(
            texts in prop::collection::vec(
                prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d"]), 4)
                    .prop_map(|w| w.join(" ")),
                2..6,
            ),
            pick in 0usize..6,
        ) {
            let mut more = texts.clone();
            more.push(texts[pick % texts.len()].clone());
            prop_assert!(self_bleu(&more, 3).unwrap() >= self_bleu(&texts, 3).unwrap() - 1e-12);
        }

        #[test]
        fn token_entropy_bounded(texts in corpus()) {
            let vocab: std::collections::HashSet<&str> =
                texts.iter().flat_map(|t| t.split_whitespace()).collect();
            let h = token_entropy(&texts).unwrap();
            prop_assert!(h >= 0.0);
            prop_assert!(h <= (vocab.len() as f64).log2() + 1e-12);
        }
    }
}
