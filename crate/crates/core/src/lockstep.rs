//! M-way correlated generation.
//!
//! All active sequences advance by one token per step. Each step makes one
//! batched model call covering exactly the active sequences, builds the
//! contrast weight matrix for the current active set, and for every active
//! sequence runs: combine, plausibility mask, normalize, temperature and
//! nucleus truncation, then draws from that sequence's own RNG stream. A
//! sequence that emits EOS leaves the active set and stops being contrasted
//! against from the next step on.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::guidance::{
    apply_plausibility, combine_logits, normalize, plausible_set, ActiveSet, GammaMatrix,
    GuidanceConfig, GuidanceError, GuidanceMode, LogitSpace,
};
use crate::logits::{is_neg_inf, LogitError, LogitVector, TokenId, NEG_INF};
use crate::model::{Model, ModelError};
use crate::sampling::{sample_token, sequence_rng, SamplingParams};
use crate::trace::{weighted_contrast_term, ContrastTrace, DEFAULT_TRACE_BETA};

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    #[error(transparent)]
    Logits(#[from] LogitError),
    #[error("model call failed at step {step}: {source}")]
    Model {
        step: usize,
        #[source]
        source: ModelError,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LockstepOutput {
    /// Generated tokens per sequence (prompt excluded, EOS included when
    /// emitted).
    pub sequences: Vec<Vec<TokenId>>,
    /// Stopped by `max_tokens` rather than EOS.
    pub truncated: Vec<bool>,
    pub trace: ContrastTrace,
    /// Forward passes consumed by this run.
    pub passes: u64,
    pub steps: usize,
}

/// A failed run still hands back what it generated.
#[derive(Debug, Error)]
#[error("{source}")]
pub struct LockstepError {
    pub partial: Box<LockstepOutput>,
    #[source]
    pub source: SamplerError,
}

/// Everything computed at one step, for inspection.
#[derive(Debug)]
pub struct StepView<'a> {
    pub step: usize,
    pub active: &'a ActiveSet,
    pub gamma: &'a GammaMatrix,
    /// Provider scores for each active sequence, after conversion to the
    /// working logit space.
    pub base: &'a BTreeMap<usize, LogitVector>,
    /// Guided, masked and normalized distribution each active sequence was
    /// sampled from (before temperature and nucleus truncation).
    pub distributions: &'a BTreeMap<usize, LogitVector>,
    pub tokens: &'a BTreeMap<usize, TokenId>,
}

pub trait StepObserver {
    fn on_step(&mut self, view: &StepView<'_>);
}

impl<F: FnMut(&StepView<'_>)> StepObserver for F {
    fn on_step(&mut self, view: &StepView<'_>) {
        self(view)
    }
}

struct NoObserver;

impl StepObserver for NoObserver {
    fn on_step(&mut self, _: &StepView<'_>) {}
}

pub(crate) fn to_working_space(
    v: LogitVector,
    space: LogitSpace,
) -> Result<LogitVector, LogitError> {
    match space {
        LogitSpace::LogProbs if !v.is_normalized() => normalize(&v),
        _ => Ok(v),
    }
}

pub(crate) fn scaled_scores(v: &LogitVector, factor: f64) -> Vec<f64> {
    v.values()
        .iter()
        .map(|&x| if is_neg_inf(x) { NEG_INF } else { factor * x })
        .collect()
}

/// Combine, mask by the numerator's plausible set, normalize.
pub(crate) fn guided_distribution(
    numerator: &LogitVector,
    contrasts: &[&LogitVector],
    weights: &[f64],
    gamma: f64,
    alpha: Option<f64>,
) -> Result<LogitVector, LogitError> {
    let tilde = combine_logits(numerator, contrasts, weights, gamma)?;
    let mask = plausible_set(numerator, alpha);
    normalize(&apply_plausibility(&tilde, &mask)?)
}

fn check_layout(
    cfg: &GuidanceConfig,
    class_of: &[usize],
    total: usize,
) -> Result<(), SamplerError> {
    if class_of.len() != total {
        return Err(SamplerError::Config(format!(
            "class_of has {} entries for {} prompts",
            class_of.len(),
            total
        )));
    }
    if cfg.mode == GuidanceMode::Uniform {
        return Ok(());
    }
    let mut per_class: BTreeMap<usize, usize> = BTreeMap::new();
    for &c in class_of {
        *per_class.entry(c).or_default() += 1;
    }
    if let Some((c, n)) = per_class.iter().find(|(_, &n)| n != cfg.repeat) {
        return Err(SamplerError::Config(format!(
            "{} mode expects {} sequences per class, class {c} has {n}",
            cfg.mode.as_str(),
            cfg.repeat
        )));
    }
    Ok(())
}

pub fn lockstep_generate(
    model: &Model,
    prompts: &[Vec<TokenId>],
    cfg: &GuidanceConfig,
    class_of: &[usize],
    params: &SamplingParams,
) -> Result<LockstepOutput, LockstepError> {
    lockstep_generate_with(
        model,
        prompts,
        cfg,
        class_of,
        params,
        DEFAULT_TRACE_BETA,
        &mut NoObserver,
    )
}

pub fn lockstep_generate_with(
    model: &Model,
    prompts: &[Vec<TokenId>],
    cfg: &GuidanceConfig,
    class_of: &[usize],
    params: &SamplingParams,
    trace_beta: f64,
    observer: &mut dyn StepObserver,
) -> Result<LockstepOutput, LockstepError> {
    let total = prompts.len();
    let mut out = LockstepOutput {
        sequences: vec![Vec::new(); total],
        truncated: vec![false; total],
        trace: ContrastTrace::new(total, trace_beta),
        passes: 0,
        steps: 0,
    };
    let fail = |out: LockstepOutput, source: SamplerError| LockstepError {
        partial: Box::new(out),
        source,
    };
    if total == 0 {
        return Err(fail(out, SamplerError::Config("no prompts".into())));
    }
    if let Err(e) = cfg.validate() {
        return Err(fail(out, e.into()));
    }
    if let Err(e) = params.validate() {
        return Err(fail(out, SamplerError::Config(e)));
    }
    if let Err(e) = check_layout(cfg, class_of, total) {
        return Err(fail(out, e));
    }

    let eos = model.eos_id();
    let start_passes = model.passes();
    let mut rngs: Vec<_> = (0..total)
        .map(|m| sequence_rng(params.seed, m as u64))
        .collect();
    let mut active = ActiveSet::all(total);

    for step in 0.. {
        if active.is_empty() {
            break;
        }
        if step == params.max_tokens {
            for m in active.members() {
                out.truncated[m] = true;
            }
            break;
        }
        let members: Vec<usize> = active.members().collect();
        let contexts: Vec<Vec<TokenId>> = members
            .iter()
            .map(|&m| [prompts[m].as_slice(), out.sequences[m].as_slice()].concat())
            .collect();
        let fetched = match model.batch_next_logits(&contexts) {
            Ok(v) => v,
            Err(source) => {
                out.passes = model.passes() - start_passes;
                return Err(fail(out, SamplerError::Model { step, source }));
            }
        };
        let mut base = BTreeMap::new();
        for (&m, v) in members.iter().zip(fetched) {
            match to_working_space(v, cfg.logit_space) {
                Ok(v) => {
                    base.insert(m, v);
                }
                Err(e) => return Err(fail(out, e.into())),
            }
        }
        let gamma = match GammaMatrix::build(cfg, class_of, &active, step) {
            Ok(g) => g,
            Err(e) => return Err(fail(out, e.into())),
        };

        let mut distributions = BTreeMap::new();
        let mut tokens = BTreeMap::new();
        for &m in &members {
            let others: Vec<usize> = members.iter().copied().filter(|&n| n != m).collect();
            let contrasts: Vec<&LogitVector> = others.iter().map(|n| &base[n]).collect();
            let weights: Vec<f64> = others.iter().map(|&n| gamma.get(m, n)).collect();
            let numerator = &base[&m];
            let dist =
                match guided_distribution(numerator, &contrasts, &weights, cfg.gamma, cfg.alpha) {
                    Ok(d) => d,
                    Err(e) => return Err(fail(out, e.into())),
                };
            out.trace.record(
                m,
                &scaled_scores(numerator, cfg.gamma),
                &weighted_contrast_term(&contrasts, &weights, numerator.len()),
            );
            let token = match sample_token(&dist, params, &mut rngs[m]) {
                Ok(t) => t,
                Err(e) => return Err(fail(out, e.into())),
            };
            distributions.insert(m, dist);
            tokens.insert(m, token);
        }

        observer.on_step(&StepView {
            step,
            active: &active,
            gamma: &gamma,
            base: &base,
            distributions: &distributions,
            tokens: &tokens,
        });

        for (&m, &token) in &tokens {
            out.sequences[m].push(token);
            if token == eos {
                active.deactivate(m);
            }
        }
        out.steps = step + 1;
    }
    out.passes = model.passes() - start_passes;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::class_layout;
    use crate::model::{train_ngram, Vocabulary};

    fn model() -> Model {
        let vocab = Vocabulary::from_token_stream(["a", "b", "c", "d"]);
        let corpus = vec![
            vec![2, 3, 4],
            vec![3, 4, 5, 2],
            vec![4, 2],
            vec![5, 5, 3, 2, 4],
            vec![2, 2, 3],
        ];
        Model::new(train_ngram(&corpus, vocab, 2, 0.1).unwrap())
    }

    fn params(seed: u64) -> SamplingParams {
        SamplingParams {
            top_p: 1.0,
            temperature: 1.0,
            greedy: false,
            max_tokens: 12,
            seed,
        }
    }

    #[test]
    fn passes_equal_sum_of_active_counts() {
        let m = model();
        let cfg = GuidanceConfig::new(GuidanceMode::Uniform, 1.0, 0.5);
        let prompts = vec![vec![2], vec![3], vec![4]];
        let mut active_total = 0u64;
        let mut obs = |v: &StepView<'_>| active_total += v.active.count() as u64;
        let out = lockstep_generate_with(&m, &prompts, &cfg, &[0, 1, 2], &params(3), 0.1, &mut obs)
            .unwrap();
        assert_eq!(out.passes, active_total);
        assert_eq!(m.passes(), out.passes);
    }

    #[test]
    fn deterministic_under_seed() {
        let cfg = GuidanceConfig::new(GuidanceMode::Cross, 1.0, 0.7).with_repeat(2);
        let prompts = vec![vec![2], vec![3], vec![4], vec![5]];
        let a =
            lockstep_generate(&model(), &prompts, &cfg, &class_layout(2, 2), &params(9)).unwrap();
        let b =
            lockstep_generate(&model(), &prompts, &cfg, &class_layout(2, 2), &params(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn inactive_sequences_end_in_eos_and_traces_match_lengths() {
        let cfg = GuidanceConfig::new(GuidanceMode::Uniform, 1.0, 0.2);
        let prompts = vec![vec![2], vec![3, 4], vec![]];
        let out = lockstep_generate(&model(), &prompts, &cfg, &[0, 0, 0], &params(1)).unwrap();
        for (m, seq) in out.sequences.iter().enumerate() {
            if !out.truncated[m] {
                assert_eq!(seq.last(), Some(&0));
            } else {
                assert_eq!(seq.len(), 12);
            }
            assert_eq!(out.trace.raw[m].len(), seq.len());
        }
        assert_eq!(out.steps, out.sequences.iter().map(Vec::len).max().unwrap());
    }

    #[test]
    fn finished_sequences_get_zero_weight() {
        let cfg = GuidanceConfig::new(GuidanceMode::Uniform, 1.0, 0.0);
        let prompts = vec![vec![2], vec![3], vec![4], vec![5]];
        let mut finished: Vec<usize> = Vec::new();
        let mut ok = true;
        let mut obs = |v: &StepView<'_>| {
            for &n in &finished {
                ok &= v.gamma.column_sum(n) == 0.0;
                ok &= !v.base.contains_key(&n);
            }
            for (&m, &t) in v.tokens {
                if t == 0 {
                    finished.push(m);
                }
            }
        };
        lockstep_generate_with(&model(), &prompts, &cfg, &[0; 4], &params(4), 0.1, &mut obs)
            .unwrap();
        assert!(ok);
    }

    #[test]
    fn layout_mismatch_is_config_error() {
        let cfg = GuidanceConfig::new(GuidanceMode::Cross, 1.0, 0.5).with_repeat(2);
        let err = lockstep_generate(
            &model(),
            &[vec![2], vec![3], vec![4]],
            &cfg,
            &[0, 0, 1],
            &params(0),
        )
        .unwrap_err();
        assert!(matches!(err.source, SamplerError::Config(_)));
        let err = lockstep_generate(&model(), &[vec![2]], &cfg, &[], &params(0)).unwrap_err();
        assert!(matches!(err.source, SamplerError::Config(_)));
    }

    #[test]
    fn max_tokens_truncates() {
        let cfg = GuidanceConfig::new(GuidanceMode::Uniform, 1.0, 0.5);
        let p = SamplingParams {
            max_tokens: 1,
            ..params(0)
        };
        let out = lockstep_generate(&model(), &[vec![2], vec![3]], &cfg, &[0, 1], &p).unwrap();
        for (m, s) in out.sequences.iter().enumerate() {
            assert_eq!(s.len(), 1);
            assert_eq!(out.truncated[m], s[0] != 0);
        }
    }
}
