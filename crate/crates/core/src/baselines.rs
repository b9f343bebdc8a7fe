//! Reference decoders sharing the provider and sampling stack.
//!
//! [`fewgen_generate`] samples directly from `P(. | prompt, x_<i)`.
//! [`cfg_generate`] tilts that distribution by contrast prompts that are all
//! fed the *same* partial generation `x_<i`:
//!
//! ```text
//! x_i ~ P(. | prompt, x_<i)^(gamma + 1) / prod_c P(. | prompt_c, x_<i)^(gamma / C)
//! ```
//!
//! so every step costs `C + 1` forward passes.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::guidance::{GuidanceConfig, LogitSpace};
use crate::lockstep::{
    guided_distribution, lockstep_generate_with, scaled_scores, to_working_space, SamplerError,
};
use crate::logits::{LogitVector, TokenId};
use crate::model::Model;
use crate::model::Vocabulary;
use crate::orchestrator::{build_prompt_batch, OrchestratorError, PromptBatch, TaskSpec};
use crate::sampling::{sample_token, sequence_rng, SamplingParams};
use crate::trace::{weighted_contrast_term, ContrastTrace};

/// How CFG picks contrast prompts inside a K·R prompt batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContrastPromptRule {
    /// Every prompt of every other class.
    OtherLabel,
    /// The other repeats of the same class.
    IntraRepeat,
    /// Every other prompt in the batch.
    Hybrid,
}

impl ContrastPromptRule {
    pub fn as_str(&self) -> &'static str {
        match self {
            ContrastPromptRule::OtherLabel => "cross",
            ContrastPromptRule::IntraRepeat => "intra",
            ContrastPromptRule::Hybrid => "hybrid",
        }
    }

    /// Contrast prompt indices for target `m`.
    pub fn contrast_indices(&self, m: usize, class_of: &[usize]) -> Vec<usize> {
        let own = class_of[m];
        (0..class_of.len())
            .filter(|&n| n != m)
            .filter(|&n| match self {
                ContrastPromptRule::OtherLabel => class_of[n] != own,
                ContrastPromptRule::IntraRepeat => class_of[n] == own,
                ContrastPromptRule::Hybrid => true,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfgConfig {
    /// Guidance strength. Default exponents are `gamma + 1` on the main
    /// prompt and `gamma` (split evenly) on the contrast prompts.
    pub gamma: f64,
    /// Overrides the main-prompt exponent.
    #[serde(default)]
    pub numerator_exponent: Option<f64>,
    /// Overrides the total contrast exponent.
    #[serde(default)]
    pub denominator_exponent: Option<f64>,
    pub contrast_prompt_rule: ContrastPromptRule,
    pub alpha: Option<f64>,
    pub repeat: usize,
    #[serde(default)]
    pub logit_space: LogitSpace,
}

impl CfgConfig {
    pub fn new(gamma: f64, rule: ContrastPromptRule) -> Self {
        CfgConfig {
            gamma,
            numerator_exponent: None,
            denominator_exponent: None,
            contrast_prompt_rule: rule,
            alpha: None,
            repeat: 1,
            logit_space: LogitSpace::LogProbs,
        }
    }

    pub fn numerator_exponent(&self) -> f64 {
        self.numerator_exponent.unwrap_or(self.gamma + 1.0)
    }

    pub fn denominator_exponent(&self) -> f64 {
        self.denominator_exponent.unwrap_or(self.gamma)
    }

    pub fn validate(&self) -> Result<(), SamplerError> {
        let bad = |m: String| Err(SamplerError::Config(m));
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return bad(format!("cfg gamma must be >= 0, got {}", self.gamma));
        }
        if !(self.numerator_exponent().is_finite() && self.numerator_exponent() > 0.0) {
            return bad("cfg numerator exponent must be > 0".into());
        }
        if !(self.denominator_exponent().is_finite() && self.denominator_exponent() >= 0.0) {
            return bad("cfg denominator exponent must be >= 0".into());
        }
        if let Some(a) = self.alpha {
            if !(0.0..=1.0).contains(&a) {
                return bad(format!("alpha must lie in [0, 1], got {a}"));
            }
        }
        if self.repeat < 1 {
            return bad("repeat must be >= 1".into());
        }
        Ok(())
    }
}

/// One generated sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationOutput {
    pub tokens: Vec<TokenId>,
    pub truncated: bool,
    /// Single-sequence contrast trace.
    pub trace: ContrastTrace,
    pub passes: u64,
}

pub fn fewgen_generate(
    model: &Model,
    prompt: &[TokenId],
    params: &SamplingParams,
) -> Result<GenerationOutput, SamplerError> {
    fewgen_generate_stream(model, prompt, params, 0, LogitSpace::LogProbs)
}

/// FewGen drawing from RNG stream `stream`, so it can be compared
/// token-for-token against sequence `stream` of a lockstep run.
pub fn fewgen_generate_stream(
    model: &Model,
    prompt: &[TokenId],
    params: &SamplingParams,
    stream: u64,
    space: LogitSpace,
) -> Result<GenerationOutput, SamplerError> {
    params.validate().map_err(SamplerError::Config)?;
    let mut rng = sequence_rng(params.seed, stream);
    let start = model.passes();
    let mut tokens = Vec::new();
    let mut trace = ContrastTrace::new(1, crate::trace::DEFAULT_TRACE_BETA);
    let eos = model.eos_id();
    let mut truncated = true;
    for step in 0..params.max_tokens {
        let ctx = [prompt, tokens.as_slice()].concat();
        let lg = model
            .next_logits(&ctx)
            .map_err(|source| SamplerError::Model { step, source })?;
        let lg = to_working_space(lg, space)?;
        let dist = guided_distribution(&lg, &[], &[], 1.0, None)?;
        trace.record(0, &scaled_scores(&lg, 1.0), &vec![0.0; lg.len()]);
        let t = sample_token(&dist, params, &mut rng)?;
        tokens.push(t);
        if t == eos {
            truncated = false;
            break;
        }
    }
    Ok(GenerationOutput {
        tokens,
        truncated,
        trace,
        passes: model.passes() - start,
    })
}

/// Per-step CFG distribution given the main-prompt and contrast-prompt
/// scores (already in working space).
pub fn cfg_step_distribution(
    main: &LogitVector,
    contrasts: &[&LogitVector],
    cfg: &CfgConfig,
) -> Result<LogitVector, SamplerError> {
    let w = if contrasts.is_empty() {
        0.0
    } else {
        cfg.denominator_exponent() / contrasts.len() as f64
    };
    let weights = vec![w; contrasts.len()];
    Ok(guided_distribution(
        main,
        contrasts,
        &weights,
        cfg.numerator_exponent(),
        cfg.alpha,
    )?)
}

pub fn cfg_generate(
    model: &Model,
    prompt: &[TokenId],
    contrast_prompts: &[Vec<TokenId>],
    cfg: &CfgConfig,
    params: &SamplingParams,
) -> Result<GenerationOutput, SamplerError> {
    cfg_generate_stream(
        model,
        prompt,
        contrast_prompts,
        cfg,
        params,
        0,
        crate::trace::DEFAULT_TRACE_BETA,
        &mut |_, _| {},
    )
}

/// CFG with an explicit RNG stream, trace decay and a per-step hook that
/// sees `(step, distribution)`.
#[allow(clippy::too_many_arguments)]
pub fn cfg_generate_stream(
    model: &Model,
    prompt: &[TokenId],
    contrast_prompts: &[Vec<TokenId>],
    cfg: &CfgConfig,
    params: &SamplingParams,
    stream: u64,
    trace_beta: f64,
    on_step: &mut dyn FnMut(usize, &LogitVector),
) -> Result<GenerationOutput, SamplerError> {
    cfg.validate()?;
    params.validate().map_err(SamplerError::Config)?;
    if contrast_prompts.is_empty() {
        return Err(SamplerError::Config(
            "cfg needs at least one contrast prompt".into(),
        ));
    }
    let mut rng = sequence_rng(params.seed, stream);
    let start = model.passes();
    let eos = model.eos_id();
    let mut tokens: Vec<TokenId> = Vec::new();
    let mut trace = ContrastTrace::new(1, trace_beta);
    let mut truncated = true;
    let c = contrast_prompts.len() as f64;
    for step in 0..params.max_tokens {
        let mut contexts = Vec::with_capacity(contrast_prompts.len() + 1);
        contexts.push([prompt, tokens.as_slice()].concat());
        for p in contrast_prompts {
            contexts.push([p.as_slice(), tokens.as_slice()].concat());
        }
        let fetched = model
            .batch_next_logits(&contexts)
            .map_err(|source| SamplerError::Model { step, source })?;
        let work = fetched
            .into_iter()
            .map(|v| to_working_space(v, cfg.logit_space))
            .collect::<Result<Vec<_>, _>>()?;
        let (main, rest) = work.split_first().expect("non-empty batch");
        let refs: Vec<&LogitVector> = rest.iter().collect();
        let dist = cfg_step_distribution(main, &refs, cfg)?;
        let weights = vec![cfg.denominator_exponent() / c; refs.len()];
        trace.record(
            0,
            &scaled_scores(main, cfg.numerator_exponent()),
            &weighted_contrast_term(&refs, &weights, main.len()),
        );
        on_step(step, &dist);
        let t = sample_token(&dist, params, &mut rng)?;
        tokens.push(t);
        if t == eos {
            truncated = false;
            break;
        }
    }
    Ok(GenerationOutput {
        tokens,
        truncated,
        trace,
        passes: model.passes() - start,
    })
}

/// Paired CorrSynth / CFG traces over the same prompts and seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceReport {
    pub corrsynth: ContrastTrace,
    pub cfg: ContrastTrace,
    pub prompts: PromptBatch,
}

impl TraceReport {
    pub fn row_count(&self) -> usize {
        self.corrsynth.row_count() + self.cfg.row_count()
    }

    /// `method,sequence_index,step,raw_diff,ema_diff`
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "method,sequence_index,step,raw_diff,ema_diff")?;
        for (name, t) in [("corrsynth", &self.corrsynth), ("cfg", &self.cfg)] {
            for (m, s, r, e) in t.rows() {
                writeln!(w, "{name},{m},{s},{r},{e}")?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
}

/// Runs lockstep CorrSynth over a K·R prompt batch and CFG on each prompt
/// of the same batch with identical sampling streams.
pub fn compare_trace(
    model: &Model,
    vocab: &Vocabulary,
    task: &TaskSpec,
    corr_cfg: &GuidanceConfig,
    cfg_cfg: &CfgConfig,
    params: &SamplingParams,
    trace_beta: f64,
) -> Result<TraceReport, TraceError> {
    let mut prompt_rng = crate::orchestrator::prompt_rng(params.seed, 0);
    let batch = build_prompt_batch(task, corr_cfg.repeat, &mut prompt_rng)?;
    let ids = batch
        .encode(task.tokenizer, vocab)
        .map_err(OrchestratorError::from)?;
    let corr = lockstep_generate_with(
        model,
        &ids,
        corr_cfg,
        &batch.class_of,
        params,
        trace_beta,
        &mut |_: &crate::lockstep::StepView<'_>| {},
    )
    .map_err(|e| e.source)?;
    let mut cfg_trace = ContrastTrace::new(ids.len(), trace_beta);
    for m in 0..ids.len() {
        let contrasts: Vec<Vec<TokenId>> = cfg_cfg
            .contrast_prompt_rule
            .contrast_indices(m, &batch.class_of)
            .into_iter()
            .map(|n| ids[n].clone())
            .collect();
        let out = cfg_generate_stream(
            model,
            &ids[m],
            &contrasts,
            cfg_cfg,
            params,
            m as u64,
            trace_beta,
            &mut |_, _| {},
        )?;
        cfg_trace.raw[m] = out.trace.raw.into_iter().next().unwrap_or_default();
        cfg_trace.ema[m] = out.trace.ema.into_iter().next().unwrap_or_default();
    }
    Ok(TraceReport {
        corrsynth: corr.trace,
        cfg: cfg_trace,
        prompts: batch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::GuidanceMode;
    use crate::lockstep::lockstep_generate;
    use crate::model::train_ngram;

    // </s>=0 <unk>=1 a=2 b=3 c=4
    fn pair_model() -> Model {
        let vocab = Vocabulary::from_token_stream(["a", "b", "c"]);
        Model::new(train_ngram(&[vec![2, 3], vec![2, 3]], vocab, 1, 0.0).unwrap())
    }

    fn richer_model() -> Model {
        let vocab = Vocabulary::from_token_stream(["a", "b", "c"]);
        let corpus = vec![vec![2, 3, 4], vec![4, 3], vec![3, 2, 2, 4], vec![2, 4, 3]];
        Model::new(train_ngram(&corpus, vocab, 1, 0.2).unwrap())
    }

    fn greedy() -> SamplingParams {
        SamplingParams {
            greedy: true,
            max_tokens: 10,
            ..Default::default()
        }
    }

    #[test]
    fn fewgen_greedy_follows_bigram() {
        let out = fewgen_generate(&pair_model(), &[2], &greedy()).unwrap();
        assert_eq!(out.tokens, vec![3, 0]);
        assert!(!out.truncated);
    }

    #[test]
    fn fewgen_counts_one_pass_per_token() {
        let m = richer_model();
        let p = SamplingParams {
            seed: 5,
            max_tokens: 30,
            ..Default::default()
        };
        let out = fewgen_generate(&m, &[2], &p).unwrap();
        assert_eq!(out.passes, out.tokens.len() as u64);
        assert_eq!(m.passes(), out.passes);
    }

    #[test]
    fn fewgen_equals_single_sequence_lockstep() {
        let m = richer_model();
        for seed in 0..20 {
            let p = SamplingParams {
                seed,
                top_p: 0.9,
                max_tokens: 15,
                ..Default::default()
            };
            let few = fewgen_generate(&m, &[3], &p).unwrap();
            let cfg = GuidanceConfig::new(GuidanceMode::Uniform, 1.0, 1.0);
            let lock = lockstep_generate(&m, &[vec![3]], &cfg, &[0], &p).unwrap();
            assert_eq!(few.tokens, lock.sequences[0]);
        }
    }

    #[test]
    fn cfg_gamma_zero_is_fewgen() {
        let m = richer_model();
        let cfg = CfgConfig::new(0.0, ContrastPromptRule::OtherLabel);
        for seed in 0..20 {
            let p = SamplingParams {
                seed,
                max_tokens: 15,
                ..Default::default()
            };
            let few = fewgen_generate(&m, &[2], &p).unwrap();
            let c = cfg_generate(&m, &[2], &[vec![4]], &cfg, &p).unwrap();
            assert_eq!(few.tokens, c.tokens);
        }
    }

    #[test]
    fn cfg_pass_count() {
        let m = richer_model();
        let cfg = CfgConfig::new(1.0, ContrastPromptRule::OtherLabel);
        let p = SamplingParams {
            seed: 2,
            max_tokens: 20,
            ..Default::default()
        };
        let out = cfg_generate(&m, &[2], &[vec![3], vec![4]], &cfg, &p).unwrap();
        assert_eq!(out.passes, 3 * out.tokens.len() as u64);
    }

    #[test]
    fn cfg_requires_a_contrast() {
        let cfg = CfgConfig::new(1.0, ContrastPromptRule::OtherLabel);
        assert!(cfg_generate(&richer_model(), &[2], &[], &cfg, &greedy()).is_err());
    }

    #[test]
    fn contrast_rules() {
        let class_of = [0, 0, 1, 1, 2, 2];
        assert_eq!(
            ContrastPromptRule::OtherLabel.contrast_indices(0, &class_of),
            vec![2, 3, 4, 5]
        );
        assert_eq!(
            ContrastPromptRule::IntraRepeat.contrast_indices(3, &class_of),
            vec![2]
        );
        assert_eq!(
            ContrastPromptRule::Hybrid
                .contrast_indices(5, &class_of)
                .len(),
            5
        );
    }
}
