//! Dataset synthesis driver.
//!
//! A batch holds `K * R` prompts; prompt `k * R + r` (0-based) asks for an
//! instance of class `k` and carries its own in-context examples drawn from
//! the class-`k` seed examples. Batches run until every class has
//! `n_per_class` records.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::baselines::{cfg_generate_stream, fewgen_generate_stream, CfgConfig};
use crate::guidance::{class_layout, GuidanceConfig, GuidanceMode, LogitSpace};
use crate::lockstep::{lockstep_generate, SamplerError};
use crate::logits::TokenId;
use crate::model::{Model, ModelError, TokenizerKind, Vocabulary};
use crate::sampling::SamplingParams;
use crate::trace::DEFAULT_TRACE_BETA;

pub const LABEL_SLOT: &str = "{label}";
pub const TEXT_SLOT: &str = "{text}";

const PROMPT_TAG: u64 = 0x7072_6f6d_7074;
const SAMPLE_TAG: u64 = 0x7361_6d70_6c65;
const DROP_TAG: u64 = 0x6472_6f70;

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("class {class} ({label:?}) has {available} seed examples, need {needed}")]
    InsufficientSeeds {
        class: usize,
        label: String,
        available: usize,
        needed: usize,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedExample {
    pub id: usize,
    pub text: String,
    /// Class index into [`TaskSpec::labels`].
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    /// Label verbalizations, one per class.
    pub labels: Vec<String>,
    /// Instance template with a `{label}` slot and an optional `{text}` slot.
    pub template: String,
    pub seed_set: Vec<SeedExample>,
    /// In-context examples per prompt.
    pub shots: usize,
    #[serde(default)]
    pub tokenizer: TokenizerKind,
}

impl TaskSpec {
    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn validate(&self) -> Result<(), OrchestratorError> {
        if self.labels.len() < 2 {
            return Err(OrchestratorError::InvalidTask(format!(
                "need at least 2 labels, got {}",
                self.labels.len()
            )));
        }
        if !self.template.contains(LABEL_SLOT) {
            return Err(OrchestratorError::InvalidTask(
                "template has no {label} slot".into(),
            ));
        }
        if let Some(ex) = self.seed_set.iter().find(|e| e.label >= self.labels.len()) {
            return Err(OrchestratorError::InvalidTask(format!(
                "seed example {} has label {} outside {} classes",
                ex.id,
                ex.label,
                self.labels.len()
            )));
        }
        Ok(())
    }

    fn render(&self, class: usize, text: &str) -> String {
        let filled = self.template.replace(LABEL_SLOT, &self.labels[class]);
        if filled.contains(TEXT_SLOT) {
            filled.replace(TEXT_SLOT, text)
        } else if text.is_empty() {
            filled
        } else {
            format!("{filled} {text}")
        }
    }

    /// In-context blocks (the template filled with each example's text),
    /// a blank line between blocks, then the template with an empty text
    /// slot. Trailing whitespace is trimmed.
    pub fn render_prompt(&self, class: usize, examples: &[&SeedExample]) -> String {
        let mut blocks: Vec<String> = examples
            .iter()
            .map(|e| self.render(class, &e.text).trim_end().to_string())
            .collect();
        blocks.push(self.render(class, "").trim_end().to_string());
        blocks.join("\n\n")
    }
}

/// The K·R prompts of one lockstep batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBatch {
    pub prompts: Vec<String>,
    pub class_of: Vec<usize>,
    pub icl_ids: Vec<Vec<usize>>,
    pub fingerprints: Vec<String>,
}

impl PromptBatch {
    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn encode(
        &self,
        tokenizer: TokenizerKind,
        vocab: &Vocabulary,
    ) -> Result<Vec<Vec<TokenId>>, ModelError> {
        self.prompts
            .iter()
            .map(|p| tokenizer.encode(p, vocab))
            .collect()
    }
}

pub fn fingerprint(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sub-seed for `(tag, index)` under a run seed.
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    mix(mix(seed ^ tag) ^ index)
}

/// RNG used to draw the in-context examples of batch `batch`.
pub fn prompt_rng(seed: u64, batch: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, PROMPT_TAG, batch))
}

/// ICL examples are drawn uniformly without replacement within a prompt and
/// independently across prompts.
pub fn build_prompt_batch<R: Rng + ?Sized>(
    task: &TaskSpec,
    repeat: usize,
    rng: &mut R,
) -> Result<PromptBatch, OrchestratorError> {
    task.validate()?;
    if repeat < 1 {
        return Err(OrchestratorError::Config("repeat must be >= 1".into()));
    }
    let k = task.num_classes();
    let by_class: Vec<Vec<&SeedExample>> = (0..k)
        .map(|c| task.seed_set.iter().filter(|e| e.label == c).collect())
        .collect();
    for (class, pool) in by_class.iter().enumerate() {
        if pool.len() < task.shots {
            return Err(OrchestratorError::InsufficientSeeds {
                class,
                label: task.labels[class].clone(),
                available: pool.len(),
                needed: task.shots,
            });
        }
    }
    let class_of = class_layout(k, repeat);
    let mut batch = PromptBatch {
        prompts: Vec::with_capacity(k * repeat),
        class_of: class_of.clone(),
        icl_ids: Vec::with_capacity(k * repeat),
        fingerprints: Vec::with_capacity(k * repeat),
    };
    for &class in &class_of {
        let pool = &by_class[class];
        let chosen: Vec<&SeedExample> = sample(rng, pool.len(), task.shots)
            .into_iter()
            .map(|i| pool[i])
            .collect();
        let prompt = task.render_prompt(class, &chosen);
        batch.fingerprints.push(fingerprint(&prompt));
        batch.icl_ids.push(chosen.iter().map(|e| e.id).collect());
        batch.prompts.push(prompt);
    }
    Ok(batch)
}

/// Which decoder produces the records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum Method {
    FewGen {
        repeat: usize,
        #[serde(default)]
        logit_space: LogitSpace,
    },
    Cfg(CfgConfig),
    CorrSynth(GuidanceConfig),
}

impl Method {
    pub fn repeat(&self) -> usize {
        match self {
            Method::FewGen { repeat, .. } => *repeat,
            Method::Cfg(c) => c.repeat,
            Method::CorrSynth(c) => c.repeat,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::FewGen { .. } => "fewgen",
            Method::Cfg(_) => "cfg",
            Method::CorrSynth(_) => "corrsynth",
        }
    }

    pub fn mode(&self) -> Option<&'static str> {
        match self {
            Method::FewGen { .. } => None,
            Method::Cfg(c) => Some(c.contrast_prompt_rule.as_str()),
            Method::CorrSynth(c) => Some(c.mode.as_str()),
        }
    }
}

/// One synthetic labeled instance with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthRecord {
    pub text: String,
    pub label: usize,
    pub label_text: String,
    pub prompt_fingerprint: String,
    pub icl_ids: Vec<usize>,
    pub method: String,
    pub mode: Option<String>,
    pub gamma: Option<f64>,
    pub delta: Option<f64>,
    pub gamma_intra: Option<f64>,
    pub gamma_cross: Option<f64>,
    pub alpha: Option<f64>,
    pub repeat: usize,
    pub seed: u64,
    pub batch: usize,
    pub sequence_index: usize,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub records: Vec<SynthRecord>,
    pub batches: usize,
    pub passes: u64,
    pub warnings: Vec<String>,
}

/// A failed run keeps the records of every batch that completed.
#[derive(Debug, Error)]
#[error("synthesis failed after {completed_batches} batches: {source}")]
pub struct SynthError {
    pub partial: Vec<SynthRecord>,
    pub completed_batches: usize,
    pub passes: u64,
    #[source]
    pub source: OrchestratorError,
}

impl From<SamplerError> for OrchestratorError {
    fn from(e: SamplerError) -> Self {
        match e {
            SamplerError::Model { source, .. } => OrchestratorError::Model(source),
            other => OrchestratorError::Config(other.to_string()),
        }
    }
}

struct BatchResult {
    sequences: Vec<Vec<TokenId>>,
    truncated: Vec<bool>,
}

fn run_batch(
    model: &Model,
    ids: &[Vec<TokenId>],
    class_of: &[usize],
    method: &Method,
    params: &SamplingParams,
) -> Result<BatchResult, SamplerError> {
    match method {
        Method::CorrSynth(cfg) => {
            let out = lockstep_generate(model, ids, cfg, class_of, params).map_err(|e| e.source)?;
            Ok(BatchResult {
                sequences: out.sequences,
                truncated: out.truncated,
            })
        }
        Method::FewGen { logit_space, .. } => {
            let mut res = BatchResult {
                sequences: Vec::new(),
                truncated: Vec::new(),
            };
            for (m, prompt) in ids.iter().enumerate() {
                let out = fewgen_generate_stream(model, prompt, params, m as u64, *logit_space)?;
                res.sequences.push(out.tokens);
                res.truncated.push(out.truncated);
            }
            Ok(res)
        }
        Method::Cfg(cfg) => {
            let mut res = BatchResult {
                sequences: Vec::new(),
                truncated: Vec::new(),
            };
            for (m, prompt) in ids.iter().enumerate() {
                let contrasts: Vec<Vec<TokenId>> = cfg
                    .contrast_prompt_rule
                    .contrast_indices(m, class_of)
                    .into_iter()
                    .map(|n| ids[n].clone())
                    .collect();
                let out = cfg_generate_stream(
                    model,
                    prompt,
                    &contrasts,
                    cfg,
                    params,
                    m as u64,
                    DEFAULT_TRACE_BETA,
                    &mut |_, _| {},
                )?;
                res.sequences.push(out.tokens);
                res.truncated.push(out.truncated);
            }
            Ok(res)
        }
    }
}

fn preflight(task: &TaskSpec, method: &Method) -> Result<Vec<String>, OrchestratorError> {
    let mut warnings = Vec::new();
    match method {
        Method::CorrSynth(cfg) => {
            cfg.validate()
                .map_err(|e| OrchestratorError::Config(e.to_string()))?;
            if cfg.mode == GuidanceMode::Intra && cfg.repeat == 1 {
                warnings.push(
                    "intra mode with repeat=1: contrast group is empty, sampling from P^gamma"
                        .to_string(),
                );
            }
        }
        Method::Cfg(cfg) => {
            cfg.validate()
                .map_err(|e| OrchestratorError::Config(e.to_string()))?;
            if cfg.contrast_prompt_rule == crate::baselines::ContrastPromptRule::IntraRepeat
                && cfg.repeat == 1
            {
                return Err(OrchestratorError::Config(
                    "cfg intra contrast needs repeat >= 2".into(),
                ));
            }
        }
        Method::FewGen { repeat, .. } => {
            if *repeat < 1 {
                return Err(OrchestratorError::Config("repeat must be >= 1".into()));
            }
        }
    }
    task.validate()?;
    Ok(warnings)
}

/// Runs `ceil(n_per_class / R)` batches, each yielding `R` records per
/// class. When `R` does not divide `n_per_class`, surplus records are
/// dropped uniformly at random per class (seeded), keeping emission order.
pub fn synthesize(
    task: &TaskSpec,
    model: &Model,
    vocab: &Vocabulary,
    method: &Method,
    params: &SamplingParams,
    n_per_class: usize,
) -> Result<SynthOutput, SynthError> {
    let start = model.passes();
    let fail =
        |partial: Vec<SynthRecord>, completed: usize, source: OrchestratorError| SynthError {
            partial,
            completed_batches: completed,
            passes: model.passes() - start,
            source,
        };
    if n_per_class < 1 {
        return Err(fail(
            vec![],
            0,
            OrchestratorError::Config("n_per_class must be >= 1".into()),
        ));
    }
    let warnings = preflight(task, method).map_err(|e| fail(vec![], 0, e))?;
    for w in &warnings {
        log::warn!("{w}");
    }
    let repeat = method.repeat();
    let batches = n_per_class.div_ceil(repeat);
    let mut records = Vec::new();
    for b in 0..batches {
        let mut rng = prompt_rng(params.seed, b as u64);
        let batch =
            build_prompt_batch(task, repeat, &mut rng).map_err(|e| fail(records.clone(), b, e))?;
        let ids = batch
            .encode(task.tokenizer, vocab)
            .map_err(|e| fail(records.clone(), b, e.into()))?;
        let batch_params = SamplingParams {
            seed: derive_seed(params.seed, SAMPLE_TAG, b as u64),
            ..params.clone()
        };
        let out = run_batch(model, &ids, &batch.class_of, method, &batch_params)
            .map_err(|e| fail(records.clone(), b, e.into()))?;
        for (m, seq) in out.sequences.iter().enumerate() {
            records.push(make_record(
                task,
                vocab,
                method,
                params.seed,
                &batch,
                b,
                m,
                seq,
                out.truncated[m],
            ));
        }
        log::debug!(
            "batch {}/{} done, {} passes so far",
            b + 1,
            batches,
            model.passes() - start
        );
    }
    let records = drop_surplus(records, task.num_classes(), n_per_class, params.seed);
    Ok(SynthOutput {
        records,
        batches,
        passes: model.passes() - start,
        warnings,
    })
}

#[allow(clippy::too_many_arguments)]
fn make_record(
    task: &TaskSpec,
    vocab: &Vocabulary,
    method: &Method,
    seed: u64,
    batch: &PromptBatch,
    batch_index: usize,
    m: usize,
    seq: &[TokenId],
    truncated: bool,
) -> SynthRecord {
    let label = batch.class_of[m];
    let (gamma, delta, gamma_intra, gamma_cross, alpha) = match method {
        Method::FewGen { .. } => (None, None, None, None, None),
        Method::Cfg(c) => (Some(c.gamma), c.denominator_exponent, None, None, c.alpha),
        Method::CorrSynth(c) => (
            Some(c.gamma),
            Some(c.delta),
            c.gamma_intra,
            c.gamma_cross,
            c.alpha,
        ),
    };
    SynthRecord {
        text: task.tokenizer.decode(seq, vocab),
        label,
        label_text: task.labels[label].clone(),
        prompt_fingerprint: batch.fingerprints[m].clone(),
        icl_ids: batch.icl_ids[m].clone(),
        method: method.name().to_string(),
        mode: method.mode().map(str::to_string),
        gamma,
        delta,
        gamma_intra,
        gamma_cross,
        alpha,
        repeat: method.repeat(),
        seed,
        batch: batch_index,
        sequence_index: m,
        truncated,
    }
}

fn drop_surplus(
    records: Vec<SynthRecord>,
    num_classes: usize,
    n_per_class: usize,
    seed: u64,
) -> Vec<SynthRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, DROP_TAG, 0));
    let mut drop = vec![false; records.len()];
    for class in 0..num_classes {
        let idx: Vec<usize> = (0..records.len())
            .filter(|&i| records[i].label == class)
            .collect();
        if idx.len() > n_per_class {
            for j in sample(&mut rng, idx.len(), idx.len() - n_per_class) {
                drop[idx[j]] = true;
            }
        }
    }
    records
        .into_iter()
        .zip(drop)
        .filter_map(|(r, d)| (!d).then_some(r))
        .collect()
}

/// Methods covered by forward-pass accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PassMethod {
    FewGen,
    CorrSynth,
    CfgIntra,
    CfgCross,
    CfgHybrid,
}

impl PassMethod {
    pub const ALL: [PassMethod; 5] = [
        PassMethod::FewGen,
        PassMethod::CorrSynth,
        PassMethod::CfgIntra,
        PassMethod::CfgCross,
        PassMethod::CfgHybrid,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PassMethod::FewGen => "fewgen",
            PassMethod::CorrSynth => "corrsynth",
            PassMethod::CfgIntra => "cfg-intra",
            PassMethod::CfgCross => "cfg-cross",
            PassMethod::CfgHybrid => "cfg-hybrid",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PassPrediction {
    pub passes: u64,
    /// False when `N` is not a multiple of `K * R`; the count then covers
    /// `ceil(N / (K * R))` full batches.
    pub exact: bool,
}

/// Forward passes needed for `n` generations of length `length` over `k`
/// classes with repeat factor `r`, counted over whole K·R batches.
///
/// Per batch of `K * R` generations: CorrSynth and FewGen need one pass per
/// generation per token; CFG needs one extra pass per contrast prompt
/// (`R - 1` intra, `(K - 1) * R` cross, `K * R - 1` hybrid).
pub fn predicted_forward_passes(
    method: PassMethod,
    n: u64,
    k: u64,
    r: u64,
    length: u64,
) -> Result<PassPrediction, OrchestratorError> {
    if n < 1 || k < 1 || r < 1 || length < 1 {
        return Err(OrchestratorError::Config(
            "all arguments must be >= 1".into(),
        ));
    }
    let per_batch = k * r;
    let batches = n.div_ceil(per_batch);
    let passes_per_generation = match method {
        PassMethod::FewGen | PassMethod::CorrSynth => 1,
        PassMethod::CfgIntra => r,
        PassMethod::CfgCross => 1 + (k - 1) * r,
        PassMethod::CfgHybrid => k * r,
    };
    Ok(PassPrediction {
        passes: batches * per_batch * passes_per_generation * length,
        exact: n.is_multiple_of(per_batch),
    })
}
