//! File formats and run drivers behind the command-line tool.
//!
//! Records are JSONL (one object per line), traces CSV, reports and
//! manifests pretty-printed JSON. Every output file is written to a
//! temporary file in the target directory and renamed into place.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::baselines::{CfgConfig, ContrastPromptRule};
use crate::guidance::{GuidanceConfig, GuidanceMode};
use crate::model::{
    train_ngram, FixedLengthProvider, Model, ModelError, NGramModel, RemoteProvider, TokenizerKind,
    Vocabulary,
};
use crate::orchestrator::{
    predicted_forward_passes, synthesize, Method, OrchestratorError, PassMethod, SeedExample,
    SynthRecord, TaskSpec,
};
use crate::sampling::SamplingParams;

pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
}

impl IoError {
    /// Configuration problems (exit code 2) versus runtime failures.
    pub fn is_config(&self) -> bool {
        match self {
            IoError::Config(_) | IoError::Parse { .. } => true,
            IoError::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            IoError::Orchestrator(e) => !matches!(e, OrchestratorError::Model(_)),
            IoError::Model(e) => matches!(
                e,
                ModelError::InvalidVocabulary(_)
                    | ModelError::EmptyCorpus
                    | ModelError::InvalidOrder(_)
                    | ModelError::InvalidSmoothing(_)
                    | ModelError::Format(_)
            ),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `path` through a temporary sibling file and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), IoError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(path))?;
    tmp.write_all(contents).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| IoError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).expect("records serialize");
        out.push(b'\n');
    }
    out
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), IoError> {
    write_atomic(path, &to_jsonl(items))
}

/// Parses one JSON value per non-blank line; errors carry 1-based line numbers.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, IoError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| IoError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

#[derive(Deserialize)]
struct TextLine {
    text: String,
}

/// The `text` field of every line of a JSONL file.
pub fn read_texts(path: &Path) -> Result<Vec<String>, IoError> {
    Ok(read_jsonl::<TextLine>(path)?
        .into_iter()
        .map(|t| t.text)
        .collect())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("value serializes");
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| IoError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

// ---- task configuration ----

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenizerSection {
    #[serde(default)]
    pub kind: TokenizerKind,
}

/// On-disk task description (JSON or TOML).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfigFile {
    pub name: String,
    pub labels: Vec<String>,
    pub template: String,
    /// JSONL seed examples, resolved relative to the config file.
    pub seed_path: PathBuf,
    #[serde(default)]
    pub shots: usize,
    #[serde(default)]
    pub tokenizer: TokenizerSection,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SeedLabel {
    Index(usize),
    Name(String),
}

#[derive(Deserialize)]
struct SeedLine {
    #[serde(default)]
    id: Option<usize>,
    text: String,
    label: SeedLabel,
}

/// Seed lines are `{"text": ..., "label": <name or index>}` with an optional
/// `id`; missing ids default to the 0-based record position.
pub fn read_seed_set(path: &Path, labels: &[String]) -> Result<Vec<SeedExample>, IoError> {
    let lines: Vec<SeedLine> = read_jsonl(path)?;
    let mut out = Vec::with_capacity(lines.len());
    for (pos, line) in lines.into_iter().enumerate() {
        let label = match line.label {
            SeedLabel::Index(i) if i < labels.len() => i,
            SeedLabel::Name(ref n) if labels.contains(n) => {
                labels.iter().position(|l| l == n).unwrap()
            }
            SeedLabel::Index(i) => {
                return Err(IoError::Config(format!(
                    "{}: seed record {} has label index {i} outside {} labels",
                    path.display(),
                    pos + 1,
                    labels.len()
                )))
            }
            SeedLabel::Name(n) => {
                return Err(IoError::Config(format!(
                    "{}: seed record {} has unknown label {n:?}",
                    path.display(),
                    pos + 1
                )))
            }
        };
        out.push(SeedExample {
            id: line.id.unwrap_or(pos),
            text: line.text,
            label,
        });
    }
    Ok(out)
}

pub fn load_task(path: &Path) -> Result<TaskSpec, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let file: TaskConfigFile = if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).map_err(|e| IoError::Config(format!("{}: {e}", path.display())))?
    } else {
        serde_json::from_str(&text).map_err(|e| IoError::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?
    };
    let seed_path = if file.seed_path.is_absolute() {
        file.seed_path.clone()
    } else {
        path.parent()
            .unwrap_or(Path::new("."))
            .join(&file.seed_path)
    };
    let seed_set = read_seed_set(&seed_path, &file.labels)?;
    let task = TaskSpec {
        name: file.name,
        labels: file.labels,
        template: file.template,
        seed_set,
        shots: file.shots,
        tokenizer: file.tokenizer.kind,
    };
    task.validate()?;
    Ok(task)
}

// ---- language model training ----

/// One training sequence per non-blank line.
pub fn read_corpus(path: &Path) -> Result<Vec<String>, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::to_string)
        .collect())
}

/// Builds the vocabulary from the corpus itself and trains the model.
pub fn train_lm_from_lines(
    lines: &[String],
    tokenizer: TokenizerKind,
    order: usize,
    smoothing: f64,
) -> Result<NGramModel, IoError> {
    let vocab = Vocabulary::from_token_stream(lines.iter().flat_map(|l| tokenizer.split(l)));
    let corpus = lines
        .iter()
        .map(|l| tokenizer.encode(l, &vocab))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(train_ngram(&corpus, vocab, order, smoothing)?)
}

// ---- providers ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ProviderSpec {
    Ngram {
        path: PathBuf,
        /// Hex SHA-256 of the model file, checked on reopen.
        #[serde(default)]
        sha256: Option<String>,
    },
    Remote {
        url: String,
        vocab_path: PathBuf,
    },
}

impl ProviderSpec {
    /// `ngram:PATH` or `remote:URL`; remote providers also need a vocabulary
    /// file (`{"tokens": [...], "eos_id": n}`).
    pub fn parse(spec: &str, vocab: Option<&Path>) -> Result<Self, IoError> {
        if let Some(path) = spec.strip_prefix("ngram:") {
            if vocab.is_some() {
                return Err(IoError::Config(
                    "--vocab is only used with remote providers".into(),
                ));
            }
            Ok(ProviderSpec::Ngram {
                path: PathBuf::from(path),
                sha256: None,
            })
        } else if let Some(url) = spec.strip_prefix("remote:") {
            let vocab_path = vocab
                .ok_or_else(|| IoError::Config("remote provider needs --vocab".into()))?
                .to_path_buf();
            Ok(ProviderSpec::Remote {
                url: url.to_string(),
                vocab_path,
            })
        } else {
            Err(IoError::Config(format!(
                "provider must be ngram:PATH or remote:URL, got {spec:?}"
            )))
        }
    }

    pub fn open(&self) -> Result<(Model, Vocabulary), IoError> {
        match self {
            ProviderSpec::Ngram { path, sha256 } => {
                let bytes = fs::read(path).map_err(io_err(path))?;
                if let Some(expected) = sha256 {
                    let actual = hex::encode(Sha256::digest(&bytes));
                    if &actual != expected {
                        return Err(IoError::Config(format!(
                            "{}: model file hash {actual} does not match manifest {expected}",
                            path.display()
                        )));
                    }
                }
                let model = NGramModel::read_from(&mut bytes.as_slice())?;
                let vocab = model.vocab().clone();
                Ok((Model::new(model), vocab))
            }
            ProviderSpec::Remote { url, vocab_path } => {
                let vocab: Vocabulary = read_json(vocab_path)?;
                let provider = RemoteProvider::new(url, vocab.size(), vocab.eos_id());
                Ok((Model::new(provider), vocab))
            }
        }
    }

    /// Copy with the model file hash filled in; a recorded hash is kept so
    /// that [`ProviderSpec::open`] can check it.
    pub fn pinned(&self) -> Result<Self, IoError> {
        match self {
            ProviderSpec::Ngram { path, sha256: None } => {
                let bytes = fs::read(path).map_err(io_err(path))?;
                Ok(ProviderSpec::Ngram {
                    path: path.clone(),
                    sha256: Some(hex::encode(Sha256::digest(&bytes))),
                })
            }
            other => Ok(other.clone()),
        }
    }
}

// ---- generation runs ----

/// Everything needed to reproduce a `generate` run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub task: TaskSpec,
    pub method: Method,
    pub sampling: SamplingParams,
    pub n_per_class: usize,
    pub provider: ProviderSpec,
}

impl GenerateConfig {
    /// First 16 hex digits of the SHA-256 of the canonical config JSON.
    pub fn run_id(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))[..16].to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Complete,
    Partial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutputs {
    pub records: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub engine_version: String,
    pub config: GenerateConfig,
    pub provider_descriptor: String,
    pub pass_count: u64,
    pub wall_time_secs: f64,
    pub outputs: RunOutputs,
    pub status: RunStatus,
    pub completed_batches: usize,
    pub n_records: usize,
    #[serde(default)]
    pub warnings: Vec<String>,
    #[serde(default)]
    pub error: Option<String>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self, IoError> {
        read_json(path)
    }
}

/// `<records>.manifest.json`
pub fn default_manifest_path(records: &Path) -> PathBuf {
    let mut name = records.as_os_str().to_os_string();
    name.push(".manifest.json");
    PathBuf::from(name)
}

#[derive(Debug, Error)]
#[error("{source}")]
pub struct RunError {
    /// Manifest of the partial run, when one could be written.
    pub manifest: Option<Box<RunManifest>>,
    #[source]
    pub source: IoError,
}

impl From<IoError> for RunError {
    fn from(source: IoError) -> Self {
        RunError {
            manifest: None,
            source,
        }
    }
}

/// Runs synthesis, writes the records and then the manifest. On a provider
/// failure the completed batches are still written, with a `partial`
/// manifest.
pub fn run_generate(
    config: &GenerateConfig,
    records_path: &Path,
    manifest_path: &Path,
) -> Result<RunManifest, RunError> {
    config.sampling.validate().map_err(IoError::Config)?;
    let mut config = config.clone();
    config.provider = config.provider.pinned()?;
    let (model, vocab) = config.provider.open()?;
    let start = Instant::now();
    let result = synthesize(
        &config.task,
        &model,
        &vocab,
        &config.method,
        &config.sampling,
        config.n_per_class,
    );
    let wall = start.elapsed();
    let manifest = |records: &[SynthRecord],
                    status,
                    batches,
                    passes,
                    warnings: Vec<String>,
                    error: Option<String>,
                    wall: Duration| RunManifest {
        run_id: config.run_id(),
        engine_version: ENGINE_VERSION.to_string(),
        config: config.clone(),
        provider_descriptor: model.describe(),
        pass_count: passes,
        wall_time_secs: wall.as_secs_f64(),
        outputs: RunOutputs {
            records: records_path.to_path_buf(),
        },
        status,
        completed_batches: batches,
        n_records: records.len(),
        warnings,
        error,
    };
    match result {
        Ok(out) => {
            write_jsonl(records_path, &out.records)?;
            let m = manifest(
                &out.records,
                RunStatus::Complete,
                out.batches,
                out.passes,
                out.warnings,
                None,
                wall,
            );
            write_json(manifest_path, &m)?;
            Ok(m)
        }
        Err(e) => {
            if e.completed_batches == 0 && !matches!(e.source, OrchestratorError::Model(_)) {
                return Err(IoError::Orchestrator(e.source).into());
            }
            write_jsonl(records_path, &e.partial)?;
            let m = manifest(
                &e.partial,
                RunStatus::Partial,
                e.completed_batches,
                e.passes,
                vec![],
                Some(e.source.to_string()),
                wall,
            );
            write_json(manifest_path, &m)?;
            Err(RunError {
                manifest: Some(Box::new(m)),
                source: IoError::Orchestrator(e.source),
            })
        }
    }
}

/// Reruns the configuration recorded in a manifest.
pub fn rerun_from_manifest(
    manifest: &Path,
    records_path: &Path,
    manifest_path: &Path,
) -> Result<RunManifest, RunError> {
    let previous = RunManifest::load(manifest)?;
    run_generate(&previous.config, records_path, manifest_path)
}

// ---- forward-pass accounting ----

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PassRow {
    pub method: String,
    pub predicted: u64,
    /// `None` when the method does not apply (CFG-Intra with R = 1).
    pub measured: Option<u64>,
    /// Whether `N` divides into whole K·R batches.
    pub exact: bool,
}

/// Task whose prompts are `w<k> <sep>`, so that every generation has
/// length exactly `length` under [`FixedLengthProvider`].
pub fn accounting_task(num_classes: usize) -> TaskSpec {
    TaskSpec {
        name: "accounting".into(),
        labels: (0..num_classes).map(|k| format!("w{k}")).collect(),
        template: "{label} <sep> {text}".into(),
        seed_set: vec![],
        shots: 0,
        tokenizer: TokenizerKind::Whitespace,
    }
}

/// Predicted versus measured forward passes for `n` generations of length
/// `length` across `k` classes with repeat `r`.
pub fn count_passes(
    n: u64,
    k: usize,
    r: usize,
    length: usize,
    seed: u64,
) -> Result<Vec<PassRow>, IoError> {
    if k < 2 {
        return Err(IoError::Config("count-passes needs K >= 2".into()));
    }
    if n < 1 || r < 1 || length < 1 {
        return Err(IoError::Config("N, R and L must be >= 1".into()));
    }
    let provider = FixedLengthProvider::new(length, k.max(2))?;
    let vocab = provider.vocab().clone();
    let task = accounting_task(k);
    let n_per_class = (n as usize).div_ceil(k);
    let params = SamplingParams {
        max_tokens: length,
        seed,
        ..SamplingParams::default()
    };
    let corr = |mode| GuidanceConfig::new(mode, 1.0, 0.9).with_repeat(r);
    let cfg = |rule| CfgConfig {
        repeat: r,
        ..CfgConfig::new(1.0, rule)
    };
    let methods: Vec<(&str, PassMethod, Option<Method>)> = vec![
        (
            "fewgen",
            PassMethod::FewGen,
            Some(Method::FewGen {
                repeat: r,
                logit_space: Default::default(),
            }),
        ),
        (
            "corr-cross",
            PassMethod::CorrSynth,
            Some(Method::CorrSynth(corr(GuidanceMode::Cross))),
        ),
        (
            "corr-intra",
            PassMethod::CorrSynth,
            Some(Method::CorrSynth(corr(GuidanceMode::Intra))),
        ),
        (
            "corr-hybrid",
            PassMethod::CorrSynth,
            Some(Method::CorrSynth(
                GuidanceConfig::hybrid(1.0, 0.5, 0.1).with_repeat(r),
            )),
        ),
        (
            "cfg-intra",
            PassMethod::CfgIntra,
            (r > 1).then(|| Method::Cfg(cfg(ContrastPromptRule::IntraRepeat))),
        ),
        (
            "cfg-cross",
            PassMethod::CfgCross,
            Some(Method::Cfg(cfg(ContrastPromptRule::OtherLabel))),
        ),
        (
            "cfg-hybrid",
            PassMethod::CfgHybrid,
            Some(Method::Cfg(cfg(ContrastPromptRule::Hybrid))),
        ),
    ];
    let mut rows = Vec::new();
    for (name, pm, method) in methods {
        let predicted = predicted_forward_passes(pm, n, k as u64, r as u64, length as u64)?;
        let measured = match method {
            Some(method) => {
                let model = Model::new(provider.clone());
                let out = synthesize(&task, &model, &vocab, &method, &params, n_per_class)
                    .map_err(|e| IoError::Orchestrator(e.source))?;
                Some(out.passes)
            }
            None => None,
        };
        rows.push(PassRow {
            method: name.to_string(),
            predicted: predicted.passes,
            measured,
            exact: predicted.exact,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn jsonl_round_trip_and_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.jsonl");
        let items = vec![
            serde_json::json!({"text": "a"}),
            serde_json::json!({"text": "b"}),
        ];
        write_jsonl(&p, &items).unwrap();
        let back: Vec<serde_json::Value> = read_jsonl(&p).unwrap();
        assert_eq!(back, items);
        let bad = write(dir.path(), "bad.jsonl", "{\"text\": \"ok\"}\n\n{broken\n");
        match read_texts(&bad) {
            Err(IoError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn task_from_json_and_toml() {
        let dir = tempfile::tempdir().unwrap();
        write(
            dir.path(),
            "seeds.jsonl",
            "{\"text\": \"goal scored\", \"label\": \"sports\"}\n{\"text\": \"vote held\", \"label\": 1, \"id\": 9}\n",
        );
        let json = write(
            dir.path(),
            "task.json",
            r#"{"name": "t", "labels": ["sports", "politics"], "template": "{label}: {text}",
                "seed_path": "seeds.jsonl", "shots": 1, "tokenizer": {"kind": "char"}}"#,
        );
        let task = load_task(&json).unwrap();
        assert_eq!(
            task.seed_set[1],
            SeedExample {
                id: 9,
                text: "vote held".into(),
                label: 1
            }
        );
        assert_eq!(task.tokenizer, TokenizerKind::Char);
        let toml = write(
            dir.path(),
            "task.toml",
            "name = \"t\"\nlabels = [\"sports\", \"politics\"]\ntemplate = \"{label}: {text}\"\nseed_path = \"seeds.jsonl\"\nshots = 1\n",
        );
        let t2 = load_task(&toml).unwrap();
        assert_eq!(t2.seed_set, task.seed_set);
        assert_eq!(t2.tokenizer, TokenizerKind::Whitespace);
    }

    #[test]
    fn unknown_seed_label_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "s.jsonl",
            "{\"text\": \"x\", \"label\": \"nope\"}\n",
        );
        let err = read_seed_set(&p, &["a".into(), "b".into()]).unwrap_err();
        assert!(err.is_config());
    }

    #[test]
    fn provider_spec_parsing() {
        assert!(matches!(
            ProviderSpec::parse("ngram:m.lm", None),
            Ok(ProviderSpec::Ngram { .. })
        ));
        assert!(ProviderSpec::parse("remote:http://x", None).is_err());
        assert!(ProviderSpec::parse("hf:gpt2", None).is_err());
    }

    #[test]
    fn count_passes_ratio() {
        let rows = count_passes(40, 10, 2, 3, 0).unwrap();
        let get = |name: &str| rows.iter().find(|r| r.method == name).unwrap();
        for row in &rows {
            assert_eq!(row.measured, Some(row.predicted), "{}", row.method);
        }
        assert_eq!(
            get("cfg-hybrid").predicted,
            20 * get("corr-cross").predicted
        );
    }
}
