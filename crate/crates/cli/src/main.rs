use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use corrsynth::baselines::{compare_trace, CfgConfig, ContrastPromptRule};
use corrsynth::guidance::{GuidanceConfig, GuidanceMode, LogitSpace};
use corrsynth::io::{
    count_passes, default_manifest_path, load_task, read_corpus, read_texts, rerun_from_manifest,
    run_generate, train_lm_from_lines, write_atomic, GenerateConfig, IoError, ProviderSpec,
};
use corrsynth::metrics::compute_report;
use corrsynth::model::TokenizerKind;
use corrsynth::orchestrator::Method;
use corrsynth::sampling::SamplingParams;
use corrsynth::trace::{DEFAULT_TRACE_BETA, TRACE_NORMALIZATION};

#[derive(Parser)]
#[command(
    name = "corrsynth",
    version,
    about = "Correlated lockstep dataset synthesis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an add-k n-gram model on a text corpus (one sequence per line).
    TrainLm(TrainArgs),
    /// Synthesize labeled records as JSONL plus a run manifest.
    Generate(GenerateArgs),
    /// Diversity metrics for a JSONL file with a `text` field.
    Metrics(MetricsArgs),
    /// Paired CorrSynth/CFG contrast traces as CSV.
    Trace(TraceArgs),
    /// Predicted versus measured forward passes per method.
    CountPasses(CountArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Tokenizer {
    Whitespace,
    Char,
}

impl From<Tokenizer> for TokenizerKind {
    fn from(t: Tokenizer) -> Self {
        match t {
            Tokenizer::Whitespace => TokenizerKind::Whitespace,
            Tokenizer::Char => TokenizerKind::Char,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    order: usize,
    #[arg(long, default_value_t = 0.0)]
    smoothing: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "whitespace")]
    tokenizer: Tokenizer,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Fewgen,
    Cfg,
    CorrCross,
    CorrIntra,
    CorrHybrid,
}

#[derive(Clone, Copy, ValueEnum)]
enum CfgContrast {
    OtherLabel,
    IntraRepeat,
    Hybrid,
}

impl From<CfgContrast> for ContrastPromptRule {
    fn from(c: CfgContrast) -> Self {
        match c {
            CfgContrast::OtherLabel => ContrastPromptRule::OtherLabel,
            CfgContrast::IntraRepeat => ContrastPromptRule::IntraRepeat,
            CfgContrast::Hybrid => ContrastPromptRule::Hybrid,
        }
    }
}

#[derive(Args)]
struct SamplingArgs {
    #[arg(long)]
    top_p: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    /// Argmax decoding.
    #[arg(long)]
    greedy: bool,
    #[arg(long)]
    max_tokens: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl SamplingArgs {
    fn params(&self) -> SamplingParams {
        let d = SamplingParams::default();
        SamplingParams {
            top_p: self.top_p.unwrap_or(d.top_p),
            temperature: self.temperature.unwrap_or(d.temperature),
            greedy: self.greedy,
            max_tokens: self.max_tokens.unwrap_or(d.max_tokens),
            seed: self.seed.unwrap_or(d.seed),
        }
    }

    fn any_set(&self) -> bool {
        self.top_p.is_some()
            || self.temperature.is_some()
            || self.greedy
            || self.max_tokens.is_some()
            || self.seed.is_some()
    }
}

#[derive(Args)]
struct ProviderArgs {
    /// `ngram:PATH` or `remote:URL`.
    #[arg(long)]
    provider: Option<String>,
    /// Vocabulary JSON for remote providers.
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    /// Task config (JSON or TOML).
    #[arg(long)]
    task: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    gamma_intra: Option<f64>,
    #[arg(long)]
    gamma_cross: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    repeat: Option<usize>,
    /// Overrides the task's in-context example count.
    #[arg(long)]
    shots: Option<usize>,
    /// Contrast prompts for `--mode cfg`.
    #[arg(long, value_enum)]
    cfg_contrast: Option<CfgContrast>,
    #[arg(long)]
    n_per_class: Option<usize>,
    #[command(flatten)]
    sampling: SamplingArgs,
    #[command(flatten)]
    provider: ProviderArgs,
    /// Combine raw provider scores instead of log-probabilities.
    #[arg(long)]
    raw_logits: bool,
    /// Output JSONL path.
    #[arg(long)]
    out: PathBuf,
    /// Manifest path; defaults to `<out>.manifest.json`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Reproduce the run recorded in this manifest; no other generation
    /// flags are allowed.
    #[arg(long)]
    from_manifest: Option<PathBuf>,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    input: PathBuf,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TraceArgs {
    #[arg(long)]
    task: PathBuf,
    #[command(flatten)]
    provider: ProviderArgs,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    #[arg(long, default_value_t = 0.9)]
    delta: f64,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, default_value_t = 1)]
    repeat: usize,
    #[command(flatten)]
    sampling: SamplingArgs,
    #[arg(long, default_value_t = DEFAULT_TRACE_BETA)]
    trace_beta: f64,
    #[arg(long)]
    raw_logits: bool,
    /// CSV output; metadata goes to `<out>.meta.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CountArgs {
    /// Total generations N.
    #[arg(long, default_value_t = 40)]
    n: u64,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 2)]
    r: usize,
    /// Tokens per generation, EOS included.
    #[arg(long, default_value_t = 8)]
    length: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    json: bool,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn config<T>(msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure::Config(msg.into()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("CORRSYNTH_LOG", "warn"))
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::TrainLm(a) => train_lm(a),
        Command::Generate(a) => generate(a),
        Command::Metrics(a) => metrics(a),
        Command::Trace(a) => trace(a),
        Command::CountPasses(a) => passes(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

fn train_lm(a: TrainArgs) -> Result<(), Failure> {
    let lines = read_corpus(&a.corpus)?;
    let model = train_lm_from_lines(&lines, a.tokenizer.into(), a.order, a.smoothing)?;
    let mut bytes = Vec::new();
    model
        .write_to(&mut bytes)
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    write_atomic(&a.out, &bytes)?;
    println!(
        "vocab_size={} contexts={}",
        model.vocab().size(),
        model.context_count()
    );
    Ok(())
}

fn provider_spec(p: &ProviderArgs) -> Result<ProviderSpec, Failure> {
    let Some(spec) = &p.provider else {
        return config("--provider is required");
    };
    Ok(ProviderSpec::parse(spec, p.vocab.as_deref())?)
}

fn check_unit(name: &str, v: Option<f64>) -> Result<(), Failure> {
    match v {
        Some(x) if !(0.0..=1.0).contains(&x) => {
            config(format!("--{name} must lie in [0, 1], got {x}"))
        }
        _ => Ok(()),
    }
}

fn build_method(a: &GenerateArgs, mode: Mode) -> Result<Method, Failure> {
    let reject = |flags: &[(&str, bool)]| -> Result<(), Failure> {
        for (name, set) in flags {
            if *set {
                return config(format!("--{name} does not apply to this mode"));
            }
        }
        Ok(())
    };
    let need = |name: &str, v: Option<f64>| -> Result<f64, Failure> {
        v.ok_or_else(|| Failure::Config(format!("--{name} is required for this mode")))
    };
    check_unit("alpha", a.alpha)?;
    let repeat = a.repeat.unwrap_or(1);
    let space = if a.raw_logits {
        LogitSpace::Raw
    } else {
        LogitSpace::LogProbs
    };
    if mode != Mode::Cfg {
        reject(&[("cfg-contrast", a.cfg_contrast.is_some())])?;
    }
    let method = match mode {
        Mode::Fewgen => {
            reject(&[
                ("gamma", a.gamma.is_some()),
                ("delta", a.delta.is_some()),
                ("gamma-intra", a.gamma_intra.is_some()),
                ("gamma-cross", a.gamma_cross.is_some()),
                ("alpha", a.alpha.is_some()),
            ])?;
            Method::FewGen {
                repeat,
                logit_space: space,
            }
        }
        Mode::Cfg => {
            reject(&[
                ("delta", a.delta.is_some()),
                ("gamma-intra", a.gamma_intra.is_some()),
                ("gamma-cross", a.gamma_cross.is_some()),
            ])?;
            let rule = a.cfg_contrast.unwrap_or(CfgContrast::OtherLabel).into();
            Method::Cfg(CfgConfig {
                alpha: a.alpha,
                repeat,
                logit_space: space,
                ..CfgConfig::new(need("gamma", a.gamma)?, rule)
            })
        }
        Mode::CorrCross | Mode::CorrIntra => {
            reject(&[
                ("gamma-intra", a.gamma_intra.is_some()),
                ("gamma-cross", a.gamma_cross.is_some()),
            ])?;
            let m = if mode == Mode::CorrCross {
                GuidanceMode::Cross
            } else {
                GuidanceMode::Intra
            };
            let mut c = GuidanceConfig::new(m, need("gamma", a.gamma)?, need("delta", a.delta)?)
                .with_alpha(a.alpha)
                .with_repeat(repeat);
            c.logit_space = space;
            Method::CorrSynth(c)
        }
        Mode::CorrHybrid => {
            reject(&[("delta", a.delta.is_some())])?;
            let mut c = GuidanceConfig::hybrid(
                need("gamma", a.gamma)?,
                need("gamma-intra", a.gamma_intra)?,
                need("gamma-cross", a.gamma_cross)?,
            )
            .with_alpha(a.alpha)
            .with_repeat(repeat);
            c.logit_space = space;
            Method::CorrSynth(c)
        }
    };
    if let Method::CorrSynth(c) = &method {
        c.validate().map_err(|e| Failure::Config(e.to_string()))?;
    }
    if let Method::Cfg(c) = &method {
        c.validate().map_err(|e| Failure::Config(e.to_string()))?;
    }
    Ok(method)
}

fn report_run(m: &corrsynth::io::RunManifest, manifest_path: &Path) {
    for w in &m.warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "run_id={} records={} passes={} batches={} manifest={}",
        m.run_id,
        m.n_records,
        m.pass_count,
        m.completed_batches,
        manifest_path.display()
    );
}

fn generate(a: GenerateArgs) -> Result<(), Failure> {
    let manifest_path = a
        .manifest
        .clone()
        .unwrap_or_else(|| default_manifest_path(&a.out));
    let run = if let Some(source) = &a.from_manifest {
        let others = a.task.is_some()
            || a.mode.is_some()
            || a.gamma.is_some()
            || a.delta.is_some()
            || a.gamma_intra.is_some()
            || a.gamma_cross.is_some()
            || a.alpha.is_some()
            || a.repeat.is_some()
            || a.shots.is_some()
            || a.cfg_contrast.is_some()
            || a.n_per_class.is_some()
            || a.sampling.any_set()
            || a.provider.provider.is_some()
            || a.provider.vocab.is_some()
            || a.raw_logits;
        if others {
            return config("--from-manifest cannot be combined with generation flags");
        }
        rerun_from_manifest(source, &a.out, &manifest_path)
    } else {
        let Some(task_path) = &a.task else {
            return config("--task is required");
        };
        let Some(mode) = a.mode else {
            return config("--mode is required");
        };
        let method = build_method(&a, mode)?;
        let mut task = load_task(task_path)?;
        if let Some(s) = a.shots {
            task.shots = s;
        }
        let sampling = a.sampling.params();
        sampling.validate().map_err(Failure::Config)?;
        let cfg = GenerateConfig {
            task,
            method,
            sampling,
            n_per_class: a.n_per_class.unwrap_or(1),
            provider: provider_spec(&a.provider)?,
        };
        run_generate(&cfg, &a.out, &manifest_path)
    };
    match run {
        Ok(m) => {
            report_run(&m, &manifest_path);
            Ok(())
        }
        Err(e) => {
            if let Some(m) = &e.manifest {
                eprintln!(
                    "partial run: {} records from {} batches written",
                    m.n_records, m.completed_batches
                );
            }
            Err(e.source.into())
        }
    }
}

fn metrics(a: MetricsArgs) -> Result<(), Failure> {
    let texts = read_texts(&a.input)?;
    let report = compute_report(&texts).map_err(|e| Failure::Config(e.to_string()))?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    if let Some(out) = &a.out {
        write_atomic(out, format!("{json}\n").as_bytes())?;
    }
    println!("{json}");
    Ok(())
}

fn trace(a: TraceArgs) -> Result<(), Failure> {
    check_unit("alpha", a.alpha)?;
    if !(a.trace_beta > 0.0 && a.trace_beta <= 1.0) {
        return config("--trace-beta must lie in (0, 1]");
    }
    let task = load_task(&a.task)?;
    let (model, vocab) = provider_spec(&a.provider)?.open()?;
    let params = a.sampling.params();
    params.validate().map_err(Failure::Config)?;
    let space = if a.raw_logits {
        LogitSpace::Raw
    } else {
        LogitSpace::LogProbs
    };
    let mut corr = GuidanceConfig::new(GuidanceMode::Cross, a.gamma, a.delta)
        .with_alpha(a.alpha)
        .with_repeat(a.repeat);
    corr.logit_space = space;
    corr.validate()
        .map_err(|e| Failure::Config(e.to_string()))?;
    // Same exponents as CorrSynth, so both start from the same distribution.
    let cfg = CfgConfig {
        numerator_exponent: Some(a.gamma),
        denominator_exponent: Some(a.gamma - a.delta),
        alpha: a.alpha,
        repeat: a.repeat,
        logit_space: space,
        ..CfgConfig::new(a.gamma - a.delta, ContrastPromptRule::OtherLabel)
    };
    let report = compare_trace(&model, &vocab, &task, &corr, &cfg, &params, a.trace_beta)
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv).expect("in-memory write");
    write_atomic(&a.out, &csv)?;
    let meta = serde_json::json!({
        "normalization": TRACE_NORMALIZATION,
        "norm": "max_abs",
        "trace_beta": a.trace_beta,
        "corrsynth": corr,
        "cfg": cfg,
        "sampling": params,
        "prompt_fingerprints": report.prompts.fingerprints,
        "class_of": report.prompts.class_of,
        "rows": report.row_count(),
    });
    let mut meta_path = a.out.as_os_str().to_os_string();
    meta_path.push(".meta.json");
    let meta_bytes = serde_json::to_vec_pretty(&meta).expect("metadata serializes");
    write_atomic(Path::new(&meta_path), &meta_bytes)?;
    println!("rows={} out={}", report.row_count(), a.out.display());
    Ok(())
}

fn passes(a: CountArgs) -> Result<(), Failure> {
    let rows = count_passes(a.n, a.k, a.r, a.length, a.seed)?;
    let base = rows
        .iter()
        .find(|r| r.method == "corr-cross")
        .map(|r| r.predicted);
    let hybrid = rows
        .iter()
        .find(|r| r.method == "cfg-hybrid")
        .map(|r| r.predicted);
    let ratio = match (hybrid, base) {
        (Some(h), Some(b)) if b > 0 => h as f64 / b as f64,
        _ => f64::NAN,
    };
    if a.json {
        let v = serde_json::json!({
            "n": a.n, "k": a.k, "r": a.r, "length": a.length,
            "rows": rows,
            "cfg_hybrid_over_corrsynth": ratio,
        });
        println!("{}", serde_json::to_string_pretty(&v).expect("serializes"));
    } else {
        println!("N={} K={} R={} L={}", a.n, a.k, a.r, a.length);
        println!(
            "{:<12} {:>12} {:>12} {:>6}",
            "method", "predicted", "measured", "exact"
        );
        for r in &rows {
            let measured = r.measured.map_or("n/a".to_string(), |m| m.to_string());
            println!(
                "{:<12} {:>12} {:>12} {:>6}",
                r.method, r.predicted, measured, r.exact
            );
        }
        println!("cfg-hybrid / corrsynth = {ratio}");
    }
    let mismatch = rows
        .iter()
        .any(|r| r.measured.is_some_and(|m| m != r.predicted));
    if mismatch {
        return Err(Failure::Runtime(
            "measured passes differ from prediction".into(),
        ));
    }
    Ok(())
}
