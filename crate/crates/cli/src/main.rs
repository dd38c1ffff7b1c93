use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context, Result};
use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};

use callmask::dataset::{
    build_eval_set, build_train_set, parse_negative_corpus, parse_positive_corpus,
    read_jsonl, render_prompt, words, write_jsonl, DataPoint, SamplingConfig,
    TermFrequencyEmbedding,
};
use callmask::decoder::{
    decode_greedy, decode_unmasked, new_session, DecodeError, LanguageModel, Vocabulary,
    DEFAULT_MAX_TOKENS,
};
use callmask::eval::{
    eval_vocabulary, make_mock, render_table, run_eval, run_paired, run_text_eval, EvalConfig,
    MatchMode, MockSpec, TextModel,
};
use callmask::metrics::{
    loss_masked, loss_unmasked, theorem_loss_check_with, theorem_precision_check,
};
use callmask::schema::{
    load_registry, parse_call, render_call, FunctionRegistry, Value, END_MARKER,
};
use callmask::trie::Trie;

mod remote;

const EXIT_INPUT: u8 = 1;
const EXIT_DECODE: u8 = 2;
const EXIT_COUNTEREXAMPLE: u8 = 3;

#[derive(Parser)]
#[command(name = "callmask", version, about = "Grammar-constrained function-call decoding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decode one call for a query.
    Decode(DecodeArgs),
    /// Score a dataset file with a model.
    Eval(EvalArgs),
    /// Check the loss and precision dominance properties on random inputs.
    Theorems(TheoremArgs),
    /// Build an evaluation or training set from fixture corpora.
    Dataset(DatasetArgs),
    /// Trie debugging helpers.
    Trie {
        #[command(subcommand)]
        command: TrieCommand,
    },
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    registry: PathBuf,
    /// `mock:<variant>[:k=v,...]` or `remote:<url>`.
    #[arg(long)]
    lm: String,
    #[arg(long)]
    query: String,
    /// Reference call; scripted mocks follow its tokens.
    #[arg(long)]
    gold: Option<String>,
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    masked: bool,
    #[arg(long, default_value_t = DEFAULT_MAX_TOKENS)]
    max_tokens: usize,
    /// Seed used when the lm spec has none.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the per-step trace as JSON lines.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    lm: String,
    #[arg(long, value_enum, default_value_t = ModeArg::Strict)]
    mode: ModeArg,
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    masked: bool,
    /// Run masked and unmasked over the same models.
    #[arg(long)]
    paired: bool,
    #[arg(long, default_value_t = DEFAULT_MAX_TOKENS)]
    max_tokens: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Report file (JSON).
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Strict,
    Relaxed,
}

impl From<ModeArg> for MatchMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Strict => MatchMode::Strict,
            ModeArg::Relaxed => MatchMode::Relaxed,
        }
    }
}

#[derive(Args)]
struct TheoremArgs {
    /// Loss trials per vocabulary size.
    #[arg(long, default_value_t = 10_000)]
    trials: usize,
    /// Restrict both checks to one vocabulary size.
    #[arg(long)]
    vocab_size: Option<usize>,
    /// Enumerate every gold-containing mask (sizes up to 16).
    #[arg(long)]
    exhaustive: bool,
    /// Grid distributions per size in the precision check.
    #[arg(long, default_value_t = 200)]
    distributions: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Replace the masked loss with a deliberately wrong one.
    #[arg(long, hide = true)]
    inject_bug: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SetKind {
    Eval,
    Train,
}

#[derive(Args)]
struct DatasetArgs {
    #[arg(long)]
    registry: PathBuf,
    /// `call<TAB>query` lines.
    #[arg(long)]
    positives: PathBuf,
    /// One query per line.
    #[arg(long)]
    negatives: PathBuf,
    #[arg(long, value_enum, default_value_t = SetKind::Eval)]
    kind: SetKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Subcommand)]
enum TrieCommand {
    /// Print every prefix of the registry's function names.
    Dump {
        #[arg(long, conflicts_with = "words")]
        registry: Option<PathBuf>,
        /// Comma-separated words instead of a registry.
        #[arg(long)]
        words: Option<String>,
    },
}

/// An error that maps to a specific exit status.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure {
            code: EXIT_INPUT,
            error: e.into(),
        }
    }
}

fn fail(code: u8, error: anyhow::Error) -> Failure {
    Failure { code, error }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Decode(a) => cmd_decode(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Theorems(a) => cmd_theorems(a),
        Command::Dataset(a) => cmd_dataset(a),
        Command::Trie {
            command: TrieCommand::Dump { registry, words },
        } => cmd_trie_dump(registry, words),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn registry_at(path: &Path) -> Result<FunctionRegistry> {
    load_registry(&read(path)?).with_context(|| format!("invalid registry {}", path.display()))
}

enum ModelSource {
    Mock(MockSpec),
    Remote(remote::RemoteModel),
}

fn model_source(spec: &str, default_seed: u64) -> Result<ModelSource> {
    if let Some(url) = spec.strip_prefix("remote:") {
        return Ok(ModelSource::Remote(remote::RemoteModel::new(url)?));
    }
    let mut mock = make_mock(spec)?;
    if !spec.contains("seed=") {
        mock.seed = default_seed;
    }
    Ok(ModelSource::Mock(mock))
}

fn is_decode_stop(e: &DecodeError) -> bool {
    matches!(
        e,
        DecodeError::BudgetExhausted { .. } | DecodeError::ConstraintDeadlock(_)
    )
}

fn cmd_decode(a: DecodeArgs) -> Result<(), Failure> {
    let registry = registry_at(&a.registry)?;
    let source = model_source(&a.lm, a.seed)?;
    let gold = a
        .gold
        .as_deref()
        .map(|g| parse_call(g, &registry).context("invalid --gold call"))
        .transpose()?;
    let mock = match source {
        ModelSource::Remote(model) => {
            if a.masked {
                return Err(anyhow!("remote models expose no distribution; pass --masked=false").into());
            }
            let functions = registry.functions().to_vec();
            let prompt = render_prompt(&functions, &a.query, None, None)?;
            let text = model.complete(&prompt).map_err(|e| fail(EXIT_DECODE, anyhow!(e)))?;
            warn_if_invalid(&text, &registry);
            println!("{text}");
            return Ok(());
        }
        ModelSource::Mock(m) => m,
    };

    let mut extra = vec![END_MARKER.to_string()];
    extra.extend(registry.functions().iter().map(|f| f.name.clone()));
    if let Some(g) = &gold {
        for v in &g.arguments {
            if let Value::Str(s) | Value::Enum(s) = v {
                extra.extend(words(s).into_iter().filter(|w| w.len() > 1 && s.contains(w.as_str())));
            }
        }
    }
    let vocab = Arc::new(Vocabulary::char_level_with(extra));
    let script = match &gold {
        Some(g) => vocab.encode(&render_call(g))?,
        None => Vec::new(),
    };
    let lm = mock.build(0, script, Arc::clone(&vocab));
    let state = new_session(&registry, Arc::clone(&vocab))?;

    let (output, trace) = if a.masked {
        match decode_greedy(&lm as &dyn LanguageModel, state, a.max_tokens) {
            Ok((call, trace)) => (render_call(&call), trace),
            Err(e) if is_decode_stop(&e) => return Err(fail(EXIT_DECODE, e.into())),
            Err(e) => return Err(e.into()),
        }
    } else {
        match decode_unmasked(&lm, state, a.max_tokens) {
            Ok((text, trace)) => {
                warn_if_invalid(&text, &registry);
                (text, trace)
            }
            Err(e) if is_decode_stop(&e) => return Err(fail(EXIT_DECODE, e.into())),
            Err(e) => return Err(e.into()),
        }
    };
    if let Some(path) = &a.trace {
        write(path, &trace.to_jsonl(&vocab))?;
    }
    println!("{output}");
    Ok(())
}

fn warn_if_invalid(text: &str, registry: &FunctionRegistry) {
    if let Err(e) = parse_call(text.trim(), registry) {
        eprintln!("warning: output is not a valid call: {e}");
    }
}

fn cmd_eval(a: EvalArgs) -> Result<(), Failure> {
    let dataset = read_jsonl(&read(&a.dataset)?)
        .with_context(|| format!("invalid dataset {}", a.dataset.display()))?;
    let mode = MatchMode::from(a.mode);
    let (json, table) = match model_source(&a.lm, a.seed)? {
        ModelSource::Remote(model) => {
            if a.masked || a.paired {
                return Err(anyhow!("remote models only support --masked=false").into());
            }
            let report = run_text_eval(&dataset, &model, mode)?;
            (serde_json::to_string_pretty(&report)?, render_table(&[&report]))
        }
        ModelSource::Mock(spec) => {
            let vocab = Arc::new(eval_vocabulary(&dataset));
            let config = EvalConfig {
                masked: a.masked,
                mode,
                max_tokens: a.max_tokens,
                jobs: a.jobs,
            };
            if a.paired {
                let report = run_paired(&dataset, &spec, vocab, &config)?;
                let table = render_table(&[&report.masked, &report.unmasked]);
                (serde_json::to_string_pretty(&report)?, table)
            } else {
                let report = run_eval(&dataset, &spec, vocab, &config)?;
                (serde_json::to_string_pretty(&report)?, render_table(&[&report]))
            }
        }
    };
    if let Some(path) = &a.output {
        write(path, &(json + "\n"))?;
    }
    print!("{table}");
    Ok(())
}

fn buggy_masked_loss(rec: &callmask::metrics::StepRecord) -> Result<f64, callmask::metrics::MetricError> {
    loss_unmasked(rec).map(|l| l + 1e-3)
}

fn cmd_theorems(a: TheoremArgs) -> Result<(), Failure> {
    let loss_fn = if a.inject_bug {
        buggy_masked_loss
    } else {
        loss_masked
    };
    let loss_sizes = a.vocab_size.map_or(vec![32, 1000], |v| vec![v]);
    let precision_sizes: Vec<usize> = match a.vocab_size {
        Some(v) if a.exhaustive || v <= 16 => vec![v],
        Some(_) => Vec::new(),
        None => (4..=8).collect(),
    };
    if a.vocab_size == Some(0) {
        return Err(anyhow!("--vocab-size must be positive").into());
    }
    if a.exhaustive && a.vocab_size.is_some_and(|v| v > 16) {
        return Err(anyhow!("exhaustive enumeration supports at most 16 tokens").into());
    }

    let mut failed = false;
    let mut dumps = Vec::new();
    for (i, &n) in loss_sizes.iter().enumerate() {
        let r = theorem_loss_check_with(a.trials, n, a.seed.wrapping_add(i as u64), loss_fn);
        println!(
            "loss      |V|={n:<5} trials={:<6} strict={:<6} equal={:<5} violations={:<4} {}",
            r.trials,
            r.strict_trials,
            r.equal_trials,
            r.violations.len(),
            verdict(r.passed())
        );
        failed |= !r.passed();
        if let Some(c) = r.violations.first() {
            println!("  counterexample: {}", serde_json::to_string(c)?);
        }
        dumps.push(serde_json::to_value(&r)?);
    }
    for &n in &precision_sizes {
        let r = theorem_precision_check(n, a.distributions, a.seed.wrapping_add(n as u64));
        println!(
            "precision |V|={n:<5} checks={:<8} improved={:<7} violations={:<4} {}",
            r.checks,
            r.improvements,
            r.violations.len(),
            verdict(r.passed())
        );
        failed |= !r.passed();
        if let Some(c) = r.violations.first() {
            println!("  counterexample: {}", serde_json::to_string(c)?);
        }
        dumps.push(serde_json::to_value(&r)?);
    }
    if let Some(path) = &a.output {
        write(path, &(serde_json::to_string_pretty(&dumps)? + "\n"))?;
    }
    if failed {
        return Err(fail(EXIT_COUNTEREXAMPLE, anyhow!("counterexample found")));
    }
    Ok(())
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

fn cmd_dataset(a: DatasetArgs) -> Result<(), Failure> {
    let registry = registry_at(&a.registry)?;
    let positives = parse_positive_corpus(&read(&a.positives)?, &registry)
        .with_context(|| format!("invalid corpus {}", a.positives.display()))?;
    let negatives = parse_negative_corpus(&read(&a.negatives)?);
    let points: Vec<DataPoint> = match a.kind {
        SetKind::Eval => build_eval_set(&registry, &positives, &negatives, a.seed)?,
        SetKind::Train => {
            let config = SamplingConfig {
                seed: a.seed,
                ..SamplingConfig::default()
            };
            build_train_set(&registry, &positives, &negatives, &config, &TermFrequencyEmbedding::for_registry(&registry))?
        }
    };
    write(&a.output, &write_jsonl(&points))?;
    let solvable = points.iter().filter(|p| p.solvable).count();
    println!(
        "wrote {} entries ({solvable} solvable, {} unsolvable) to {}",
        points.len(),
        points.len() - solvable,
        a.output.display()
    );
    Ok(())
}

fn cmd_trie_dump(registry: Option<PathBuf>, word_list: Option<String>) -> Result<(), Failure> {
    let names: Vec<String> = match (registry, word_list) {
        (Some(path), None) => registry_at(&path)?
            .functions()
            .iter()
            .map(|f| f.name.clone())
            .collect(),
        (None, Some(w)) => w.split(',').map(|s| s.trim().to_string()).collect(),
        _ => return Err(anyhow!("pass --registry or --words").into()),
    };
    let trie = Trie::from_words(&names)?;
    for p in trie.get_all_prefixes() {
        println!("{p}");
    }
    Ok(())
}
