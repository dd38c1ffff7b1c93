//! Benchmark runner: scripted mock language models, masked and unmasked
//! decoding over a dataset, and exact-match scoring.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{words, DataPoint};
use crate::decoder::{
    decode_greedy, decode_unmasked, new_session, DecodeError, LanguageModel, Vocabulary,
    DEFAULT_MAX_TOKENS,
};
use crate::schema::{parse_raw_call, render_call, CallExpression, Value, END_MARKER};

/// Mass left off the scripted token by the oracle.
pub const ORACLE_DELTA: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("bad model spec {spec:?}: {reason}")]
    BadSpec { spec: String, reason: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("entry {index}: {source}")]
    Setup { index: usize, source: DecodeError },
    #[error("thread pool: {0}")]
    Pool(String),
}

// ---------------------------------------------------------------------------
// Mock models

#[derive(Debug, Clone, PartialEq)]
pub enum MockVariant {
    /// Follows the script with mass `1 - ORACLE_DELTA`.
    Oracle,
    /// Oracle whose top token is redirected with probability `eps` per step.
    Noisy { eps: f64 },
    /// Fresh uniform random weights at every step.
    Random,
    /// Pulls the text toward the attractor strings while it is a prefix of
    /// one of them; random elsewhere.
    Biased {
        attractors: Vec<String>,
        strength: f64,
    },
}

/// A deterministic mock. Distributions depend only on the seeds, the entry
/// stream and the context (its length, or its text for the biased variant),
/// so a masked and an unmasked run over the same entry share their noise.
#[derive(Debug, Clone)]
pub struct MockLm {
    variant: MockVariant,
    script: Vec<u32>,
    vocab: Arc<Vocabulary>,
    seed: u64,
    stream: u64,
}

impl MockLm {
    pub fn new(variant: MockVariant, script: Vec<u32>, vocab: Arc<Vocabulary>, seed: u64, stream: u64) -> Self {
        MockLm {
            variant,
            script,
            vocab,
            seed,
            stream,
        }
    }

    fn step_rng(&self, t: usize, salt: u64) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&self.stream.to_le_bytes());
        key[16..24].copy_from_slice(&(t as u64).to_le_bytes());
        key[24..].copy_from_slice(&salt.to_le_bytes());
        ChaCha8Rng::from_seed(key)
    }

    fn random_dist(&self, t: usize) -> Vec<f64> {
        let mut rng = self.step_rng(t, 1);
        let w: Vec<f64> = (0..self.vocab.len()).map(|_| rng.gen::<f64>()).collect();
        normalize(w)
    }

    fn oracle_dist(&self, gold: usize) -> Vec<f64> {
        let n = self.vocab.len();
        if n == 1 {
            return vec![1.0];
        }
        let mut d = vec![ORACLE_DELTA / (n - 1) as f64; n];
        d[gold] = 1.0 - ORACLE_DELTA;
        d
    }

    fn noisy_dist(&self, t: usize, gold: usize, eps: f64) -> Vec<f64> {
        let n = self.vocab.len();
        let mut rng = self.step_rng(t, 2);
        if n < 3 || !rng.gen_bool(eps.clamp(0.0, 1.0)) {
            return self.oracle_dist(gold);
        }
        let r = rng.gen_range(0..n);
        if r == gold {
            return self.oracle_dist(gold);
        }
        let mut d = vec![0.1 / (n - 2) as f64; n];
        d[r] = 0.6;
        d[gold] = 0.3;
        d
    }

    fn biased_dist(&self, context: &[u32], attractors: &[String], strength: f64) -> Vec<f64> {
        let text = self.vocab.decode(context);
        let mut d = self.random_dist(context.len());
        let pull = attractors.iter().find_map(|a| {
            let rest = a.strip_prefix(text.as_str())?;
            // longest token that keeps the text on the attractor
            self.vocab
                .tokens()
                .iter()
                .enumerate()
                .filter(|(_, tok)| !tok.is_empty() && rest.starts_with(tok.as_str()))
                .max_by_key(|(_, tok)| tok.len())
                .map(|(i, _)| i)
        });
        if let Some(i) = pull {
            let s = strength.clamp(0.0, 1.0);
            for p in d.iter_mut() {
                *p *= 1.0 - s;
            }
            d[i] += s;
        }
        d
    }
}

fn normalize(w: Vec<f64>) -> Vec<f64> {
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        let n = w.len() as f64;
        return vec![1.0 / n; w.len()];
    }
    w.into_iter().map(|x| x / total).collect()
}

impl LanguageModel for MockLm {
    fn next_distribution(&self, context: &[u32]) -> Vec<f64> {
        let t = context.len();
        let scripted = self.script.get(t).map(|&g| g as usize);
        match (&self.variant, scripted) {
            (MockVariant::Oracle, Some(g)) => self.oracle_dist(g),
            (MockVariant::Noisy { eps }, Some(g)) => self.noisy_dist(t, g, *eps),
            (MockVariant::Biased { attractors, strength }, _) => {
                self.biased_dist(context, attractors, *strength)
            }
            _ => self.random_dist(t),
        }
    }
}

/// Parsed `mock:<variant>[:<key>=<value>,...]` spec.
#[derive(Debug, Clone, PartialEq)]
pub struct MockSpec {
    pub variant: MockVariant,
    pub seed: u64,
}

impl MockSpec {
    /// The model for one dataset entry, scripted with its gold tokens.
    pub fn build(&self, entry: usize, script: Vec<u32>, vocab: Arc<Vocabulary>) -> MockLm {
        MockLm::new(self.variant.clone(), script, vocab, self.seed, entry as u64)
    }
}

/// Parses a mock spec string.
pub fn make_mock(spec: &str) -> Result<MockSpec, EvalError> {
    spec.parse()
}

impl FromStr for MockSpec {
    type Err = EvalError;

    fn from_str(spec: &str) -> Result<Self, EvalError> {
        let bad = |reason: &str| EvalError::BadSpec {
            spec: spec.to_string(),
            reason: reason.to_string(),
        };
        let rest = spec.strip_prefix("mock:").ok_or_else(|| bad("expected `mock:` prefix"))?;
        let (kind, params) = rest.split_once(':').unwrap_or((rest, ""));
        let mut eps = None;
        let mut seed = 0;
        let mut strength = None;
        let mut attractors = Vec::new();
        for kv in params.split(',').filter(|s| !s.is_empty()) {
            let (k, v) = kv.split_once('=').ok_or_else(|| bad("parameters are `key=value`"))?;
            match k.trim() {
                "eps" => eps = Some(v.parse::<f64>().map_err(|_| bad("eps is not a number"))?),
                "seed" => seed = v.parse().map_err(|_| bad("seed is not an integer"))?,
                "strength" => {
                    strength = Some(v.parse::<f64>().map_err(|_| bad("strength is not a number"))?)
                }
                "attractor" => attractors.push(v.to_string()),
                other => return Err(bad(&format!("unknown parameter `{other}`"))),
            }
        }
        let unit = |x: f64, what: &str| {
            if (0.0..=1.0).contains(&x) {
                Ok(x)
            } else {
                Err(bad(&format!("{what} must lie in [0, 1]")))
            }
        };
        let variant = match kind {
            "oracle" => MockVariant::Oracle,
            "noisy" => MockVariant::Noisy {
                eps: unit(eps.ok_or_else(|| bad("noisy needs eps"))?, "eps")?,
            },
            "random" => MockVariant::Random,
            "biased" => {
                if attractors.is_empty() {
                    return Err(bad("biased needs at least one attractor"));
                }
                MockVariant::Biased {
                    attractors,
                    strength: unit(strength.unwrap_or(0.9), "strength")?,
                }
            }
            _ => return Err(bad("variant must be oracle, noisy, random or biased")),
        };
        Ok(MockSpec { variant, seed })
    }
}

/// Per-entry model source for [`run_eval`].
pub trait ModelFactory: Sync {
    fn model(&self, index: usize, entry: &DataPoint, gold_tokens: &[u32], vocab: &Arc<Vocabulary>) -> Box<dyn LanguageModel>;
}

impl ModelFactory for MockSpec {
    fn model(&self, index: usize, _entry: &DataPoint, gold_tokens: &[u32], vocab: &Arc<Vocabulary>) -> Box<dyn LanguageModel> {
        Box::new(self.build(index, gold_tokens.to_vec(), Arc::clone(vocab)))
    }
}

/// Text-in, text-out model without logit access. Only unmasked evaluation
/// is possible through it.
pub trait TextModel: Sync {
    fn complete(&self, prompt: &str) -> Result<String, String>;
}

/// Character vocabulary extended with the end marker, every presented
/// function name, and the words of gold string arguments.
pub fn eval_vocabulary(dataset: &[DataPoint]) -> Vocabulary {
    let mut extra: Vec<String> = vec![END_MARKER.to_string()];
    for d in dataset {
        extra.extend(d.functions.iter().map(|f| f.name.clone()));
        for v in &d.gold.arguments {
            if let Value::Str(s) | Value::Enum(s) = v {
                extra.extend(words(s).into_iter().filter(|w| w.len() > 1 && s.contains(w.as_str())));
            }
        }
    }
    extra.sort();
    extra.dedup();
    Vocabulary::char_level_with(extra)
}

// ---------------------------------------------------------------------------
// Matching

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    #[default]
    Strict,
    Relaxed,
}

impl FromStr for MatchMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "strict" => Ok(MatchMode::Strict),
            "relaxed" => Ok(MatchMode::Relaxed),
            _ => Err(format!("unknown match mode {s:?}")),
        }
    }
}

impl fmt::Display for MatchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MatchMode::Strict => "strict",
            MatchMode::Relaxed => "relaxed",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureCause {
    WrongFunction,
    WrongArguments,
    ParseFailure,
    BudgetExhausted,
}

/// What a decode produced.
#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Call(CallExpression),
    Text(String),
}

/// Compares a prediction with the gold call. Returns `None` on a match.
pub fn match_call(predicted: &Prediction, gold: &CallExpression, mode: MatchMode) -> Option<FailureCause> {
    let (function, arguments) = match predicted {
        Prediction::Call(c) => (c.function.clone(), c.arguments.clone()),
        Prediction::Text(t) => {
            let text = match mode {
                MatchMode::Strict => t.clone(),
                MatchMode::Relaxed => relax(t),
            };
            match parse_raw_call(&text) {
                Ok(raw) => (raw.function, raw.arguments),
                Err(_) => return Some(FailureCause::ParseFailure),
            }
        }
    };
    if function != gold.function {
        return Some(FailureCause::WrongFunction);
    }
    let same = arguments.len() == gold.arguments.len()
        && arguments
            .iter()
            .zip(&gold.arguments)
            .all(|(a, b)| values_match(a, b, mode));
    (!same).then_some(FailureCause::WrongArguments)
}

fn values_match(a: &Value, b: &Value, mode: MatchMode) -> bool {
    match (a, b) {
        (Value::Str(x) | Value::Enum(x), Value::Str(y) | Value::Enum(y)) => x == y,
        (Value::Int(x), Value::Float(y)) | (Value::Float(y), Value::Int(x)) => {
            mode == MatchMode::Relaxed && (*x as f64) == *y
        }
        (Value::Dict(x), Value::Dict(y)) => {
            x.len() == y.len()
                && x.iter()
                    .zip(y)
                    .all(|((kx, vx), (ky, vy))| kx == ky && values_match(vx, vy, mode))
        }
        _ => a == b,
    }
}

/// Cuts the text at the first end marker, drops whitespace outside quoted
/// literals and turns double-quoted literals into single-quoted ones.
fn relax(text: &str) -> String {
    let body = text.split(END_MARKER).next().unwrap_or_default().trim();
    let mut out = String::with_capacity(body.len());
    let mut quote: Option<char> = None;
    for c in body.chars() {
        if let Some(q) = quote {
            if c == q {
                out.push('\'');
                quote = None;
            } else {
                out.push(c);
            }
            continue;
        }
        if c.is_whitespace() {
            continue;
        }
        // keep the canonical space after separators
        if matches!(out.chars().last(), Some(',' | ':')) && !matches!(c, ')' | '}') {
            out.push(' ');
        }
        if c == '\'' || c == '"' {
            out.push('\'');
            quote = Some(c);
        } else {
            out.push(c);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Breakdown {
    pub wrong_function: usize,
    pub wrong_arguments: usize,
    pub parse_failure: usize,
    pub budget_exhausted: usize,
}

impl Breakdown {
    fn add(&mut self, cause: FailureCause) {
        match cause {
            FailureCause::WrongFunction => self.wrong_function += 1,
            FailureCause::WrongArguments => self.wrong_arguments += 1,
            FailureCause::ParseFailure => self.parse_failure += 1,
            FailureCause::BudgetExhausted => self.budget_exhausted += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.wrong_function + self.wrong_arguments + self.parse_failure + self.budget_exhausted
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryOutcome {
    pub index: usize,
    pub solvable: bool,
    pub output: String,
    pub cause: Option<FailureCause>,
    pub tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub masked: bool,
    pub mode: MatchMode,
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub breakdown: Breakdown,
    pub entries: Vec<EntryOutcome>,
}

impl AccuracyReport {
    fn from_entries(masked: bool, mode: MatchMode, entries: Vec<EntryOutcome>) -> Self {
        let mut breakdown = Breakdown::default();
        for c in entries.iter().filter_map(|e| e.cause) {
            breakdown.add(c);
        }
        let total = entries.len();
        let correct = total - breakdown.total();
        AccuracyReport {
            masked,
            mode,
            total,
            correct,
            accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            breakdown,
            entries,
        }
    }

    pub fn label(&self) -> &'static str {
        if self.masked {
            "masked"
        } else {
            "unmasked"
        }
    }
}

/// Plain-text table of one or more reports.
pub fn render_table(reports: &[&AccuracyReport]) -> String {
    let mut out = format!(
        "{:<10} {:<8} {:>6} {:>8} {:>9} {:>9} {:>9} {:>6} {:>7}\n",
        "run", "mode", "total", "correct", "accuracy", "wrong_fn", "wrong_arg", "parse", "budget"
    );
    for r in reports {
        out.push_str(&format!(
            "{:<10} {:<8} {:>6} {:>8} {:>9.4} {:>9} {:>9} {:>6} {:>7}\n",
            r.label(),
            r.mode.to_string(),
            r.total,
            r.correct,
            r.accuracy,
            r.breakdown.wrong_function,
            r.breakdown.wrong_arguments,
            r.breakdown.parse_failure,
            r.breakdown.budget_exhausted
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub masked: bool,
    pub mode: MatchMode,
    pub max_tokens: usize,
    /// Worker threads; 0 picks the default.
    pub jobs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            masked: true,
            mode: MatchMode::Strict,
            max_tokens: DEFAULT_MAX_TOKENS,
            jobs: 0,
        }
    }
}

fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T, EvalError> {
    if jobs == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| EvalError::Pool(e.to_string()))?;
    Ok(pool.install(f))
}

/// Decodes every entry and scores it against its gold call.
pub fn run_eval(
    dataset: &[DataPoint],
    factory: &dyn ModelFactory,
    vocab: Arc<Vocabulary>,
    config: &EvalConfig,
) -> Result<AccuracyReport, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let outcomes = with_pool(config.jobs, || {
        dataset
            .par_iter()
            .enumerate()
            .map(|(index, entry)| eval_entry(index, entry, factory, &vocab, config))
            .collect::<Result<Vec<_>, _>>()
    })??;
    Ok(AccuracyReport::from_entries(config.masked, config.mode, outcomes))
}

fn eval_entry(
    index: usize,
    entry: &DataPoint,
    factory: &dyn ModelFactory,
    vocab: &Arc<Vocabulary>,
    config: &EvalConfig,
) -> Result<EntryOutcome, EvalError> {
    let setup = |source| EvalError::Setup { index, source };
    let gold_tokens = vocab.encode(&render_call(&entry.gold)).map_err(setup)?;
    let lm = factory.model(index, entry, &gold_tokens, vocab);
    let state = new_session(&entry.registry(), Arc::clone(vocab)).map_err(setup)?;
    let (output, tokens, cause) = if config.masked {
        match decode_greedy(&*lm, state, config.max_tokens) {
            Ok((call, trace)) => {
                let cause = match_call(&Prediction::Call(call.clone()), &entry.gold, config.mode);
                (render_call(&call), trace.len(), cause)
            }
            Err(DecodeError::BudgetExhausted { text, .. }) => {
                let n = text.len();
                (text, n, Some(FailureCause::BudgetExhausted))
            }
            Err(e) => (e.to_string(), 0, Some(FailureCause::ParseFailure)),
        }
    } else {
        match decode_unmasked(&*lm, state, config.max_tokens) {
            Ok((text, trace)) => {
                let cause = match_call(&Prediction::Text(text.clone()), &entry.gold, config.mode);
                (text, trace.len(), cause)
            }
            Err(DecodeError::BudgetExhausted { text, .. }) => {
                let n = text.len();
                (text, n, Some(FailureCause::BudgetExhausted))
            }
            Err(e) => (e.to_string(), 0, Some(FailureCause::ParseFailure)),
        }
    };
    Ok(EntryOutcome {
        index,
        solvable: entry.solvable,
        output,
        cause,
        tokens,
    })
}

/// Masked and unmasked runs over the same entries and models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedReport {
    pub masked: AccuracyReport,
    pub unmasked: AccuracyReport,
}

pub fn run_paired(
    dataset: &[DataPoint],
    factory: &dyn ModelFactory,
    vocab: Arc<Vocabulary>,
    config: &EvalConfig,
) -> Result<PairedReport, EvalError> {
    let masked = run_eval(
        dataset,
        factory,
        Arc::clone(&vocab),
        &EvalConfig {
            masked: true,
            ..config.clone()
        },
    )?;
    let unmasked = run_eval(
        dataset,
        factory,
        vocab,
        &EvalConfig {
            masked: false,
            ..config.clone()
        },
    )?;
    Ok(PairedReport { masked, unmasked })
}

/// Unmasked evaluation through a text-only model. Transport errors count
/// as parse failures and keep their message as the output.
pub fn run_text_eval(
    dataset: &[DataPoint],
    model: &dyn TextModel,
    mode: MatchMode,
) -> Result<AccuracyReport, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let entries = dataset
        .iter()
        .enumerate()
        .map(|(index, entry)| {
            let (output, cause) = match model.complete(&entry.prompt()) {
                Ok(text) => {
                    let cause = match_call(&Prediction::Text(text.clone()), &entry.gold, mode);
                    (text, cause)
                }
                Err(e) => (e, Some(FailureCause::ParseFailure)),
            };
            EntryOutcome {
                index,
                solvable: entry.solvable,
                tokens: 0,
                output,
                cause,
            }
        })
        .collect();
    Ok(AccuracyReport::from_entries(false, mode, entries))
}
