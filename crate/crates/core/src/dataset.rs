//! Prompt rendering and datapoint construction: similar-function retrieval
//! over a rank window, positive and negative datapoints, balanced
//! evaluation sets, and the line-delimited dataset file format.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::schema::{
    parse_call, render_stub_with, CallError, CallExpression, DocQuote, FunctionRegistry,
    FunctionSchema, RegistryEntry, SchemaError, Value, END_MARKER, SENTINEL_NAME,
};

/// System preamble opening every prompt.
pub const PREAMBLE: &str = "You are an assistant, and you need to call find appropriate functions according to the query of the users. Firstly, find the relevant functions, then get the function arguments by understanding the user's query. The following functions are available for you to fetch further data to answer user questions:";

/// The fallback function's block as it appears in prompts.
pub const SENTINEL_STUB: &str = "def no_relevant_function(user_query):
  '''
  Call this when no other provided function can be called to answer the user query.
  Args:
    user_query (str): The user_query that cannot be answered by any other function calls.
  '''";

/// Candidate functions shown next to the sentinel in evaluation entries.
pub const EVAL_CANDIDATES: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DatasetError {
    #[error("function list lacks `{SENTINEL_NAME}`")]
    MissingSentinel,
    #[error("registry has {available} candidate functions, {needed} needed")]
    RegistryTooSmall { needed: usize, available: usize },
    #[error("{positives} positive specs but {negatives} negative specs")]
    UnbalancedSpecs { positives: usize, negatives: usize },
    #[error("unknown function `{0}`")]
    UnknownFunction(String),
    #[error(transparent)]
    Call(#[from] CallError),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
}

// ---------------------------------------------------------------------------
// Prompts

/// Renders the prompt: preamble, function stubs, query, and optionally the
/// response line and the thought line. `response` is the call text, with or
/// without the end marker.
pub fn render_prompt(
    functions: &[FunctionSchema],
    query: &str,
    response: Option<&str>,
    thought: Option<&str>,
) -> Result<String, DatasetError> {
    if !functions.iter().any(FunctionSchema::is_sentinel) {
        return Err(DatasetError::MissingSentinel);
    }
    let mut out = format!("{PREAMBLE}\n\nFunction:\n\n");
    for f in functions {
        if f.is_sentinel() {
            out.push_str(SENTINEL_STUB);
        } else {
            out.push_str(&render_stub_with(f, DocQuote::Single));
        }
        out.push_str("\n\n\n");
    }
    out.push_str(query);
    if let Some(r) = response {
        out.push_str("\n\nResponse:");
        out.push_str(r.strip_suffix(END_MARKER).unwrap_or(r));
        out.push_str(END_MARKER);
    }
    if let Some(t) = thought {
        out.push_str("\n\nThought:");
        out.push_str(t);
    }
    Ok(out)
}

/// Trims trailing whitespace on every line and around the whole text.
pub fn normalize_whitespace(text: &str) -> String {
    text.lines()
        .map(str::trim_end)
        .collect::<Vec<_>>()
        .join("\n")
        .trim()
        .to_string()
}

// ---------------------------------------------------------------------------
// Embeddings and retrieval

pub trait EmbeddingProvider: Send + Sync {
    fn embed(&self, text: &str) -> Vec<f64>;
}

/// Term-frequency counts of lowercased alphanumeric words over a vocabulary
/// fitted on a corpus. Words outside the vocabulary share one extra slot.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TermFrequencyEmbedding {
    index: BTreeMap<String, usize>,
}

impl TermFrequencyEmbedding {
    pub fn fit<I, S>(corpus: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut index = BTreeMap::new();
        for text in corpus {
            for w in words(text.as_ref()) {
                let next = index.len();
                index.entry(w).or_insert(next);
            }
        }
        TermFrequencyEmbedding { index }
    }

    /// Fitted on the descriptions of every function in `registry`.
    pub fn for_registry(registry: &FunctionRegistry) -> Self {
        Self::fit(registry.functions().iter().map(|f| f.description.as_str()))
    }

    pub fn dims(&self) -> usize {
        self.index.len() + 1
    }
}

impl EmbeddingProvider for TermFrequencyEmbedding {
    fn embed(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dims()];
        let oov = self.index.len();
        for w in words(text) {
            v[self.index.get(&w).copied().unwrap_or(oov)] += 1.0;
        }
        v
    }
}

/// Lowercased runs of ASCII letters and digits.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_ascii_lowercase)
        .collect()
}

fn stable_hash(s: &str) -> u64 {
    let digest = Sha256::digest(s.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    /// Positive share of the positive:negative ratio.
    pub positive_count: usize,
    /// Negative share of the positive:negative ratio.
    pub negative_count: usize,
    pub similar_k: usize,
    /// Inclusive, 1-indexed similarity ranks to sample from.
    pub rank_window: (usize, usize),
    pub positives_per_api: usize,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            positive_count: 1,
            negative_count: 1,
            similar_k: 3,
            rank_window: (5, 10),
            positives_per_api: 5,
            seed: 0,
        }
    }
}

/// Every non-sentinel function other than `target`, most similar first.
/// Ties go to the lexicographically smaller name.
pub fn rank_candidates<'r>(
    registry: &'r FunctionRegistry,
    target: &FunctionSchema,
    embedder: &dyn EmbeddingProvider,
) -> Vec<(&'r FunctionSchema, f64)> {
    let anchor = embedder.embed(&target.description);
    let mut ranked: Vec<(&FunctionSchema, f64)> = registry
        .candidates()
        .filter(|f| f.name != target.name)
        .map(|f| (f, cosine(&anchor, &embedder.embed(&f.description))))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.name.cmp(&b.0.name)));
    ranked
}

/// Samples `similar_k` functions uniformly from the configured rank window.
/// Fails when fewer than `rank_window.1` other candidates exist.
pub fn similar_functions(
    registry: &FunctionRegistry,
    target: &FunctionSchema,
    config: &SamplingConfig,
    embedder: &dyn EmbeddingProvider,
) -> Result<Vec<FunctionSchema>, DatasetError> {
    let ranked = rank_candidates(registry, target, embedder);
    let (low, high) = config.rank_window;
    if ranked.len() < high {
        return Err(DatasetError::RegistryTooSmall {
            needed: high + 1,
            available: ranked.len() + 1,
        });
    }
    sample_ranks(&ranked, low, high, target, config)
}

/// Like [`similar_functions`], but on small registries the window is clamped
/// to the available ranks and then widened toward rank 1 until it holds
/// `similar_k` functions (or every candidate).
pub fn similar_functions_or_fallback(
    registry: &FunctionRegistry,
    target: &FunctionSchema,
    config: &SamplingConfig,
    embedder: &dyn EmbeddingProvider,
) -> Vec<FunctionSchema> {
    let ranked = rank_candidates(registry, target, embedder);
    let (low, high) = config.rank_window;
    let high = high.min(ranked.len());
    let mut low = low.max(1).min(high.max(1));
    while low > 1 && high + 1 - low < config.similar_k {
        low -= 1;
    }
    if high == 0 {
        return Vec::new();
    }
    sample_ranks(&ranked, low, high, target, config).unwrap_or_default()
}

fn sample_ranks(
    ranked: &[(&FunctionSchema, f64)],
    low: usize,
    high: usize,
    target: &FunctionSchema,
    config: &SamplingConfig,
) -> Result<Vec<FunctionSchema>, DatasetError> {
    if config.similar_k == 0 {
        return Ok(Vec::new());
    }
    let window = &ranked[low.max(1) - 1..high];
    if window.len() < config.similar_k {
        return Err(DatasetError::RegistryTooSmall {
            needed: config.similar_k,
            available: window.len(),
        });
    }
    let mut rng = entry_rng(config.seed, stable_hash(&target.name));
    Ok(window
        .choose_multiple(&mut rng, config.similar_k)
        .map(|(f, _)| (*f).clone())
        .collect())
}

fn entry_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

// ---------------------------------------------------------------------------
// Datapoints

#[derive(Debug, Clone, PartialEq)]
pub struct DataPoint {
    pub functions: Vec<FunctionSchema>,
    pub query: String,
    pub gold: CallExpression,
    pub thought: Option<String>,
    pub solvable: bool,
}

impl DataPoint {
    /// Inference-time prompt, ending after the query.
    pub fn prompt(&self) -> String {
        render_prompt(&self.functions, &self.query, None, None)
            .expect("datapoints always carry the sentinel")
    }

    /// Training form with the response and, when present, the thought.
    pub fn training_text(&self) -> String {
        render_prompt(
            &self.functions,
            &self.query,
            Some(&self.gold.render_body()),
            self.thought.as_deref(),
        )
        .expect("datapoints always carry the sentinel")
    }

    /// Registry of the presented functions.
    pub fn registry(&self) -> FunctionRegistry {
        FunctionRegistry::new(self.functions.clone()).expect("presented functions are distinct")
    }

    /// Checks the solvable flag and that the gold call type-checks against
    /// one of the presented functions.
    pub fn check(&self) -> Result<(), DatasetError> {
        if !self.functions.iter().any(FunctionSchema::is_sentinel) {
            return Err(DatasetError::MissingSentinel);
        }
        let registry = FunctionRegistry::new(self.functions.clone())?;
        self.gold.validate(&registry)?;
        if self.solvable == (self.gold.function == SENTINEL_NAME) {
            return Err(DatasetError::Malformed {
                line: 0,
                message: "solvable flag disagrees with the gold function".into(),
            });
        }
        Ok(())
    }
}

/// Sentinel first, remaining functions in seeded random order.
fn arrange(mut others: Vec<FunctionSchema>, rng: &mut ChaCha8Rng) -> Vec<FunctionSchema> {
    others.shuffle(rng);
    let mut out = Vec::with_capacity(others.len() + 1);
    out.push(FunctionSchema::sentinel());
    out.extend(others);
    out
}

/// A solvable datapoint: the target, `similar_k` similar functions and the
/// sentinel.
pub fn build_datapoint(
    target: &FunctionSchema,
    query: &str,
    gold_args: Vec<Value>,
    registry: &FunctionRegistry,
    config: &SamplingConfig,
    embedder: &dyn EmbeddingProvider,
) -> Result<DataPoint, DatasetError> {
    let gold = CallExpression::new(target.name.clone(), gold_args);
    gold.validate(&FunctionRegistry::new(vec![target.clone()])?)?;
    let mut others = similar_functions_or_fallback(registry, target, config, embedder);
    others.push(target.clone());
    let mut rng = entry_rng(config.seed, stable_hash(query) ^ stable_hash(&target.name));
    Ok(DataPoint {
        functions: arrange(others, &mut rng),
        query: query.to_string(),
        gold,
        thought: None,
        solvable: true,
    })
}

/// An unsolvable datapoint whose gold answer is the sentinel call.
pub fn build_negative(
    query: &str,
    distractors: &[FunctionSchema],
    config: &SamplingConfig,
) -> DataPoint {
    let mut rng = entry_rng(config.seed, stable_hash(query));
    let others = distractors
        .iter()
        .filter(|f| !f.is_sentinel())
        .cloned()
        .collect();
    DataPoint {
        functions: arrange(others, &mut rng),
        query: query.to_string(),
        gold: CallExpression::sentinel(query),
        thought: None,
        solvable: false,
    }
}

/// A query answerable by one registered function.
#[derive(Debug, Clone, PartialEq)]
pub struct PositiveSpec {
    pub query: String,
    pub gold: CallExpression,
    pub thought: Option<String>,
}

/// Balanced evaluation set. Each entry shows four distinct candidate
/// functions picked at random (the gold one among them for solvable
/// entries) plus the sentinel. Solvable and unsolvable entries alternate.
pub fn build_eval_set(
    registry: &FunctionRegistry,
    positives: &[PositiveSpec],
    negatives: &[String],
    seed: u64,
) -> Result<Vec<DataPoint>, DatasetError> {
    if positives.len() != negatives.len() {
        return Err(DatasetError::UnbalancedSpecs {
            positives: positives.len(),
            negatives: negatives.len(),
        });
    }
    let candidates: Vec<&FunctionSchema> = registry.candidates().collect();
    if candidates.len() < EVAL_CANDIDATES {
        return Err(DatasetError::RegistryTooSmall {
            needed: EVAL_CANDIDATES + 1,
            available: registry.len(),
        });
    }
    for p in positives {
        p.gold.validate(registry)?;
        if p.gold.function == SENTINEL_NAME {
            return Err(DatasetError::Malformed {
                line: 0,
                message: format!("positive query {:?} has a sentinel gold call", p.query),
            });
        }
    }
    (0..positives.len() * 2)
        .into_par_iter()
        .map(|i| {
            let mut rng = entry_rng(seed, i as u64);
            if i % 2 == 0 {
                let p = &positives[i / 2];
                let target = registry.get(&p.gold.function).expect("validated above");
                let mut others: Vec<FunctionSchema> = candidates
                    .iter()
                    .filter(|f| f.name != target.name)
                    .map(|f| (*f).clone())
                    .collect::<Vec<_>>()
                    .choose_multiple(&mut rng, EVAL_CANDIDATES - 1)
                    .cloned()
                    .collect();
                others.push(target.clone());
                Ok(DataPoint {
                    functions: arrange(others, &mut rng),
                    query: p.query.clone(),
                    gold: p.gold.clone(),
                    thought: p.thought.clone(),
                    solvable: true,
                })
            } else {
                let query = &negatives[i / 2];
                let others: Vec<FunctionSchema> = candidates
                    .choose_multiple(&mut rng, EVAL_CANDIDATES)
                    .map(|f| (*f).clone())
                    .collect();
                Ok(DataPoint {
                    functions: arrange(others, &mut rng),
                    query: query.clone(),
                    gold: CallExpression::sentinel(query),
                    thought: None,
                    solvable: false,
                })
            }
        })
        .collect()
}

/// Training set: every positive (at most `positives_per_api` per function)
/// with similar functions, plus negatives in the configured ratio, each
/// surrounded by `similar_k + 1` random distractors.
pub fn build_train_set(
    registry: &FunctionRegistry,
    positives: &[PositiveSpec],
    negatives: &[String],
    config: &SamplingConfig,
    embedder: &dyn EmbeddingProvider,
) -> Result<Vec<DataPoint>, DatasetError> {
    let mut per_api: BTreeMap<&str, usize> = BTreeMap::new();
    let mut out = Vec::new();
    for p in positives {
        let n = per_api.entry(p.gold.function.as_str()).or_default();
        if *n >= config.positives_per_api {
            continue;
        }
        *n += 1;
        let target = registry
            .get(&p.gold.function)
            .ok_or_else(|| DatasetError::UnknownFunction(p.gold.function.clone()))?;
        let mut dp = build_datapoint(target, &p.query, p.gold.arguments.clone(), registry, config, embedder)?;
        dp.thought = p.thought.clone();
        out.push(dp);
    }
    let wanted = if config.positive_count == 0 {
        negatives.len()
    } else {
        out.len() * config.negative_count / config.positive_count
    };
    let candidates: Vec<FunctionSchema> = registry.candidates().cloned().collect();
    for (i, query) in negatives.iter().take(wanted).enumerate() {
        let mut rng = entry_rng(config.seed ^ 0x6e65_6761_7469_7665, i as u64);
        let distractors: Vec<FunctionSchema> = candidates
            .choose_multiple(&mut rng, config.similar_k + 1)
            .cloned()
            .collect();
        out.push(build_negative(query, &distractors, config));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Files

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DataPointRecord {
    functions: Vec<RegistryEntry>,
    query: String,
    gold: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    thought: Option<String>,
    solvable: bool,
}

/// One JSON object per line.
pub fn write_jsonl(points: &[DataPoint]) -> String {
    let mut out = String::new();
    for p in points {
        let rec = DataPointRecord {
            functions: p.functions.iter().map(RegistryEntry::from).collect(),
            query: p.query.clone(),
            gold: p.gold.render_body(),
            thought: p.thought.clone(),
            solvable: p.solvable,
        };
        out.push_str(&serde_json::to_string(&rec).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn read_jsonl(text: &str) -> Result<Vec<DataPoint>, DatasetError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| DatasetError::Malformed {
            line: i + 1,
            message,
        };
        let rec: DataPointRecord =
            serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
        let functions = rec
            .functions
            .into_iter()
            .map(FunctionSchema::try_from)
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| malformed(e.to_string()))?;
        let registry = FunctionRegistry::new(functions.clone()).map_err(|e| malformed(e.to_string()))?;
        let gold = parse_call(&rec.gold, &registry).map_err(|e| malformed(e.to_string()))?;
        let point = DataPoint {
            functions,
            query: rec.query,
            gold,
            thought: rec.thought,
            solvable: rec.solvable,
        };
        point.check().map_err(|e| malformed(e.to_string()))?;
        out.push(point);
    }
    Ok(out)
}

/// Positive corpus: `call<TAB>query` per line. Blank lines and lines
/// starting with `#` are skipped.
pub fn parse_positive_corpus(
    text: &str,
    registry: &FunctionRegistry,
) -> Result<Vec<PositiveSpec>, DatasetError> {
    corpus_lines(text)
        .map(|(n, line)| {
            let (call, query) = line.split_once('\t').ok_or_else(|| DatasetError::Malformed {
                line: n,
                message: "expected `call<TAB>query`".into(),
            })?;
            let gold = parse_call(call.trim(), registry).map_err(|e| DatasetError::Malformed {
                line: n,
                message: e.to_string(),
            })?;
            Ok(PositiveSpec {
                query: query.trim().to_string(),
                gold,
                thought: None,
            })
        })
        .collect()
}

/// Negative corpus: one query per line.
pub fn parse_negative_corpus(text: &str) -> Vec<String> {
    corpus_lines(text).map(|(_, l)| l.trim().to_string()).collect()
}

fn corpus_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
}
