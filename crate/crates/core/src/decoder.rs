//! Conditional-mask decoding.
//!
//! At each step the language model proposes a distribution over the
//! vocabulary; [`DecodeState::compute_mask`] zeroes every token whose
//! characters would leave the response grammar, and the argmax of the
//! masked distribution is emitted. The grammar is
//!
//! ```text
//! response := name "(" [value ("," " "* value)*] ")" "<nexa_end>"
//! ```
//!
//! where `name` ranges over the registry and each value must match the
//! declared type of its position.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::schema::{
    parse_call, ArgType, CallError, CallExpression, FunctionRegistry, FunctionSchema, END_MARKER,
};
use crate::trie::{NodeId, Trie};
use crate::typematch::{LexState, Lexeme, Status};

/// Token budget used when the caller does not pick one.
pub const DEFAULT_MAX_TOKENS: usize = 512;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecodeError {
    #[error("vocabulary contains an empty token at id {0}")]
    EmptyToken(usize),
    #[error("character {ch:?} needed for {context} appears in no token")]
    UnspellableRegistry { ch: char, context: String },
    #[error("text cannot be tokenized: no token starts with {0:?}")]
    Untokenizable(char),
    #[error("every token is masked in phase {0}")]
    ConstraintDeadlock(String),
    #[error("token {0} is masked in the current state")]
    MaskedTokenStep(u32),
    #[error("token id {0} is outside the vocabulary")]
    UnknownToken(u32),
    #[error("decoding already finished")]
    AlreadyDone,
    #[error("no complete response within {max_tokens} tokens")]
    BudgetExhausted { max_tokens: usize, text: String },
    #[error("distribution has {found} entries, vocabulary has {expected}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("finished response failed to parse: {0}")]
    GrammarViolation(CallError),
}

// ---------------------------------------------------------------------------
// Vocabulary

/// Token strings indexed by id.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    lookup: HashMap<String, u32>,
    longest: usize,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self, DecodeError> {
        let mut lookup = HashMap::with_capacity(tokens.len());
        let mut longest = 0;
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(DecodeError::EmptyToken(i));
            }
            lookup.entry(t.clone()).or_insert(i as u32);
            longest = longest.max(t.chars().count());
        }
        Ok(Vocabulary {
            tokens,
            lookup,
            longest,
        })
    }

    /// One token per printable ASCII character, in code-point order.
    pub fn char_level() -> Self {
        Self::new((0x20u8..=0x7e).map(|b| (b as char).to_string()).collect())
            .expect("printable characters are non-empty")
    }

    /// Printable ASCII characters followed by `extra` multi-character tokens
    /// (duplicates dropped).
    pub fn char_level_with<I, S>(extra: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = (0x20u8..=0x7e).map(|b| (b as char).to_string()).collect();
        let mut seen: std::collections::HashSet<String> = tokens.iter().cloned().collect();
        for t in extra {
            let t = t.into();
            if !t.is_empty() && seen.insert(t.clone()) {
                tokens.push(t);
            }
        }
        Self::new(tokens).expect("tokens are non-empty")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.lookup.get(token).copied()
    }

    /// Greedy longest-match tokenization.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>, DecodeError> {
        let chars: Vec<(usize, char)> = text.char_indices().collect();
        let mut out = Vec::new();
        let mut i = 0;
        while i < chars.len() {
            let start = chars[i].0;
            let max = self.longest.min(chars.len() - i);
            let hit = (1..=max).rev().find_map(|n| {
                let end = chars.get(i + n).map_or(text.len(), |c| c.0);
                self.lookup.get(&text[start..end]).map(|&id| (id, n))
            });
            match hit {
                Some((id, n)) => {
                    out.push(id);
                    i += n;
                }
                None => return Err(DecodeError::Untokenizable(chars[i].1)),
            }
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter().filter_map(|&id| self.token(id)).collect()
    }

    fn covers(&self, ch: char) -> bool {
        self.tokens.iter().any(|t| t.contains(ch))
    }
}

// ---------------------------------------------------------------------------
// Grammar

/// A registry compiled for decoding: a trie over function names and the
/// argument recognizers of every function.
#[derive(Debug)]
pub struct Grammar {
    registry: FunctionRegistry,
    names: Trie,
    function_at: HashMap<NodeId, usize>,
    lexemes: Vec<Vec<Lexeme>>,
}

impl Grammar {
    pub fn new(registry: FunctionRegistry) -> Self {
        let names = Trie::from_words(registry.functions().iter().map(|f| f.name.as_str()))
            .expect("function names are identifiers");
        let function_at = registry
            .functions()
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let node = names.walk(Trie::root(), &f.name).expect("name was inserted");
                (node, i)
            })
            .collect();
        let lexemes = registry
            .functions()
            .iter()
            .map(|f| f.args.iter().map(|a| Lexeme::compile(&a.ty)).collect())
            .collect();
        Grammar {
            registry,
            names,
            function_at,
            lexemes,
        }
    }

    pub fn registry(&self) -> &FunctionRegistry {
        &self.registry
    }

    pub fn names(&self) -> &Trie {
        &self.names
    }

    fn schema(&self, function: usize) -> &FunctionSchema {
        &self.registry.functions()[function]
    }

    /// Checks that every character some call needs is present in a token.
    fn check_spellable(&self, vocab: &Vocabulary) -> Result<(), DecodeError> {
        let need = |ch: char, context: &str| {
            if vocab.covers(ch) {
                Ok(())
            } else {
                Err(DecodeError::UnspellableRegistry {
                    ch,
                    context: context.to_string(),
                })
            }
        };
        for ch in "()".chars().chain(END_MARKER.chars()) {
            need(ch, "call syntax")?;
        }
        for f in self.registry.functions() {
            for ch in f.name.chars() {
                need(ch, &format!("function name `{}`", f.name))?;
            }
            if f.arity() > 1 {
                need(',', &format!("arguments of `{}`", f.name))?;
            }
            for a in &f.args {
                let context = format!("argument `{}` of `{}`", a.name, f.name);
                match &a.ty {
                    ArgType::String => need('\'', &context)?,
                    ArgType::Integer => need_any_digit(vocab, &context)?,
                    ArgType::Float => {
                        need_any_digit(vocab, &context)?;
                        need('.', &context)?;
                    }
                    ArgType::Dict => {
                        need('{', &context)?;
                        need('}', &context)?;
                    }
                    ArgType::Boolean => {
                        let ok = ["True", "False"]
                            .iter()
                            .any(|w| w.chars().all(|c| vocab.covers(c)));
                        if !ok {
                            let missing = "True".chars().find(|&c| !vocab.covers(c)).unwrap_or('T');
                            need(missing, &context)?;
                        }
                    }
                    ArgType::Enum(values) => {
                        need('\'', &context)?;
                        if !values.iter().any(|v| v.chars().all(|c| vocab.covers(c))) {
                            let missing = values[0].chars().find(|&c| !vocab.covers(c)).unwrap_or('\'');
                            need(missing, &context)?;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn step(&self, cursor: Cursor, ch: char) -> Option<Cursor> {
        match cursor {
            Cursor::FunctionName(node) => {
                if ch == '(' {
                    let f = *self.function_at.get(&node)?;
                    return Some(if self.lexemes[f].is_empty() {
                        Cursor::OpenParen { function: f }
                    } else {
                        Cursor::Value {
                            function: f,
                            index: 0,
                            lex: self.lexemes[f][0].start(),
                        }
                    });
                }
                self.names.child(node, ch).map(Cursor::FunctionName)
            }
            Cursor::OpenParen { .. } => (ch == ')').then_some(Cursor::EndMarker(0)),
            Cursor::Value {
                function,
                index,
                lex,
            } => {
                let lexeme = &self.lexemes[function][index];
                let next = lexeme.step(lex, ch);
                if next != LexState::Dead {
                    return Some(Cursor::Value {
                        function,
                        index,
                        lex: next,
                    });
                }
                if lexeme.status(lex) != Status::Complete {
                    return None;
                }
                let arity = self.lexemes[function].len();
                match ch {
                    ',' if index + 1 < arity => Some(Cursor::Separator {
                        function,
                        index: index + 1,
                    }),
                    ')' if index + 1 == arity => Some(Cursor::EndMarker(0)),
                    _ => None,
                }
            }
            Cursor::Separator { function, index } => {
                if ch == ' ' {
                    return Some(cursor);
                }
                let lexeme = &self.lexemes[function][index];
                let lex = lexeme.step(lexeme.start(), ch);
                (lex != LexState::Dead).then_some(Cursor::Value {
                    function,
                    index,
                    lex,
                })
            }
            Cursor::EndMarker(k) => {
                let expected = END_MARKER[k as usize..].chars().next()?;
                if ch != expected {
                    return None;
                }
                let k = k as usize + ch.len_utf8();
                Some(if k == END_MARKER.len() {
                    Cursor::Done
                } else {
                    Cursor::EndMarker(k as u8)
                })
            }
            Cursor::Done => None,
        }
    }

    fn run(&self, mut cursor: Cursor, text: &str) -> Option<Cursor> {
        for ch in text.chars() {
            cursor = self.step(cursor, ch)?;
        }
        Some(cursor)
    }
}

fn need_any_digit(vocab: &Vocabulary, context: &str) -> Result<(), DecodeError> {
    if ('0'..='9').any(|d| vocab.covers(d)) {
        Ok(())
    } else {
        Err(DecodeError::UnspellableRegistry {
            ch: '0',
            context: context.to_string(),
        })
    }
}

/// Position in the response grammar. Small and copyable so that mask
/// computation can simulate every token from the same starting point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Cursor {
    FunctionName(NodeId),
    OpenParen { function: usize },
    Value { function: usize, index: usize, lex: LexState },
    Separator { function: usize, index: usize },
    /// Number of bytes of the end marker already consumed.
    EndMarker(u8),
    Done,
}

/// Coarse decode phase, as reported in traces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "phase", content = "arg")]
pub enum Phase {
    FunctionName,
    /// Inside the parentheses of a zero-argument call.
    OpenParen,
    Value(usize),
    /// After a `,`, before the next value starts.
    Separator(usize),
    EndMarker,
    Done,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phase::Value(i) => write!(f, "Value({i})"),
            Phase::Separator(i) => write!(f, "Separator({i})"),
            other => write!(f, "{other:?}"),
        }
    }
}

impl From<Cursor> for Phase {
    fn from(c: Cursor) -> Self {
        match c {
            Cursor::FunctionName(_) => Phase::FunctionName,
            Cursor::OpenParen { .. } => Phase::OpenParen,
            Cursor::Value { index, .. } => Phase::Value(index),
            Cursor::Separator { index, .. } => Phase::Separator(index),
            Cursor::EndMarker(_) => Phase::EndMarker,
            Cursor::Done => Phase::Done,
        }
    }
}

// ---------------------------------------------------------------------------
// Masks

/// `{0,1}` vector over the vocabulary; `true` marks an unmasked token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskVector {
    allowed: Vec<bool>,
}

impl MaskVector {
    pub fn from_bools(allowed: Vec<bool>) -> Self {
        MaskVector { allowed }
    }

    /// Mask that keeps every token.
    pub fn full(len: usize) -> Self {
        MaskVector {
            allowed: vec![true; len],
        }
    }

    /// Mask keeping exactly `ids`.
    pub fn from_ids(len: usize, ids: impl IntoIterator<Item = usize>) -> Self {
        let mut allowed = vec![false; len];
        for i in ids {
            allowed[i] = true;
        }
        MaskVector { allowed }
    }

    pub fn len(&self) -> usize {
        self.allowed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.allowed.is_empty()
    }

    pub fn is_allowed(&self, id: usize) -> bool {
        self.allowed.get(id).copied().unwrap_or(false)
    }

    pub fn as_bools(&self) -> &[bool] {
        &self.allowed
    }

    /// Unmasked ids (V1).
    pub fn unmasked(&self) -> impl Iterator<Item = usize> + '_ {
        self.allowed.iter().enumerate().filter(|(_, &a)| a).map(|(i, _)| i)
    }

    /// Masked ids (V2).
    pub fn masked(&self) -> impl Iterator<Item = usize> + '_ {
        self.allowed.iter().enumerate().filter(|(_, &a)| !a).map(|(i, _)| i)
    }

    /// |V1|.
    pub fn cardinality(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }
}

/// Result of multiplying a distribution by a mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedDistribution {
    /// `dist ⊙ mask`, not renormalized.
    pub product: Vec<f64>,
    /// `product` divided by its sum, or uniform over V1 when that sum is 0.
    pub probs: Vec<f64>,
    /// Set when the unmasked mass was zero and the uniform fallback was used.
    pub fallback: bool,
}

/// Masks and renormalizes `dist`.
pub fn apply_mask(dist: &[f64], mask: &MaskVector) -> Result<MaskedDistribution, DecodeError> {
    if dist.len() != mask.len() {
        return Err(DecodeError::LengthMismatch {
            expected: mask.len(),
            found: dist.len(),
        });
    }
    let product: Vec<f64> = dist
        .iter()
        .zip(mask.as_bools())
        .map(|(&p, &keep)| if keep { p } else { 0.0 })
        .collect();
    let kept = mask.cardinality();
    if kept == 0 {
        return Err(DecodeError::ConstraintDeadlock("apply_mask".into()));
    }
    let mass: f64 = product.iter().sum();
    let (probs, fallback) = if mass > 0.0 && mass.is_finite() {
        (product.iter().map(|p| p / mass).collect(), false)
    } else {
        let u = 1.0 / kept as f64;
        (
            mask.as_bools()
                .iter()
                .map(|&keep| if keep { u } else { 0.0 })
                .collect(),
            true,
        )
    };
    Ok(MaskedDistribution {
        product,
        probs,
        fallback,
    })
}

/// Index of the largest entry; ties go to the lowest index, NaN never wins.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

// ---------------------------------------------------------------------------
// Language models

/// Anything that maps a token context to a next-token distribution.
pub trait LanguageModel: Send + Sync {
    /// Probabilities over the vocabulary for the token after `context`.
    fn next_distribution(&self, context: &[u32]) -> Vec<f64>;
}

impl<T: LanguageModel + ?Sized> LanguageModel for Box<T> {
    fn next_distribution(&self, context: &[u32]) -> Vec<f64> {
        (**self).next_distribution(context)
    }
}

impl<T: LanguageModel + ?Sized> LanguageModel for &T {
    fn next_distribution(&self, context: &[u32]) -> Vec<f64> {
        (**self).next_distribution(context)
    }
}

// ---------------------------------------------------------------------------
// Sessions

/// A live decode: grammar position plus everything emitted so far.
#[derive(Debug, Clone)]
pub struct DecodeState {
    grammar: Arc<Grammar>,
    vocab: Arc<Vocabulary>,
    cursor: Cursor,
    emitted: Vec<u32>,
    text: String,
    /// Byte offset in `text` where the current argument value started.
    value_start: Option<usize>,
}

/// Starts a session for `registry` over `vocab`.
pub fn new_session(
    registry: &FunctionRegistry,
    vocab: Arc<Vocabulary>,
) -> Result<DecodeState, DecodeError> {
    DecodeState::new(Arc::new(Grammar::new(registry.clone())), vocab)
}

impl DecodeState {
    pub fn new(grammar: Arc<Grammar>, vocab: Arc<Vocabulary>) -> Result<Self, DecodeError> {
        grammar.check_spellable(&vocab)?;
        Ok(DecodeState {
            grammar,
            vocab,
            cursor: Cursor::FunctionName(Trie::root()),
            emitted: Vec::new(),
            text: String::new(),
            value_start: None,
        })
    }

    pub fn phase(&self) -> Phase {
        self.cursor.into()
    }

    pub fn is_done(&self) -> bool {
        self.cursor == Cursor::Done
    }

    pub fn emitted(&self) -> &[u32] {
        &self.emitted
    }

    /// Concatenated strings of the emitted tokens.
    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn vocab(&self) -> &Arc<Vocabulary> {
        &self.vocab
    }

    pub fn grammar(&self) -> &Arc<Grammar> {
        &self.grammar
    }

    /// Schema of the function being called, once its `(` is emitted.
    pub fn resolved_schema(&self) -> Option<&FunctionSchema> {
        match self.cursor {
            Cursor::OpenParen { function }
            | Cursor::Value { function, .. }
            | Cursor::Separator { function, .. } => Some(self.grammar.schema(function)),
            Cursor::EndMarker(_) | Cursor::Done => {
                let name = self.text.split('(').next()?;
                self.grammar.registry.get(name)
            }
            Cursor::FunctionName(_) => None,
        }
    }

    /// Characters of the function name emitted so far.
    pub fn name_prefix(&self) -> &str {
        match self.cursor {
            Cursor::FunctionName(_) => &self.text,
            _ => self.text.split('(').next().unwrap_or(""),
        }
    }

    /// Characters of the argument value currently being generated.
    pub fn current_value(&self) -> Option<&str> {
        match self.cursor {
            Cursor::Value { .. } => self.value_start.map(|s| &self.text[s..]),
            _ => None,
        }
    }

    /// Whether appending `token` keeps the response viable.
    pub fn allows(&self, token: u32) -> bool {
        self.vocab
            .token(token)
            .is_some_and(|t| self.grammar.run(self.cursor, t).is_some())
    }

    /// The conditional mask for the next token.
    pub fn compute_mask(&self) -> Result<MaskVector, DecodeError> {
        if self.is_done() {
            return Err(DecodeError::AlreadyDone);
        }
        let allowed: Vec<bool> = self
            .vocab
            .tokens()
            .iter()
            .map(|t| self.grammar.run(self.cursor, t).is_some())
            .collect();
        if !allowed.iter().any(|&a| a) {
            return Err(DecodeError::ConstraintDeadlock(self.phase().to_string()));
        }
        Ok(MaskVector { allowed })
    }

    /// Appends `token`, which must be unmasked.
    pub fn step(&mut self, token: u32) -> Result<(), DecodeError> {
        if self.is_done() {
            return Err(DecodeError::AlreadyDone);
        }
        let text = self
            .vocab
            .token(token)
            .ok_or(DecodeError::UnknownToken(token))?;
        let mut cursor = self.cursor;
        let mut value_start = self.value_start;
        let mut offset = self.text.len();
        for ch in text.chars() {
            let next = self
                .grammar
                .step(cursor, ch)
                .ok_or(DecodeError::MaskedTokenStep(token))?;
            let entering_value = matches!(next, Cursor::Value { index, .. }
                if !matches!(cursor, Cursor::Value { index: i, .. } if i == index));
            if entering_value {
                // `(` opens the first value; a separator hands over the
                // value's own first character
                value_start = Some(match cursor {
                    Cursor::FunctionName(_) => offset + ch.len_utf8(),
                    _ => offset,
                });
            }
            cursor = next;
            offset += ch.len_utf8();
        }
        self.cursor = cursor;
        self.value_start = value_start;
        self.emitted.push(token);
        self.text.push_str(text);
        Ok(())
    }

    /// Parses the finished response.
    pub fn finish(&self) -> Result<CallExpression, DecodeError> {
        if !self.is_done() {
            return Err(DecodeError::BudgetExhausted {
                max_tokens: self.emitted.len(),
                text: self.text.clone(),
            });
        }
        parse_call(&self.text, &self.grammar.registry).map_err(DecodeError::GrammarViolation)
    }
}

// ---------------------------------------------------------------------------
// Traces

/// One greedy step.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub step: usize,
    pub phase: Phase,
    /// The model's distribution, before masking.
    pub dist: Vec<f64>,
    /// `None` for unmasked decoding.
    pub mask: Option<MaskVector>,
    pub chosen: u32,
    /// Probability of the chosen token in `dist ⊙ mask` (raw product).
    pub chosen_product: f64,
    /// Probability of the chosen token after renormalization.
    pub chosen_prob: f64,
    pub fallback: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DecodeTrace {
    pub steps: Vec<TraceStep>,
}

/// Line format of a serialized trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub phase: String,
    /// First 16 hex digits of SHA-256 over the little-endian distribution.
    pub dist_digest: String,
    pub mask_cardinality: Option<usize>,
    pub chosen: u32,
    pub token: String,
    pub chosen_product: f64,
    pub chosen_prob: f64,
    pub fallback: bool,
}

pub fn dist_digest(dist: &[f64]) -> String {
    let mut h = Sha256::new();
    for p in dist {
        h.update(p.to_le_bytes());
    }
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

impl DecodeTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn tokens(&self) -> Vec<u32> {
        self.steps.iter().map(|s| s.chosen).collect()
    }

    pub fn fallback_steps(&self) -> usize {
        self.steps.iter().filter(|s| s.fallback).count()
    }

    pub fn records(&self, vocab: &Vocabulary) -> Vec<TraceRecord> {
        self.steps
            .iter()
            .map(|s| TraceRecord {
                step: s.step,
                phase: s.phase.to_string(),
                dist_digest: dist_digest(&s.dist),
                mask_cardinality: s.mask.as_ref().map(MaskVector::cardinality),
                chosen: s.chosen,
                token: vocab.token(s.chosen).unwrap_or_default().to_string(),
                chosen_product: s.chosen_product,
                chosen_prob: s.chosen_prob,
                fallback: s.fallback,
            })
            .collect()
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self, vocab: &Vocabulary) -> String {
        self.records(vocab)
            .iter()
            .map(|r| serde_json::to_string(r).expect("trace records serialize") + "\n")
            .collect()
    }
}

fn checked_dist(
    lm: &dyn LanguageModel,
    context: &[u32],
    vocab: &Vocabulary,
) -> Result<Vec<f64>, DecodeError> {
    let dist = lm.next_distribution(context);
    if dist.len() != vocab.len() {
        return Err(DecodeError::LengthMismatch {
            expected: vocab.len(),
            found: dist.len(),
        });
    }
    Ok(dist)
}

/// Masked greedy decoding from `state` until the response is complete.
pub fn decode_greedy(
    lm: &dyn LanguageModel,
    mut state: DecodeState,
    max_tokens: usize,
) -> Result<(CallExpression, DecodeTrace), DecodeError> {
    let mut trace = DecodeTrace::default();
    for step in 0..max_tokens {
        if state.is_done() {
            break;
        }
        let phase = state.phase();
        let dist = checked_dist(lm, state.emitted(), &state.vocab)?;
        let mask = state.compute_mask()?;
        let masked = apply_mask(&dist, &mask)?;
        let chosen = argmax(&masked.probs).expect("mask keeps at least one token");
        state.step(chosen as u32)?;
        trace.steps.push(TraceStep {
            step,
            phase,
            chosen: chosen as u32,
            chosen_product: masked.product[chosen],
            chosen_prob: masked.probs[chosen],
            fallback: masked.fallback,
            dist,
            mask: Some(mask),
        });
    }
    if !state.is_done() {
        return Err(DecodeError::BudgetExhausted {
            max_tokens,
            text: state.text,
        });
    }
    Ok((state.finish()?, trace))
}

/// Replays `gold` through the grammar, recording the distribution and mask
/// in front of every gold token. `chosen` is the masked argmax, which may
/// differ from the gold token that is actually fed.
pub fn teacher_forced_trace(
    lm: &dyn LanguageModel,
    mut state: DecodeState,
    gold: &[u32],
) -> Result<DecodeTrace, DecodeError> {
    let mut trace = DecodeTrace::default();
    for (step, &g) in gold.iter().enumerate() {
        let phase = state.phase();
        let dist = checked_dist(lm, state.emitted(), &state.vocab)?;
        let mask = state.compute_mask()?;
        let masked = apply_mask(&dist, &mask)?;
        let chosen = argmax(&masked.probs).expect("mask keeps at least one token");
        state.step(g)?;
        trace.steps.push(TraceStep {
            step,
            phase,
            chosen: chosen as u32,
            chosen_product: masked.product[chosen],
            chosen_prob: masked.probs[chosen],
            fallback: masked.fallback,
            dist,
            mask: Some(mask),
        });
    }
    Ok(trace)
}

/// Plain greedy decoding with no mask. Stops once the end marker appears.
pub fn decode_unmasked(
    lm: &dyn LanguageModel,
    state: DecodeState,
    max_tokens: usize,
) -> Result<(String, DecodeTrace), DecodeError> {
    let vocab = Arc::clone(&state.vocab);
    let mut context = state.emitted;
    let mut text = state.text;
    let mut trace = DecodeTrace::default();
    for step in 0..max_tokens {
        if text.contains(END_MARKER) {
            break;
        }
        let dist = checked_dist(lm, &context, &vocab)?;
        let chosen = argmax(&dist).unwrap_or(0);
        let token = vocab.token(chosen as u32).unwrap_or_default();
        text.push_str(token);
        context.push(chosen as u32);
        trace.steps.push(TraceStep {
            step,
            phase: Phase::FunctionName,
            chosen: chosen as u32,
            chosen_product: dist[chosen],
            chosen_prob: dist[chosen],
            fallback: false,
            dist,
            mask: None,
        });
    }
    if !text.contains(END_MARKER) {
        return Err(DecodeError::BudgetExhausted { max_tokens, text });
    }
    Ok((text, trace))
}
