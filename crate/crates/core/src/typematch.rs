//! Incremental recognizers for argument literals.
//!
//! Each recognizer consumes one character at a time and reports whether the
//! text so far can still be extended into a valid literal of its type.
//!
//! Lexeme grammars:
//!
//! | type    | literal                                                   |
//! |---------|-----------------------------------------------------------|
//! | string  | `'` then any chars except `'` and newline, then `'`      |
//! | integer | `-?[0-9]+`, value within `i64`                            |
//! | float   | `-?[0-9]+\.[0-9]+`, at most 308 integer digits            |
//! | boolean | `True` or `False`                                         |
//! | enum    | a quoted member of the value set                          |
//! | dict    | `{'k': v, ...}` with string keys, nesting at most 4 deep |
//!
//! Dict values are strings, numbers, booleans or dicts. Spaces are allowed
//! after `:` and `,` inside a dict and nowhere else.

use std::sync::Arc;

use thiserror::Error;

use crate::schema::{ArgType, MAX_DICT_DEPTH, MAX_FLOAT_INT_DIGITS};
use crate::trie::{NodeId, Trie};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TypeMatchError {
    #[error("matcher is in a dead state")]
    DeadState,
}

/// Viability of the characters consumed so far.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    /// A proper prefix of some literal, not itself a literal.
    Incomplete,
    /// A full literal (which may still extend, e.g. `4` → `42`).
    Complete,
    /// No extension is a literal. Absorbing.
    Dead,
}

impl Status {
    pub fn is_viable(self) -> bool {
        self != Status::Dead
    }
}

/// Compiled form of an [`ArgType`]. Enum members live in a trie over their
/// quoted spellings.
#[derive(Debug, Clone)]
pub enum Lexeme {
    String,
    Integer,
    Float,
    Boolean,
    Dict,
    Enum(Arc<Trie>),
}

impl Lexeme {
    pub fn compile(ty: &ArgType) -> Lexeme {
        match ty {
            ArgType::String => Lexeme::String,
            ArgType::Integer => Lexeme::Integer,
            ArgType::Float => Lexeme::Float,
            ArgType::Boolean => Lexeme::Boolean,
            ArgType::Dict => Lexeme::Dict,
            ArgType::Enum(values) => {
                let trie = Trie::from_words(values.iter().map(|v| format!("'{v}'")))
                    .expect("quoted enum values are never empty");
                Lexeme::Enum(Arc::new(trie))
            }
        }
    }

    /// State before any character.
    pub fn start(&self) -> LexState {
        match self {
            Lexeme::String => LexState::Str(StrPos::Open),
            Lexeme::Integer => LexState::Num(NumState::new(NumMode::Integer)),
            Lexeme::Float => LexState::Num(NumState::new(NumMode::Float)),
            Lexeme::Boolean => LexState::Bool(BoolPos::START),
            Lexeme::Dict => LexState::Dict(DictState::START),
            Lexeme::Enum(_) => LexState::Enum(Trie::root()),
        }
    }

    /// Transition function. Pure; `Dead` is absorbing.
    pub fn step(&self, state: LexState, ch: char) -> LexState {
        match (self, state) {
            (_, LexState::Dead) => LexState::Dead,
            (Lexeme::String, LexState::Str(p)) => p.step(ch).map_or(LexState::Dead, LexState::Str),
            (Lexeme::Integer | Lexeme::Float, LexState::Num(n)) => {
                n.step(ch).map_or(LexState::Dead, LexState::Num)
            }
            (Lexeme::Boolean, LexState::Bool(b)) => b.step(ch).map_or(LexState::Dead, LexState::Bool),
            (Lexeme::Dict, LexState::Dict(d)) => d.step(ch).map_or(LexState::Dead, LexState::Dict),
            (Lexeme::Enum(trie), LexState::Enum(node)) => {
                trie.child(node, ch).map_or(LexState::Dead, LexState::Enum)
            }
            _ => LexState::Dead,
        }
    }

    pub fn status(&self, state: LexState) -> Status {
        let complete = match (self, state) {
            (_, LexState::Dead) => return Status::Dead,
            (_, LexState::Str(p)) => p == StrPos::Closed,
            (_, LexState::Num(n)) => n.is_complete(),
            (_, LexState::Bool(b)) => b.is_complete(),
            (_, LexState::Dict(d)) => d.is_complete(),
            (Lexeme::Enum(trie), LexState::Enum(node)) => trie.is_word_end(node),
            (_, LexState::Enum(_)) => return Status::Dead,
        };
        if complete {
            Status::Complete
        } else {
            Status::Incomplete
        }
    }

    /// Runs `text` from `state`, stopping early once dead.
    pub fn run(&self, mut state: LexState, text: &str) -> LexState {
        for ch in text.chars() {
            state = self.step(state, ch);
            if state == LexState::Dead {
                break;
            }
        }
        state
    }
}

/// Compact, copyable recognizer state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LexState {
    Str(StrPos),
    Num(NumState),
    Bool(BoolPos),
    Enum(NodeId),
    Dict(DictState),
    Dead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrPos {
    Open,
    Body,
    Closed,
}

impl StrPos {
    fn step(self, ch: char) -> Option<StrPos> {
        match (self, ch) {
            (StrPos::Open, '\'') => Some(StrPos::Body),
            (StrPos::Body, '\'') => Some(StrPos::Closed),
            (StrPos::Body, '\n') => None,
            (StrPos::Body, _) => Some(StrPos::Body),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NumMode {
    Integer,
    Float,
    /// Either; used for dict values.
    Any,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum NumStage {
    Start,
    Sign,
    Int,
    Dot,
    Frac,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NumState {
    mode: NumMode,
    stage: NumStage,
    negative: bool,
    magnitude: u64,
    /// Integer part no longer fits in an `i64`.
    overflow: bool,
    int_digits: u16,
}

impl NumState {
    pub fn new(mode: NumMode) -> Self {
        NumState {
            mode,
            stage: NumStage::Start,
            negative: false,
            magnitude: 0,
            overflow: false,
            int_digits: 0,
        }
    }

    fn step(mut self, ch: char) -> Option<NumState> {
        let digit = ch.to_digit(10);
        match (self.stage, ch, digit) {
            (NumStage::Start, '-', _) => {
                self.negative = true;
                self.stage = NumStage::Sign;
            }
            (NumStage::Start | NumStage::Sign | NumStage::Int, _, Some(d)) => {
                self.stage = NumStage::Int;
                self.push_int_digit(d as u64);
                if self.overflow && self.mode == NumMode::Integer {
                    return None;
                }
                if usize::from(self.int_digits) > MAX_FLOAT_INT_DIGITS
                    && self.mode != NumMode::Integer
                {
                    return None;
                }
            }
            (NumStage::Int, '.', _) if self.mode != NumMode::Integer => {
                self.stage = NumStage::Dot;
            }
            (NumStage::Dot | NumStage::Frac, _, Some(_)) => self.stage = NumStage::Frac,
            _ => return None,
        }
        Some(self)
    }

    fn push_int_digit(&mut self, d: u64) {
        self.int_digits = self.int_digits.saturating_add(1);
        if self.overflow {
            return;
        }
        let limit = if self.negative {
            i64::MAX as u64 + 1
        } else {
            i64::MAX as u64
        };
        match self.magnitude.checked_mul(10).and_then(|m| m.checked_add(d)) {
            Some(m) if m <= limit => self.magnitude = m,
            _ => self.overflow = true,
        }
    }

    fn is_complete(&self) -> bool {
        match self.stage {
            NumStage::Int => self.mode != NumMode::Float && !self.overflow,
            NumStage::Frac => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoolPos {
    /// `None` before the first character, else whether we are spelling `True`.
    word: Option<bool>,
    len: u8,
}

impl BoolPos {
    const START: BoolPos = BoolPos { word: None, len: 0 };

    fn target(word: bool) -> &'static [u8] {
        if word {
            b"True"
        } else {
            b"False"
        }
    }

    fn step(self, ch: char) -> Option<BoolPos> {
        match self.word {
            None => match ch {
                'T' => Some(BoolPos { word: Some(true), len: 1 }),
                'F' => Some(BoolPos { word: Some(false), len: 1 }),
                _ => None,
            },
            Some(w) => {
                let t = Self::target(w);
                (usize::from(self.len) < t.len() && t[usize::from(self.len)] as char == ch).then_some(
                    BoolPos {
                        word: Some(w),
                        len: self.len + 1,
                    },
                )
            }
        }
    }

    fn is_complete(&self) -> bool {
        self.word
            .is_some_and(|w| usize::from(self.len) == Self::target(w).len())
    }
}

/// Unterminated scalar inside a dict value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Scalar {
    Num(NumState),
    Bool(BoolPos),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum DictPhase {
    Start,
    /// After `{`: a key or `}`.
    AfterOpen,
    KeyBody,
    AfterKey,
    /// After `:`: spaces or a value.
    AfterColon,
    StrValue,
    InScalar(Scalar),
    /// After a complete string or nested dict: `,` or `}`.
    AfterValue,
    /// After `,`: spaces or a key.
    AfterComma,
    Closed,
}

/// Dict recognizer. Only the innermost open dict needs a phase: every
/// enclosing dict is by construction in the middle of a value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DictState {
    depth: u8,
    phase: DictPhase,
}

impl DictState {
    const START: DictState = DictState {
        depth: 0,
        phase: DictPhase::Start,
    };

    fn close(mut self) -> DictState {
        self.depth -= 1;
        self.phase = if self.depth == 0 {
            DictPhase::Closed
        } else {
            DictPhase::AfterValue
        };
        self
    }

    fn open(mut self) -> Option<DictState> {
        if usize::from(self.depth) >= MAX_DICT_DEPTH {
            return None;
        }
        self.depth += 1;
        self.phase = DictPhase::AfterOpen;
        Some(self)
    }

    fn with(mut self, phase: DictPhase) -> DictState {
        self.phase = phase;
        self
    }

    fn step(self, ch: char) -> Option<DictState> {
        use DictPhase::*;
        match (self.phase, ch) {
            (Start, '{') => self.open(),
            (AfterOpen, '}') => Some(self.close()),
            (AfterOpen | AfterComma, '\'') => Some(self.with(KeyBody)),
            (AfterComma | AfterColon, ' ') => Some(self),
            (KeyBody, '\'') => Some(self.with(AfterKey)),
            (KeyBody, '\n') => None,
            (KeyBody, _) => Some(self),
            (AfterKey, ':') => Some(self.with(AfterColon)),
            (AfterColon, '\'') => Some(self.with(StrValue)),
            (AfterColon, '{') => self.open(),
            (AfterColon, c) => {
                let scalar = if c == 'T' || c == 'F' {
                    Scalar::Bool(BoolPos::START.step(c)?)
                } else {
                    Scalar::Num(NumState::new(NumMode::Any).step(c)?)
                };
                Some(self.with(InScalar(scalar)))
            }
            (StrValue, '\'') => Some(self.with(AfterValue)),
            (StrValue, '\n') => None,
            (StrValue, _) => Some(self),
            (InScalar(s), c) => {
                let next = match s {
                    Scalar::Num(n) => n.step(c).map(Scalar::Num),
                    Scalar::Bool(b) => b.step(c).map(Scalar::Bool),
                };
                if let Some(next) = next {
                    return Some(self.with(InScalar(next)));
                }
                let complete = match s {
                    Scalar::Num(n) => n.is_complete(),
                    Scalar::Bool(b) => b.is_complete(),
                };
                if !complete {
                    return None;
                }
                self.with(AfterValue).step(c)
            }
            (AfterValue, ',') => Some(self.with(AfterComma)),
            (AfterValue, '}') => Some(self.close()),
            _ => None,
        }
    }

    fn is_complete(&self) -> bool {
        self.phase == DictPhase::Closed
    }
}

/// A recognizer together with the characters it has consumed.
#[derive(Debug, Clone)]
pub struct MatcherState {
    lexeme: Lexeme,
    state: LexState,
    consumed: String,
}

impl MatcherState {
    pub fn new(ty: &ArgType) -> Self {
        Self::from_lexeme(Lexeme::compile(ty))
    }

    pub fn from_lexeme(lexeme: Lexeme) -> Self {
        let state = lexeme.start();
        MatcherState {
            lexeme,
            state,
            consumed: String::new(),
        }
    }

    pub fn advance(&self, ch: char) -> MatcherState {
        let mut next = self.clone();
        next.push(ch);
        next
    }

    /// In-place form of [`MatcherState::advance`].
    pub fn push(&mut self, ch: char) {
        self.state = self.lexeme.step(self.state, ch);
        self.consumed.push(ch);
    }

    pub fn status(&self) -> Status {
        self.lexeme.status(self.state)
    }

    pub fn consumed(&self) -> &str {
        &self.consumed
    }

    pub fn lexeme(&self) -> &Lexeme {
        &self.lexeme
    }

    pub fn lex_state(&self) -> LexState {
        self.state
    }

    /// For each candidate, whether consuming all of its characters keeps the
    /// matcher alive.
    pub fn allowed_continuations<S: AsRef<str>>(
        &self,
        candidates: &[S],
    ) -> Result<Vec<bool>, TypeMatchError> {
        if self.state == LexState::Dead {
            return Err(TypeMatchError::DeadState);
        }
        Ok(candidates
            .iter()
            .map(|c| self.lexeme.run(self.state, c.as_ref()) != LexState::Dead)
            .collect())
    }
}

/// Fresh matcher for `ty`.
pub fn new_matcher(ty: &ArgType) -> MatcherState {
    MatcherState::new(ty)
}
