//! Function schemas in the Python-stub documentation format, the registry
//! file format, and call expressions (`name(arg, ...)<nexa_end>`).

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Marker that terminates every model response.
pub const END_MARKER: &str = "<nexa_end>";

/// Name of the fallback function present in every registry.
pub const SENTINEL_NAME: &str = "no_relevant_function";

const SENTINEL_DESCRIPTION: &str =
    "Call this when no other provided function can be called to answer the user query.";
const SENTINEL_ARG: &str = "user_query";
const SENTINEL_ARG_DESCRIPTION: &str =
    "The user_query that cannot be answered by any other function calls.";

/// Maximum brace depth of a dict literal.
pub const MAX_DICT_DEPTH: usize = 4;

/// Maximum number of digits before the decimal point of a float literal.
/// Keeps every accepted literal finite as an `f64`.
pub const MAX_FLOAT_INT_DIGITS: usize = 308;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchemaError {
    #[error("malformed stub: {0}")]
    MalformedStub(String),
    #[error("duplicate function name `{0}`")]
    DuplicateFunctionName(String),
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("malformed registry document: {0}")]
    MalformedRegistry(String),
}

/// Reasons a response string fails to become a [`CallExpression`].
#[derive(Debug, Error, Clone, PartialEq)]
pub enum CallError {
    #[error("parse error at offset {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("unknown function `{0}`")]
    UnknownFunction(String),
    #[error("`{function}` takes {expected} argument(s), got {found}")]
    ArityMismatch {
        function: String,
        expected: usize,
        found: usize,
    },
    #[error("argument {index} of `{function}` must be {expected}")]
    TypeMismatch {
        function: String,
        index: usize,
        expected: String,
    },
}

/// Type of a function argument.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ArgType {
    String,
    Integer,
    Float,
    Dict,
    Boolean,
    /// Closed set of string literals, in declaration order.
    Enum(Vec<String>),
}

impl ArgType {
    /// Maps a documentation type word to a type. Aliases are normalized.
    pub fn from_word(word: &str) -> Option<ArgType> {
        match word.trim().to_ascii_lowercase().as_str() {
            "str" | "string" => Some(ArgType::String),
            "int" | "integer" => Some(ArgType::Integer),
            "float" | "number" => Some(ArgType::Float),
            "dict" => Some(ArgType::Dict),
            "bool" | "boolean" => Some(ArgType::Boolean),
            _ => None,
        }
    }

    /// Canonical word used in registry documents.
    pub fn kind_name(&self) -> &'static str {
        match self {
            ArgType::String => "string",
            ArgType::Integer => "integer",
            ArgType::Float => "float",
            ArgType::Dict => "dict",
            ArgType::Boolean => "boolean",
            ArgType::Enum(_) => "enum",
        }
    }

    /// Word used inside a stub's `Args:` block.
    pub fn stub_word(&self) -> String {
        match self {
            ArgType::Enum(values) => {
                let inner: Vec<String> = values.iter().map(|v| format!("'{v}'")).collect();
                format!("enum[{}]", inner.join(", "))
            }
            other => other.kind_name().to_string(),
        }
    }

    fn validate(&self) -> Result<(), SchemaError> {
        if let ArgType::Enum(values) = self {
            if values.is_empty() {
                return Err(SchemaError::SchemaViolation(
                    "enum type needs at least one value".into(),
                ));
            }
            for (i, v) in values.iter().enumerate() {
                if v.is_empty() || !is_string_body(v) {
                    return Err(SchemaError::SchemaViolation(format!(
                        "enum value {v:?} is not a valid string literal body"
                    )));
                }
                if values[..i].contains(v) {
                    return Err(SchemaError::SchemaViolation(format!(
                        "duplicate enum value {v:?}"
                    )));
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for ArgType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.stub_word())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ArgSpec {
    pub name: String,
    pub ty: ArgType,
    pub description: String,
}

impl ArgSpec {
    pub fn new(
        name: impl Into<String>,
        ty: ArgType,
        description: impl Into<String>,
    ) -> Result<Self, SchemaError> {
        let name = name.into();
        let description = description.into().trim().to_string();
        if !is_identifier(&name) {
            return Err(SchemaError::SchemaViolation(format!(
                "argument name {name:?} is not an identifier"
            )));
        }
        if description.contains('\n') {
            return Err(SchemaError::SchemaViolation(format!(
                "description of argument `{name}` spans several lines"
            )));
        }
        ty.validate()?;
        Ok(ArgSpec {
            name,
            ty,
            description,
        })
    }
}

/// A registered API.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FunctionSchema {
    pub name: String,
    pub description: String,
    pub args: Vec<ArgSpec>,
}

impl FunctionSchema {
    /// Validates and normalizes a schema. Description lines are trimmed and
    /// leading/trailing blank lines dropped.
    pub fn new(
        name: impl Into<String>,
        description: impl AsRef<str>,
        args: Vec<ArgSpec>,
    ) -> Result<Self, SchemaError> {
        let name = name.into();
        if !is_identifier(&name) {
            return Err(SchemaError::SchemaViolation(format!(
                "function name {name:?} is not an identifier"
            )));
        }
        let description = normalize_description(description.as_ref());
        if description.is_empty() {
            return Err(SchemaError::SchemaViolation(format!(
                "function `{name}` has an empty description"
            )));
        }
        for line in description.lines() {
            if line == "Args:" || line.contains("\"\"\"") || line.contains("'''") {
                return Err(SchemaError::SchemaViolation(format!(
                    "description of `{name}` contains a reserved docstring line"
                )));
            }
        }
        for (i, arg) in args.iter().enumerate() {
            if args[..i].iter().any(|a| a.name == arg.name) {
                return Err(SchemaError::SchemaViolation(format!(
                    "function `{name}` repeats argument `{}`",
                    arg.name
                )));
            }
        }
        Ok(FunctionSchema {
            name,
            description,
            args,
        })
    }

    /// The `no_relevant_function(user_query)` fallback schema.
    pub fn sentinel() -> Self {
        FunctionSchema {
            name: SENTINEL_NAME.to_string(),
            description: SENTINEL_DESCRIPTION.to_string(),
            args: vec![ArgSpec {
                name: SENTINEL_ARG.to_string(),
                ty: ArgType::String,
                description: SENTINEL_ARG_DESCRIPTION.to_string(),
            }],
        }
    }

    pub fn is_sentinel(&self) -> bool {
        self.name == SENTINEL_NAME
    }

    pub fn arity(&self) -> usize {
        self.args.len()
    }
}

fn normalize_description(text: &str) -> String {
    let lines: Vec<&str> = text.lines().map(str::trim).collect();
    let start = lines.iter().position(|l| !l.is_empty());
    let end = lines.iter().rposition(|l| !l.is_empty());
    match (start, end) {
        (Some(s), Some(e)) => lines[s..=e].join("\n"),
        _ => String::new(),
    }
}

pub fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// True when `s` can sit between single quotes: no quote, no newline.
pub fn is_string_body(s: &str) -> bool {
    !s.contains(['\'', '\n'])
}

// ---------------------------------------------------------------------------
// Stubs

/// Docstring delimiter used when rendering a stub.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DocQuote {
    #[default]
    Double,
    Single,
}

impl DocQuote {
    fn as_str(self) -> &'static str {
        match self {
            DocQuote::Double => "\"\"\"",
            DocQuote::Single => "'''",
        }
    }
}

/// Parses exactly one stub.
pub fn parse_stub(text: &str) -> Result<FunctionSchema, SchemaError> {
    let lines: Vec<&str> = text.lines().collect();
    let (schema, rest) = parse_stub_lines(&lines)?;
    if rest.iter().any(|l| !l.trim().is_empty()) {
        return Err(SchemaError::MalformedStub(
            "unexpected text after the docstring".into(),
        ));
    }
    Ok(schema)
}

/// Parses a file holding several stubs separated by blank lines.
pub fn parse_stubs(text: &str) -> Result<Vec<FunctionSchema>, SchemaError> {
    let lines: Vec<&str> = text.lines().collect();
    let mut rest: &[&str] = &lines;
    let mut out = Vec::new();
    while rest.iter().any(|l| !l.trim().is_empty()) {
        let (schema, tail) = parse_stub_lines(rest)?;
        out.push(schema);
        rest = tail;
    }
    Ok(out)
}

fn parse_stub_lines<'a, 'b>(
    lines: &'b [&'a str],
) -> Result<(FunctionSchema, &'b [&'a str]), SchemaError> {
    let malformed = |m: &str| SchemaError::MalformedStub(m.to_string());
    let mut i = 0;
    while i < lines.len() && lines[i].trim().is_empty() {
        i += 1;
    }
    let header = lines.get(i).ok_or_else(|| malformed("empty stub"))?.trim();
    let (name, params) = parse_def_header(header)?;
    i += 1;
    while i < lines.len() && lines[i].trim().is_empty() {
        i += 1;
    }
    let quote = match lines.get(i).map(|l| l.trim()) {
        Some(q @ ("\"\"\"" | "'''")) => q,
        _ => return Err(malformed("missing docstring")),
    };
    i += 1;
    let body_start = i;
    while i < lines.len() && lines[i].trim() != quote {
        i += 1;
    }
    if i == lines.len() {
        return Err(malformed("unterminated docstring"));
    }
    let body = &lines[body_start..i];
    let rest = &lines[i + 1..];

    let args_at = body.iter().position(|l| l.trim() == "Args:");
    let (desc_lines, arg_lines) = match args_at {
        Some(p) => (&body[..p], &body[p + 1..]),
        None => (body, &body[body.len()..]),
    };
    let description = normalize_description(&desc_lines.join("\n"));
    if description.is_empty() {
        return Err(malformed("docstring has no description"));
    }

    let mut args = Vec::new();
    for line in arg_lines.iter().map(|l| l.trim()).filter(|l| !l.is_empty()) {
        args.push(parse_arg_line(line)?);
    }
    if args.len() != params.len() {
        return Err(SchemaError::MalformedStub(format!(
            "`{name}` declares {} parameter(s) but documents {}",
            params.len(),
            args.len()
        )));
    }
    for (p, a) in params.iter().zip(&args) {
        if *p != a.name {
            return Err(SchemaError::MalformedStub(format!(
                "parameter `{p}` documented as `{}`",
                a.name
            )));
        }
    }
    let schema = FunctionSchema::new(name, description, args).map_err(|e| match e {
        SchemaError::SchemaViolation(m) => SchemaError::MalformedStub(m),
        other => other,
    })?;
    Ok((schema, rest))
}

fn parse_def_header(line: &str) -> Result<(String, Vec<String>), SchemaError> {
    let malformed = || SchemaError::MalformedStub(format!("bad def line: {line:?}"));
    let rest = line.strip_prefix("def ").ok_or_else(malformed)?;
    let open = rest.find('(').ok_or_else(malformed)?;
    let close = rest.rfind(')').ok_or_else(malformed)?;
    if close < open || rest[close + 1..].trim() != ":" {
        return Err(malformed());
    }
    let name = rest[..open].trim();
    if !is_identifier(name) {
        return Err(malformed());
    }
    let inner = rest[open + 1..close].trim();
    let params = if inner.is_empty() {
        Vec::new()
    } else {
        inner
            .split(',')
            .map(|p| {
                let p = p.trim();
                if is_identifier(p) {
                    Ok(p.to_string())
                } else {
                    Err(malformed())
                }
            })
            .collect::<Result<_, _>>()?
    };
    Ok((name.to_string(), params))
}

fn parse_arg_line(line: &str) -> Result<ArgSpec, SchemaError> {
    let malformed = || SchemaError::MalformedStub(format!("bad argument line: {line:?}"));
    let open = line.find('(').ok_or_else(malformed)?;
    let name = line[..open].trim();
    // find the closing paren outside quotes (enum values may contain parens)
    let mut in_quote = false;
    let mut close = None;
    for (off, c) in line[open + 1..].char_indices() {
        match c {
            '\'' => in_quote = !in_quote,
            ')' if !in_quote => {
                close = Some(open + 1 + off);
                break;
            }
            _ => {}
        }
    }
    let close = close.ok_or_else(malformed)?;
    let word = &line[open + 1..close];
    let after = line[close + 1..].strip_prefix(':').ok_or_else(malformed)?;
    let ty = parse_type_word(word)?;
    ArgSpec::new(name, ty, after.trim()).map_err(|e| SchemaError::MalformedStub(e.to_string()))
}

fn parse_type_word(word: &str) -> Result<ArgType, SchemaError> {
    let w = word.trim();
    if let Some(inner) = w.strip_prefix("enum[").and_then(|s| s.strip_suffix(']')) {
        let mut values = Vec::new();
        let mut rest = inner.trim();
        while !rest.is_empty() {
            let body = rest
                .strip_prefix('\'')
                .ok_or_else(|| SchemaError::MalformedStub(format!("bad enum list: {w:?}")))?;
            let end = body
                .find('\'')
                .ok_or_else(|| SchemaError::MalformedStub(format!("bad enum list: {w:?}")))?;
            values.push(body[..end].to_string());
            rest = body[end + 1..].trim_start();
            if let Some(r) = rest.strip_prefix(',') {
                rest = r.trim_start();
            } else if !rest.is_empty() {
                return Err(SchemaError::MalformedStub(format!("bad enum list: {w:?}")));
            }
        }
        return Ok(ArgType::Enum(values));
    }
    ArgType::from_word(w)
        .ok_or_else(|| SchemaError::MalformedStub(format!("unknown type word {w:?}")))
}

/// Renders a stub with a `"""` docstring.
pub fn render_stub(schema: &FunctionSchema) -> String {
    render_stub_with(schema, DocQuote::Double)
}

pub fn render_stub_with(schema: &FunctionSchema, quote: DocQuote) -> String {
    let params: Vec<&str> = schema.args.iter().map(|a| a.name.as_str()).collect();
    let mut out = format!("def {}({}):\n", schema.name, params.join(", "));
    out.push_str("  ");
    out.push_str(quote.as_str());
    out.push('\n');
    for line in schema.description.lines() {
        if !line.is_empty() {
            out.push_str("  ");
            out.push_str(line);
        }
        out.push('\n');
    }
    if !schema.args.is_empty() {
        out.push_str("  Args:\n");
        for arg in &schema.args {
            out.push_str(&format!("    {} ({}):", arg.name, arg.ty.stub_word()));
            if !arg.description.is_empty() {
                out.push(' ');
                out.push_str(&arg.description);
            }
            out.push('\n');
        }
    }
    out.push_str("  ");
    out.push_str(quote.as_str());
    out
}

// ---------------------------------------------------------------------------
// Registry

/// The set of functions a decode session may call. Always holds the sentinel.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionRegistry {
    functions: Vec<FunctionSchema>,
    index: HashMap<String, usize>,
}

impl FunctionRegistry {
    /// Builds a registry, inserting the sentinel at the front when absent.
    pub fn new(functions: Vec<FunctionSchema>) -> Result<Self, SchemaError> {
        let mut all = Vec::with_capacity(functions.len() + 1);
        match functions.iter().find(|f| f.is_sentinel()) {
            Some(s) => {
                if s.args.len() != 1 || s.args[0].ty != ArgType::String {
                    return Err(SchemaError::SchemaViolation(format!(
                        "`{SENTINEL_NAME}` must take exactly one string argument"
                    )));
                }
            }
            None => all.push(FunctionSchema::sentinel()),
        }
        all.extend(functions);
        let mut index = HashMap::with_capacity(all.len());
        for (i, f) in all.iter().enumerate() {
            if index.insert(f.name.clone(), i).is_some() {
                return Err(SchemaError::DuplicateFunctionName(f.name.clone()));
            }
        }
        Ok(FunctionRegistry {
            functions: all,
            index,
        })
    }

    /// Registry holding only the sentinel.
    pub fn sentinel_only() -> Self {
        FunctionRegistry::new(Vec::new()).expect("sentinel schema is valid")
    }

    pub fn get(&self, name: &str) -> Option<&FunctionSchema> {
        self.index.get(name).map(|&i| &self.functions[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn functions(&self) -> &[FunctionSchema] {
        &self.functions
    }

    /// Every function except the sentinel, in declaration order.
    pub fn candidates(&self) -> impl Iterator<Item = &FunctionSchema> {
        self.functions.iter().filter(|f| !f.is_sentinel())
    }

    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    /// Serializes to the registry document format.
    pub fn to_document(&self) -> String {
        let entries: Vec<RegistryEntry> = self.functions.iter().map(RegistryEntry::from).collect();
        serde_json::to_string_pretty(&entries).expect("registry entries serialize")
    }
}

/// One function in a registry document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub name: String,
    pub description: String,
    #[serde(default)]
    pub args: Vec<RegistryArg>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegistryArg {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: String,
    #[serde(default)]
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enum_values: Option<Vec<String>>,
}

impl From<&FunctionSchema> for RegistryEntry {
    fn from(f: &FunctionSchema) -> Self {
        RegistryEntry {
            name: f.name.clone(),
            description: f.description.clone(),
            args: f
                .args
                .iter()
                .map(|a| RegistryArg {
                    name: a.name.clone(),
                    ty: a.ty.kind_name().to_string(),
                    description: a.description.clone(),
                    enum_values: match &a.ty {
                        ArgType::Enum(v) => Some(v.clone()),
                        _ => None,
                    },
                })
                .collect(),
        }
    }
}

impl TryFrom<RegistryEntry> for FunctionSchema {
    type Error = SchemaError;

    fn try_from(e: RegistryEntry) -> Result<Self, SchemaError> {
        let args = e
            .args
            .into_iter()
            .map(|a| {
                let ty = match (a.ty.trim(), a.enum_values) {
                    ("enum", Some(values)) => ArgType::Enum(values),
                    ("enum", None) => {
                        return Err(SchemaError::SchemaViolation(format!(
                            "enum argument `{}` lacks enum_values",
                            a.name
                        )))
                    }
                    (word, None) => ArgType::from_word(word).ok_or_else(|| {
                        SchemaError::SchemaViolation(format!("unknown type {word:?}"))
                    })?,
                    (_, Some(_)) => {
                        return Err(SchemaError::SchemaViolation(format!(
                            "enum_values given for non-enum argument `{}`",
                            a.name
                        )))
                    }
                };
                ArgSpec::new(a.name, ty, a.description)
            })
            .collect::<Result<Vec<_>, _>>()?;
        FunctionSchema::new(e.name, e.description, args)
    }
}

/// Loads a registry document: a JSON list of function entries.
pub fn load_registry(document: &str) -> Result<FunctionRegistry, SchemaError> {
    let entries: Vec<RegistryEntry> = serde_json::from_str(document)
        .map_err(|e| SchemaError::MalformedRegistry(e.to_string()))?;
    let functions = entries
        .into_iter()
        .map(FunctionSchema::try_from)
        .collect::<Result<Vec<_>, _>>()?;
    FunctionRegistry::new(functions)
}

// ---------------------------------------------------------------------------
// Calls

/// A literal argument value.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Str(String),
    Int(i64),
    Float(f64),
    Bool(bool),
    /// Ordered key/value pairs; keys are string literals.
    Dict(Vec<(String, Value)>),
    /// A member of an enum argument's value set.
    Enum(String),
}

impl Value {
    /// Whether this value inhabits `ty`.
    pub fn has_type(&self, ty: &ArgType) -> bool {
        match (self, ty) {
            (Value::Str(s), ArgType::String) => is_string_body(s),
            (Value::Int(_), ArgType::Integer) => true,
            (Value::Float(f), ArgType::Float) => float_in_range(*f),
            (Value::Bool(_), ArgType::Boolean) => true,
            (Value::Dict(entries), ArgType::Dict) => dict_well_formed(entries, 1),
            (Value::Enum(v), ArgType::Enum(values)) => values.contains(v),
            _ => false,
        }
    }
}

fn float_in_range(f: f64) -> bool {
    f.is_finite() && f.abs() < 1e308
}

fn dict_well_formed(entries: &[(String, Value)], depth: usize) -> bool {
    depth <= MAX_DICT_DEPTH
        && entries.iter().all(|(k, v)| {
            is_string_body(k)
                && match v {
                    Value::Str(s) => is_string_body(s),
                    Value::Int(_) | Value::Bool(_) => true,
                    Value::Float(f) => float_in_range(*f),
                    Value::Dict(inner) => dict_well_formed(inner, depth + 1),
                    Value::Enum(_) => false,
                }
        })
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Str(s) | Value::Enum(s) => write!(f, "'{s}'"),
            Value::Int(i) => write!(f, "{i}"),
            Value::Float(x) => {
                let s = x.to_string();
                if s.contains('.') {
                    f.write_str(&s)
                } else {
                    write!(f, "{s}.0")
                }
            }
            Value::Bool(true) => f.write_str("True"),
            Value::Bool(false) => f.write_str("False"),
            Value::Dict(entries) => {
                f.write_str("{")?;
                for (i, (k, v)) in entries.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "'{k}': {v}")?;
                }
                f.write_str("}")
            }
        }
    }
}

/// A fully typed function call.
#[derive(Debug, Clone, PartialEq)]
pub struct CallExpression {
    pub function: String,
    pub arguments: Vec<Value>,
}

impl CallExpression {
    pub fn new(function: impl Into<String>, arguments: Vec<Value>) -> Self {
        CallExpression {
            function: function.into(),
            arguments,
        }
    }

    /// `no_relevant_function('<query>')`. Quotes and newlines in the query
    /// are replaced so the literal stays well formed.
    pub fn sentinel(query: &str) -> Self {
        let body: String = query
            .chars()
            .map(|c| match c {
                '\'' => '"',
                '\n' => ' ',
                c => c,
            })
            .collect();
        CallExpression::new(SENTINEL_NAME, vec![Value::Str(body)])
    }

    /// Checks arity and argument types against `registry`.
    pub fn validate(&self, registry: &FunctionRegistry) -> Result<(), CallError> {
        let schema = registry
            .get(&self.function)
            .ok_or_else(|| CallError::UnknownFunction(self.function.clone()))?;
        if schema.arity() != self.arguments.len() {
            return Err(CallError::ArityMismatch {
                function: self.function.clone(),
                expected: schema.arity(),
                found: self.arguments.len(),
            });
        }
        for (i, (v, spec)) in self.arguments.iter().zip(&schema.args).enumerate() {
            if !v.has_type(&spec.ty) {
                return Err(CallError::TypeMismatch {
                    function: self.function.clone(),
                    index: i,
                    expected: spec.ty.stub_word(),
                });
            }
        }
        Ok(())
    }

    /// `name(arg, arg)` without the end marker.
    pub fn render_body(&self) -> String {
        let args: Vec<String> = self.arguments.iter().map(Value::to_string).collect();
        format!("{}({})", self.function, args.join(", "))
    }
}

/// Renders a call as a complete response, end marker included.
pub fn render_call(call: &CallExpression) -> String {
    format!("{}{END_MARKER}", call.render_body())
}

impl fmt::Display for CallExpression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render_body())
    }
}

/// A syntactically valid call whose arguments have not been typed against a
/// schema. Quoted literals come back as [`Value::Str`].
#[derive(Debug, Clone, PartialEq)]
pub struct RawCall {
    pub function: String,
    pub arguments: Vec<Value>,
}

/// Parses `name(args)` with an optional trailing end marker, without typing.
pub fn parse_raw_call(text: &str) -> Result<RawCall, CallError> {
    let body = text.strip_suffix(END_MARKER).unwrap_or(text);
    let mut p = LiteralParser::new(body);
    let function = p.identifier()?;
    p.expect('(')?;
    let mut arguments = Vec::new();
    if !p.eat(')') {
        loop {
            arguments.push(p.literal(0)?);
            if p.eat(')') {
                break;
            }
            p.expect(',')?;
            p.skip_spaces();
        }
    }
    if !p.at_end() {
        return Err(p.error("trailing text after the closing parenthesis"));
    }
    Ok(RawCall {
        function,
        arguments,
    })
}

/// Parses and validates a response against `registry`.
pub fn parse_call(text: &str, registry: &FunctionRegistry) -> Result<CallExpression, CallError> {
    let raw = parse_raw_call(text)?;
    let schema = registry
        .get(&raw.function)
        .ok_or_else(|| CallError::UnknownFunction(raw.function.clone()))?;
    if schema.arity() != raw.arguments.len() {
        return Err(CallError::ArityMismatch {
            function: raw.function,
            expected: schema.arity(),
            found: raw.arguments.len(),
        });
    }
    let mut arguments = Vec::with_capacity(raw.arguments.len());
    for (i, (v, spec)) in raw.arguments.into_iter().zip(&schema.args).enumerate() {
        let typed = match (v, &spec.ty) {
            (Value::Str(s), ArgType::Enum(_)) => Value::Enum(s),
            (v, _) => v,
        };
        if !typed.has_type(&spec.ty) {
            return Err(CallError::TypeMismatch {
                function: schema.name.clone(),
                index: i,
                expected: spec.ty.stub_word(),
            });
        }
        arguments.push(typed);
    }
    Ok(CallExpression {
        function: schema.name.clone(),
        arguments,
    })
}

struct LiteralParser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> LiteralParser<'a> {
    fn new(src: &'a str) -> Self {
        LiteralParser { src, pos: 0 }
    }

    fn error(&self, message: impl Into<String>) -> CallError {
        CallError::Parse {
            offset: self.pos,
            message: message.into(),
        }
    }

    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += c.len_utf8();
        Some(c)
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(c) {
            self.pos += c.len_utf8();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<(), CallError> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(self.error(format!("expected `{c}`")))
        }
    }

    fn at_end(&self) -> bool {
        self.pos == self.src.len()
    }

    fn skip_spaces(&mut self) {
        while self.eat(' ') {}
    }

    fn identifier(&mut self) -> Result<String, CallError> {
        let start = self.pos;
        while let Some(c) = self.peek() {
            if c.is_ascii_alphanumeric() || c == '_' {
                self.pos += 1;
            } else {
                break;
            }
        }
        let ident = &self.src[start..self.pos];
        if is_identifier(ident) {
            Ok(ident.to_string())
        } else {
            self.pos = start;
            Err(self.error("expected a function name"))
        }
    }

    fn string(&mut self) -> Result<String, CallError> {
        self.expect('\'')?;
        let start = self.pos;
        loop {
            match self.bump() {
                Some('\'') => return Ok(self.src[start..self.pos - 1].to_string()),
                Some('\n') | None => return Err(self.error("unterminated string literal")),
                Some(_) => {}
            }
        }
    }

    /// `depth` is the number of dicts enclosing this literal.
    fn literal(&mut self, depth: usize) -> Result<Value, CallError> {
        match self.peek() {
            Some('\'') => self.string().map(Value::Str),
            Some('{') => self.dict(depth + 1),
            Some('T') | Some('F') => {
                let rest = &self.src[self.pos..];
                if rest.starts_with("True") {
                    self.pos += 4;
                    Ok(Value::Bool(true))
                } else if rest.starts_with("False") {
                    self.pos += 5;
                    Ok(Value::Bool(false))
                } else {
                    Err(self.error("expected a literal"))
                }
            }
            Some(c) if c == '-' || c.is_ascii_digit() => self.number(),
            _ => Err(self.error("expected a literal")),
        }
    }

    fn digits(&mut self) -> usize {
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1;
        }
        self.pos - start
    }

    fn number(&mut self) -> Result<Value, CallError> {
        let start = self.pos;
        self.eat('-');
        let int_digits = self.digits();
        if int_digits == 0 {
            return Err(self.error("expected a digit"));
        }
        if self.eat('.') {
            if self.digits() == 0 {
                return Err(self.error("expected a digit after the decimal point"));
            }
            if int_digits > MAX_FLOAT_INT_DIGITS {
                return Err(self.error("float literal out of range"));
            }
            let x: f64 = self.src[start..self.pos]
                .parse()
                .map_err(|_| self.error("bad float literal"))?;
            Ok(Value::Float(x))
        } else {
            self.src[start..self.pos]
                .parse::<i64>()
                .map(Value::Int)
                .map_err(|_| self.error("integer literal out of range"))
        }
    }

    fn dict(&mut self, depth: usize) -> Result<Value, CallError> {
        if depth > MAX_DICT_DEPTH {
            return Err(self.error("dict nested too deeply"));
        }
        self.expect('{')?;
        let mut entries = Vec::new();
        if self.eat('}') {
            return Ok(Value::Dict(entries));
        }
        loop {
            let key = self.string()?;
            self.expect(':')?;
            self.skip_spaces();
            let value = self.literal(depth)?;
            entries.push((key, value));
            if self.eat('}') {
                return Ok(Value::Dict(entries));
            }
            self.expect(',')?;
            self.skip_spaces();
        }
    }
}
