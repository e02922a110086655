//! KQML-style agent messages: an s-expression codec, a flat JSON bridge and a
//! detector for "@Receiver: Performative body" message headers.
//!
//! Canonical text form: `(performative :keyword value ...)` with single
//! spaces, quoted strings escaping only `"` and `\`.

use std::fmt::Write as _;

use once_cell::sync::Lazy;
use regex::Regex;
use serde_json::{Map, Value};
use thiserror::Error;

/// Deepest list nesting accepted by the parser.
pub const MAX_DEPTH: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AclValue {
    Atom(String),
    Quoted(String),
    List(Vec<AclValue>),
}

impl AclValue {
    pub fn atom(s: impl Into<String>) -> Self {
        AclValue::Atom(s.into())
    }

    pub fn quoted(s: impl Into<String>) -> Self {
        AclValue::Quoted(s.into())
    }

    /// Text of an atom or quoted string.
    pub fn as_text(&self) -> Option<&str> {
        match self {
            AclValue::Atom(s) | AclValue::Quoted(s) => Some(s),
            AclValue::List(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AclMessage {
    pub performative: String,
    pub parameters: Vec<(String, AclValue)>,
}

impl AclMessage {
    pub fn new(performative: impl Into<String>) -> Self {
        Self { performative: performative.into(), parameters: Vec::new() }
    }

    /// Append a parameter; `keyword` gains a leading ':' if it lacks one.
    pub fn with(mut self, keyword: &str, value: AclValue) -> Self {
        let keyword = if keyword.starts_with(':') { keyword.to_string() } else { format!(":{keyword}") };
        self.parameters.push((keyword, value));
        self
    }

    pub fn get(&self, keyword: &str) -> Option<&AclValue> {
        let bare = keyword.trim_start_matches(':');
        self.parameters.iter().find(|(k, _)| &k[1..] == bare).map(|(_, v)| v)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AclError {
    #[error("empty input")]
    EmptyInput,
    #[error("unbalanced parentheses at byte {0}")]
    UnbalancedParens(usize),
    #[error("message has no performative (byte {0})")]
    MissingPerformative(usize),
    #[error("keyword `{keyword}` at byte {position} has no value")]
    DanglingKeyword { keyword: String, position: usize },
    #[error("keyword `{keyword}` repeated at byte {position}")]
    DuplicateKeyword { keyword: String, position: usize },
    #[error("unterminated string starting at byte {0}")]
    UnterminatedString(usize),
    #[error("unexpected {found} at byte {position}")]
    UnexpectedToken { found: String, position: usize },
    #[error("lists nested deeper than {MAX_DEPTH} at byte {0}")]
    TooDeep(usize),
    #[error("invalid UTF-8 at byte {0}")]
    InvalidUtf8(usize),
    #[error("invalid atom `{0}`")]
    InvalidAtom(String),
    #[error("JSON message does not match the bridge schema: {0}")]
    SchemaMismatch(String),
    #[error("value cannot be represented: {0}")]
    UnrepresentableValue(String),
}

impl AclError {
    /// Byte offset of a parse error. Empty input sits at 0; codec errors
    /// that do not come from parsing have none.
    pub fn position(&self) -> Option<usize> {
        match self {
            AclError::EmptyInput => Some(0),
            AclError::UnbalancedParens(p)
            | AclError::MissingPerformative(p)
            | AclError::UnterminatedString(p)
            | AclError::TooDeep(p)
            | AclError::InvalidUtf8(p) => Some(*p),
            AclError::DanglingKeyword { position, .. }
            | AclError::DuplicateKeyword { position, .. }
            | AclError::UnexpectedToken { position, .. } => Some(*position),
            AclError::InvalidAtom(_) | AclError::SchemaMismatch(_) | AclError::UnrepresentableValue(_) => None,
        }
    }
}

// ---------------------------------------------------------------------------
// Lexing

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Open,
    Close,
    Atom(String),
    Quoted(String),
}

fn is_atom_char(c: char) -> bool {
    !c.is_whitespace() && !matches!(c, '(' | ')' | '"' | ';')
}

pub fn is_valid_atom(s: &str) -> bool {
    !s.is_empty() && s.chars().all(is_atom_char)
}

fn lex(text: &str) -> Result<Vec<(usize, Token)>, AclError> {
    let mut tokens = Vec::new();
    let mut chars = text.char_indices().peekable();
    while let Some(&(pos, c)) = chars.peek() {
        match c {
            c if c.is_whitespace() => {
                chars.next();
            }
            '(' => {
                chars.next();
                tokens.push((pos, Token::Open));
            }
            ')' => {
                chars.next();
                tokens.push((pos, Token::Close));
            }
            '"' => {
                chars.next();
                let mut s = String::new();
                loop {
                    match chars.next() {
                        None => return Err(AclError::UnterminatedString(pos)),
                        Some((_, '"')) => break,
                        Some((_, '\\')) => match chars.next() {
                            Some((_, escaped)) => s.push(escaped),
                            None => return Err(AclError::UnterminatedString(pos)),
                        },
                        Some((_, other)) => s.push(other),
                    }
                }
                tokens.push((pos, Token::Quoted(s)));
            }
            ';' => return Err(AclError::UnexpectedToken { found: "`;`".into(), position: pos }),
            _ => {
                let mut s = String::new();
                while let Some(&(_, c)) = chars.peek() {
                    if !is_atom_char(c) {
                        break;
                    }
                    s.push(c);
                    chars.next();
                }
                tokens.push((pos, Token::Atom(s)));
            }
        }
    }
    Ok(tokens)
}

// ---------------------------------------------------------------------------
// Parsing

struct Parser {
    tokens: Vec<(usize, Token)>,
    at: usize,
}

impl Parser {
    fn peek(&self) -> Option<&(usize, Token)> {
        self.tokens.get(self.at)
    }

    /// Parse a list body after its '(' (at byte `open`) up to the matching ')'.
    fn list(&mut self, open: usize, depth: usize) -> Result<Vec<AclValue>, AclError> {
        if depth > MAX_DEPTH {
            return Err(AclError::TooDeep(open));
        }
        let mut items = Vec::new();
        loop {
            let Some((pos, token)) = self.tokens.get(self.at).cloned() else {
                return Err(AclError::UnbalancedParens(open));
            };
            self.at += 1;
            match token {
                Token::Close => return Ok(items),
                Token::Open => items.push(AclValue::List(self.list(pos, depth + 1)?)),
                Token::Atom(s) => items.push(AclValue::Atom(s)),
                Token::Quoted(s) => items.push(AclValue::Quoted(s)),
            }
        }
    }

    fn message(&mut self) -> Result<AclMessage, AclError> {
        let open = match self.tokens.get(self.at).cloned() {
            None => return Err(AclError::EmptyInput),
            Some((pos, Token::Open)) => pos,
            Some((pos, Token::Close)) => return Err(AclError::UnbalancedParens(pos)),
            Some((pos, other)) => return Err(unexpected(&other, pos)),
        };
        self.at += 1;
        let performative = match self.tokens.get(self.at).cloned() {
            Some((_, Token::Atom(a))) if !a.starts_with(':') => {
                self.at += 1;
                a
            }
            None => return Err(AclError::UnbalancedParens(open)),
            Some((pos, _)) => return Err(AclError::MissingPerformative(pos)),
        };
        let mut parameters: Vec<(String, AclValue)> = Vec::new();
        loop {
            let Some((pos, token)) = self.tokens.get(self.at).cloned() else {
                return Err(AclError::UnbalancedParens(open));
            };
            self.at += 1;
            let keyword = match token {
                Token::Close => break,
                Token::Atom(k) if k.len() > 1 && k.starts_with(':') => k,
                other => return Err(unexpected(&other, pos)),
            };
            if parameters.iter().any(|(k, _)| *k == keyword) {
                return Err(AclError::DuplicateKeyword { keyword, position: pos });
            }
            let value = match self.tokens.get(self.at).cloned() {
                None => return Err(AclError::UnbalancedParens(open)),
                Some((_, Token::Close)) => return Err(AclError::DanglingKeyword { keyword, position: pos }),
                Some((_, Token::Atom(a))) if a.starts_with(':') => {
                    return Err(AclError::DanglingKeyword { keyword, position: pos })
                }
                Some((_, Token::Atom(a))) => AclValue::Atom(a),
                Some((_, Token::Quoted(s))) => AclValue::Quoted(s),
                Some((vpos, Token::Open)) => {
                    self.at += 1;
                    let items = self.list(vpos, 1)?;
                    parameters.push((keyword, AclValue::List(items)));
                    continue;
                }
            };
            self.at += 1;
            parameters.push((keyword, value));
        }
        if let Some((pos, token)) = self.peek().cloned() {
            return Err(match token {
                Token::Close => AclError::UnbalancedParens(pos),
                other => unexpected(&other, pos),
            });
        }
        Ok(AclMessage { performative, parameters })
    }
}

fn unexpected(token: &Token, position: usize) -> AclError {
    let found = match token {
        Token::Open => "`(`".to_string(),
        Token::Close => "`)`".to_string(),
        Token::Atom(a) => format!("atom `{a}`"),
        Token::Quoted(_) => "quoted string".to_string(),
    };
    AclError::UnexpectedToken { found, position }
}

/// Parse one KQML message. Whitespace, including newlines, between tokens is
/// insignificant.
pub fn parse_kqml(text: &str) -> Result<AclMessage, AclError> {
    let tokens = lex(text)?;
    Parser { tokens, at: 0 }.message()
}

/// [`parse_kqml`] over raw bytes.
pub fn parse_kqml_bytes(bytes: &[u8]) -> Result<AclMessage, AclError> {
    let text = std::str::from_utf8(bytes).map_err(|e| AclError::InvalidUtf8(e.valid_up_to()))?;
    parse_kqml(text)
}

// ---------------------------------------------------------------------------
// Serialization

fn write_value(out: &mut String, value: &AclValue, top_level: bool) -> Result<(), AclError> {
    match value {
        AclValue::Atom(a) => {
            if !is_valid_atom(a) || (top_level && a.starts_with(':')) {
                return Err(AclError::InvalidAtom(a.clone()));
            }
            out.push_str(a);
        }
        AclValue::Quoted(s) => {
            out.push('"');
            for c in s.chars() {
                if matches!(c, '"' | '\\') {
                    out.push('\\');
                }
                out.push(c);
            }
            out.push('"');
        }
        AclValue::List(items) => {
            out.push('(');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                write_value(out, item, false)?;
            }
            out.push(')');
        }
    }
    Ok(())
}

fn list_depth(value: &AclValue) -> usize {
    match value {
        AclValue::List(items) => 1 + items.iter().map(list_depth).max().unwrap_or(0),
        _ => 0,
    }
}

pub fn serialize_kqml(message: &AclMessage) -> Result<String, AclError> {
    let perf = &message.performative;
    if !is_valid_atom(perf) || perf.starts_with(':') {
        return Err(AclError::InvalidAtom(perf.clone()));
    }
    let mut out = format!("({perf}");
    for (i, (keyword, value)) in message.parameters.iter().enumerate() {
        if keyword.len() < 2 || !keyword.starts_with(':') || !is_valid_atom(keyword) {
            return Err(AclError::InvalidAtom(keyword.clone()));
        }
        if message.parameters[..i].iter().any(|(k, _)| k == keyword) {
            return Err(AclError::InvalidAtom(format!("{keyword} (duplicate)")));
        }
        if list_depth(value) > MAX_DEPTH {
            return Err(AclError::InvalidAtom(format!("{keyword} (nested deeper than {MAX_DEPTH})")));
        }
        let _ = write!(out, " {keyword} ");
        write_value(&mut out, value, true)?;
    }
    out.push(')');
    Ok(out)
}

// ---------------------------------------------------------------------------
// JSON bridge

fn value_to_json(value: &AclValue) -> Value {
    match value {
        AclValue::Atom(s) | AclValue::Quoted(s) => Value::String(s.clone()),
        AclValue::List(items) => Value::Array(items.iter().map(value_to_json).collect()),
    }
}

/// How a JSON string comes back from the bridge: an atom when it is a valid
/// atom that cannot be mistaken for a keyword, otherwise a quoted string.
fn string_to_value(s: &str) -> AclValue {
    if is_valid_atom(s) && !s.starts_with(':') {
        AclValue::Atom(s.to_string())
    } else {
        AclValue::Quoted(s.to_string())
    }
}

fn json_to_value(value: &Value, path: &str) -> Result<AclValue, AclError> {
    match value {
        Value::String(s) => Ok(string_to_value(s)),
        Value::Number(n) => Ok(AclValue::Atom(n.to_string())),
        Value::Bool(b) => Ok(AclValue::Atom(b.to_string())),
        Value::Array(items) => items.iter().map(|v| json_to_value(v, path)).collect::<Result<_, _>>().map(AclValue::List),
        Value::Null => Err(AclError::UnrepresentableValue(format!("null at `{path}`"))),
        Value::Object(_) => Err(AclError::UnrepresentableValue(format!("object at `{path}`"))),
    }
}

/// Flat JSON object: `performative` first, then one field per keyword with
/// the leading ':' removed, in stored order.
pub fn kqml_to_json(message: &AclMessage) -> Result<String, AclError> {
    let mut object = Map::new();
    object.insert("performative".into(), Value::String(message.performative.clone()));
    for (keyword, value) in &message.parameters {
        let key = keyword.strip_prefix(':').unwrap_or(keyword);
        if object.contains_key(key) {
            return Err(AclError::UnrepresentableValue(format!("keyword `{keyword}` collides with another field")));
        }
        object.insert(key.to_string(), value_to_json(value));
    }
    Ok(Value::Object(object).to_string())
}

/// Inverse of [`kqml_to_json`]. Keywords come back sorted; strings become
/// atoms where possible (see [`bridge_canonical`]).
pub fn json_to_kqml(text: &str) -> Result<AclMessage, AclError> {
    let value: Value = serde_json::from_str(text).map_err(|e| AclError::SchemaMismatch(e.to_string()))?;
    let Value::Object(object) = value else {
        return Err(AclError::SchemaMismatch("top level must be an object".into()));
    };
    let performative = match object.get("performative") {
        Some(Value::String(p)) if is_valid_atom(p) && !p.starts_with(':') => p.clone(),
        Some(other) => return Err(AclError::SchemaMismatch(format!("invalid performative {other}"))),
        None => return Err(AclError::SchemaMismatch("missing `performative`".into())),
    };
    let mut keys: Vec<&String> = object.keys().filter(|k| *k != "performative").collect();
    keys.sort();
    let mut parameters = Vec::with_capacity(keys.len());
    for key in keys {
        let keyword = format!(":{key}");
        if key.is_empty() || !is_valid_atom(&keyword) {
            return Err(AclError::SchemaMismatch(format!("field `{key}` is not a valid keyword")));
        }
        parameters.push((keyword, json_to_value(&object[key], key)?));
    }
    Ok(AclMessage { performative, parameters })
}

/// The message the JSON bridge reproduces for `message`: parameters sorted by
/// keyword and strings re-classified as atom or quoted by their content.
pub fn bridge_canonical(message: &AclMessage) -> AclMessage {
    fn canon(value: &AclValue) -> AclValue {
        match value {
            AclValue::Atom(s) | AclValue::Quoted(s) => string_to_value(s),
            AclValue::List(items) => AclValue::List(items.iter().map(canon).collect()),
        }
    }
    let mut parameters: Vec<(String, AclValue)> = message.parameters.iter().map(|(k, v)| (k.clone(), canon(v))).collect();
    parameters.sort_by(|a, b| a.0[1..].cmp(&b.0[1..]));
    AclMessage { performative: message.performative.clone(), parameters }
}

// ---------------------------------------------------------------------------
// Header detection

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StructuredHeader {
    pub receiver: String,
    /// Empty when no performative phrase precedes the body.
    pub performative_phrase: String,
    pub body: String,
}

static HEADER: Lazy<Regex> = Lazy::new(|| Regex::new(r"^@([A-Za-z0-9_][A-Za-z0-9_\-]*)\s*:?\s*(.*)$").unwrap());
static CAMEL: Lazy<Regex> = Lazy::new(|| Regex::new(r"^([A-Z][a-z0-9]+(?:[A-Z][A-Za-z0-9]*)+)(?::\s*|\s+|$)(.*)$").unwrap());
static LABEL: Lazy<Regex> = Lazy::new(|| Regex::new(r"^([A-Z][A-Za-z\-]*):\s+(.*)$").unwrap());

/// Recognize messages whose first non-blank line starts `@Name`, optionally
/// followed by ':' and a performative phrase such as a CamelCase verb
/// (`ContextCheck`) or a single capitalized label ending in ':'.
pub fn detect_structured_header(message: &str) -> Option<StructuredHeader> {
    let mut lines = message.lines().skip_while(|l| l.trim().is_empty());
    let first = lines.next()?.trim();
    let caps = HEADER.captures(first)?;
    let receiver = caps[1].to_string();
    let rest = caps[2].to_string();
    let (performative_phrase, head) = if let Some(c) = CAMEL.captures(&rest) {
        (c[1].to_string(), c[2].to_string())
    } else if let Some(c) = LABEL.captures(&rest) {
        (c[1].to_string(), c[2].to_string())
    } else {
        (String::new(), rest)
    };
    let mut body = head;
    for line in lines {
        body.push('\n');
        body.push_str(line);
    }
    Some(StructuredHeader { receiver, performative_phrase, body: body.trim_end().to_string() })
}
