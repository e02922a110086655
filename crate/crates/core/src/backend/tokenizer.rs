//! Local token counters, used whenever a provider does not report usage.
//!
//! Two families are available: `whitespace` (one token per whitespace-separated
//! word) and merge-table subword tokenizers loaded from a file of `left right`
//! merge rules, one per line, in priority order. Subword tokenization never
//! crosses whitespace, so counts are additive over whitespace boundaries.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use once_cell::sync::Lazy;
use thiserror::Error;

pub const WHITESPACE: &str = "whitespace";

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("unknown tokenizer `{0}`")]
    UnknownTokenizer(String),
    #[error("cannot load merge table {path}: {reason}")]
    Load { path: PathBuf, reason: String },
}

/// Byte-pair-style subword tokenizer driven by a ranked merge table.
#[derive(Debug, Clone, Default)]
pub struct BpeTokenizer {
    ranks: HashMap<(String, String), usize>,
}

impl BpeTokenizer {
    pub fn from_merges<I, S>(merges: I) -> Self
    where
        I: IntoIterator<Item = (S, S)>,
        S: Into<String>,
    {
        let ranks = merges
            .into_iter()
            .enumerate()
            .map(|(rank, (l, r))| ((l.into(), r.into()), rank))
            .collect();
        Self { ranks }
    }

    pub fn parse(table: &str) -> Result<Self, String> {
        let mut merges = Vec::new();
        for (lineno, line) in table.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            match (parts.next(), parts.next(), parts.next()) {
                (Some(l), Some(r), None) => merges.push((l.to_string(), r.to_string())),
                _ => return Err(format!("line {}: expected `left right`", lineno + 1)),
            }
        }
        Ok(Self::from_merges(merges))
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let load_err = |reason: String| TokenizerError::Load { path: path.to_path_buf(), reason };
        let raw = std::fs::read_to_string(path).map_err(|e| load_err(e.to_string()))?;
        Self::parse(&raw).map_err(load_err)
    }

    pub fn tokenize_word(&self, word: &str) -> Vec<String> {
        let mut symbols: Vec<String> = word.chars().map(String::from).collect();
        loop {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, pair)| self.ranks.get(&(pair[0].clone(), pair[1].clone())).map(|r| (*r, i)))
                .min();
            let Some((_, i)) = best else { break };
            let merged = format!("{}{}", symbols[i], symbols[i + 1]);
            symbols.splice(i..i + 2, [merged]);
        }
        symbols
    }

    pub fn count(&self, text: &str) -> usize {
        text.split_whitespace().map(|w| self.tokenize_word(w).len()).sum()
    }
}

#[derive(Debug, Clone)]
enum Tokenizer {
    Whitespace,
    Bpe(Arc<BpeTokenizer>),
}

impl Tokenizer {
    fn count(&self, text: &str) -> usize {
        match self {
            Tokenizer::Whitespace => text.split_whitespace().count(),
            Tokenizer::Bpe(bpe) => bpe.count(text),
        }
    }
}

/// Named tokenizers. `whitespace` is always present; ids of the form
/// `bpe:<path>` are loaded on first use.
#[derive(Debug, Clone)]
pub struct TokenizerRegistry {
    tokenizers: HashMap<String, Tokenizer>,
}

impl Default for TokenizerRegistry {
    fn default() -> Self {
        let mut tokenizers = HashMap::new();
        tokenizers.insert(WHITESPACE.to_string(), Tokenizer::Whitespace);
        Self { tokenizers }
    }
}

impl TokenizerRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_bpe(&mut self, id: impl Into<String>, tokenizer: BpeTokenizer) {
        self.tokenizers.insert(id.into(), Tokenizer::Bpe(Arc::new(tokenizer)));
    }

    /// Make sure `id` is usable, loading `bpe:<path>` tables if needed.
    pub fn ensure(&mut self, id: &str) -> Result<(), TokenizerError> {
        if self.tokenizers.contains_key(id) {
            return Ok(());
        }
        match id.strip_prefix("bpe:") {
            Some(path) => {
                let bpe = BpeTokenizer::load(Path::new(path))?;
                self.register_bpe(id, bpe);
                Ok(())
            }
            None => Err(TokenizerError::UnknownTokenizer(id.to_string())),
        }
    }

    pub fn contains(&self, id: &str) -> bool {
        self.tokenizers.contains_key(id)
    }

    pub fn count(&self, text: &str, tokenizer_id: &str) -> Result<usize, TokenizerError> {
        self.tokenizers
            .get(tokenizer_id)
            .map(|t| t.count(text))
            .ok_or_else(|| TokenizerError::UnknownTokenizer(tokenizer_id.to_string()))
    }
}

static GLOBAL: Lazy<RwLock<TokenizerRegistry>> = Lazy::new(|| RwLock::new(TokenizerRegistry::default()));

/// Count tokens of `text` with a named tokenizer from the process-wide registry.
pub fn count_tokens(text: &str, tokenizer_id: &str) -> Result<usize, TokenizerError> {
    if let Ok(n) = GLOBAL.read().expect("tokenizer registry").count(text, tokenizer_id) {
        return Ok(n);
    }
    let mut registry = GLOBAL.write().expect("tokenizer registry");
    registry.ensure(tokenizer_id)?;
    registry.count(text, tokenizer_id)
}

/// Register a tokenizer in the process-wide registry.
pub fn register_global_bpe(id: impl Into<String>, tokenizer: BpeTokenizer) {
    GLOBAL.write().expect("tokenizer registry").register_bpe(id, tokenizer);
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn whitespace_examples() {
        assert_eq!(count_tokens("", WHITESPACE).unwrap(), 0);
        assert_eq!(count_tokens("the cat sat", WHITESPACE).unwrap(), 3);
        assert_eq!(count_tokens("  spaced\tout\n\nwords  ", WHITESPACE).unwrap(), 3);
    }

    #[test]
    fn unknown_tokenizer() {
        assert!(matches!(count_tokens("x", "sentencepiece"), Err(TokenizerError::UnknownTokenizer(_))));
    }

    #[test]
    fn bpe_merges_in_rank_order() {
        let bpe = BpeTokenizer::parse("# merges\nl o\nlo w\ne r\n").unwrap();
        assert_eq!(bpe.tokenize_word("lower"), ["low", "er"]);
        assert_eq!(bpe.tokenize_word("xyz"), ["x", "y", "z"]);
        assert_eq!(bpe.count("lower low"), 3);
        assert_eq!(bpe.count(""), 0);
    }

    #[test]
    fn bpe_table_errors() {
        assert!(BpeTokenizer::parse("a b c").is_err());
    }

    #[test]
    fn bpe_loadable_by_path_id() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("merges.txt");
        std::fs::write(&path, "t h\nth e\n").unwrap();
        let id = format!("bpe:{}", path.display());
        assert_eq!(count_tokens("the theme", &id).unwrap(), 1 + 3);
    }

    proptest! {
        #[test]
        fn whitespace_matches_split_oracle(text in "\\PC{0,200}") {
            let oracle = text.split(char::is_whitespace).filter(|s| !s.is_empty()).count();
            prop_assert_eq!(count_tokens(&text, WHITESPACE).unwrap(), oracle);
        }

        #[test]
        fn bpe_counts_are_additive(a in "[a-e ]{0,30}", b in "[a-e ]{0,30}") {
            let bpe = BpeTokenizer::parse("a b\nab c\nd e\n").unwrap();
            let joined = format!("{a} {b}");
            prop_assert_eq!(bpe.count(&joined), bpe.count(&a) + bpe.count(&b));
        }
    }
}
