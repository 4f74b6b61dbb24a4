//! Word-level tokenizer with a frequency-ordered vocabulary.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tabular::Table;

pub type TokenId = u32;

pub const CLS: TokenId = 0;
pub const SEP: TokenId = 1;
pub const COL: TokenId = 2;
pub const VAL: TokenId = 3;
pub const UNK: TokenId = 4;
pub const PAD: TokenId = 5;

pub const SPECIAL_TOKENS: [&str; 6] = ["[CLS]", "[SEP]", "[COL]", "[VAL]", "[UNK]", "[PAD]"];

/// Joiner token used by slash prompting.
pub const SLASH: &str = "/";

fn is_punct(c: char) -> bool {
    !c.is_alphanumeric()
}

/// Splits text into lowercase word tokens.
///
/// Leading and trailing punctuation become one token per character, and `/`
/// is always split out, so `"A/B"` gives `["a", "/", "b"]`.
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut out = Vec::new();
    for chunk in lower.split_whitespace() {
        let chars: Vec<char> = chunk.chars().collect();
        let start = chars.iter().position(|&c| !is_punct(c)).unwrap_or(chars.len());
        let end = chars.iter().rposition(|&c| !is_punct(c)).map_or(start, |i| i + 1);
        out.extend(chars[..start].iter().map(|c| c.to_string()));
        if start < end {
            let core: String = chars[start..end].iter().collect();
            let mut parts = core.split('/').peekable();
            while let Some(part) = parts.next() {
                if !part.is_empty() {
                    out.push(part.to_string());
                }
                if parts.peek().is_some() {
                    out.push(SLASH.to_string());
                }
            }
        }
        out.extend(chars[end.max(start)..].iter().map(|c| c.to_string()));
    }
    out
}

/// Joins tokens back into the canonical surface form of a span.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut s = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        s.push_str(t.as_ref());
    }
    s
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    ids: HashMap<String, TokenId>,
    tokens: Vec<String>,
}

impl Tokenizer {
    /// A tokenizer holding only the special tokens.
    pub fn specials_only() -> Self {
        Self::from_tokens(SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect())
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Tokenizer { ids, tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokenize(&self, text: &str) -> Vec<String> {
        tokenize(text)
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Tokenizes and maps to ids; unknown words become `[UNK]`.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<&str> {
        ids.iter().map(|&i| self.token(i).unwrap_or("[UNK]")).collect()
    }

    /// `token<TAB>id` lines in id order.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            let _ = writeln!(s, "{t}\t{i}");
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let (tok, id) = line
                .split_once('\t')
                .ok_or_else(|| Error::format("vocabulary", i + 1, "expected `token<TAB>id`"))?;
            let id: usize = id
                .parse()
                .map_err(|_| Error::format("vocabulary", i + 1, format!("bad id `{id}`")))?;
            if id != i {
                return Err(Error::format("vocabulary", i + 1, "ids must be dense and in order"));
            }
            if i < SPECIAL_TOKENS.len() && tok != SPECIAL_TOKENS[i] {
                return Err(Error::format("vocabulary", i + 1, format!("expected special token {}", SPECIAL_TOKENS[i])));
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < SPECIAL_TOKENS.len() {
            return Err(Error::format("vocabulary", tokens.len() + 1, "special tokens missing"));
        }
        Ok(Self::from_tokens(tokens))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::tabular::write_text(path.as_ref(), &self.to_tsv())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&text)
    }

    /// Hex SHA-256 of the vocabulary file contents.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_tsv().as_bytes()))
    }
}

/// Builds a vocabulary from every cell and column name in `corpus`.
///
/// Corpus tokens with frequency `>= min_count` are ordered by frequency
/// descending, then lexicographically. Tokens of `labels` and the slash
/// joiner follow in lexicographic order when not already present.
pub fn build_vocab<'a, I>(corpus: &[&Table], min_count: usize, labels: I) -> Tokenizer
where
    I: IntoIterator<Item = &'a str>,
{
    let mut counts: HashMap<String, usize> = HashMap::new();
    for table in corpus {
        for row in table.rows() {
            for (col, val) in &row.columns {
                for t in tokenize(col).into_iter().chain(tokenize(val)) {
                    *counts.entry(t).or_default() += 1;
                }
            }
        }
    }
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_count.max(1) && !SPECIAL_TOKENS.contains(&t.as_str()))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(ranked.into_iter().map(|(t, _)| t));
    let present: std::collections::HashSet<String> = tokens.iter().cloned().collect();
    let extra: BTreeSet<String> = labels
        .into_iter()
        .flat_map(tokenize)
        .chain(std::iter::once(SLASH.to_string()))
        .filter(|t| !present.contains(t))
        .collect();
    tokens.extend(extra);
    Tokenizer::from_tokens(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tabular::Record;

    fn one_cell(v: &str) -> Table {
        Table::new("t", vec!["c".into()], vec![Record::new("0", vec![("c".into(), v.into())])]).unwrap()
    }

    #[test]
    fn tokenization_rules() {
        assert_eq!(tokenize("iPhone 6s,"), ["iphone", "6s", ","]);
        assert!(tokenize("").is_empty());
        assert!(tokenize("   ").is_empty());
        assert_eq!(tokenize("A/B"), ["a", "/", "b"]);
        assert_eq!(tokenize("$9.99"), ["$", "9.99"]);
        assert_eq!(tokenize("(x)..."), ["(", "x", ")", ".", ".", "."]);
        assert_eq!(tokenize("--"), ["-", "-"]);
        assert_eq!(tokenize("a//b"), ["a", "/", "/", "b"]);
        assert_eq!(tokenize("[CLS]"), ["[", "cls", "]"]);
    }

    #[test]
    fn vocab_orders_by_frequency_then_lex() {
        let t = one_cell("a b a");
        let tok = build_vocab(&[&t], 1, []);
        // column name "c" occurs once, like "b"
        assert!(tok.id("a") < tok.id("b"));
        assert!(tok.id("b") < tok.id("c"));
        assert_eq!(tok.id("a"), 6);
        assert_eq!(tok.token(0), Some("[CLS]"));
        assert_eq!(tok.token(5), Some("[PAD]"));
    }

    #[test]
    fn labels_and_slash_are_always_present() {
        let t = one_cell("iphone");
        let tok = build_vocab(&[&t], 1, ["PRODUCT", "mobile phone"]);
        for w in ["product", "mobile", "phone", "/"] {
            assert_ne!(tok.id(w), UNK, "{w}");
        }
        assert_eq!(tok.id("galaxy"), UNK);
    }

    #[test]
    fn min_count_filters() {
        let t = one_cell("a b a");
        let tok = build_vocab(&[&t], 2, []);
        assert_ne!(tok.id("a"), UNK);
        assert_eq!(tok.id("b"), UNK);
    }

    #[test]
    fn deterministic_and_tsv_round_trip() {
        let t = one_cell("z y x y z z");
        let a = build_vocab(&[&t], 1, ["song"]);
        let b = build_vocab(&[&t], 1, ["song"]);
        assert_eq!(a, b);
        assert_eq!(a.hash(), b.hash());
        assert_eq!(Tokenizer::from_tsv(&a.to_tsv()).unwrap(), a);
        assert!(Tokenizer::from_tsv("[CLS]\t0\nfoo\t2\n").is_err());
    }
}
