//! Record and pair serialization with column-type and entity-type injection.
//!
//! An entry serializes as `[COL] f(col) [VAL] g(val) ...` and a pair as
//! `[CLS] left [SEP] right [SEP]`. Template modes write the knowledge into the
//! token stream after its head; constrained tuning keeps the unaugmented
//! trunk and records each injection as a site for the injection tree.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knowledge::AnnotationStore;
use crate::tabular::Record;
use crate::tokenizer::{tokenize, TokenId, Tokenizer, CLS, COL, SEP, SLASH, VAL};

/// Smallest pair budget accepted by [`Serializer::serialize_pair`].
pub const MIN_MAX_LEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Space,
    Slash,
    ConstrainedTuning,
}

impl PromptMode {
    pub fn is_template(self) -> bool {
        !matches!(self, PromptMode::ConstrainedTuning)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PromptMode::Space => "space",
            PromptMode::Slash => "slash",
            PromptMode::ConstrainedTuning => "constrained_tuning",
        }
    }
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "space" => Ok(PromptMode::Space),
            "slash" | "/" => Ok(PromptMode::Slash),
            "constrained_tuning" | "constrained" | "pct" => Ok(PromptMode::ConstrainedTuning),
            other => Err(Error::Domain(format!("unknown prompt mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SiteKind {
    Column,
    Entity,
}

/// Knowledge attached to a contiguous head span of trunk tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InjectionSite {
    pub head: Range<usize>,
    pub knowledge: Vec<TokenId>,
    pub kind: SiteKind,
}

impl InjectionSite {
    fn shifted(&self, offset: usize) -> Self {
        InjectionSite {
            head: self.head.start + offset..self.head.end + offset,
            ..self.clone()
        }
    }
}

/// Serialized entry. `sites` is non-empty only in constrained-tuning mode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub tokens: Vec<TokenId>,
    pub sites: Vec<InjectionSite>,
}

/// A serialized pair, `[CLS] left [SEP] right [SEP]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InputSequence {
    pub mode: PromptMode,
    pub left: TokenSeq,
    pub right: TokenSeq,
    pub combined: Vec<TokenId>,
    pub segments: Vec<u8>,
    pub label: Option<u8>,
}

impl InputSequence {
    fn new(mode: PromptMode, left: TokenSeq, right: TokenSeq, label: Option<u8>) -> Self {
        let mut combined = Vec::with_capacity(left.tokens.len() + right.tokens.len() + 3);
        combined.push(CLS);
        combined.extend_from_slice(&left.tokens);
        combined.push(SEP);
        let boundary = combined.len();
        combined.extend_from_slice(&right.tokens);
        combined.push(SEP);
        let segments = (0..combined.len()).map(|i| u8::from(i >= boundary)).collect();
        InputSequence {
            mode,
            left,
            right,
            combined,
            segments,
            label,
        }
    }

    /// Injection sites in `combined` coordinates, left side first.
    pub fn combined_sites(&self) -> Vec<InjectionSite> {
        let right_offset = self.left.tokens.len() + 2;
        self.left
            .sites
            .iter()
            .map(|s| s.shifted(1))
            .chain(self.right.sites.iter().map(|s| s.shifted(right_offset)))
            .collect()
    }

    /// Length after all knowledge has been placed into the sequence.
    pub fn injected_len(&self) -> usize {
        self.combined.len() + self.combined_sites().iter().map(|s| s.knowledge.len()).sum::<usize>()
    }
}

/// Unaugmented trunk with value ranges and pending injections; the common
/// form all modes render from.
#[derive(Debug, Clone)]
struct EntryDraft {
    trunk: Vec<TokenId>,
    values: Vec<Range<usize>>,
    sites: Vec<InjectionSite>,
}

impl EntryDraft {
    fn cost(&self, mode: PromptMode) -> usize {
        let joiner = usize::from(mode == PromptMode::Slash);
        self.trunk.len()
            + self
                .sites
                .iter()
                .map(|s| s.knowledge.len() + if mode.is_template() { joiner } else { 0 })
                .sum::<usize>()
    }

    fn has_value_tokens(&self) -> bool {
        self.values.iter().any(|r| !r.is_empty())
    }

    /// Drops the last value token. Injections whose head loses a token are
    /// dropped with it.
    fn pop_value_token(&mut self) -> bool {
        let Some(slot) = self.values.iter().rposition(|r| !r.is_empty()) else {
            return false;
        };
        let p = self.values[slot].end - 1;
        self.trunk.remove(p);
        self.values[slot].end -= 1;
        for r in &mut self.values[slot + 1..] {
            r.start -= 1;
            r.end -= 1;
        }
        self.sites.retain(|s| !s.head.contains(&p));
        for s in &mut self.sites {
            if s.head.start > p {
                s.head = s.head.start - 1..s.head.end - 1;
            }
        }
        true
    }

    fn render(&self, mode: PromptMode, slash: TokenId) -> TokenSeq {
        if !mode.is_template() {
            return TokenSeq {
                tokens: self.trunk.clone(),
                sites: self.sites.clone(),
            };
        }
        let mut tokens = Vec::with_capacity(self.cost(mode));
        let mut next = self.sites.iter().peekable();
        for (i, &t) in self.trunk.iter().enumerate() {
            tokens.push(t);
            while let Some(site) = next.next_if(|s| s.head.end == i + 1) {
                if mode == PromptMode::Slash {
                    tokens.push(slash);
                }
                tokens.extend_from_slice(&site.knowledge);
            }
        }
        TokenSeq {
            tokens,
            sites: Vec::new(),
        }
    }
}

/// Serializes records and pairs for one prompt mode.
pub struct Serializer<'a> {
    pub tokenizer: &'a Tokenizer,
    pub store: &'a AnnotationStore,
    pub mode: PromptMode,
}

impl<'a> Serializer<'a> {
    pub fn new(tokenizer: &'a Tokenizer, store: &'a AnnotationStore, mode: PromptMode) -> Self {
        Serializer {
            tokenizer,
            store,
            mode,
        }
    }

    fn draft(&self, table: &str, record: &Record) -> Result<EntryDraft> {
        let tok = self.tokenizer;
        let mut trunk = Vec::new();
        let mut values = Vec::with_capacity(record.columns.len());
        let mut sites = Vec::new();
        for (col, val) in &record.columns {
            trunk.push(COL);
            let name_start = trunk.len();
            trunk.extend(tokenize(col).iter().map(|t| tok.id(t)));
            let name = name_start..trunk.len();
            if let Some(ct) = self.store.column_type(table, col) {
                if !name.is_empty() {
                    sites.push(InjectionSite {
                        head: name,
                        knowledge: tok.encode(&ct.predicted_type),
                        kind: SiteKind::Column,
                    });
                }
            }
            trunk.push(VAL);
            let value_tokens = tokenize(val);
            let offset = trunk.len();
            for m in self.store.mentions_in(table, &record.entry_id, col) {
                if m.end > value_tokens.len() || m.start >= m.end {
                    return Err(Error::AnnotationMismatch(format!(
                        "mention {}..{} in {table}/{}/{col} but the cell has {} tokens",
                        m.start,
                        m.end,
                        record.entry_id,
                        value_tokens.len()
                    )));
                }
                sites.push(InjectionSite {
                    head: m.start + offset..m.end + offset,
                    knowledge: tok.encode(&m.entity_type),
                    kind: SiteKind::Entity,
                });
            }
            trunk.extend(value_tokens.iter().map(|t| tok.id(t)));
            values.push(offset..trunk.len());
        }
        Ok(EntryDraft {
            trunk,
            values,
            sites,
        })
    }

    /// Serializes a single entry of table `table`.
    pub fn serialize_entry(&self, table: &str, record: &Record) -> Result<TokenSeq> {
        Ok(self.draft(table, record)?.render(self.mode, self.tokenizer.id(SLASH)))
    }

    /// Serializes a pair into at most `max_len` tokens, counting injected
    /// knowledge.
    ///
    /// Over-long pairs lose value tokens from the tail of the longer side
    /// (left on ties) until they fit; markers and specials are never removed.
    pub fn serialize_pair(
        &self,
        left: (&str, &Record),
        right: (&str, &Record),
        label: Option<u8>,
        max_len: usize,
    ) -> Result<InputSequence> {
        if max_len < MIN_MAX_LEN {
            return Err(Error::Domain(format!("max_len {max_len} is below {MIN_MAX_LEN}")));
        }
        let mut l = self.draft(left.0, left.1)?;
        let mut r = self.draft(right.0, right.1)?;
        while 3 + l.cost(self.mode) + r.cost(self.mode) > max_len {
            let left_first = l.cost(self.mode) >= r.cost(self.mode);
            let (first, second) = if left_first { (&mut l, &mut r) } else { (&mut r, &mut l) };
            if !(first.has_value_tokens() && first.pop_value_token()) && !second.pop_value_token() {
                return Err(Error::SequenceOverflow(format!(
                    "pair ({}, {}) needs {} tokens without any values; max_len is {max_len}",
                    left.1.entry_id,
                    right.1.entry_id,
                    3 + l.cost(self.mode) + r.cost(self.mode)
                )));
            }
        }
        let slash = self.tokenizer.id(SLASH);
        Ok(InputSequence::new(
            self.mode,
            l.render(self.mode, slash),
            r.render(self.mode, slash),
            label,
        ))
    }
}
