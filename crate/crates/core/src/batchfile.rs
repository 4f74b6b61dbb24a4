//! JSONL batch files of prepared sequences.
//!
//! Template-mode lines carry the pair sequence with knowledge already inline
//! and no sites. Constrained-tuning lines carry the flattened tokens, the
//! sites in trunk coordinates, `soft_pos` and the visible matrix as one hex
//! bitset per row.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::constrained::{Branch, InjectedSequence, InjectionTree, Origin, VisibleMatrix};
use crate::error::{Error, Result};
use crate::serializer::{InputSequence, SiteKind};
use crate::tokenizer::TokenId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteLine {
    pub head: [usize; 2],
    pub know: Vec<TokenId>,
    pub kind: SiteKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchLine {
    pub tokens: Vec<TokenId>,
    pub segments: Vec<u8>,
    pub sites: Vec<SiteLine>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub soft_pos: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visible_rows: Option<Vec<String>>,
}

impl BatchLine {
    /// Line for a serialized pair. Constrained-tuning pairs also need their
    /// assembled sequence.
    pub fn new(input: &InputSequence, injected: Option<&InjectedSequence>) -> Self {
        match injected {
            None => BatchLine {
                tokens: input.combined.clone(),
                segments: input.segments.clone(),
                sites: Vec::new(),
                label: input.label,
                soft_pos: None,
                visible_rows: None,
            },
            Some(inj) => BatchLine {
                tokens: inj.tokens.clone(),
                segments: inj.segments.clone(),
                sites: input
                    .combined_sites()
                    .into_iter()
                    .map(|s| SiteLine {
                        head: [s.head.start, s.head.end],
                        know: s.knowledge,
                        kind: s.kind,
                    })
                    .collect(),
                label: inj.label,
                soft_pos: Some(inj.soft_positions.clone()),
                visible_rows: Some(inj.visible.to_hex_rows()),
            },
        }
    }

    /// Rebuilds the encoder input, checking that the fields agree.
    pub fn to_injected(&self) -> Result<InjectedSequence> {
        let n = self.tokens.len();
        if self.segments.len() != n {
            return Err(Error::Domain(format!("{} segments for {n} tokens", self.segments.len())));
        }
        match (&self.soft_pos, &self.visible_rows) {
            (None, None) => {
                if !self.sites.is_empty() {
                    return Err(Error::Domain("sites without soft_pos and visible_rows".into()));
                }
                Ok(InjectedSequence {
                    tokens: self.tokens.clone(),
                    soft_positions: (0..n).collect(),
                    visible: VisibleMatrix::ones(n),
                    segments: self.segments.clone(),
                    trunk_mask: vec![true; n],
                    label: self.label,
                })
            }
            (Some(soft), Some(rows)) => {
                let branch_tokens: usize = self.sites.iter().map(|s| s.know.len()).sum();
                if soft.len() != n || rows.len() != n || branch_tokens > n {
                    return Err(Error::Domain(format!(
                        "{n} tokens but {} soft positions, {} visible rows and {branch_tokens} knowledge tokens",
                        soft.len(),
                        rows.len()
                    )));
                }
                let branches = self
                    .sites
                    .iter()
                    .map(|s| Branch {
                        head: s.head[0]..s.head[1],
                        knowledge: s.know.clone(),
                    })
                    .collect();
                let tree = InjectionTree::new(vec![0; n - branch_tokens], branches)?;
                let mut trunk_mask = Vec::with_capacity(n);
                for (f, o) in tree.layout().into_iter().enumerate() {
                    match o {
                        Origin::Trunk(_) => trunk_mask.push(true),
                        Origin::Branch { branch, k } => {
                            if self.tokens[f] != tree.branches[branch].knowledge[k] {
                                return Err(Error::Domain(format!("token {f} does not match its site")));
                            }
                            trunk_mask.push(false);
                        }
                    }
                }
                let visible = VisibleMatrix::from_hex_rows(rows)?;
                Ok(InjectedSequence {
                    tokens: self.tokens.clone(),
                    soft_positions: soft.clone(),
                    visible,
                    segments: self.segments.clone(),
                    trunk_mask,
                    label: self.label,
                })
            }
            _ => Err(Error::Domain("soft_pos and visible_rows must appear together".into())),
        }
    }
}

pub fn batch_to_jsonl(lines: &[BatchLine]) -> String {
    let mut out = String::new();
    for line in lines {
        out.push_str(&serde_json::to_string(line).expect("batch line serializes"));
        out.push('\n');
    }
    out
}

pub fn write_batch(path: impl AsRef<Path>, lines: &[BatchLine]) -> Result<()> {
    crate::tabular::write_text(path.as_ref(), &batch_to_jsonl(lines))
}

/// Reads a batch file back into encoder inputs.
pub fn read_batch(path: impl AsRef<Path>) -> Result<Vec<InjectedSequence>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ctx = path.display().to_string();
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let line: BatchLine = serde_json::from_str(l).map_err(|e| Error::format(&ctx, i + 1, e.to_string()))?;
            line.to_injected().map_err(|e| Error::format(&ctx, i + 1, e.to_string()))
        })
        .collect()
}
