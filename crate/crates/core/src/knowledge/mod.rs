//! Column-level and entity-level knowledge: semantic column types and typed
//! entity mentions, plus the JSONL interchange used to bring in annotations
//! produced by external typers and linkers.

mod ditto;
mod gazetteer;
mod rules;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tabular::EntryId;

pub use ditto::{ditto_inject, DittoMode, GENERAL_TYPES, PRODUCT_SOURCE_TYPES};
pub use gazetteer::{link_entities, Gazetteer};
pub use rules::{infer_column_types, ColumnRule, FALLBACK_TYPE, RULE_TYPES};

#[derive(Debug, Clone, PartialEq)]
pub struct ColumnTypeAnnotation {
    pub table: String,
    pub column: String,
    pub predicted_type: String,
    pub confidence: f64,
}

/// A typed span over the tokens of one cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityMention {
    pub table: String,
    pub row: EntryId,
    pub column: String,
    pub start: usize,
    pub end: usize,
    pub surface: String,
    pub entity_type: String,
}

impl EntityMention {
    pub fn span(&self) -> Range<usize> {
        self.start..self.end
    }
}

type CellKey = (String, EntryId, String);

/// All knowledge available for a pair of tables.
///
/// Holds at most one column type per `(table, column)` and non-overlapping
/// mentions per cell, kept sorted by span start.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnnotationStore {
    column_types: BTreeMap<(String, String), ColumnTypeAnnotation>,
    mentions: BTreeMap<CellKey, Vec<EntityMention>>,
}

impl AnnotationStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.column_types.is_empty() && self.mentions.is_empty()
    }

    /// Inserts or replaces the type of a column.
    pub fn set_column_type(&mut self, ann: ColumnTypeAnnotation) {
        self.column_types
            .insert((ann.table.clone(), ann.column.clone()), ann);
    }

    pub fn add_mention(&mut self, m: EntityMention) -> Result<()> {
        if m.end <= m.start {
            return Err(Error::Domain(format!("empty mention span {}..{}", m.start, m.end)));
        }
        let cell = self
            .mentions
            .entry((m.table.clone(), m.row.clone(), m.column.clone()))
            .or_default();
        let pos = cell.partition_point(|o| o.start < m.start);
        let clashes_prev = pos > 0 && cell[pos - 1].end > m.start;
        let clashes_next = pos < cell.len() && cell[pos].start < m.end;
        if clashes_prev || clashes_next {
            return Err(Error::Overlap(format!(
                "mention {}..{} in {}/{}/{} overlaps an existing mention",
                m.start, m.end, m.table, m.row, m.column
            )));
        }
        cell.insert(pos, m);
        Ok(())
    }

    pub fn column_type(&self, table: &str, column: &str) -> Option<&ColumnTypeAnnotation> {
        self.column_types.get(&(table.to_string(), column.to_string()))
    }

    pub fn mentions_in(&self, table: &str, row: &EntryId, column: &str) -> &[EntityMention] {
        self.mentions
            .get(&(table.to_string(), row.clone(), column.to_string()))
            .map_or(&[], Vec::as_slice)
    }

    pub fn column_types(&self) -> impl Iterator<Item = &ColumnTypeAnnotation> {
        self.column_types.values()
    }

    pub fn mentions(&self) -> impl Iterator<Item = &EntityMention> {
        self.mentions.values().flatten()
    }

    pub fn mention_count(&self) -> usize {
        self.mentions.values().map(Vec::len).sum()
    }

    /// Every label either level can inject.
    pub fn labels(&self) -> BTreeSet<String> {
        self.column_types
            .values()
            .map(|c| c.predicted_type.clone())
            .chain(self.mentions().map(|m| m.entity_type.clone()))
            .collect()
    }

    /// Overlays `other`: its column types replace ours, and each cell it
    /// annotates replaces our mention list for that cell.
    pub fn merge(&mut self, other: AnnotationStore) {
        self.column_types.extend(other.column_types);
        self.mentions.extend(other.mentions);
    }

    /// Replaces every mention with the output of the Ditto-style injector.
    pub fn apply_ditto(&mut self, mode: DittoMode) {
        for cell in self.mentions.values_mut() {
            *cell = ditto_inject(std::mem::take(cell), mode);
        }
        self.mentions.retain(|_, v| !v.is_empty());
    }

    pub fn drop_mentions(&mut self) {
        self.mentions.clear();
    }

    pub fn drop_column_types(&mut self) {
        self.column_types.clear();
    }

    /// Serializes to the annotation JSONL format: column types first, then
    /// mentions, both in key order.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let lines = self
            .column_types
            .values()
            .map(AnnotationLine::from)
            .chain(self.mentions().map(AnnotationLine::from));
        for line in lines {
            let _ = writeln!(out, "{}", serde_json::to_string(&line).expect("annotation serializes"));
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        Self::parse_jsonl("annotations", text)
    }

    fn parse_jsonl(context: &str, text: &str) -> Result<Self> {
        let mut store = AnnotationStore::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: AnnotationLine = serde_json::from_str(line)
                .map_err(|e| Error::format(context, lineno, e.to_string()))?;
            match parsed {
                AnnotationLine::ColumnType {
                    table,
                    column,
                    label,
                    confidence,
                } => {
                    if !(0.0..=1.0).contains(&confidence) {
                        return Err(Error::format(context, lineno, format!("confidence {confidence} outside [0, 1]")));
                    }
                    store.set_column_type(ColumnTypeAnnotation {
                        table,
                        column,
                        predicted_type: label,
                        confidence,
                    });
                }
                AnnotationLine::Mention {
                    table,
                    row,
                    column,
                    start,
                    end,
                    surface,
                    label,
                } => {
                    if end <= start {
                        return Err(Error::format(context, lineno, format!("mention end {end} <= start {start}")));
                    }
                    store
                        .add_mention(EntityMention {
                            table,
                            row: row.into(),
                            column,
                            start,
                            end,
                            surface,
                            entity_type: label,
                        })
                        .map_err(|e| match e {
                            Error::Overlap(msg) => Error::Overlap(format!("{context} line {lineno}: {msg}")),
                            other => other,
                        })?;
                }
            }
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::tabular::write_text(path.as_ref(), &self.to_jsonl())
    }

    /// Reads an annotation JSONL file. Later lines override earlier ones for
    /// the same `(table, column)`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_jsonl(&path.display().to_string(), &text)
    }
}

/// Row ids are written as JSON numbers when they are canonical decimals.
#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum RowRepr {
    Num(u64),
    Str(String),
}

impl From<RowRepr> for EntryId {
    fn from(r: RowRepr) -> Self {
        match r {
            RowRepr::Num(n) => EntryId(n.to_string()),
            RowRepr::Str(s) => EntryId(s),
        }
    }
}

impl From<&EntryId> for RowRepr {
    fn from(id: &EntryId) -> Self {
        match id.0.parse::<u64>() {
            Ok(n) if n.to_string() == id.0 => RowRepr::Num(n),
            _ => RowRepr::Str(id.0.clone()),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum AnnotationLine {
    ColumnType {
        table: String,
        column: String,
        #[serde(rename = "type")]
        label: String,
        confidence: f64,
    },
    Mention {
        table: String,
        row: RowRepr,
        column: String,
        start: usize,
        end: usize,
        surface: String,
        #[serde(rename = "type")]
        label: String,
    },
}

impl From<&ColumnTypeAnnotation> for AnnotationLine {
    fn from(c: &ColumnTypeAnnotation) -> Self {
        AnnotationLine::ColumnType {
            table: c.table.clone(),
            column: c.column.clone(),
            label: c.predicted_type.clone(),
            confidence: c.confidence,
        }
    }
}

impl From<&EntityMention> for AnnotationLine {
    fn from(m: &EntityMention) -> Self {
        AnnotationLine::Mention {
            table: m.table.clone(),
            row: (&m.row).into(),
            column: m.column.clone(),
            start: m.start,
            end: m.end,
            surface: m.surface.clone(),
            label: m.entity_type.clone(),
        }
    }
}
