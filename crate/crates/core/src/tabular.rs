//! Paired tables, labeled pairs, and the dirty-data corruption used to
//! stress matchers.
//!
//! Files follow the Magellan layout: `tableA.csv` / `tableB.csv` with an `id`
//! column, and split files with `ltable_id,rtable_id,label`.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Opaque row identifier, kept verbatim as it appears in the source file.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntryId(pub String);

impl EntryId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for EntryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for EntryId {
    fn from(s: &str) -> Self {
        EntryId(s.to_string())
    }
}

impl From<String> for EntryId {
    fn from(s: String) -> Self {
        EntryId(s)
    }
}

impl From<usize> for EntryId {
    fn from(n: usize) -> Self {
        EntryId(n.to_string())
    }
}

/// One data entry: an ordered list of `(column, value)` pairs.
///
/// Missing values are empty strings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub entry_id: EntryId,
    pub columns: Vec<(String, String)>,
}

impl Record {
    pub fn new(entry_id: impl Into<EntryId>, columns: Vec<(String, String)>) -> Self {
        Record {
            entry_id: entry_id.into(),
            columns,
        }
    }

    pub fn value(&self, column: &str) -> Option<&str> {
        self.columns
            .iter()
            .find(|(c, _)| c == column)
            .map(|(_, v)| v.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    name: String,
    schema: Vec<String>,
    rows: Vec<Record>,
    /// Position of the `id` column in the source header.
    id_position: usize,
    index: HashMap<EntryId, usize>,
}

impl Table {
    /// Builds a table, checking the schema and row invariants.
    pub fn new(name: impl Into<String>, schema: Vec<String>, rows: Vec<Record>) -> Result<Self> {
        Self::with_id_position(name.into(), schema, rows, 0)
    }

    fn with_id_position(
        name: String,
        schema: Vec<String>,
        rows: Vec<Record>,
        id_position: usize,
    ) -> Result<Self> {
        for (i, col) in schema.iter().enumerate() {
            if col.trim().is_empty() {
                return Err(Error::format(&name, 1, format!("column {i} has an empty name")));
            }
        }
        let mut index = HashMap::with_capacity(rows.len());
        for (i, row) in rows.iter().enumerate() {
            let names_match = row.columns.len() == schema.len()
                && row.columns.iter().zip(&schema).all(|((c, _), s)| c == s);
            if !names_match {
                return Err(Error::format(
                    &name,
                    i + 2,
                    format!("row `{}` does not follow the table schema", row.entry_id),
                ));
            }
            if index.insert(row.entry_id.clone(), i).is_some() {
                return Err(Error::DuplicateId {
                    context: name,
                    id: row.entry_id.0.clone(),
                });
            }
        }
        Ok(Table {
            name,
            schema,
            rows,
            id_position,
            index,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn schema(&self) -> &[String] {
        &self.schema
    }

    pub fn rows(&self) -> &[Record] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, id: &EntryId) -> Option<&Record> {
        self.index.get(id).map(|&i| &self.rows[i])
    }

    pub fn contains(&self, id: &EntryId) -> bool {
        self.index.contains_key(id)
    }

    /// Same rows under a different table name.
    pub fn renamed(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }
}

fn reject_newlines(context: &str, line: usize, fields: &csv::StringRecord) -> Result<()> {
    if fields.iter().any(|f| f.contains('\n') || f.contains('\r')) {
        return Err(Error::format(context, line, "embedded newlines are not supported"));
    }
    Ok(())
}

fn csv_reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(file))
}

fn csv_error(context: &str, line: usize, err: csv::Error) -> Error {
    match err.into_kind() {
        csv::ErrorKind::Io(e) => Error::io(context, e),
        other => Error::format(context, line, format!("{other:?}")),
    }
}

/// Loads a table from a CSV file with an `id` column. The table is named
/// after the file stem.
pub fn load_table(path: impl AsRef<Path>) -> Result<Table> {
    let path = path.as_ref();
    let context = path.display().to_string();
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| context.clone());
    let mut reader = csv_reader(path)?;
    let mut records = reader.records();

    let header = match records.next() {
        Some(h) => h.map_err(|e| csv_error(&context, 1, e))?,
        None => return Err(Error::format(&context, 1, "missing header")),
    };
    reject_newlines(&context, 1, &header)?;
    let id_position = header
        .iter()
        .position(|h| h == "id")
        .ok_or_else(|| Error::format(&context, 1, "header has no `id` column"))?;
    let schema: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != id_position)
        .map(|(_, h)| h.to_string())
        .collect();

    let mut rows = Vec::new();
    for (i, rec) in records.enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| csv_error(&context, line, e))?;
        reject_newlines(&context, line, &rec)?;
        if rec.len() != header.len() {
            return Err(Error::format(
                &context,
                line,
                format!("expected {} fields, found {}", header.len(), rec.len()),
            ));
        }
        let id = EntryId(rec[id_position].to_string());
        let columns = rec
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != id_position)
            .zip(&schema)
            .map(|((_, v), c)| (c.clone(), v.to_string()))
            .collect();
        rows.push(Record::new(id, columns));
    }
    Table::with_id_position(name, schema, rows, id_position).map_err(|e| match e {
        Error::DuplicateId { id, .. } => Error::DuplicateId { context, id },
        other => other,
    })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(file))
}

/// Writes a table in the layout [`load_table`] reads, with the `id` column at
/// its original position.
pub fn write_table(table: &Table, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv_writer(path)?;
    let wrap = |e: csv::Error| csv_error(&path.display().to_string(), 0, e);
    let mut header: Vec<&str> = table.schema.iter().map(String::as_str).collect();
    header.insert(table.id_position, "id");
    w.write_record(&header).map_err(wrap)?;
    for row in &table.rows {
        let mut fields: Vec<&str> = row.columns.iter().map(|(_, v)| v.as_str()).collect();
        fields.insert(table.id_position, row.entry_id.as_str());
        w.write_record(&fields).map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "validation" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Domain(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledPair {
    pub left_id: EntryId,
    pub right_id: EntryId,
    /// 1 = match, 0 = non-match.
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledPairSet {
    pub split: Split,
    pub pairs: Vec<LabeledPair>,
}

impl LabeledPairSet {
    /// Builds a pair set, rejecting duplicate `(left, right)` keys and labels
    /// outside `{0, 1}`.
    pub fn new(split: Split, pairs: Vec<LabeledPair>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(pairs.len());
        for (i, p) in pairs.iter().enumerate() {
            if p.label > 1 {
                return Err(Error::format(split.as_str(), i + 2, format!("label {} is not 0 or 1", p.label)));
            }
            if !seen.insert((&p.left_id, &p.right_id)) {
                return Err(Error::format(
                    split.as_str(),
                    i + 2,
                    format!("duplicate pair ({}, {})", p.left_id, p.right_id),
                ));
            }
        }
        Ok(LabeledPairSet { split, pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.pairs.iter().filter(|p| p.label == 1).count()
    }
}

/// Loads a pair file and checks every id against the two tables.
pub fn load_pairs(
    path: impl AsRef<Path>,
    split: Split,
    left: &Table,
    right: &Table,
) -> Result<LabeledPairSet> {
    let path = path.as_ref();
    let context = path.display().to_string();
    let mut reader = csv_reader(path)?;
    let mut records = reader.records();
    let header = match records.next() {
        Some(h) => h.map_err(|e| csv_error(&context, 1, e))?,
        None => return Err(Error::format(&context, 1, "missing header")),
    };
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::format(&context, 1, format!("header has no `{name}` column")))
    };
    let (li, ri, lab) = (col("ltable_id")?, col("rtable_id")?, col("label")?);

    let mut pairs = Vec::new();
    let mut seen = HashSet::new();
    for (i, rec) in records.enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| csv_error(&context, line, e))?;
        if rec.len() != header.len() {
            return Err(Error::format(
                &context,
                line,
                format!("expected {} fields, found {}", header.len(), rec.len()),
            ));
        }
        let left_id = EntryId(rec[li].to_string());
        let right_id = EntryId(rec[ri].to_string());
        let label = match &rec[lab] {
            "0" => 0,
            "1" => 1,
            other => return Err(Error::format(&context, line, format!("label `{other}` is not 0 or 1"))),
        };
        if !left.contains(&left_id) {
            return Err(Error::DanglingReference {
                context,
                line,
                side: "left",
                id: left_id.0,
            });
        }
        if !right.contains(&right_id) {
            return Err(Error::DanglingReference {
                context,
                line,
                side: "right",
                id: right_id.0,
            });
        }
        if !seen.insert((left_id.clone(), right_id.clone())) {
            return Err(Error::format(
                &context,
                line,
                format!("duplicate pair ({left_id}, {right_id})"),
            ));
        }
        pairs.push(LabeledPair {
            left_id,
            right_id,
            label,
        });
    }
    Ok(LabeledPairSet { split, pairs })
}

pub fn write_pairs(set: &LabeledPairSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv_writer(path)?;
    let wrap = |e: csv::Error| csv_error(&path.display().to_string(), 0, e);
    w.write_record(["ltable_id", "rtable_id", "label"]).map_err(wrap)?;
    for p in &set.pairs {
        w.write_record([p.left_id.as_str(), p.right_id.as_str(), if p.label == 1 { "1" } else { "0" }])
            .map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One value relocation performed by [`make_dirty_with_report`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellMove {
    pub row: usize,
    pub from: usize,
    pub to: usize,
}

/// Number of source cells selected for a given fraction: `ceil(f * cells)`.
pub fn dirty_cell_count(fraction: f64, cells: usize) -> usize {
    // 1e-9 absorbs representation error such as 0.1 * 30 = 3.0000000000000004
    let raw = fraction * cells as f64 - 1e-9;
    (raw.ceil().max(0.0) as usize).min(cells)
}

/// Corrupts a table the way dirty ER benchmarks are produced: a share of
/// cells have their value removed and appended to another column of the
/// same row.
pub fn make_dirty(table: &Table, fraction: f64, seed: u64) -> Result<Table> {
    make_dirty_with_report(table, fraction, seed).map(|(t, _)| t)
}

/// Like [`make_dirty`], also returning the moves in application order.
///
/// Sources are read from the original table, so a cell that receives a moved
/// value is never re-moved in the same pass.
pub fn make_dirty_with_report(
    table: &Table,
    fraction: f64,
    seed: u64,
) -> Result<(Table, Vec<CellMove>)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Domain(format!("dirty fraction {fraction} outside [0, 1]")));
    }
    let n_cols = table.schema.len();
    if n_cols < 2 {
        return Err(Error::Domain("make_dirty needs at least two columns".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cells: Vec<(usize, usize)> = (0..table.rows.len())
        .flat_map(|r| (0..n_cols).map(move |c| (r, c)))
        .collect();
    cells.shuffle(&mut rng);
    let chosen = dirty_cell_count(fraction, cells.len());

    let mut moves = Vec::with_capacity(chosen);
    for &(row, from) in &cells[..chosen] {
        let k = rng.random_range(0..n_cols - 1);
        let to = if k >= from { k + 1 } else { k };
        moves.push(CellMove { row, from, to });
    }

    let mut values: Vec<Vec<String>> = table
        .rows
        .iter()
        .map(|r| r.columns.iter().map(|(_, v)| v.clone()).collect())
        .collect();
    for m in &moves {
        values[m.row][m.from].clear();
    }
    for m in &moves {
        let moved = &table.rows[m.row].columns[m.from].1;
        if moved.is_empty() {
            continue;
        }
        let target = &mut values[m.row][m.to];
        if !target.is_empty() {
            target.push(' ');
        }
        target.push_str(moved);
    }

    let rows = table
        .rows
        .iter()
        .zip(values)
        .map(|(r, vals)| Record {
            entry_id: r.entry_id.clone(),
            columns: table.schema.iter().cloned().zip(vals).collect(),
        })
        .collect();
    let dirty = Table::with_id_position(table.name.clone(), table.schema.clone(), rows, table.id_position)?;
    Ok((dirty, moves))
}

/// Writes `text` to `path`, creating parent directories.
pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
