//! Synthetic paired tables where matching hinges on entity types.
//!
//! Table A holds one canonical row per entity. Table B holds a perturbed copy
//! of every entity and a twin: same surface text and attributes, different
//! entity type. Pairs are positives `(a_i, copy_i)`, hard negatives
//! `(a_i, twin_i)` and easy negatives `(a_i, copy_j)` with `j != i`.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knowledge::{AnnotationStore, ColumnTypeAnnotation, EntityMention};
use crate::tabular::{write_pairs, write_table, EntryId, LabeledPair, LabeledPairSet, Record, Split, Table};

/// Surface forms that name things of several kinds.
pub const AMBIGUOUS_SURFACES: [&str; 16] = [
    "jaguar", "apple", "mercury", "amazon", "java", "python", "phoenix", "orion", "puma", "corona", "delta",
    "shell", "oracle", "nova", "galaxy", "saturn",
];

const QUALIFIERS: [&str; 10] = [
    "classic", "pro", "mini", "max", "ultra", "prime", "sport", "deluxe", "lite", "studio",
];

pub const SCHEMA: [&str; 3] = ["name", "year", "price"];
const GOLD_COLUMN_TYPES: [&str; 3] = ["name", "year", "price"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub entities: usize,
    pub pairs: usize,
    pub match_rate: f64,
    /// Share of the negatives that are type twins.
    pub hard_negative_rate: f64,
    pub typo_rate: f64,
    pub abbreviation_rate: f64,
    pub reorder_rate: f64,
    pub entity_types: Vec<String>,
    /// Train, valid and test shares; test takes the remainder.
    pub split: [f64; 3],
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            entities: 250,
            pairs: 500,
            match_rate: 0.5,
            hard_negative_rate: 0.8,
            typo_rate: 0.1,
            abbreviation_rate: 0.05,
            reorder_rate: 0.05,
            entity_types: vec!["PERSON".into(), "PRODUCT".into()],
            split: [0.8, 0.0, 0.2],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub table_a: Table,
    pub table_b: Table,
    pub train: LabeledPairSet,
    pub valid: LabeledPairSet,
    pub test: LabeledPairSet,
    pub gold: AnnotationStore,
}

impl SyntheticDataset {
    pub fn split(&self, split: Split) -> &LabeledPairSet {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    /// Writes `tableA.csv`, `tableB.csv`, one pair file per split and
    /// `gold_annotations.jsonl` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        write_table(&self.table_a, dir.join("tableA.csv"))?;
        write_table(&self.table_b, dir.join("tableB.csv"))?;
        for split in Split::ALL {
            write_pairs(self.split(split), dir.join(format!("{split}.csv")))?;
        }
        self.gold.save(dir.join("gold_annotations.jsonl"))
    }
}

fn check_rate(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Domain(format!("{name} must lie in [0, 1], got {v}")));
    }
    Ok(())
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.entities == 0 {
            return Err(Error::Domain("synthetic spec needs at least one entity".into()));
        }
        for (name, v) in [
            ("match_rate", self.match_rate),
            ("hard_negative_rate", self.hard_negative_rate),
            ("typo_rate", self.typo_rate),
            ("abbreviation_rate", self.abbreviation_rate),
            ("reorder_rate", self.reorder_rate),
        ] {
            check_rate(name, v)?;
        }
        if self.split.iter().any(|&s| !(0.0..=1.0).contains(&s)) || self.split.iter().sum::<f64>() > 1.0 + 1e-9 {
            return Err(Error::Domain(format!("split shares {:?} must be in [0, 1] and sum to at most 1", self.split)));
        }
        let distinct: HashSet<&String> = self.entity_types.iter().collect();
        if distinct.len() < 2 {
            return Err(Error::Domain("synthetic spec needs at least two entity types".into()));
        }
        Ok(())
    }

    /// Pair counts `(positives, hard negatives, easy negatives)`.
    pub fn counts(&self) -> (usize, usize, usize) {
        let positives = (self.pairs as f64 * self.match_rate).round() as usize;
        let negatives = self.pairs - positives.min(self.pairs);
        let hard = (negatives as f64 * self.hard_negative_rate).round() as usize;
        (positives, hard, negatives - hard)
    }
}

struct Entity {
    surface: &'static str,
    qualifier: &'static str,
    year: String,
    price: String,
    kind: usize,
}

impl Entity {
    fn values(&self) -> [String; 3] {
        [
            format!("{} {}", self.surface, self.qualifier),
            self.year.clone(),
            self.price.clone(),
        ]
    }
}

/// Perturbs the tokens of one cell and returns the new position of token
/// `track`.
fn perturb(tokens: &mut [String], track: usize, spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> usize {
    let mut track = track;
    if rng.random_bool(spec.typo_rate) {
        let cands: Vec<usize> = (0..tokens.len())
            .filter(|&i| tokens[i].len() >= 4 && tokens[i].chars().all(|c| c.is_ascii_alphabetic()))
            .collect();
        if let Some(&i) = cands.choose(rng) {
            let mut chars: Vec<char> = tokens[i].chars().collect();
            let j = rng.random_range(1..chars.len() - 2);
            chars.swap(j, j + 1);
            tokens[i] = chars.into_iter().collect();
        }
    }
    if rng.random_bool(spec.abbreviation_rate) {
        let cands: Vec<usize> = (0..tokens.len())
            .filter(|&i| tokens[i].len() >= 5 && tokens[i].chars().all(|c| c.is_ascii_alphabetic()))
            .collect();
        if let Some(&i) = cands.choose(rng) {
            tokens[i].truncate(3);
        }
    }
    if tokens.len() >= 2 && rng.random_bool(spec.reorder_rate) {
        let i = rng.random_range(0..tokens.len() - 1);
        tokens.swap(i, i + 1);
        if track == i {
            track = i + 1;
        } else if track == i + 1 {
            track = i;
        }
    }
    track
}

/// Builds a row of table `table` and its gold mention.
fn make_row(
    table: &str,
    id: usize,
    entity: &Entity,
    kind: usize,
    spec: &SyntheticSpec,
    rng: Option<&mut ChaCha8Rng>,
) -> (Record, EntityMention) {
    let mut values = entity.values();
    let mut at = 0;
    if let Some(rng) = rng {
        for (c, v) in values.iter_mut().enumerate() {
            let mut tokens: Vec<String> = v.split(' ').map(str::to_string).collect();
            let moved = perturb(&mut tokens, 0, spec, rng);
            if c == 0 {
                at = moved;
            }
            *v = tokens.join(" ");
        }
    }
    let surface = values[0].split(' ').nth(at).expect("surface token").to_string();
    let columns = SCHEMA.iter().map(|c| c.to_string()).zip(values).collect();
    let mention = EntityMention {
        table: table.to_string(),
        row: EntryId::from(id),
        column: SCHEMA[0].to_string(),
        start: at,
        end: at + 1,
        surface,
        entity_type: spec.entity_types[kind].clone(),
    };
    (Record::new(id, columns), mention)
}

fn stratified(
    mut positives: Vec<LabeledPair>,
    mut negatives: Vec<LabeledPair>,
    shares: [f64; 3],
    rng: &mut ChaCha8Rng,
) -> Result<[LabeledPairSet; 3]> {
    positives.shuffle(rng);
    negatives.shuffle(rng);
    let mut parts: [Vec<LabeledPair>; 3] = Default::default();
    for class in [positives, negatives] {
        let n = class.len();
        let train = ((n as f64 * shares[0]).round() as usize).min(n);
        let valid = ((n as f64 * shares[1]).round() as usize).min(n - train);
        let mut it = class.into_iter();
        parts[0].extend(it.by_ref().take(train));
        parts[1].extend(it.by_ref().take(valid));
        parts[2].extend(it);
    }
    let [train, valid, test] = parts;
    let mut out = Vec::with_capacity(3);
    for (split, mut pairs) in Split::ALL.into_iter().zip([train, valid, test]) {
        pairs.shuffle(rng);
        out.push(LabeledPairSet::new(split, pairs)?);
    }
    Ok(out.try_into().expect("three splits"))
}

/// Generates tables, split pair sets and gold annotations for `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticDataset> {
    spec.validate()?;
    let n = spec.entities;
    let (n_pos, n_hard, n_easy) = spec.counts();
    if n_pos > n || n_hard > n {
        return Err(Error::Domain(format!(
            "{n} entities cannot supply {n_pos} positives and {n_hard} twin negatives"
        )));
    }
    if n_easy > n * (n - 1) {
        return Err(Error::Domain(format!("{n} entities cannot supply {n_easy} easy negatives")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kinds = spec.entity_types.len();

    let entities: Vec<Entity> = (0..n)
        .map(|_| Entity {
            surface: AMBIGUOUS_SURFACES.choose(&mut rng).expect("non-empty"),
            qualifier: QUALIFIERS.choose(&mut rng).expect("non-empty"),
            year: rng.random_range(1990..2024).to_string(),
            price: format!("${}.99", rng.random_range(5..100)),
            kind: rng.random_range(0..kinds),
        })
        .collect();

    let mut gold = AnnotationStore::new();
    for table in ["tableA", "tableB"] {
        for (column, ty) in SCHEMA.iter().zip(GOLD_COLUMN_TYPES) {
            gold.set_column_type(ColumnTypeAnnotation {
                table: table.to_string(),
                column: column.to_string(),
                predicted_type: ty.to_string(),
                confidence: 1.0,
            });
        }
    }

    let schema: Vec<String> = SCHEMA.iter().map(|c| c.to_string()).collect();
    let mut rows_a = Vec::with_capacity(n);
    let mut rows_b = Vec::with_capacity(2 * n);
    for (i, e) in entities.iter().enumerate() {
        let (row, m) = make_row("tableA", i, e, e.kind, spec, None);
        rows_a.push(row);
        gold.add_mention(m)?;
    }
    // copy of entity i has id 2i, its twin 2i + 1
    for (i, e) in entities.iter().enumerate() {
        let twin_kind = (e.kind + 1 + rng.random_range(0..kinds - 1)) % kinds;
        for (id, kind) in [(2 * i, e.kind), (2 * i + 1, twin_kind)] {
            let (row, m) = make_row("tableB", id, e, kind, spec, Some(&mut rng));
            rows_b.push(row);
            gold.add_mention(m)?;
        }
    }
    let table_a = Table::new("tableA", schema.clone(), rows_a)?;
    let table_b = Table::new("tableB", schema, rows_b)?;

    let pair = |l: usize, r: usize, label: u8| LabeledPair {
        left_id: EntryId::from(l),
        right_id: EntryId::from(r),
        label,
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let positives: Vec<LabeledPair> = order[..n_pos].iter().map(|&i| pair(i, 2 * i, 1)).collect();
    order.shuffle(&mut rng);
    let mut negatives: Vec<LabeledPair> = order[..n_hard].iter().map(|&i| pair(i, 2 * i + 1, 0)).collect();
    let mut seen = HashSet::new();
    while seen.len() < n_easy {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        if i != j && seen.insert((i, j)) {
            negatives.push(pair(i, 2 * j, 0));
        }
    }
    let [train, valid, test] = stratified(positives, negatives, spec.split, &mut rng)?;
    Ok(SyntheticDataset {
        table_a,
        table_b,
        train,
        valid,
        test,
        gold,
    })
}
