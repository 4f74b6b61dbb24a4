use std::collections::HashMap;
use std::path::Path;

use super::EntityMention;
use crate::error::{Error, Result};
use crate::tabular::Table;
use crate::tokenizer::{detokenize, tokenize};

/// Dictionary of surface forms to entity types, matched case-insensitively
/// over token sequences.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Gazetteer {
    entries: HashMap<Vec<String>, String>,
    longest: usize,
}

impl Gazetteer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a surface form; a repeated surface form takes the newest type.
    pub fn insert(&mut self, surface: &str, entity_type: &str) -> Result<()> {
        let key = tokenize(surface);
        if key.is_empty() {
            return Err(Error::Domain("gazetteer surface form is empty".into()));
        }
        self.longest = self.longest.max(key.len());
        self.entries.insert(key, entity_type.to_string());
        Ok(())
    }

    pub fn from_entries<'a>(entries: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut g = Self::new();
        for (s, t) in entries {
            g.insert(s, t)?;
        }
        Ok(g)
    }

    /// Parses `surface<TAB>type` lines. Blank lines are skipped.
    pub fn from_tsv(context: &str, text: &str) -> Result<Self> {
        let mut g = Self::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (surface, ty) = line
                .split_once('\t')
                .ok_or_else(|| Error::format(context, i + 1, "expected `surface<TAB>type`"))?;
            let ty = ty.trim();
            if ty.is_empty() {
                return Err(Error::format(context, i + 1, "empty entity type"));
            }
            g.insert(surface, ty)
                .map_err(|_| Error::format(context, i + 1, "empty surface form"))?;
        }
        Ok(g)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&path.display().to_string(), &text)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn types(&self) -> impl Iterator<Item = &str> {
        self.entries.values().map(String::as_str)
    }

    /// Greedy left-to-right longest match. Returns `(start, end, type)` spans,
    /// non-overlapping by construction.
    pub fn scan<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<(usize, usize, &str)> {
        let tokens: Vec<String> = tokens.iter().map(|t| t.as_ref().to_lowercase()).collect();
        let mut found = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            let max = self.longest.min(tokens.len() - i);
            let hit = (1..=max)
                .rev()
                .find_map(|n| self.entries.get(&tokens[i..i + n]).map(|t| (n, t)));
            match hit {
                Some((n, ty)) => {
                    found.push((i, i + n, ty.as_str()));
                    i += n;
                }
                None => i += 1,
            }
        }
        found
    }
}

/// Links every cell of `table` against the gazetteer.
pub fn link_entities(table: &Table, gazetteer: &Gazetteer) -> Vec<EntityMention> {
    let mut out = Vec::new();
    if gazetteer.is_empty() {
        return out;
    }
    for row in table.rows() {
        for (col, val) in &row.columns {
            let tokens = tokenize(val);
            for (start, end, ty) in gazetteer.scan(&tokens) {
                out.push(EntityMention {
                    table: table.name().to_string(),
                    row: row.entry_id.clone(),
                    column: col.clone(),
                    start,
                    end,
                    surface: detokenize(&tokens[start..end]),
                    entity_type: ty.to_string(),
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tabular::Record;
    use proptest::prelude::*;

    fn single(value: &str) -> Table {
        Table::new("A", vec!["title".into()], vec![Record::new("0", vec![("title".into(), value.into())])])
            .unwrap()
    }

    #[test]
    fn longest_match_wins() {
        let g = Gazetteer::from_entries([("apple iphone", "PRODUCT"), ("apple", "ORG")]).unwrap();
        let m = link_entities(&single("apple iphone 6s"), &g);
        assert_eq!(m.len(), 1);
        assert_eq!((m[0].start, m[0].end), (0, 2));
        assert_eq!(m[0].entity_type, "PRODUCT");
        assert_eq!(m[0].surface, "apple iphone");
    }

    #[test]
    fn empty_gazetteer_links_nothing() {
        assert!(link_entities(&single("apple iphone"), &Gazetteer::new()).is_empty());
    }

    #[test]
    fn disjoint_matches() {
        let g = Gazetteer::from_entries([("apple", "ORG"), ("new york", "LOC")]).unwrap();
        let m = link_entities(&single("Apple store, New York"), &g);
        let spans: Vec<_> = m.iter().map(|m| (m.start, m.end, m.entity_type.as_str())).collect();
        // tokens: apple store , new york
        assert_eq!(spans, [(0, 1, "ORG"), (3, 5, "LOC")]);
    }

    #[test]
    fn tsv_loading() {
        let g = Gazetteer::from_tsv("g", "Apple Inc\tORG\n\nnew york\tLOC\n").unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g.scan(&["apple", "inc"]), [(0, 2, "ORG")]);
        assert!(matches!(Gazetteer::from_tsv("g", "apple ORG\n"), Err(Error::Format { line: 1, .. })));
        assert!(matches!(Gazetteer::from_tsv("g", "x\tA\n \tORG\n"), Err(Error::Format { line: 2, .. })));
    }

    proptest! {
        #[test]
        fn spans_disjoint_and_surfaces_exact(
            entries in proptest::collection::vec(("[a-c]{1,2}( [a-c]{1,2}){0,2}", "[A-Z]{3}"), 0..6),
            text in "[a-c]{1,2}( [a-c]{1,2}){0,10}",
        ) {
            let g = Gazetteer::from_entries(entries.iter().map(|(s, t)| (s.as_str(), t.as_str()))).unwrap();
            let tokens = tokenize(&text);
            let m = link_entities(&single(&text), &g);
            let mut last_end = 0;
            for x in &m {
                prop_assert!(x.start >= last_end && x.start < x.end && x.end <= tokens.len());
                prop_assert_eq!(&x.surface, &detokenize(&tokens[x.start..x.end]));
                last_end = x.end;
            }
        }
    }
}
