//! Rule-based semantic column typing.

use std::sync::LazyLock;

use regex::Regex;

use super::ColumnTypeAnnotation;
use crate::tabular::Table;

pub const FALLBACK_TYPE: &str = "text";

/// Labels the shipped rule table can emit, fallback included.
pub const RULE_TYPES: [&str; 6] = ["year", "date", "price", "quantity", "name", FALLBACK_TYPE];

pub struct ColumnRule {
    pub label: &'static str,
    pattern: Regex,
}

impl ColumnRule {
    pub fn matches(&self, value: &str) -> bool {
        self.pattern.is_match(value.trim())
    }
}

fn rule(label: &'static str, pattern: &str) -> ColumnRule {
    ColumnRule {
        label,
        pattern: Regex::new(pattern).expect("rule pattern compiles"),
    }
}

/// Rules in priority order; a cell counts for the first rule it matches.
pub static RULES: LazyLock<Vec<ColumnRule>> = LazyLock::new(|| {
    vec![
        rule("year", r"^(18|19|20)\d{2}$"),
        rule(
            "date",
            r"^(\d{4}[-/.]\d{1,2}[-/.]\d{1,2}|\d{1,2}[-/.]\d{1,2}[-/.](\d{4}|\d{2})|\d{1,2} (?i:jan|feb|mar|apr|may|jun|jul|aug|sep|sept|oct|nov|dec)[a-z]* \d{4}|(?i:jan|feb|mar|apr|may|jun|jul|aug|sep|sept|oct|nov|dec)[a-z]* \d{1,2},? \d{4})$",
        ),
        rule(
            "price",
            r"^([$€£¥]\s?\d{1,3}(,\d{3})*(\.\d+)?|[$€£¥]\s?\d+(\.\d+)?|\d+(\.\d+)?\s?(?i:usd|eur|gbp|dollars?))$",
        ),
        rule(
            "quantity",
            r"^\d+(\.\d+)?\s?(?i:kg|g|mg|lb|lbs|oz|ml|l|gb|mb|tb|kb|mm|cm|m|km|in|inch|inches|ft|w|kw|v|mah|hz|khz|mhz|ghz|sec|secs|min|mins|hr|hrs|hours?|pack|pcs|pieces|units?)$",
        ),
        rule("name", r"^\p{Lu}[\p{L}'.&-]*(\s+\p{Lu}[\p{L}'.&-]*)+$"),
    ]
});

/// Predicts one semantic type per column by majority vote of the rule table
/// over non-empty cells.
///
/// The winning rule must cover more than half of the non-empty cells,
/// otherwise the column is typed `text`. Confidence is the winner's share of
/// non-empty cells (for `text`, one minus the best rule's share).
pub fn infer_column_types(table: &Table) -> Vec<ColumnTypeAnnotation> {
    table
        .schema()
        .iter()
        .enumerate()
        .map(|(ci, column)| {
            let mut counts = vec![0usize; RULES.len()];
            let mut non_empty = 0usize;
            for row in table.rows() {
                let v = row.columns[ci].1.trim();
                if v.is_empty() {
                    continue;
                }
                non_empty += 1;
                if let Some(r) = RULES.iter().position(|r| r.matches(v)) {
                    counts[r] += 1;
                }
            }
            let (best, best_count) = counts
                .iter()
                .enumerate()
                .fold((0, 0), |acc, (i, &c)| if c > acc.1 { (i, c) } else { acc });
            let (predicted_type, confidence) = if non_empty == 0 {
                (FALLBACK_TYPE, 0.0)
            } else if 2 * best_count > non_empty {
                (RULES[best].label, best_count as f64 / non_empty as f64)
            } else {
                (FALLBACK_TYPE, 1.0 - best_count as f64 / non_empty as f64)
            };
            ColumnTypeAnnotation {
                table: table.name().to_string(),
                column: column.clone(),
                predicted_type: predicted_type.to_string(),
                confidence,
            }
        })
        .collect()
}
