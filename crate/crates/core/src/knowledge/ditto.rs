use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::EntityMention;
use crate::error::Error;

/// Entity types kept by the general injection scheme.
pub const GENERAL_TYPES: [&str; 7] = ["PERSON", "ORG", "LOC", "PRODUCT", "DATE", "QUANTITY", "TIME"];

/// Entity types collapsed into `PRODUCT` by the product injection scheme.
pub const PRODUCT_SOURCE_TYPES: [&str; 5] = ["NORP", "GPE", "LOC", "PERSON", "PRODUCT"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DittoMode {
    General,
    Product,
}

impl FromStr for DittoMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.to_ascii_lowercase().as_str() {
            "general" => Ok(DittoMode::General),
            "product" => Ok(DittoMode::Product),
            other => Err(Error::Domain(format!("unknown ditto mode `{other}`"))),
        }
    }
}

impl fmt::Display for DittoMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DittoMode::General => "general",
            DittoMode::Product => "product",
        })
    }
}

/// Filters and relabels NER-style mentions the way the Ditto baseline does.
pub fn ditto_inject(mentions: impl IntoIterator<Item = EntityMention>, mode: DittoMode) -> Vec<EntityMention> {
    mentions
        .into_iter()
        .filter_map(|mut m| match mode {
            DittoMode::General => GENERAL_TYPES.contains(&m.entity_type.as_str()).then_some(m),
            DittoMode::Product => PRODUCT_SOURCE_TYPES.contains(&m.entity_type.as_str()).then(|| {
                m.entity_type = "PRODUCT".to_string();
                m
            }),
        })
        .collect()
}
