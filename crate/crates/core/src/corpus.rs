//! Tag corpus ingestion and token canonicalisation.
//!
//! A corpus file holds one JSON object per line:
//!
//! ```text
//! {"image_id": "img-001", "category": "wine cellar", "tags": ["Wine-Cellar!", "barrels"], "k_similar": 50}
//! ```
//!
//! `k_similar` is optional and defaults to 50. Blank lines are skipped.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use unicode_general_category::{get_general_category, GeneralCategory};

use crate::error::{Error, Result};

pub const DEFAULT_K_SIMILAR: u32 = 50;

fn default_k_similar() -> u32 {
    DEFAULT_K_SIMILAR
}

/// One image's tags as harvested, before any cleaning.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawTagRecord {
    pub image_id: String,
    pub category: String,
    pub tags: Vec<String>,
    /// Number of similar web images the tags were pooled from. Metadata only.
    #[serde(default = "default_k_similar")]
    pub k_similar: u32,
}

/// Canonical tag multiset of one image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagDocument {
    pub image_id: String,
    pub category: String,
    pub tags: BTreeMap<String, u32>,
}

impl TagDocument {
    pub fn new(
        image_id: impl Into<String>,
        category: impl Into<String>,
        tags: BTreeMap<String, u32>,
    ) -> Self {
        Self {
            image_id: image_id.into(),
            category: category.into(),
            tags,
        }
    }

    /// Total tag count `m`, with multiplicity.
    pub fn total(&self) -> u64 {
        self.tags.values().map(|&c| u64::from(c)).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }
}

fn is_separator(c: char) -> bool {
    c.is_whitespace() || get_general_category(c) == GeneralCategory::DashPunctuation
}

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            get_general_category(c),
            GeneralCategory::ConnectorPunctuation
                | GeneralCategory::DashPunctuation
                | GeneralCategory::OpenPunctuation
                | GeneralCategory::ClosePunctuation
                | GeneralCategory::InitialPunctuation
                | GeneralCategory::FinalPunctuation
                | GeneralCategory::OtherPunctuation
        )
}

fn is_decimal_digit(c: char) -> bool {
    get_general_category(c) == GeneralCategory::DecimalNumber
}

/// Splits one raw string into canonical tokens.
///
/// Whitespace and dashes separate tokens, other punctuation is removed in place,
/// letters are lowercased, and any token holding a decimal digit is discarded.
pub fn tokenize(raw: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    let flush = |current: &mut String, tokens: &mut Vec<String>| {
        if !current.is_empty() && !current.chars().any(is_decimal_digit) {
            tokens.push(std::mem::take(current));
        } else {
            current.clear();
        }
    };
    for c in raw.chars() {
        if is_separator(c) {
            flush(&mut current, &mut tokens);
        } else if !is_punctuation(c) {
            current.extend(c.to_lowercase());
        }
    }
    flush(&mut current, &mut tokens);
    tokens
}

pub fn preprocess(raw: &RawTagRecord) -> TagDocument {
    let mut tags = BTreeMap::new();
    for token in raw.tags.iter().flat_map(|t| tokenize(t)) {
        *tags.entry(token).or_insert(0u32) += 1;
    }
    TagDocument::new(raw.image_id.clone(), raw.category.clone(), tags)
}

pub fn preprocess_all(records: &[RawTagRecord]) -> Vec<TagDocument> {
    records.iter().map(preprocess).collect()
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<RawTagRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text, path)
}

fn parse_corpus(text: &str, path: &Path) -> Result<Vec<RawTagRecord>> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let record: RawTagRecord =
            serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        if record.image_id.is_empty() {
            return Err(parse_err("empty image_id".into()));
        }
        if record.category.trim().is_empty() {
            return Err(parse_err("empty category".into()));
        }
        if record.k_similar == 0 {
            return Err(parse_err("k_similar must be positive".into()));
        }
        if !seen.insert(record.image_id.clone()) {
            return Err(parse_err(format!(
                "duplicate image_id {:?}",
                record.image_id
            )));
        }
        records.push(record);
    }
    Ok(records)
}

/// Writes records in the line-delimited corpus format.
pub fn write_corpus(records: &[RawTagRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("corpus records serialize"));
        out.push('\n');
    }
    out
}
