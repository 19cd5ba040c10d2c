//! Per-category filter banks and the codebook of filter words built from them.
//!
//! A bank keeps the candidate tags of a category's training documents whose
//! averaged similarity to the category label reaches `delta`. The codebook is the
//! ordered, deduplicated concatenation of all banks; its order fixes the feature axes.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::TagDocument;
use crate::embeddings::EmbeddingEnsemble;
use crate::error::{Error, Result};
use crate::fsutil;

pub const CODEBOOK_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Bank eligibility threshold on `D(tag, category)`.
    pub delta: f64,
    /// Histogram threshold on `D(tag, filter word)`.
    pub t_threshold: f64,
    /// Candidate tags kept per training document.
    pub top_n: usize,
    /// RBF kernel width.
    pub gamma: f64,
    /// SVM cost.
    pub c_penalty: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            delta: 0.50,
            t_threshold: 0.40,
            top_n: 500,
            gamma: 1e-5,
            c_penalty: 50.0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if v > 0.0 && v <= 1.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in (0, 1], got {v}")))
            }
        };
        unit("delta", self.delta)?;
        unit("threshold-t", self.t_threshold)?;
        if self.top_n == 0 {
            return Err(Error::Config("top-n must be at least 1".into()));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        if !(self.c_penalty > 0.0 && self.c_penalty.is_finite()) {
            return Err(Error::Config(format!(
                "c-penalty must be positive, got {}",
                self.c_penalty
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    pub category: String,
    pub delta: f64,
    /// `(tag, D)` sorted by descending score, then ascending tag.
    pub entries: Vec<(String, f64)>,
}

impl FilterBank {
    pub fn tags(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(t, _)| t.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// The document's most frequent tags, ties broken lexicographically.
pub fn candidate_tags(doc: &TagDocument, top_n: usize) -> Vec<&str> {
    let mut tags: Vec<(&str, u32)> = doc.tags.iter().map(|(t, &c)| (t.as_str(), c)).collect();
    tags.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    tags.truncate(top_n);
    tags.into_iter().map(|(t, _)| t).collect()
}

pub fn build_filter_bank(
    category: &str,
    training_docs: &[&TagDocument],
    ensemble: &EmbeddingEnsemble,
    config: &PipelineConfig,
) -> Result<FilterBank> {
    if let Some(doc) = training_docs.iter().find(|d| d.category != category) {
        return Err(Error::InvalidInput(format!(
            "document {:?} has category {:?}, expected {category:?}",
            doc.image_id, doc.category
        )));
    }
    let label = ensemble.prepare(category);
    if !label.is_covered() {
        return Err(Error::OovCategory(category.to_string()));
    }

    let candidates: BTreeSet<&str> = training_docs
        .iter()
        .flat_map(|d| candidate_tags(d, config.top_n))
        .collect();

    let mut entries: Vec<(String, f64)> = candidates
        .into_iter()
        .filter_map(|tag| {
            let d = ensemble.prepare(tag).similarity(&label)?;
            (d >= config.delta).then(|| (tag.to_string(), d))
        })
        .collect();
    sort_entries(&mut entries);

    Ok(FilterBank {
        category: category.to_string(),
        delta: config.delta,
        entries,
    })
}

fn sort_entries(entries: &mut [(String, f64)]) {
    entries.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
}

/// Builds one bank per category, in the given category order.
pub fn build_filter_banks(
    categories: &[String],
    training_docs: &[&TagDocument],
    ensemble: &EmbeddingEnsemble,
    config: &PipelineConfig,
) -> Result<Vec<FilterBank>> {
    categories
        .par_iter()
        .map(|cat| {
            let docs: Vec<&TagDocument> = training_docs
                .iter()
                .copied()
                .filter(|d| &d.category == cat)
                .collect();
            build_filter_bank(cat, &docs, ensemble, config)
        })
        .collect()
}

/// Distinct categories in order of first appearance.
pub fn categories_in_order<'a>(docs: impl IntoIterator<Item = &'a TagDocument>) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for d in docs {
        if seen.insert(d.category.as_str()) {
            out.push(d.category.clone());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    delta: f64,
    banks: Vec<FilterBank>,
    filter_words: Vec<String>,
    provenance: BTreeMap<String, BTreeSet<String>>,
}

impl Codebook {
    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn banks(&self) -> &[FilterBank] {
        &self.banks
    }

    pub fn categories(&self) -> impl Iterator<Item = &str> {
        self.banks.iter().map(|b| b.category.as_str())
    }

    pub fn filter_words(&self) -> &[String] {
        &self.filter_words
    }

    pub fn provenance(&self, word: &str) -> Option<&BTreeSet<String>> {
        self.provenance.get(word)
    }

    pub fn len(&self) -> usize {
        self.filter_words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filter_words.is_empty()
    }

    pub fn to_json(&self) -> String {
        let file = CodebookFile {
            version: CODEBOOK_VERSION,
            delta: self.delta,
            categories: self.banks.iter().map(|b| b.category.clone()).collect(),
            banks: self
                .banks
                .iter()
                .map(|b| (b.category.clone(), b.entries.clone()))
                .collect(),
            filter_words: self.filter_words.clone(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("codebook serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let file: CodebookFile =
            serde_json::from_str(text).map_err(|e| Error::format(path, e.to_string()))?;
        if file.version != CODEBOOK_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported codebook version {}", file.version),
            ));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = file.filter_words.iter().find(|w| !seen.insert(w.as_str())) {
            return Err(Error::Invariant(format!(
                "{}: duplicate filter word {dup:?}",
                path.display()
            )));
        }
        let mut banks_by_cat = file.banks;
        let mut banks = Vec::with_capacity(file.categories.len());
        for cat in &file.categories {
            let entries = banks_by_cat.remove(cat).ok_or_else(|| {
                Error::format(path, format!("no bank for category {cat:?}"))
            })?;
            if let Some((tag, d)) = entries.iter().find(|(_, d)| !(*d >= file.delta)) {
                return Err(Error::Invariant(format!(
                    "{}: bank {cat:?} entry {tag:?} has score {d} below delta {}",
                    path.display(),
                    file.delta
                )));
            }
            banks.push(FilterBank {
                category: cat.clone(),
                delta: file.delta,
                entries,
            });
        }
        if let Some(extra) = banks_by_cat.keys().next() {
            return Err(Error::format(
                path,
                format!("bank {extra:?} is not listed in categories"),
            ));
        }
        let cb = build_codebook(&banks).map_err(|e| Error::format(path, e.to_string()))?;
        if cb.filter_words != file.filter_words {
            return Err(Error::Invariant(format!(
                "{}: filter_words disagree with the banks",
                path.display()
            )));
        }
        Ok(cb)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CodebookFile {
    version: u32,
    delta: f64,
    categories: Vec<String>,
    banks: BTreeMap<String, Vec<(String, f64)>>,
    filter_words: Vec<String>,
}

pub fn build_codebook(banks: &[FilterBank]) -> Result<Codebook> {
    let Some(first) = banks.first() else {
        return Err(Error::InvalidInput("codebook needs at least one filter bank".into()));
    };
    let delta = first.delta;
    let mut categories = HashSet::new();
    let mut filter_words = Vec::new();
    let mut provenance: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for bank in banks {
        if bank.delta != delta {
            return Err(Error::InvalidInput(format!(
                "filter banks built with different delta ({delta} and {})",
                bank.delta
            )));
        }
        if !categories.insert(bank.category.as_str()) {
            return Err(Error::InvalidInput(format!(
                "category {:?} has more than one bank",
                bank.category
            )));
        }
        for tag in bank.tags() {
            let sources = provenance.entry(tag.to_string()).or_insert_with(|| {
                filter_words.push(tag.to_string());
                BTreeSet::new()
            });
            sources.insert(bank.category.clone());
        }
    }
    Ok(Codebook {
        delta,
        banks: banks.to_vec(),
        filter_words,
        provenance,
    })
}

pub fn save_codebook(cb: &Codebook, path: impl AsRef<Path>) -> Result<()> {
    fsutil::write_atomic(path, cb.to_json().as_bytes())
}

pub fn load_codebook(path: impl AsRef<Path>) -> Result<Codebook> {
    let path = path.as_ref();
    Codebook::from_json(&fsutil::read_to_string(path)?, path)
}
