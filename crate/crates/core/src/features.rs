//! Histogram features over the codebook's filter words.
//!
//! Bin `j` of a document counts its tag occurrences whose averaged similarity
//! to filter word `j` is at least `T`. A tag may land in several bins.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rayon::prelude::*;

use crate::corpus::TagDocument;
use crate::embeddings::{EmbeddingEnsemble, PreparedPhrase};
use crate::error::{Error, Result};
use crate::filterbank::Codebook;
use crate::fsutil;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureVector {
    pub image_id: String,
    /// Empty at inference time when the label is unknown.
    pub category: String,
    pub counts: Vec<u32>,
}

impl FeatureVector {
    /// Dense real-valued copy, optionally scaled to unit L2 norm.
    /// The zero vector stays zero.
    pub fn to_dense(&self, l2_normalize: bool) -> Vec<f64> {
        let mut v: Vec<f64> = self.counts.iter().map(|&c| f64::from(c)).collect();
        if l2_normalize {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                v.iter_mut().for_each(|x| *x /= n);
            }
        }
        v
    }
}

/// Per-token similarity rows against a fixed codebook.
pub struct Extractor<'a> {
    ensemble: &'a EmbeddingEnsemble,
    words: Vec<PreparedPhrase>,
}

impl<'a> Extractor<'a> {
    pub fn new(codebook: &Codebook, ensemble: &'a EmbeddingEnsemble) -> Self {
        let words = codebook
            .filter_words()
            .par_iter()
            .map(|w| ensemble.prepare(w))
            .collect();
        Self { ensemble, words }
    }

    pub fn dim(&self) -> usize {
        self.words.len()
    }

    /// `D(token, F_j)` for every filter word; `None` where no table covers both.
    pub fn similarity_row(&self, token: &str) -> Vec<Option<f64>> {
        let tag = self.ensemble.prepare(token);
        self.words.iter().map(|w| tag.similarity(w)).collect()
    }

    /// Number of filter words no table of the ensemble covers.
    pub fn uncovered_words(&self) -> usize {
        self.words.iter().filter(|w| !w.is_covered()).count()
    }

    fn rows_for<'d>(&self, docs: &'d [TagDocument]) -> HashMap<&'d str, Vec<Option<f64>>> {
        let tokens: BTreeSet<&str> = docs
            .iter()
            .flat_map(|d| d.tags.keys().map(String::as_str))
            .collect();
        tokens
            .into_par_iter()
            .map(|t| (t, self.similarity_row(t)))
            .collect()
    }

    pub fn extract(&self, doc: &TagDocument, threshold: f64) -> FeatureVector {
        let mut counts = vec![0u32; self.dim()];
        for (token, &mult) in &doc.tags {
            accumulate(&mut counts, &self.similarity_row(token), mult, threshold);
        }
        feature(doc, counts)
    }

    pub fn extract_matrix(&self, docs: &[TagDocument], threshold: f64) -> Vec<FeatureVector> {
        self.extract_sweep(docs, &[threshold])
            .pop()
            .expect("one threshold in, one matrix out")
    }

    /// One feature matrix per threshold, sharing the similarity computation.
    pub fn extract_sweep(&self, docs: &[TagDocument], thresholds: &[f64]) -> Vec<Vec<FeatureVector>> {
        let rows = self.rows_for(docs);
        thresholds
            .iter()
            .map(|&t| {
                docs.par_iter()
                    .map(|doc| {
                        let mut counts = vec![0u32; self.dim()];
                        for (token, &mult) in &doc.tags {
                            accumulate(&mut counts, &rows[token.as_str()], mult, t);
                        }
                        feature(doc, counts)
                    })
                    .collect()
            })
            .collect()
    }
}

fn accumulate(counts: &mut [u32], row: &[Option<f64>], mult: u32, threshold: f64) {
    for (c, d) in counts.iter_mut().zip(row) {
        if matches!(d, Some(d) if *d >= threshold) {
            *c += mult;
        }
    }
}

fn feature(doc: &TagDocument, counts: Vec<u32>) -> FeatureVector {
    FeatureVector {
        image_id: doc.image_id.clone(),
        category: doc.category.clone(),
        counts,
    }
}

pub fn extract(
    doc: &TagDocument,
    codebook: &Codebook,
    ensemble: &EmbeddingEnsemble,
    threshold: f64,
) -> FeatureVector {
    Extractor::new(codebook, ensemble).extract(doc, threshold)
}

pub fn extract_matrix(
    docs: &[TagDocument],
    codebook: &Codebook,
    ensemble: &EmbeddingEnsemble,
    threshold: f64,
) -> Vec<FeatureVector> {
    Extractor::new(codebook, ensemble).extract_matrix(docs, threshold)
}

/// Feature matrix as CSV: `image_id,category,f_0,...,f_{n-1}`.
pub fn features_to_csv(features: &[FeatureVector], dim: usize) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["image_id".to_string(), "category".to_string()];
    header.extend((0..dim).map(|j| format!("f_{j}")));
    w.write_record(&header).map_err(csv_err)?;
    for f in features {
        if f.counts.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: f.counts.len(),
            });
        }
        let mut rec = vec![f.image_id.clone(), f.category.clone()];
        rec.extend(f.counts.iter().map(u32::to_string));
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidInput(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidInput(e.to_string())
}

pub fn save_features(path: impl AsRef<Path>, features: &[FeatureVector], dim: usize) -> Result<()> {
    fsutil::write_atomic(path, features_to_csv(features, dim)?.as_bytes())
}

/// Reads a feature CSV back; returns the rows and the feature dimension.
pub fn load_features(path: impl AsRef<Path>) -> Result<(Vec<FeatureVector>, usize)> {
    let path = path.as_ref();
    let text = fsutil::read_to_string(path)?;
    parse_features(&text, path)
}

fn parse_features(text: &str, path: &Path) -> Result<(Vec<FeatureVector>, usize)> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let header = r
        .headers()
        .map_err(|e| Error::format(path, e.to_string()))?
        .clone();
    let ok_header = header.len() >= 2
        && &header[0] == "image_id"
        && &header[1] == "category"
        && header
            .iter()
            .skip(2)
            .enumerate()
            .all(|(j, h)| h == format!("f_{j}"));
    if !ok_header {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "expected header image_id,category,f_0,...".into(),
        });
    }
    let dim = header.len() - 2;
    let mut out = Vec::new();
    for (idx, rec) in r.records().enumerate() {
        let line = idx + 2;
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let rec = rec.map_err(|e| parse_err(e.to_string()))?;
        let counts = rec
            .iter()
            .skip(2)
            .map(|c| c.parse::<u32>().map_err(|_| parse_err(format!("non-integer count {c:?}"))))
            .collect::<Result<Vec<_>>>()?;
        out.push(FeatureVector {
            image_id: rec[0].to_string(),
            category: rec[1].to_string(),
            counts,
        });
    }
    Ok((out, dim))
}
