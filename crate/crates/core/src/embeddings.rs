//! Word-embedding tables and ensemble-averaged cosine similarity.
//!
//! Tables are read from the plain-text format shared by GloVe and word2vec
//! (`token v1 v2 ... vd`, optionally preceded by a `vocab_size dim` header).
//! Similarity between two phrases is the cosine of their token-mean vectors,
//! averaged over the tables in which both phrases have at least one known token.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::corpus::tokenize;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    name: String,
    dim: usize,
    entries: HashMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    /// Builds a table from in-memory vectors, rejecting wrong lengths and zero vectors.
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        entries: impl IntoIterator<Item = (String, Vec<f64>)>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidInput("embedding dimension must be positive".into()));
        }
        let mut map = HashMap::new();
        for (token, vector) in entries {
            if vector.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: vector.len(),
                });
            }
            if vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "non-finite component for token {token:?}"
                )));
            }
            if norm(&vector) == 0.0 {
                return Err(Error::InvalidInput(format!("zero vector for token {token:?}")));
            }
            map.entry(token).or_insert(vector);
        }
        Ok(Self {
            name: name.into(),
            dim,
            entries: map,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.entries.get(token).map(Vec::as_slice)
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.entries.contains_key(token)
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Serialises the table with a header line, tokens in lexicographic order.
    pub fn to_text(&self) -> String {
        let mut tokens: Vec<&String> = self.entries.keys().collect();
        tokens.sort();
        let mut out = format!("{} {}\n", self.entries.len(), self.dim);
        for token in tokens {
            out.push_str(token);
            for v in &self.entries[token] {
                write!(out, " {v}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Loads a plain-text embedding table.
///
/// Duplicate tokens keep their first vector.
pub fn load_table(path: impl AsRef<Path>, name: impl Into<String>) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_table(&text, path, name.into())
}

fn parse_table(text: &str, path: &Path, name: String) -> Result<EmbeddingTable> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut dim: Option<usize> = None;
    let mut expected_rows: Option<usize> = None;
    let mut entries: HashMap<String, Vec<f64>> = HashMap::new();
    let mut rows = 0usize;
    let mut first = true;

    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else {
            continue;
        };
        let rest: Vec<&str> = fields.collect();

        if first {
            first = false;
            if rest.len() == 1 {
                if let (Ok(count), Ok(d)) = (token.parse::<usize>(), rest[0].parse::<usize>()) {
                    if d == 0 {
                        return Err(parse_err(line_no, "header declares dimension 0".into()));
                    }
                    dim = Some(d);
                    expected_rows = Some(count);
                    continue;
                }
            }
        }

        let d = *dim.get_or_insert(rest.len());
        if d == 0 {
            return Err(parse_err(line_no, format!("token {token:?} has no vector")));
        }
        if rest.len() != d {
            return Err(parse_err(
                line_no,
                format!("expected {d} components, found {}", rest.len()),
            ));
        }
        let mut vector = Vec::with_capacity(d);
        for field in rest {
            match field.parse::<f64>() {
                Ok(v) if v.is_finite() => vector.push(v),
                _ => {
                    return Err(parse_err(
                        line_no,
                        format!("non-numeric component {field:?}"),
                    ))
                }
            }
        }
        if norm(&vector) == 0.0 {
            return Err(parse_err(line_no, format!("zero vector for token {token:?}")));
        }
        rows += 1;
        entries.entry(token.to_string()).or_insert(vector);
    }

    if let Some(count) = expected_rows {
        if count != rows {
            return Err(Error::format(
                path,
                format!("header declares {count} vectors, found {rows}"),
            ));
        }
    }
    let Some(dim) = dim else {
        return Err(Error::format(path, "no vectors"));
    };
    Ok(EmbeddingTable {
        name,
        dim,
        entries,
    })
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cosine_with_norms(a: &[f64], b: &[f64], norm_a: f64, norm_b: f64) -> f64 {
    (dot(a, b) / (norm_a * norm_b)).clamp(-1.0, 1.0)
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(Error::ZeroVector);
    }
    Ok(cosine_with_norms(a, b, na, nb))
}

/// Mean of the vectors of the phrase's in-vocabulary tokens.
///
/// Absent when no token is known, or when the known vectors cancel to zero.
pub fn phrase_vector(table: &EmbeddingTable, phrase: &str) -> Option<Vec<f64>> {
    let mut sum = vec![0.0; table.dim];
    let mut hits = 0usize;
    for token in tokenize(phrase) {
        if let Some(v) = table.get(&token) {
            for (s, x) in sum.iter_mut().zip(v) {
                *s += x;
            }
            hits += 1;
        }
    }
    if hits == 0 {
        return None;
    }
    if hits > 1 {
        let n = hits as f64;
        sum.iter_mut().for_each(|s| *s /= n);
    }
    (norm(&sum) > 0.0).then_some(sum)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingEnsemble {
    tables: Vec<EmbeddingTable>,
}

impl EmbeddingEnsemble {
    pub fn new(tables: Vec<EmbeddingTable>) -> Result<Self> {
        if tables.is_empty() {
            return Err(Error::InvalidInput("embedding ensemble needs at least one table".into()));
        }
        let mut names = HashSet::new();
        for t in &tables {
            if !names.insert(t.name()) {
                return Err(Error::InvalidInput(format!(
                    "duplicate embedding table name {:?}",
                    t.name()
                )));
            }
        }
        Ok(Self { tables })
    }

    pub fn tables(&self) -> &[EmbeddingTable] {
        &self.tables
    }

    /// Sub-ensemble holding only the named tables, in the given order.
    pub fn restrict(&self, names: &[&str]) -> Result<Self> {
        let tables = names
            .iter()
            .map(|n| {
                self.tables
                    .iter()
                    .find(|t| t.name() == *n)
                    .cloned()
                    .ok_or_else(|| Error::InvalidInput(format!("unknown embedding table {n:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(tables)
    }

    /// Embeds a phrase once in every table so it can be compared repeatedly.
    pub fn prepare(&self, phrase: &str) -> PreparedPhrase {
        PreparedPhrase {
            per_table: self
                .tables
                .iter()
                .map(|t| {
                    phrase_vector(t, phrase).map(|v| {
                        let n = norm(&v);
                        (v, n)
                    })
                })
                .collect(),
        }
    }

    /// Whether any table knows at least one token of the phrase.
    pub fn covers(&self, phrase: &str) -> bool {
        self.prepare(phrase).is_covered()
    }
}

/// A phrase's per-table mean vector and its norm.
#[derive(Debug, Clone)]
pub struct PreparedPhrase {
    per_table: Vec<Option<(Vec<f64>, f64)>>,
}

impl PreparedPhrase {
    pub fn is_covered(&self) -> bool {
        self.per_table.iter().any(Option::is_some)
    }

    /// Mean cosine over tables that cover both phrases. Both sides must come
    /// from the same ensemble.
    pub fn similarity(&self, other: &PreparedPhrase) -> Option<f64> {
        debug_assert_eq!(self.per_table.len(), other.per_table.len());
        let mut sum = 0.0;
        let mut n = 0usize;
        for (a, b) in self.per_table.iter().zip(&other.per_table) {
            if let (Some((va, na)), Some((vb, nb))) = (a, b) {
                sum += cosine_with_norms(va, vb, *na, *nb);
                n += 1;
            }
        }
        (n > 0).then(|| sum / n as f64)
    }
}

/// Semantic similarity `D(x, y)` averaged across the ensemble's covering tables.
pub fn averaged_similarity(ensemble: &EmbeddingEnsemble, x: &str, y: &str) -> Option<f64> {
    ensemble.prepare(x).similarity(&ensemble.prepare(y))
}
