//! Seeded synthetic tag corpora with matching embedding tables.
//!
//! Every category gets a random unit centroid per table; the category label sits
//! exactly on it and each category word sits at a fixed cosine `t >= tightness`
//! from it, with a fresh orthogonal component per table. Noise words are random
//! directions kept away from every centroid.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::corpus::{write_corpus, RawTagRecord, DEFAULT_K_SIMILAR};
use crate::embeddings::{norm, EmbeddingTable};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

/// Noise words are resampled until their cosine to every centroid is below this.
const NOISE_MAX_COS: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub categories: usize,
    pub docs_per_category: usize,
    pub vocab_per_category: usize,
    pub dim: usize,
    pub tightness: f64,
    pub noise_rate: f64,
    pub seed: u64,
    pub tags_per_doc: usize,
    pub noise_vocab: usize,
    pub tables: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            categories: 8,
            docs_per_category: 130,
            vocab_per_category: 40,
            dim: 50,
            tightness: 0.9,
            noise_rate: 0.1,
            seed: 0,
            tags_per_doc: 30,
            noise_vocab: 200,
            tables: 3,
        }
    }
}

impl SynthParams {
    fn validate(&self) -> Result<()> {
        let positive = [
            ("categories", self.categories),
            ("docs-per-category", self.docs_per_category),
            ("vocab-per-category", self.vocab_per_category),
            ("dim", self.dim),
            ("tags-per-doc", self.tags_per_doc),
            ("noise-vocab", self.noise_vocab),
            ("tables", self.tables),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.tightness > 0.0 && self.tightness < 1.0) {
            return Err(Error::Config(format!(
                "tightness must lie in (0, 1), got {}",
                self.tightness
            )));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(Error::Config(format!(
                "noise rate must lie in [0, 1), got {}",
                self.noise_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub records: Vec<RawTagRecord>,
    pub tables: Vec<EmbeddingTable>,
    pub category_labels: Vec<String>,
    /// Vocabulary of each category, aligned with `category_labels`.
    pub category_vocab: Vec<Vec<String>>,
    pub noise_words: Vec<String>,
}

/// Letters `a`..`y` in little-endian base 25, at least two characters long.
fn letters(mut i: usize) -> String {
    let mut s = String::new();
    loop {
        s.push((b'a' + (i % 25) as u8) as char);
        i /= 25;
        if i == 0 && s.len() >= 2 {
            return s;
        }
    }
}

pub fn category_label(c: usize) -> String {
    format!("k{}", letters(c))
}

fn category_word(c: usize, j: usize) -> String {
    format!("w{}z{}", letters(c), letters(j))
}

fn noise_word(j: usize) -> String {
    format!("n{}", letters(j))
}

fn random_unit(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Unit vector orthogonal to the unit vector `u`. Falls back to `u` itself only
/// in one dimension, where no orthogonal direction exists.
fn random_orthogonal(rng: &mut impl Rng, u: &[f64]) -> Option<Vec<f64>> {
    if u.len() < 2 {
        return None;
    }
    loop {
        let mut g: Vec<f64> = (0..u.len()).map(|_| rng.sample(StandardNormal)).collect();
        let p = dot(&g, u);
        g.iter_mut().zip(u).for_each(|(x, ui)| *x -= p * ui);
        let n = norm(&g);
        if n > 1e-9 {
            return Some(g.into_iter().map(|x| x / n).collect());
        }
    }
}

pub fn generate_synthetic(params: &SynthParams) -> Result<SynthCorpus> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

    let category_labels: Vec<String> = (0..params.categories).map(category_label).collect();
    let category_vocab: Vec<Vec<String>> = (0..params.categories)
        .map(|c| (0..params.vocab_per_category).map(|j| category_word(c, j)).collect())
        .collect();
    let noise_words: Vec<String> = (0..params.noise_vocab).map(noise_word).collect();

    // Cosine to the centroid, fixed per word across tables.
    let word_cos: Vec<Vec<f64>> = (0..params.categories)
        .map(|_| {
            (0..params.vocab_per_category)
                .map(|_| params.tightness + (1.0 - params.tightness) * rng.gen::<f64>())
                .collect()
        })
        .collect();

    let mut tables = Vec::with_capacity(params.tables);
    for k in 0..params.tables {
        let centroids: Vec<Vec<f64>> = (0..params.categories)
            .map(|_| random_unit(&mut rng, params.dim))
            .collect();
        let mut entries = Vec::new();
        for (c, u) in centroids.iter().enumerate() {
            entries.push((category_labels[c].clone(), u.clone()));
            for (j, word) in category_vocab[c].iter().enumerate() {
                let t = word_cos[c][j];
                let v = match random_orthogonal(&mut rng, u) {
                    Some(r) => {
                        let s = (1.0 - t * t).sqrt();
                        u.iter().zip(&r).map(|(a, b)| t * a + s * b).collect()
                    }
                    None => u.clone(),
                };
                entries.push((word.clone(), v));
            }
        }
        for word in &noise_words {
            let mut best: Option<(f64, Vec<f64>)> = None;
            for _ in 0..1000 {
                let v = random_unit(&mut rng, params.dim);
                let worst = centroids
                    .iter()
                    .map(|u| dot(u, &v).abs())
                    .fold(0.0, f64::max);
                if best.as_ref().map_or(true, |(b, _)| worst < *b) {
                    best = Some((worst, v));
                }
                if worst < NOISE_MAX_COS {
                    break;
                }
            }
            entries.push((word.clone(), best.expect("at least one draw").1));
        }
        tables.push(EmbeddingTable::new(format!("table{}", k + 1), params.dim, entries)?);
    }

    let mut records = Vec::with_capacity(params.categories * params.docs_per_category);
    for (c, label) in category_labels.iter().enumerate() {
        for d in 0..params.docs_per_category {
            let tags = (0..params.tags_per_doc)
                .map(|_| {
                    if rng.gen::<f64>() < params.noise_rate {
                        noise_words.choose(&mut rng).expect("noise vocabulary").clone()
                    } else {
                        category_vocab[c].choose(&mut rng).expect("category vocabulary").clone()
                    }
                })
                .collect();
            records.push(RawTagRecord {
                image_id: format!("{label}-{d:04}"),
                category: label.clone(),
                tags,
                k_similar: DEFAULT_K_SIMILAR,
            });
        }
    }

    Ok(SynthCorpus {
        records,
        tables,
        category_labels,
        category_vocab,
        noise_words,
    })
}

/// A table over the same vocabulary as `like`, with independent random
/// directions, so it carries no category signal.
pub fn random_table(like: &EmbeddingTable, name: &str, seed: u64) -> Result<EmbeddingTable> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tokens: Vec<String> = like.tokens().map(String::from).collect();
    tokens.sort();
    let entries: Vec<(String, Vec<f64>)> = tokens
        .into_iter()
        .map(|t| {
            let v = random_unit(&mut rng, like.dim());
            (t, v)
        })
        .collect();
    EmbeddingTable::new(name, like.dim(), entries)
}

/// Writes `corpus.jsonl` and one `<table name>.txt` per table into `dir`.
/// Returns the written table paths in table order.
pub fn write_synthetic(corpus: &SynthCorpus, dir: &Path) -> Result<(PathBuf, Vec<PathBuf>)> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let corpus_path = dir.join("corpus.jsonl");
    write_atomic(&corpus_path, write_corpus(&corpus.records).as_bytes())?;
    let mut table_paths = Vec::new();
    for t in &corpus.tables {
        let p = dir.join(format!("{}.txt", t.name()));
        write_atomic(&p, t.to_text().as_bytes())?;
        table_paths.push(p);
    }
    Ok((corpus_path, table_paths))
}

/// Shuffled copy of the records, for order-independence checks.
pub fn shuffled(records: &[RawTagRecord], seed: u64) -> Vec<RawTagRecord> {
    let mut out = records.to_vec();
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;
    use crate::embeddings::cosine;

    fn small() -> SynthParams {
        SynthParams {
            categories: 3,
            docs_per_category: 5,
            vocab_per_category: 12,
            dim: 16,
            tightness: 0.9,
            noise_rate: 0.0,
            seed: 7,
            tags_per_doc: 6,
            noise_vocab: 10,
            tables: 2,
        }
    }

    #[test]
    fn names_survive_tokenization() {
        for i in [0, 1, 24, 25, 626, 10_000] {
            let w = category_word(i % 7, i);
            assert_eq!(tokenize(&w), vec![w.clone()]);
        }
        let labels: std::collections::HashSet<_> = (0..1000).map(letters).collect();
        assert_eq!(labels.len(), 1000);
    }

    #[test]
    fn words_sit_near_their_centroid() {
        let s = generate_synthetic(&small()).unwrap();
        for t in &s.tables {
            for (c, label) in s.category_labels.iter().enumerate() {
                let u = t.get(label).unwrap();
                for w in &s.category_vocab[c] {
                    assert!(cosine(u, t.get(w).unwrap()).unwrap() >= 0.9 - 1e-12);
                }
            }
        }
        assert_eq!(s.records.len(), 15);
        assert!(s.records.iter().all(|r| r.tags.len() == 6));
    }

    #[test]
    fn deterministic_given_seed() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        assert_eq!(write_corpus(&a.records), write_corpus(&b.records));
        for (x, y) in a.tables.iter().zip(&b.tables) {
            assert_eq!(x.to_text(), y.to_text());
        }
        let c = generate_synthetic(&SynthParams { seed: 8, ..small() }).unwrap();
        assert_ne!(write_corpus(&a.records), write_corpus(&c.records));
    }

    #[test]
    fn rejects_infeasible_params() {
        assert!(generate_synthetic(&SynthParams { tightness: 1.0, ..small() }).is_err());
        assert!(generate_synthetic(&SynthParams { noise_rate: 1.0, ..small() }).is_err());
        assert!(generate_synthetic(&SynthParams { categories: 0, ..small() }).is_err());
    }
}
