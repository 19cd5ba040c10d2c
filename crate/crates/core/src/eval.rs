//! Split protocols, accuracy evaluation and the ablation harnesses.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::classifier::{self, SvmModel, TrainParams};
use crate::corpus::TagDocument;
use crate::embeddings::{EmbeddingEnsemble, EmbeddingTable};
use crate::error::{Error, Result};
use crate::features::{Extractor, FeatureVector};
use crate::filterbank::{build_codebook, build_filter_banks, categories_in_order, Codebook, PipelineConfig};
use crate::fsutil;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub set_index: usize,
    pub train_ids: BTreeSet<String>,
    pub test_ids: BTreeSet<String>,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train_ids.is_empty() || self.test_ids.is_empty() {
            return Err(Error::InvalidInput(format!(
                "split {} needs nonempty train and test sets",
                self.set_index
            )));
        }
        if let Some(id) = self.train_ids.intersection(&self.test_ids).next() {
            return Err(Error::InvalidInput(format!(
                "split {}: {id:?} is in both train and test",
                self.set_index
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestSize {
    Fixed(usize),
    Remaining,
}

/// Per-category random splits, sampled without replacement.
pub fn make_splits(
    docs: &[TagDocument],
    n_sets: usize,
    train_per_category: usize,
    test: TestSize,
    seed: u64,
) -> Result<Vec<SplitSpec>> {
    if n_sets == 0 || train_per_category == 0 || test == TestSize::Fixed(0) {
        return Err(Error::Config(
            "split counts and sizes must be positive".into(),
        ));
    }
    let categories = categories_in_order(docs);
    let mut by_cat: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for d in docs {
        by_cat.entry(&d.category).or_default().push(&d.image_id);
    }
    let required = train_per_category
        + match test {
            TestSize::Fixed(n) => n,
            TestSize::Remaining => 0,
        };
    for cat in &categories {
        let available = by_cat[cat.as_str()].len();
        if available < required {
            return Err(Error::InsufficientDocuments {
                category: cat.clone(),
                available,
                required,
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut splits = Vec::with_capacity(n_sets);
    for set_index in 0..n_sets {
        let mut split = SplitSpec {
            set_index,
            train_ids: BTreeSet::new(),
            test_ids: BTreeSet::new(),
        };
        for cat in &categories {
            let mut ids = by_cat[cat.as_str()].clone();
            ids.shuffle(&mut rng);
            let test_end = match test {
                TestSize::Fixed(n) => train_per_category + n,
                TestSize::Remaining => ids.len(),
            };
            split.train_ids.extend(ids[..train_per_category].iter().map(|s| s.to_string()));
            split.test_ids.extend(ids[train_per_category..test_end].iter().map(|s| s.to_string()));
        }
        split.validate()?;
        splits.push(split);
    }
    Ok(splits)
}

/// Split file: one `set_index,image_id,train|test` line per assignment.
pub fn splits_to_csv(splits: &[SplitSpec]) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for s in splits {
        for (ids, role) in [(&s.train_ids, "train"), (&s.test_ids, "test")] {
            for id in ids {
                w.write_record([s.set_index.to_string().as_str(), id, role])
                    .expect("in-memory csv write");
            }
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("utf-8")
}

pub fn parse_splits(text: &str, path: &Path) -> Result<Vec<SplitSpec>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(text.as_bytes());
    let mut sets: BTreeMap<usize, SplitSpec> = BTreeMap::new();
    for (idx, rec) in r.records().enumerate() {
        let line = idx + 1;
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let rec = rec.map_err(|e| err(e.to_string()))?;
        if rec.len() != 3 {
            return Err(err(format!("expected 3 fields, found {}", rec.len())));
        }
        let set_index: usize = rec[0]
            .trim()
            .parse()
            .map_err(|_| err(format!("bad set index {:?}", &rec[0])))?;
        let split = sets.entry(set_index).or_insert_with(|| SplitSpec {
            set_index,
            train_ids: BTreeSet::new(),
            test_ids: BTreeSet::new(),
        });
        let id = rec[1].to_string();
        match rec[2].trim() {
            "train" => split.train_ids.insert(id),
            "test" => split.test_ids.insert(id),
            other => return Err(err(format!("role must be train or test, got {other:?}"))),
        };
    }
    let splits: Vec<SplitSpec> = sets.into_values().collect();
    for s in &splits {
        s.validate()
            .map_err(|e| Error::format(path, e.to_string()))?;
    }
    Ok(splits)
}

pub fn load_splits(path: impl AsRef<Path>) -> Result<Vec<SplitSpec>> {
    let path = path.as_ref();
    parse_splits(&fsutil::read_to_string(path)?, path)
}

pub fn save_splits(path: impl AsRef<Path>, splits: &[SplitSpec]) -> Result<()> {
    fsutil::write_atomic(path, splits_to_csv(splits).as_bytes())
}

/// Something that can be fit on labelled feature vectors.
pub trait Learner: Sync {
    fn fit(&self, train: &[FeatureVector]) -> Result<Box<dyn Predictor>>;
}

pub trait Predictor: Send + Sync {
    fn predict(&self, x: &FeatureVector) -> Result<String>;
}

#[derive(Debug, Clone, Copy)]
pub struct SvmLearner {
    pub params: TrainParams,
    pub l2_normalize: bool,
}

impl SvmLearner {
    pub fn from_config(config: &PipelineConfig) -> Self {
        Self {
            params: TrainParams::new(config.c_penalty, config.gamma),
            l2_normalize: false,
        }
    }
}

struct SvmPredictor {
    model: SvmModel,
    l2_normalize: bool,
}

impl Learner for SvmLearner {
    fn fit(&self, train: &[FeatureVector]) -> Result<Box<dyn Predictor>> {
        let x: Vec<Vec<f64>> = train.iter().map(|f| f.to_dense(self.l2_normalize)).collect();
        let y: Vec<String> = train.iter().map(|f| f.category.clone()).collect();
        let model = classifier::train(&x, &y, &self.params)?;
        Ok(Box::new(SvmPredictor {
            model,
            l2_normalize: self.l2_normalize,
        }))
    }
}

impl Predictor for SvmPredictor {
    fn predict(&self, x: &FeatureVector) -> Result<String> {
        self.model
            .predict(&x.to_dense(self.l2_normalize))
            .map(str::to_string)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub mean_accuracy: f64,
    pub per_set: Vec<f64>,
}

impl EvalResult {
    fn from_sets(per_set: Vec<f64>) -> Self {
        let mean_accuracy = per_set.iter().sum::<f64>() / per_set.len() as f64;
        Self {
            mean_accuracy,
            per_set,
        }
    }
}

fn docs_by_id(docs: &[TagDocument]) -> HashMap<&str, &TagDocument> {
    docs.iter().map(|d| (d.image_id.as_str(), d)).collect()
}

fn select<'a>(
    index: &HashMap<&str, &'a TagDocument>,
    ids: &BTreeSet<String>,
    set_index: usize,
) -> Result<Vec<&'a TagDocument>> {
    ids.iter()
        .map(|id| {
            index.get(id.as_str()).copied().ok_or_else(|| {
                Error::InvalidInput(format!("split {set_index} names unknown image {id:?}"))
            })
        })
        .collect()
}

/// Builds the filter banks and codebook of one split from its training documents.
pub fn split_codebook(
    docs: &[TagDocument],
    split: &SplitSpec,
    ensemble: &EmbeddingEnsemble,
    config: &PipelineConfig,
) -> Result<Codebook> {
    let index = docs_by_id(docs);
    let train = select(&index, &split.train_ids, split.set_index)?;
    codebook_from(&train, ensemble, config)
}

fn codebook_from(
    train: &[&TagDocument],
    ensemble: &EmbeddingEnsemble,
    config: &PipelineConfig,
) -> Result<Codebook> {
    let categories = categories_in_order(train.iter().copied());
    let banks = build_filter_banks(&categories, train, ensemble, config)?;
    build_codebook(&banks)
}

fn accuracy(predictor: &dyn Predictor, test: &[FeatureVector]) -> Result<f64> {
    let correct = test
        .par_iter()
        .map(|f| predictor.predict(f).map(|p| usize::from(p == f.category)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f64 / test.len() as f64)
}

/// Accuracy of one split at every threshold, building its codebook once.
fn evaluate_split(
    docs: &[TagDocument],
    split: &SplitSpec,
    ensemble: &EmbeddingEnsemble,
    config: &PipelineConfig,
    thresholds: &[f64],
    learner: &dyn Learner,
) -> Result<Vec<f64>> {
    split.validate()?;
    let index = docs_by_id(docs);
    let train: Vec<TagDocument> = select(&index, &split.train_ids, split.set_index)?
        .into_iter()
        .cloned()
        .collect();
    let test: Vec<TagDocument> = select(&index, &split.test_ids, split.set_index)?
        .into_iter()
        .cloned()
        .collect();
    let train_refs: Vec<&TagDocument> = train.iter().collect();
    let codebook = codebook_from(&train_refs, ensemble, config)?;
    let extractor = Extractor::new(&codebook, ensemble);
    let train_feats = extractor.extract_sweep(&train, thresholds);
    let test_feats = extractor.extract_sweep(&test, thresholds);
    train_feats
        .iter()
        .zip(&test_feats)
        .map(|(tr, te)| {
            let predictor = learner.fit(tr)?;
            accuracy(predictor.as_ref(), te)
        })
        .collect()
}

fn check_thresholds(thresholds: &[f64]) -> Result<()> {
    if thresholds.is_empty() {
        return Err(Error::Config("at least one threshold is required".into()));
    }
    if let Some(t) = thresholds.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
        return Err(Error::Config(format!("threshold {t} is outside (0, 1]")));
    }
    Ok(())
}

/// Per-split accuracies, one row per threshold.
fn sweep(
    docs: &[TagDocument],
    ensemble: &EmbeddingEnsemble,
    config: &PipelineConfig,
    splits: &[SplitSpec],
    thresholds: &[f64],
    learner: &dyn Learner,
) -> Result<Vec<EvalResult>> {
    config.validate()?;
    check_thresholds(thresholds)?;
    if splits.is_empty() {
        return Err(Error::InvalidInput("no splits to evaluate".into()));
    }
    let per_split: Vec<Vec<f64>> = splits
        .par_iter()
        .map(|s| evaluate_split(docs, s, ensemble, config, thresholds, learner))
        .collect::<Result<_>>()?;
    Ok((0..thresholds.len())
        .map(|k| EvalResult::from_sets(per_split.iter().map(|accs| accs[k]).collect()))
        .collect())
}

pub fn evaluate(
    docs: &[TagDocument],
    ensemble: &EmbeddingEnsemble,
    config: &PipelineConfig,
    splits: &[SplitSpec],
) -> Result<EvalResult> {
    evaluate_with(docs, ensemble, config, splits, &SvmLearner::from_config(config))
}

pub fn evaluate_with(
    docs: &[TagDocument],
    ensemble: &EmbeddingEnsemble,
    config: &PipelineConfig,
    splits: &[SplitSpec],
    learner: &dyn Learner,
) -> Result<EvalResult> {
    let mut rows = sweep(docs, ensemble, config, splits, &[config.t_threshold], learner)?;
    Ok(rows.remove(0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    Threshold,
    EmbeddingMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub setting: String,
    pub result: EvalResult,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// `setting,mean_accuracy,acc_set_0,...`
    pub fn to_csv(&self) -> String {
        report_csv(self.rows.iter().map(|r| (r.setting.as_str(), &r.result)))
    }

    pub fn row(&self, setting: &str) -> Option<&EvalResult> {
        self.rows.iter().find(|r| r.setting == setting).map(|r| &r.result)
    }
}

pub fn report_csv<'a>(rows: impl IntoIterator<Item = (&'a str, &'a EvalResult)>) -> String {
    let rows: Vec<_> = rows.into_iter().collect();
    let sets = rows.iter().map(|(_, r)| r.per_set.len()).max().unwrap_or(0);
    let mut out = String::from("setting,mean_accuracy");
    for k in 0..sets {
        write!(out, ",acc_set_{k}").unwrap();
    }
    out.push('\n');
    for (setting, r) in rows {
        write!(out, "{setting},{}", r.mean_accuracy).unwrap();
        for a in &r.per_set {
            write!(out, ",{a}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// The threshold grid 0.3, 0.4, ..., 0.8.
pub const THRESHOLD_GRID: [f64; 6] = [0.3, 0.4, 0.5, 0.6, 0.7, 0.8];

pub fn ablate_threshold(
    docs: &[TagDocument],
    ensemble: &EmbeddingEnsemble,
    config: &PipelineConfig,
    splits: &[SplitSpec],
    thresholds: &[f64],
) -> Result<AblationReport> {
    ablate_threshold_with(
        docs,
        ensemble,
        config,
        splits,
        thresholds,
        &SvmLearner::from_config(config),
    )
}

pub fn ablate_threshold_with(
    docs: &[TagDocument],
    ensemble: &EmbeddingEnsemble,
    config: &PipelineConfig,
    splits: &[SplitSpec],
    thresholds: &[f64],
    learner: &dyn Learner,
) -> Result<AblationReport> {
    let results = sweep(docs, ensemble, config, splits, thresholds, learner)?;
    Ok(AblationReport {
        axis: AblationAxis::Threshold,
        rows: thresholds
            .iter()
            .zip(results)
            .map(|(t, result)| AblationRow {
                setting: t.to_string(),
                result,
            })
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EmbeddingMode {
    Single(String),
    Averaged,
}

impl EmbeddingMode {
    pub fn label(&self) -> &str {
        match self {
            EmbeddingMode::Single(name) => name,
            EmbeddingMode::Averaged => "averaged",
        }
    }

    /// Every table on its own, then all tables averaged.
    pub fn all(tables: &[EmbeddingTable]) -> Vec<Self> {
        tables
            .iter()
            .map(|t| EmbeddingMode::Single(t.name().to_string()))
            .chain(std::iter::once(EmbeddingMode::Averaged))
            .collect()
    }
}

pub fn ablate_embeddings(
    docs: &[TagDocument],
    tables: &[EmbeddingTable],
    config: &PipelineConfig,
    splits: &[SplitSpec],
    modes: &[EmbeddingMode],
) -> Result<AblationReport> {
    let full = EmbeddingEnsemble::new(tables.to_vec())?;
    let learner = SvmLearner::from_config(config);
    let mut rows = Vec::with_capacity(modes.len());
    for mode in modes {
        let ensemble = match mode {
            EmbeddingMode::Single(name) => full.restrict(&[name.as_str()])?,
            EmbeddingMode::Averaged => full.clone(),
        };
        let result = evaluate_with(docs, &ensemble, config, splits, &learner)?;
        rows.push(AblationRow {
            setting: mode.label().to_string(),
            result,
        });
    }
    Ok(AblationReport {
        axis: AblationAxis::EmbeddingMode,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn docs(per_cat: usize, cats: &[&str]) -> Vec<TagDocument> {
        cats.iter()
            .flat_map(|c| {
                (0..per_cat).map(move |i| TagDocument::new(format!("{c}-{i}"), *c, Default::default()))
            })
            .collect()
    }

    #[test]
    fn event8_style_uses_every_doc() {
        let d = docs(130, &["a", "b"]);
        let splits = make_splits(&d, 10, 70, TestSize::Fixed(60), 3).unwrap();
        assert_eq!(splits.len(), 10);
        for s in &splits {
            assert_eq!(s.train_ids.len(), 140);
            assert_eq!(s.test_ids.len(), 120);
            assert!(s.train_ids.is_disjoint(&s.test_ids));
            for c in ["a", "b"] {
                assert_eq!(s.train_ids.iter().filter(|i| i.starts_with(c)).count(), 70);
            }
        }
        assert_ne!(splits[0], splits[1]);
    }

    #[test]
    fn scene15_style_takes_remainder() {
        let mut d = docs(150, &["x"]);
        d.extend(docs(120, &["y"]));
        let s = &make_splits(&d, 1, 100, TestSize::Remaining, 0).unwrap()[0];
        assert_eq!(s.train_ids.len(), 200);
        assert_eq!(s.test_ids.len(), 70);
    }

    #[test]
    fn seeded_splits_repeat() {
        let d = docs(20, &["a", "b", "c"]);
        let a = make_splits(&d, 3, 5, TestSize::Fixed(5), 42).unwrap();
        assert_eq!(a, make_splits(&d, 3, 5, TestSize::Fixed(5), 42).unwrap());
        assert_ne!(a, make_splits(&d, 3, 5, TestSize::Fixed(5), 43).unwrap());
    }

    #[test]
    fn insufficient_docs_named() {
        let mut d = docs(10, &["a"]);
        d.extend(docs(3, &["short"]));
        match make_splits(&d, 1, 5, TestSize::Fixed(1), 0) {
            Err(Error::InsufficientDocuments { category, .. }) => assert_eq!(category, "short"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn split_file_round_trip() {
        let d = docs(6, &["a", "b"]);
        let splits = make_splits(&d, 2, 3, TestSize::Remaining, 1).unwrap();
        let text = splits_to_csv(&splits);
        assert!(text.lines().all(|l| l.split(',').count() == 3));
        assert_eq!(parse_splits(&text, Path::new("s")).unwrap(), splits);

        assert!(parse_splits("0,a,train\n0,a,test\n", Path::new("s")).is_err());
        assert!(parse_splits("0,a,train\n", Path::new("s")).is_err());
        assert!(parse_splits("0,a,validate\n", Path::new("s")).is_err());
        assert!(parse_splits("x,a,train\n", Path::new("s")).is_err());
    }

    #[test]
    fn report_layout() {
        let r = AblationReport {
            axis: AblationAxis::Threshold,
            rows: vec![AblationRow {
                setting: "0.3".into(),
                result: EvalResult::from_sets(vec![0.5, 1.0]),
            }],
        };
        assert_eq!(r.to_csv(), "setting,mean_accuracy,acc_set_0,acc_set_1\n0.3,0.75,0.5,1\n");
    }
}
