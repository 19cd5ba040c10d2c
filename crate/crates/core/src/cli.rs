//! Command-line front end. Each subcommand parses its inputs, calls the
//! matching library routine and writes its outputs atomically.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::classifier::{self, TrainParams};
use crate::corpus::{load_corpus, preprocess_all, TagDocument};
use crate::embeddings::{load_table, EmbeddingEnsemble, EmbeddingTable};
use crate::error::{Error, ErrorKind, Result};
use crate::eval::{
    self, ablate_embeddings, ablate_threshold, evaluate, load_splits, make_splits, report_csv,
    save_splits, EmbeddingMode, SplitSpec, TestSize, THRESHOLD_GRID,
};
use crate::features::{load_features, save_features, Extractor};
use crate::filterbank::{
    build_codebook, build_filter_banks, categories_in_order, load_codebook, save_codebook,
    PipelineConfig,
};
use crate::fsutil::write_atomic;
use crate::synth::{generate_synthetic, write_synthetic, SynthParams};

#[derive(Debug, Parser)]
#[command(name = "tagfeat", version, about = "Tag-based semantic features for scene classification")]
pub struct Cli {
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build filter banks and the codebook from training documents.
    BuildBank(BuildBankArgs),
    /// Extract histogram features for a corpus against a codebook.
    Extract(ExtractArgs),
    /// Train a one-vs-rest RBF SVM on a feature file.
    Train(TrainArgs),
    /// Predict labels for a feature file.
    Predict(PredictArgs),
    /// Mean accuracy over train/test splits.
    Eval(EvalArgs),
    /// Accuracy for each histogram threshold T.
    AblateThreshold(AblateThresholdArgs),
    /// Accuracy for each single embedding table and for their average.
    AblateEmbeddings(AblateEmbeddingsArgs),
    /// Generate a synthetic corpus and embedding tables.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct EmbeddingArgs {
    /// Embedding table as NAME=PATH or PATH (name taken from the file stem). Repeatable.
    #[arg(long = "embedding", required = true, value_name = "NAME=PATH")]
    pub embeddings: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Filter-bank threshold on D(tag, category).
    #[arg(long, default_value_t = 0.50)]
    pub delta: f64,
    /// Histogram threshold on D(tag, filter word).
    #[arg(long = "threshold-t", default_value_t = 0.40)]
    pub threshold_t: f64,
    /// Candidate tags kept per training document.
    #[arg(long = "top-n", default_value_t = 500)]
    pub top_n: usize,
    /// RBF kernel width.
    #[arg(long, default_value_t = 1e-5)]
    pub gamma: f64,
    /// SVM cost C.
    #[arg(long = "c-penalty", default_value_t = 50.0)]
    pub c_penalty: f64,
}

impl ConfigArgs {
    pub fn config(&self) -> Result<PipelineConfig> {
        let cfg = PipelineConfig {
            delta: self.delta,
            t_threshold: self.threshold_t,
            top_n: self.top_n,
            gamma: self.gamma,
            c_penalty: self.c_penalty,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Split file (`set_index,image_id,train|test`); overrides random splitting.
    #[arg(long)]
    pub splits: Option<PathBuf>,
    /// Number of random train/test sets.
    #[arg(long = "n-sets", default_value_t = 10)]
    pub n_sets: usize,
    /// Training documents per category.
    #[arg(long = "train-per-category", default_value_t = 70)]
    pub train_per_category: usize,
    /// Test documents per category; omit to use all remaining documents.
    #[arg(long = "test-per-category")]
    pub test_per_category: Option<usize>,
    /// Seed for random splits.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the splits used to this file.
    #[arg(long = "write-splits")]
    pub write_splits: Option<PathBuf>,
}

impl SplitArgs {
    fn resolve(&self, docs: &[TagDocument]) -> Result<Vec<SplitSpec>> {
        let splits = match &self.splits {
            Some(path) => load_splits(path)?,
            None => make_splits(
                docs,
                self.n_sets,
                self.train_per_category,
                self.test_per_category.map_or(TestSize::Remaining, TestSize::Fixed),
                self.seed,
            )?,
        };
        if let Some(path) = &self.write_splits {
            save_splits(path, &splits)?;
        }
        Ok(splits)
    }
}

#[derive(Debug, Args)]
pub struct BuildBankArgs {
    /// Corpus file, one JSON record per line.
    #[arg(long)]
    pub corpus: PathBuf,
    #[command(flatten)]
    pub embeddings: EmbeddingArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Restrict to the training documents of one set in this split file.
    #[arg(long)]
    pub splits: Option<PathBuf>,
    /// Set index within --splits.
    #[arg(long = "set-index", default_value_t = 0)]
    pub set_index: usize,
    /// Output file, written atomically.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// Corpus file, one JSON record per line.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Codebook file produced by build-bank.
    #[arg(long)]
    pub codebook: PathBuf,
    #[command(flatten)]
    pub embeddings: EmbeddingArgs,
    /// Histogram threshold on D(tag, filter word).
    #[arg(long = "threshold-t", default_value_t = 0.40)]
    pub threshold_t: f64,
    /// Output file, written atomically.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Feature CSV produced by extract.
    #[arg(long)]
    pub features: PathBuf,
    /// SVM cost C.
    #[arg(long = "c-penalty", default_value_t = 50.0)]
    pub c_penalty: f64,
    /// RBF kernel width.
    #[arg(long, default_value_t = 1e-5)]
    pub gamma: f64,
    /// KKT tolerance of the SMO solver.
    #[arg(long, default_value_t = 1e-3)]
    pub tol: f64,
    /// Consecutive non-improving SMO steps tolerated.
    #[arg(long = "max-passes", default_value_t = 10)]
    pub max_passes: usize,
    /// Output file, written atomically.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Model file produced by train.
    #[arg(long)]
    pub model: PathBuf,
    /// Feature CSV produced by extract.
    #[arg(long)]
    pub features: PathBuf,
    /// CSV with columns image_id,category,predicted.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Corpus file, one JSON record per line.
    #[arg(long)]
    pub corpus: PathBuf,
    #[command(flatten)]
    pub embeddings: EmbeddingArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub splits: SplitArgs,
    /// Report CSV: setting,mean_accuracy,acc_set_0,...
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateThresholdArgs {
    #[command(flatten)]
    pub eval: EvalArgs,
    /// Comma-separated thresholds (default 0.3,0.4,...,0.8).
    #[arg(long, value_delimiter = ',')]
    pub thresholds: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct AblateEmbeddingsArgs {
    #[command(flatten)]
    pub eval: EvalArgs,
    /// Comma-separated table names and/or `averaged` (default: every table, then averaged).
    #[arg(long, value_delimiter = ',')]
    pub modes: Vec<String>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Directory for corpus.jsonl and table files.
    #[arg(long = "out-dir")]
    pub out_dir: PathBuf,
    /// Number of categories.
    #[arg(long, default_value_t = 8)]
    pub categories: usize,
    /// Documents per category.
    #[arg(long = "docs-per-category", default_value_t = 130)]
    pub docs_per_category: usize,
    /// Words per category vocabulary.
    #[arg(long = "vocab-per-category", default_value_t = 40)]
    pub vocab_per_category: usize,
    /// Embedding dimension.
    #[arg(long, default_value_t = 50)]
    pub dim: usize,
    /// Minimum cosine between a category word and its centroid, in (0, 1).
    #[arg(long, default_value_t = 0.9)]
    pub tightness: f64,
    /// Probability that a tag is drawn from the noise vocabulary.
    #[arg(long = "noise-rate", default_value_t = 0.1)]
    pub noise_rate: f64,
    /// Tags drawn per document.
    #[arg(long = "tags-per-doc", default_value_t = 30)]
    pub tags_per_doc: usize,
    /// Size of the shared noise vocabulary.
    #[arg(long = "noise-vocab", default_value_t = 200)]
    pub noise_vocab: usize,
    /// Number of embedding tables.
    #[arg(long, default_value_t = 3)]
    pub tables: usize,
    /// Random seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Parses `NAME=PATH`, or a bare path named after its file stem.
fn parse_embedding_spec(spec: &str) -> (String, PathBuf) {
    match spec.split_once('=') {
        Some((name, path)) if !name.is_empty() => (name.to_string(), PathBuf::from(path)),
        _ => {
            let path = PathBuf::from(spec);
            let name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| spec.to_string());
            (name, path)
        }
    }
}

pub fn load_tables(specs: &[String]) -> Result<Vec<EmbeddingTable>> {
    specs
        .iter()
        .map(|s| {
            let (name, path) = parse_embedding_spec(s);
            load_table(&path, name)
        })
        .collect()
}

fn load_ensemble(args: &EmbeddingArgs) -> Result<EmbeddingEnsemble> {
    EmbeddingEnsemble::new(load_tables(&args.embeddings)?)
}

fn load_docs(path: &Path) -> Result<Vec<TagDocument>> {
    Ok(preprocess_all(&load_corpus(path)?))
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::BuildBank(a) => build_bank(a),
        Command::Extract(a) => extract(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Eval(a) => eval_cmd(a),
        Command::AblateThreshold(a) => ablate_threshold_cmd(a),
        Command::AblateEmbeddings(a) => ablate_embeddings_cmd(a),
        Command::Synth(a) => synth(a),
    }
}

fn build_bank(a: &BuildBankArgs) -> Result<()> {
    let config = a.config.config()?;
    let docs = load_docs(&a.corpus)?;
    let ensemble = load_ensemble(&a.embeddings)?;
    let codebook = match &a.splits {
        Some(path) => {
            let splits = load_splits(path)?;
            let split = splits
                .iter()
                .find(|s| s.set_index == a.set_index)
                .ok_or_else(|| {
                    Error::Config(format!("set index {} not in {}", a.set_index, path.display()))
                })?;
            eval::split_codebook(&docs, split, &ensemble, &config)?
        }
        None => {
            let refs: Vec<&TagDocument> = docs.iter().collect();
            let categories = categories_in_order(refs.iter().copied());
            build_codebook(&build_filter_banks(&categories, &refs, &ensemble, &config)?)?
        }
    };
    save_codebook(&codebook, &a.out)
}

fn extract(a: &ExtractArgs) -> Result<()> {
    if !(a.threshold_t > 0.0 && a.threshold_t <= 1.0) {
        return Err(Error::Config(format!(
            "threshold-t must lie in (0, 1], got {}",
            a.threshold_t
        )));
    }
    let docs = load_docs(&a.corpus)?;
    let codebook = load_codebook(&a.codebook)?;
    let ensemble = load_ensemble(&a.embeddings)?;
    let extractor = Extractor::new(&codebook, &ensemble);
    let uncovered = extractor.uncovered_words();
    if uncovered > 0 {
        return Err(Error::format(
            &a.codebook,
            format!(
                "{uncovered} of {} filter words are unknown to every embedding table; \
                 codebook and embeddings do not match",
                codebook.len()
            ),
        ));
    }
    let features = extractor.extract_matrix(&docs, a.threshold_t);
    save_features(&a.out, &features, codebook.len())
}

fn train(a: &TrainArgs) -> Result<()> {
    let (rows, _) = load_features(&a.features)?;
    let x: Vec<Vec<f64>> = rows.iter().map(|f| f.to_dense(false)).collect();
    let y: Vec<String> = rows.iter().map(|f| f.category.clone()).collect();
    if let Some(f) = rows.iter().find(|f| f.category.is_empty()) {
        return Err(Error::format(
            &a.features,
            format!("row {:?} has no category", f.image_id),
        ));
    }
    let params = TrainParams {
        c: a.c_penalty,
        gamma: a.gamma,
        tol: a.tol,
        max_passes: a.max_passes,
    };
    let model = classifier::train(&x, &y, &params)?;
    classifier::save_model(&model, &a.out)
}

fn predict(a: &PredictArgs) -> Result<()> {
    let model = classifier::load_model(&a.model)?;
    let (rows, dim) = load_features(&a.features)?;
    if dim != model.dim {
        return Err(Error::format(
            &a.features,
            format!("features have {dim} columns, model expects {}", model.dim),
        ));
    }
    let x: Vec<Vec<f64>> = rows.iter().map(|f| f.to_dense(false)).collect();
    let predicted = model.predict_batch(&x)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["image_id", "category", "predicted"])
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    for (f, p) in rows.iter().zip(&predicted) {
        w.write_record([f.image_id.as_str(), f.category.as_str(), p.as_str()])
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidInput(e.to_string()))?;
    write_atomic(&a.out, &bytes)
}

fn eval_inputs(a: &EvalArgs) -> Result<(PipelineConfig, Vec<TagDocument>, Vec<SplitSpec>)> {
    let config = a.config.config()?;
    let docs = load_docs(&a.corpus)?;
    let splits = a.splits.resolve(&docs)?;
    Ok((config, docs, splits))
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let (config, docs, splits) = eval_inputs(a)?;
    let ensemble = load_ensemble(&a.embeddings)?;
    let result = evaluate(&docs, &ensemble, &config, &splits)?;
    let setting = config.t_threshold.to_string();
    write_atomic(&a.out, report_csv([(setting.as_str(), &result)]).as_bytes())?;
    println!("mean_accuracy={}", result.mean_accuracy);
    Ok(())
}

fn ablate_threshold_cmd(a: &AblateThresholdArgs) -> Result<()> {
    let (config, docs, splits) = eval_inputs(&a.eval)?;
    let ensemble = load_ensemble(&a.eval.embeddings)?;
    let thresholds = if a.thresholds.is_empty() {
        THRESHOLD_GRID.to_vec()
    } else {
        a.thresholds.clone()
    };
    let report = ablate_threshold(&docs, &ensemble, &config, &splits, &thresholds)?;
    write_atomic(&a.eval.out, report.to_csv().as_bytes())
}

fn ablate_embeddings_cmd(a: &AblateEmbeddingsArgs) -> Result<()> {
    let (config, docs, splits) = eval_inputs(&a.eval)?;
    let tables = load_tables(&a.eval.embeddings.embeddings)?;
    let modes = if a.modes.is_empty() {
        EmbeddingMode::all(&tables)
    } else {
        a.modes
            .iter()
            .map(|m| match m.as_str() {
                "averaged" => EmbeddingMode::Averaged,
                name => EmbeddingMode::Single(name.to_string()),
            })
            .collect()
    };
    if let Some(EmbeddingMode::Single(name)) = modes.iter().find(|m| match m {
        EmbeddingMode::Single(n) => !tables.iter().any(|t| t.name() == n),
        EmbeddingMode::Averaged => false,
    }) {
        return Err(Error::Config(format!("unknown embedding mode {name:?}")));
    }
    let report = ablate_embeddings(&docs, &tables, &config, &splits, &modes)?;
    write_atomic(&a.eval.out, report.to_csv().as_bytes())
}

fn synth(a: &SynthArgs) -> Result<()> {
    let params = SynthParams {
        categories: a.categories,
        docs_per_category: a.docs_per_category,
        vocab_per_category: a.vocab_per_category,
        dim: a.dim,
        tightness: a.tightness,
        noise_rate: a.noise_rate,
        seed: a.seed,
        tags_per_doc: a.tags_per_doc,
        noise_vocab: a.noise_vocab,
        tables: a.tables,
    };
    let corpus = generate_synthetic(&params)?;
    write_synthetic(&corpus, &a.out_dir)?;
    Ok(())
}

pub fn exit_code(kind: ErrorKind) -> i32 {
    match kind {
        ErrorKind::Usage => 2,
        ErrorKind::Data => 3,
        ErrorKind::Infeasible => 4,
    }
}

fn error_line(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": kind, "message": message }).to_string()
}

/// Parses arguments, runs the command, and returns the process exit code.
/// Failures print one JSON line `{"error": ..., "message": ...}` to stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(e.kind(), K::DisplayHelp | K::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("usage error");
            eprintln!("{}", error_line("usage", first.trim_start_matches("error: ")));
            return 2;
        }
    };
    if cli.jobs > 0 {
        // Fails only if a global pool already exists, in which case it is reused.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs)
            .build_global();
    }
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let kind = e.kind();
            let label = match kind {
                ErrorKind::Usage => "usage",
                ErrorKind::Data => "data",
                ErrorKind::Infeasible => "infeasible",
            };
            eprintln!("{}", error_line(label, &e.to_string()));
            exit_code(kind)
        }
    }
}
