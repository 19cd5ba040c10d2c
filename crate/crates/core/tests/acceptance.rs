//! Exit criteria for the pipeline, one test per criterion. Each prints a
//! `PASS`/`FAIL` line; run with `--nocapture` to see them.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tagfeat::classifier::{self, rbf, TrainParams};
use tagfeat::corpus::{preprocess_all, TagDocument};
use tagfeat::embeddings::{averaged_similarity, cosine, EmbeddingEnsemble, EmbeddingTable};
use tagfeat::eval::{
    ablate_embeddings, ablate_threshold, evaluate, make_splits, report_csv, split_codebook,
    EmbeddingMode, TestSize, THRESHOLD_GRID,
};
use tagfeat::features::{features_to_csv, Extractor};
use tagfeat::filterbank::{
    build_codebook, build_filter_bank, build_filter_banks, categories_in_order, FilterBank,
    PipelineConfig,
};
use tagfeat::smo::{kkt_violation, solve, KernelMatrix, SmoParams};
use tagfeat::synth::{generate_synthetic, random_table, SynthParams};

fn report(name: &str, ok: bool, detail: impl std::fmt::Display) {
    println!("ACCEPTANCE {} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "{name}: {detail}");
}

fn event8_like(seed: u64) -> SynthParams {
    SynthParams {
        categories: 8,
        docs_per_category: 130,
        tightness: 0.9,
        noise_rate: 0.1,
        seed,
        ..Default::default()
    }
}

/// Large per-category vocabularies, few tags per document and a small candidate
/// cap: exact token matches between test and training documents are rare, so
/// only the semantic thresholds generalise.
fn hard_corpus(seed: u64) -> SynthParams {
    SynthParams {
        categories: 8,
        docs_per_category: 130,
        vocab_per_category: 400,
        tags_per_doc: 8,
        tightness: 0.7,
        noise_rate: 0.3,
        seed,
        ..Default::default()
    }
}

const HARD_TOP_N: usize = 3;

/// Copy of `table` without the given tokens.
fn without(table: &EmbeddingTable, drop: impl Fn(&str) -> bool) -> EmbeddingTable {
    let entries: Vec<(String, Vec<f64>)> = table
        .tokens()
        .filter(|t| !drop(t))
        .map(|t| (t.to_string(), table.get(t).unwrap().to_vec()))
        .collect();
    EmbeddingTable::new(table.name(), table.dim(), entries).unwrap()
}

#[test]
fn histogram_oracle_equivalence() {
    let start = Instant::now();
    let synth = generate_synthetic(&SynthParams {
        categories: 5,
        docs_per_category: 40,
        vocab_per_category: 30,
        tags_per_doc: 20,
        noise_rate: 0.2,
        noise_vocab: 60,
        tightness: 0.6,
        seed: 11,
        ..Default::default()
    })
    .unwrap();
    // Partial coverage: table 2 misses every third word, table 3 every fifth.
    let t = &synth.tables;
    let tables = vec![
        t[0].clone(),
        without(&t[1], |w| w.len() % 3 == 0),
        without(&t[2], |w| w.bytes().map(usize::from).sum::<usize>() % 5 == 0),
    ];
    let ensemble = EmbeddingEnsemble::new(tables).unwrap();
    let docs = preprocess_all(&synth.records);
    assert_eq!(docs.len(), 200);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut pool: Vec<String> = synth.category_vocab.concat();
    pool.extend(synth.noise_words.iter().cloned());
    let mut words = Vec::new();
    while words.len() < 100 {
        let w = pool.swap_remove(rng.gen_range(0..pool.len()));
        words.push(w);
    }
    let codebook = build_codebook(&[FilterBank {
        category: "all".into(),
        delta: 0.5,
        entries: words.iter().map(|w| (w.clone(), 1.0)).collect(),
    }])
    .unwrap();
    assert_eq!(codebook.len(), 100);

    let threshold = 0.4;
    let got = Extractor::new(&codebook, &ensemble).extract_matrix(&docs, threshold);

    let mut mismatches = 0usize;
    for (doc, fv) in docs.iter().zip(&got) {
        // Full n x m similarity matrix, one row per tag occurrence.
        let occurrences: Vec<&str> = doc
            .tags
            .iter()
            .flat_map(|(t, &c)| std::iter::repeat(t.as_str()).take(c as usize))
            .collect();
        let matrix: Vec<Vec<Option<f64>>> = codebook
            .filter_words()
            .iter()
            .map(|w| occurrences.iter().map(|t| averaged_similarity(&ensemble, t, w)).collect())
            .collect();
        let expected: Vec<u32> = matrix
            .iter()
            .map(|row| row.iter().filter(|d| matches!(d, Some(d) if *d >= threshold)).count() as u32)
            .collect();
        if expected != fv.counts {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    let nonzero = got.iter().flat_map(|f| &f.counts).filter(|c| **c > 0).count();
    report(
        "histogram oracle equivalence",
        mismatches == 0 && elapsed < Duration::from_secs(10) && nonzero > 0,
        format!("{mismatches} mismatching documents of 200, {nonzero} nonzero bins, {elapsed:?}"),
    );
}

#[test]
fn threshold_monotonicity_sweep() {
    let synth = generate_synthetic(&hard_corpus(3)).unwrap();
    let docs = preprocess_all(&synth.records);
    let ensemble = EmbeddingEnsemble::new(synth.tables).unwrap();
    let splits = make_splits(&docs, 1, 70, TestSize::Fixed(60), 3).unwrap();
    let cfg = PipelineConfig::default();
    let codebook = split_codebook(&docs, &splits[0], &ensemble, &cfg).unwrap();
    let test: Vec<TagDocument> = docs
        .iter()
        .filter(|d| splits[0].test_ids.contains(&d.image_id))
        .cloned()
        .collect();
    let sweep = Extractor::new(&codebook, &ensemble).extract_sweep(&test, &THRESHOLD_GRID);
    let mut violations = 0usize;
    for pair in sweep.windows(2) {
        for (lo, hi) in pair[0].iter().zip(&pair[1]) {
            violations += lo.counts.iter().zip(&hi.counts).filter(|(a, b)| b > a).count();
        }
    }
    report(
        "threshold monotonicity sweep",
        violations == 0,
        format!("{violations} violations over {} test documents x {} bins", test.len(), codebook.len()),
    );
}

#[test]
fn filter_bank_soundness() {
    let synth = generate_synthetic(&event8_like(4)).unwrap();
    let docs = preprocess_all(&synth.records);
    let ensemble = EmbeddingEnsemble::new(synth.tables).unwrap();
    let refs: Vec<&TagDocument> = docs.iter().collect();
    let mut violations = 0usize;
    let mut checked = 0usize;
    for delta in [0.3, 0.5, 0.7] {
        let cfg = PipelineConfig { delta, ..Default::default() };
        let banks =
            build_filter_banks(&categories_in_order(refs.iter().copied()), &refs, &ensemble, &cfg)
                .unwrap();
        for bank in &banks {
            for tag in bank.tags() {
                checked += 1;
                match averaged_similarity(&ensemble, tag, &bank.category) {
                    Some(d) if d >= delta => {}
                    _ => violations += 1,
                }
            }
        }
        let cb = build_codebook(&banks).unwrap();
        for w in cb.filter_words() {
            let ok = cb.provenance(w).unwrap().iter().any(|c| {
                averaged_similarity(&ensemble, w, c).is_some_and(|d| d >= delta)
            });
            violations += usize::from(!ok);
        }
    }

    // Boundary: a tag at exactly D = 0.50 is kept.
    let table = EmbeddingTable::new(
        "m",
        4,
        [
            ("library".to_string(), vec![1.0, 0.0, 0.0, 0.0]),
            ("shelf".to_string(), vec![1.0, 1.0, 1.0, 1.0]),
        ],
    )
    .unwrap();
    let small = EmbeddingEnsemble::new(vec![table]).unwrap();
    let d_edge = averaged_similarity(&small, "shelf", "library").unwrap();
    let doc = TagDocument::new("x", "library", BTreeMap::from([("shelf".to_string(), 1)]));
    let bank = build_filter_bank("library", &[&doc], &small, &PipelineConfig::default()).unwrap();
    let boundary_kept = d_edge == 0.5 && bank.tags().any(|t| t == "shelf");

    report(
        "filter-bank soundness",
        violations == 0 && checked > 0 && boundary_kept,
        format!("{violations} violations over {checked} entries; D=0.50 boundary kept: {boundary_kept}"),
    );
}

#[test]
fn cosine_algebra() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut failures = Vec::new();
    let mut pairs = 0;
    for dim in [3usize, 50, 300] {
        for _ in 0..1000 {
            let a: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let alpha: f64 = 10f64.powf(rng.gen_range(-3.0..3.0));
            let ab = cosine(&a, &b).unwrap();
            let scaled: Vec<f64> = a.iter().map(|x| alpha * x).collect();
            let checks = [
                ab == cosine(&b, &a).unwrap(),
                (cosine(&a, &a).unwrap() - 1.0).abs() <= 1e-9,
                (cosine(&scaled, &b).unwrap() - ab).abs() <= 1e-9,
                ab.abs() <= 1.0,
            ];
            if checks.iter().any(|ok| !ok) {
                failures.push((dim, checks));
            }
            pairs += 1;
        }
    }
    report(
        "cosine algebra",
        failures.is_empty(),
        format!("{} failing of {pairs} pairs", failures.len()),
    );
}

#[test]
fn smo_correctness() {
    let tol = 1e-3;
    let mut problems: Vec<(String, Vec<Vec<f64>>, Vec<f64>, f64, f64)> = Vec::new();
    problems.push((
        "xor".into(),
        vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![0.0, 1.0], vec![1.0, 0.0]],
        vec![1.0, 1.0, -1.0, -1.0],
        10.0,
        1.0,
    ));
    // Two overlapping Gaussian blobs, 200 points.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 0..200 {
        let label = if i % 2 == 0 { 1.0 } else { -1.0 };
        let centre = label * 0.8;
        x.push(vec![
            centre + rng.sample::<f64, _>(rand_distr::StandardNormal),
            rng.sample::<f64, _>(rand_distr::StandardNormal),
        ]);
        y.push(label);
    }
    problems.push(("blobs-200".into(), x.clone(), y.clone(), 50.0, 0.5));
    problems.push(("blobs-200-tiny-gamma".into(), x, y, 50.0, 1e-3));

    let mut all_ok = true;
    let mut details = Vec::new();
    for (name, x, y, c, gamma) in &problems {
        let start = Instant::now();
        let k = KernelMatrix::from_fn(x.len(), |i, j| rbf(&x[i], &x[j], *gamma).unwrap());
        let sol = solve(&k, y, &SmoParams { c: *c, tol, trace_objective: true, ..Default::default() });
        let elapsed = start.elapsed();
        let balance: f64 = sol.alpha.iter().zip(y).map(|(a, b)| a * b).sum();
        let kkt = kkt_violation(&k, y, &sol.alpha, sol.rho, *c);
        let feasible = sol.alpha.iter().all(|a| (0.0..=*c).contains(a));
        let monotone = sol.objective_trace.windows(2).all(|w| w[1] >= w[0] - 1e-9);
        let ok = sol.converged
            && balance.abs() <= 1e-6
            && kkt <= tol
            && feasible
            && monotone
            && elapsed < Duration::from_secs(5);
        all_ok &= ok;
        details.push(format!(
            "{name}: |sum a y|={:.1e} kkt={kkt:.1e} steps={} {elapsed:?}",
            balance.abs(),
            sol.iterations
        ));
    }

    // XOR through the public classifier: training accuracy 1.0.
    let xor_x = vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![0.0, 1.0], vec![1.0, 0.0]];
    let xor_y: Vec<String> = ["a", "a", "b", "b"].iter().map(|s| s.to_string()).collect();
    let model = classifier::train(&xor_x, &xor_y, &TrainParams::new(10.0, 1.0)).unwrap();
    let correct = xor_x.iter().zip(&xor_y).filter(|(x, y)| model.predict(x).unwrap() == *y).count();
    all_ok &= correct == 4;
    details.push(format!("xor accuracy {}/4", correct));

    report("SMO correctness", all_ok, details.join("; "));
}

#[test]
fn end_to_end_synthetic_classification() {
    let start = Instant::now();
    let synth = generate_synthetic(&event8_like(2024)).unwrap();
    let docs = preprocess_all(&synth.records);
    let ensemble = EmbeddingEnsemble::new(synth.tables).unwrap();
    let splits = make_splits(&docs, 10, 70, TestSize::Fixed(60), 2024).unwrap();
    let result = evaluate(&docs, &ensemble, &PipelineConfig::default(), &splits).unwrap();
    let elapsed = start.elapsed();
    report(
        "end-to-end synthetic classification",
        result.mean_accuracy >= 0.90 && elapsed < Duration::from_secs(300),
        format!("mean accuracy {:.4} over {} sets in {elapsed:?}", result.mean_accuracy, result.per_set.len()),
    );
}

#[test]
fn ablation_harness_structure() {
    // Threshold axis on the hard corpus.
    let synth = generate_synthetic(&hard_corpus(7)).unwrap();
    let docs = preprocess_all(&synth.records);
    let ensemble = EmbeddingEnsemble::new(synth.tables).unwrap();
    let splits = make_splits(&docs, 10, 70, TestSize::Fixed(60), 7).unwrap();
    let cfg = PipelineConfig { top_n: HARD_TOP_N, ..Default::default() };
    let grid = ablate_threshold(&docs, &ensemble, &cfg, &splits, &THRESHOLD_GRID).unwrap();
    let settings: Vec<&str> = grid.rows.iter().map(|r| r.setting.as_str()).collect();
    let grid_ok = settings == ["0.3", "0.4", "0.5", "0.6", "0.7", "0.8"];
    let best = grid.rows.iter().map(|r| r.result.mean_accuracy).fold(0.0, f64::max);
    let extreme = ablate_threshold(&docs, &ensemble, &cfg, &splits, &[0.99]).unwrap();
    let at_extreme = extreme.rows[0].result.mean_accuracy;
    let collapse_ok = at_extreme <= best - 0.20;

    // Embedding axis: table 2 replaced by random directions.
    let synth = generate_synthetic(&event8_like(8)).unwrap();
    let docs = preprocess_all(&synth.records);
    let noise = random_table(&synth.tables[1], "table2", 808).unwrap();
    let tables = vec![synth.tables[0].clone(), noise, synth.tables[2].clone()];
    let splits = make_splits(&docs, 10, 70, TestSize::Fixed(60), 8).unwrap();
    let modes = EmbeddingMode::all(&tables);
    let emb = ablate_embeddings(&docs, &tables, &PipelineConfig::default(), &splits, &modes).unwrap();
    let layout_ok = emb.rows.iter().map(|r| r.setting.as_str()).collect::<Vec<_>>()
        == ["table1", "table2", "table3", "averaged"];
    let weakest = emb.rows[..3].iter().map(|r| r.result.mean_accuracy).fold(1.0, f64::min);
    let averaged = emb.row("averaged").unwrap().mean_accuracy;
    let embed_ok = averaged >= weakest;

    report(
        "ablation harness structure",
        grid_ok && collapse_ok && layout_ok && embed_ok,
        format!(
            "threshold rows {settings:?}, best {best:.3}, T=0.99 {at_extreme:.3}; \
             embedding rows {:?}, averaged {averaged:.3} vs weakest {weakest:.3}",
            emb.rows.iter().map(|r| (r.setting.as_str(), (r.result.mean_accuracy * 1000.0).round() / 1000.0)).collect::<Vec<_>>()
        ),
    );
}

/// Runs the file-producing pipeline once into `dir`.
fn pipeline_files(dir: &Path, seed: u64) {
    let synth = generate_synthetic(&SynthParams {
        categories: 4,
        docs_per_category: 30,
        seed,
        ..Default::default()
    })
    .unwrap();
    let docs = preprocess_all(&synth.records);
    let ensemble = EmbeddingEnsemble::new(synth.tables).unwrap();
    let cfg = PipelineConfig::default();
    let splits = make_splits(&docs, 3, 15, TestSize::Remaining, seed).unwrap();

    let codebook = split_codebook(&docs, &splits[0], &ensemble, &cfg).unwrap();
    fs::write(dir.join("codebook.json"), codebook.to_json()).unwrap();

    let features = Extractor::new(&codebook, &ensemble).extract_matrix(&docs, cfg.t_threshold);
    fs::write(dir.join("features.csv"), features_to_csv(&features, codebook.len()).unwrap()).unwrap();

    let train: Vec<_> = features.iter().filter(|f| splits[0].train_ids.contains(&f.image_id)).collect();
    let x: Vec<Vec<f64>> = train.iter().map(|f| f.to_dense(false)).collect();
    let y: Vec<String> = train.iter().map(|f| f.category.clone()).collect();
    let model = classifier::train(&x, &y, &TrainParams::new(cfg.c_penalty, cfg.gamma)).unwrap();
    fs::write(dir.join("model.json"), model.to_json()).unwrap();

    let eval = evaluate(&docs, &ensemble, &cfg, &splits).unwrap();
    let grid = ablate_threshold(&docs, &ensemble, &cfg, &splits, &THRESHOLD_GRID).unwrap();
    fs::write(dir.join("eval.csv"), report_csv([("0.4", &eval)])).unwrap();
    fs::write(dir.join("thresholds.csv"), grid.to_csv()).unwrap();
}

#[test]
fn determinism() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline_files(a.path(), 31);
    pipeline_files(b.path(), 31);
    let mut differing = Vec::new();
    for name in ["codebook.json", "features.csv", "model.json", "eval.csv", "thresholds.csv"] {
        let x = fs::read(a.path().join(name)).unwrap();
        let y = fs::read(b.path().join(name)).unwrap();
        if x != y || x.is_empty() {
            differing.push(name);
        }
    }
    report(
        "determinism",
        differing.is_empty(),
        format!("differing files: {differing:?}"),
    );
}

#[test]
fn train_test_hygiene() {
    let synth = generate_synthetic(&SynthParams {
        categories: 4,
        docs_per_category: 40,
        noise_rate: 0.3,
        seed: 12,
        ..Default::default()
    })
    .unwrap();
    let docs = preprocess_all(&synth.records);
    let ensemble = EmbeddingEnsemble::new(synth.tables).unwrap();
    let cfg = PipelineConfig::default();
    let splits = make_splits(&docs, 3, 20, TestSize::Remaining, 12).unwrap();

    let mut changed = 0usize;
    let mut mutations = 0usize;
    for split in &splits {
        let reference = split_codebook(&docs, split, &ensemble, &cfg).unwrap();
        for id in split.test_ids.iter().step_by(5) {
            let reduced: Vec<TagDocument> = docs.iter().filter(|d| &d.image_id != id).cloned().collect();
            let mut shrunk = split.clone();
            shrunk.test_ids.remove(id);
            let rebuilt = split_codebook(&reduced, &shrunk, &ensemble, &cfg).unwrap();
            mutations += 1;
            if rebuilt.banks() != reference.banks() {
                changed += 1;
            }
        }
    }
    report(
        "train/test hygiene",
        changed == 0 && mutations > 0,
        format!("{changed} of {mutations} test-document deletions changed a bank"),
    );
}
