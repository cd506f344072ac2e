//! Acceptance suite. Prints one PASS/FAIL/SKIP line per criterion and exits
//! non-zero if any criterion fails.
//!
//! `ACCEPTANCE_CRITERIA=1,4,9` restricts the run to the listed criteria.
//! Criterion 10 needs `RRUFF_DIR` pointing at a directory of RRUFF raw files.

mod common;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use spectromatch::app::{self, config::AppConfig};
use spectromatch::eval::{run_multiclass, run_one_shot, EvalConfig, EvalReport, Method, MulticlassMode};
use spectromatch::matcher::{encode_db, ReferenceDb};
use spectromatch::preprocess::{asls_baseline, correct_dataset, correct_values, AslsConfig};
use spectromatch::sampler::{pair_counts, sample_epoch, BootstrapPlan};
use spectromatch::siamese::{Architecture, SiameseModel};
use spectromatch::spectra::{synth_dataset, Dataset, Grid, Spectrum, SynthConfig};
use spectromatch::trainer::{NoObserver, TrainConfig};

/// Data seed and evaluation seed for the desk-scale runs. Hyperparameters
/// were explored on a different pair (42, 7); these were not looked at.
const DATA_SEED: u64 = 2024;
const EVAL_SEED: u64 = 11;

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn within(t: Instant, budget: Duration) -> (bool, String) {
    let e = t.elapsed();
    (e < budget, format!("{:.1}s of {}s", e.as_secs_f64(), budget.as_secs()))
}

fn inf_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// 1: gradients
fn gradients() -> Outcome {
    let t = Instant::now();
    let mut worst = Vec::new();
    for kind in common::LAYER_KINDS {
        let e = (0..100).map(|s| common::gradcheck_layer(kind, s).max_rel_error).fold(0.0, f64::max);
        worst.push((kind, e));
    }
    let siamese = (0..100).map(|s| common::gradcheck_siamese(s).max_rel_error).fold(0.0, f64::max);
    worst.push(("siamese", siamese));
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let (fast, time) = within(t, Duration::from_secs(120));
    let detail: Vec<String> = worst.iter().map(|(k, e)| format!("{k} {e:.1e}")).collect();
    verdict(max <= 1e-4 && fast, format!("max rel error {max:.2e} <= 1e-4 over 100 configs each ({}); {time}", detail.join(", ")))
}

// 2: forward oracles and brute-force matching
fn oracles() -> Outcome {
    let t = Instant::now();
    let errors = common::forward_oracle_errors(1000);
    let max = errors.values().copied().fold(0.0, f64::max);
    let len = 64;
    let grid = Grid::new(0.0, 1.0, len).unwrap();
    let ds = synth_dataset(&SynthConfig { n_classes: 5, samples_per_class: 11, grid, seed: 31, ..SynthConfig::default() }).unwrap();
    let model = SiameseModel::<f32>::new(&Architecture::blocks(len, &[4, 4], &[5, 3], 0.01), grid, true, 5).unwrap();
    let refs: Vec<&Spectrum> = ds.class_index().values().map(|idx| ds.get(idx[0])).collect();
    let mut db = ReferenceDb::new(&model);
    db.add_all(&refs, &model).unwrap();
    let queries: Vec<&Spectrum> = ds.class_index().values().flat_map(|idx| idx[1..].iter().map(|&i| ds.get(i))).collect();
    let agree = queries
        .iter()
        .filter(|q| {
            let got: Vec<_> = db.match_one_shot(q, &model, 1).unwrap().ranking.iter().map(|r| r.class_id).collect();
            got == common::brute_force_ranking(&model, &refs, q)
        })
        .count();
    let (fast, time) = within(t, Duration::from_secs(120));
    verdict(
        errors.len() == 5 && max <= 1e-10 && agree == queries.len() && queries.len() == 50 && fast,
        format!("forward max abs error {max:.1e} on 1000 shapes; ranking agrees on {agree}/{} queries x 5 classes; {time}", queries.len()),
    )
}

// 3: pair machinery
fn pairs() -> Outcome {
    let counts = pair_counts(100, 10);
    let ds = common::toy_dataset(&[10, 7, 12, 9, 10, 8, 11, 10, 6, 10, 9, 10, 10, 5, 10, 10, 13, 10, 10, 10], 64);
    let plan = BootstrapPlan::new(&ds, 17);
    let (mut total, mut bad_label, mut unbalanced, mut epoch) = (0usize, 0usize, 0usize, 0u64);
    while total < 100_000 {
        let pairs = sample_epoch(&ds, &plan, epoch).unwrap();
        if 2 * pairs.iter().filter(|p| p.same).count() != pairs.len() {
            unbalanced += 1;
        }
        bad_label += pairs.iter().filter(|p| p.same != (ds.get(p.a).class_id == ds.get(p.b).class_id)).count();
        total += pairs.len();
        epoch += 1;
    }
    let toy = common::toy_dataset(&[2, 3, 4], 16);
    let freq = common::positive_pair_frequencies(&toy, 10_000, 3);
    let expected = 10_000.0;
    let dev = freq.values().map(|&c| (c as f64 - expected).abs() / expected).fold(0.0, f64::max);
    verdict(
        counts == (4500, 495_000) && bad_label == 0 && unbalanced == 0 && freq.len() == 10 && dev <= 0.10,
        format!(
            "pair_counts(100,10) = {counts:?}; {total} pairs over {epoch} epochs, {unbalanced} unbalanced, {bad_label} mislabelled; positive frequency deviation {:.1}% over 1e4 epochs",
            dev * 100.0
        ),
    )
}

// 4: AsLS
fn asls() -> Outcome {
    let cfg = AslsConfig::default();
    let mut fixed = 0.0f64;
    for n in [3usize, 4, 17, 256, 1024] {
        for (a, b) in [(0.0, 0.0), (5.0, 0.0), (-3.5, 0.0), (1.0, 0.01), (-7.29, -0.016), (250.0, 3.3)] {
            let y: Vec<f64> = (0..n).map(|i| a + b * i as f64).collect();
            fixed = fixed.max(inf_norm(&y, &asls_baseline(&y, &cfg).unwrap()));
            // the corrected signal of a constant or a line is identically zero
            fixed = fixed.max(correct_values(&y, &cfg).unwrap().iter().fold(0.0, |m, v| m.max(v.abs())));
        }
    }
    let dense = (0..10)
        .map(|s| {
            let y = common::ramp_peak_signal(256, s);
            inf_norm(&asls_baseline(&y, &cfg).unwrap(), &common::dense_asls(&y, &cfg))
        })
        .fold(0.0, f64::max);
    verdict(fixed <= 1e-8 && dense <= 1e-8, format!("fixed-point error {fixed:.1e}; banded vs dense {dense:.1e} on L=256 ramp+peak"))
}

fn desk_eval(train: TrainConfig, repeats: usize) -> EvalConfig {
    let mut cfg = EvalConfig::new(Architecture::default_twin(common::DESK_LEN), train);
    cfg.repeats = repeats;
    cfg.seed = EVAL_SEED;
    cfg
}

fn f1(r: &EvalReport, m: Method) -> f64 {
    r.f1(m).0
}

// 5: one-shot ordering on raw data
fn table1_raw(ds: &Dataset) -> Outcome {
    let t = Instant::now();
    let report = run_one_shot(ds, &desk_eval(common::desk_train(), 5), &mut NoObserver).unwrap();
    let (s, c, l) = (f1(&report, Method::Siamese), f1(&report, Method::NnCosine), f1(&report, Method::NnL2));
    let (fast, time) = within(t, Duration::from_secs(1800));
    let runs: Vec<String> = report.f1_values(Method::Siamese).iter().map(|v| format!("{v:.3}")).collect();
    verdict(
        s > c && c > l && s - c >= 0.10 && fast,
        format!(
            "macro-F1 siamese {s:.3} ± {:.3} (runs {}), nn_cosine {c:.3} ± {:.3}, nn_l2 {l:.3} ± {:.3}; margin {:.3} >= 0.10; {time}",
            report.f1(Method::Siamese).1,
            runs.join(" "),
            report.f1(Method::NnCosine).1,
            report.f1(Method::NnL2).1,
            s - c
        ),
    )
}

// 6: AsLS effect on the raw-spectrum baselines
fn table1_preprocessed(ds: &Dataset) -> Outcome {
    let mut cfg = desk_eval(common::desk_train(), 5);
    cfg.with_siamese = false;
    let raw = run_one_shot(ds, &cfg, &mut NoObserver).unwrap();
    let corrected = run_one_shot(&correct_dataset(ds, &AslsConfig::default()).unwrap(), &cfg, &mut NoObserver).unwrap();
    let gain = |m| f1(&corrected, m) - f1(&raw, m);
    let (gl, gc) = (gain(Method::NnL2), gain(Method::NnCosine));
    verdict(
        gl >= 0.15 && gc >= 0.15,
        format!(
            "nn_l2 {:.3} -> {:.3} (+{gl:.3}), nn_cosine {:.3} -> {:.3} (+{gc:.3}); each >= +0.15",
            f1(&raw, Method::NnL2),
            f1(&corrected, Method::NnL2),
            f1(&raw, Method::NnCosine),
            f1(&corrected, Method::NnCosine)
        ),
    )
}

// 7: multiclass parity with augmentation
fn table2(ds: &Dataset) -> Outcome {
    let t = Instant::now();
    let train = TrainConfig { augment: Some(common::desk_augment()), ..common::desk_train() };
    let cfg = desk_eval(train, 3);
    let siamese = run_multiclass(ds, &cfg, MulticlassMode::Siamese, &mut NoObserver).unwrap();
    let classifier = run_multiclass(ds, &cfg, MulticlassMode::Classifier, &mut NoObserver).unwrap();
    let (s, c) = (siamese.accuracy(Method::Siamese), classifier.accuracy(Method::Classifier));
    let fmt = |v: Vec<f64>| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ");
    verdict(
        (s.0 - c.0).abs() <= 0.05,
        format!(
            "accuracy siamese {:.3} ± {:.3} (runs {}), classifier {:.3} ± {:.3} (runs {}); gap {:.3} <= 0.05; {:.0}s",
            s.0,
            s.1,
            fmt(siamese.accuracy_values(Method::Siamese)),
            c.0,
            c.1,
            fmt(classifier.accuracy_values(Method::Classifier)),
            (s.0 - c.0).abs(),
            t.elapsed().as_secs_f64()
        ),
    )
}

// 8: dynamic database
fn db_contract() -> Outcome {
    let len = 64;
    let grid = Grid::new(0.0, 1.0, len).unwrap();
    let model = SiameseModel::<f32>::new(&Architecture::blocks(len, &[4, 4], &[5, 3], 0.01), grid, true, 21).unwrap();
    let ds = synth_dataset(&SynthConfig { n_classes: 130, samples_per_class: 2, grid, seed: 4, ..SynthConfig::default() }).unwrap();
    let by_class = |lo: u32, hi: u32| -> Vec<&Spectrum> { ds.spectra().iter().filter(|s| (lo..hi).contains(&s.class_id)).collect() };

    let mut db = ReferenceDb::new(&model);
    db.add_all(&by_class(0, 30), &model).unwrap();
    let before = encode_db(&db, "");
    let mut passes_ok = true;
    for s in by_class(30, 130) {
        let p = model.twin().forward_passes();
        db.add(s.class_id, s, &model).unwrap();
        passes_ok &= model.twin().forward_passes() - p == 1;
    }
    let added = db.n_classes();
    for c in 30..130 {
        db.remove(c).unwrap();
    }
    let identical = encode_db(&db, "") == before;

    let (mut checks, mut changed) = (0, 0);
    for q in ds.spectra().iter().filter(|s| s.class_id < 30).step_by(6) {
        let full = db.match_one_shot(q, &model, 1).unwrap();
        for c in db.classes().filter(|&c| c != full.predicted).collect::<Vec<_>>() {
            let mut smaller = db.clone();
            smaller.remove(c).unwrap();
            checks += 1;
            changed += usize::from(smaller.match_one_shot(q, &model, 1).unwrap().predicted != full.predicted);
        }
    }
    verdict(
        added == 130 && identical && changed == 0 && passes_ok,
        format!(
            "add/remove of 100 classes leaves the db bit-identical: {identical}; {changed}/{checks} predictions changed by removing a non-top class; one forward pass per add: {passes_ok}"
        ),
    )
}

// 9: determinism of the full pipeline
fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| -> Result<std::path::PathBuf, String> {
        let out = dir.path().join(name);
        let cfg = dir.path().join(format!("{name}.conf"));
        let text = format!(
            "seed = 5\nout_dir = {}\nsynth = true\nsynth_classes = 20\nsynth_samples = 5\ngrid_len = 256\n\
             preprocess = true\nfilters = 8, 8, 4, 4\nkernels = 9, 7, 5, 5\nepochs = 4\nbatch_size = 16\n\
             val_pairs = 200\naugment = true\nprotocol = one-shot\nrepeats = 2\n",
            out.display()
        );
        fs::write(&cfg, text).map_err(|e| e.to_string())?;
        let mut sink = Vec::new();
        match app::run(["spectromatch", "pipeline", "--config", cfg.to_str().unwrap()], &mut sink) {
            0 => Ok(out),
            code => Err(format!("pipeline exited with {code}")),
        }
    };
    let (a, b) = match (run("a"), run("b")) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return Outcome::Fail(e),
    };
    let names = ["model.ssnm", "db.spdb", "train_report.csv", "eval_report.csv", "dataset.spcd", "dataset_corrected.spcd"];
    let differing: Vec<&str> = names.iter().copied().filter(|n| !same_bytes(&a.join(n), &b.join(n))).collect();
    verdict(differing.is_empty(), format!("{} artifacts compared across two runs; differing: {differing:?}", names.len()))
}

fn same_bytes(a: &Path, b: &Path) -> bool {
    match (fs::read(a), fs::read(b)) {
        (Ok(x), Ok(y)) => !x.is_empty() && x == y,
        _ => false,
    }
}

// 10: real RRUFF data, reported only
fn rruff() -> Outcome {
    let Some(dir) = std::env::var_os("RRUFF_DIR") else {
        return Outcome::Skip("RRUFF_DIR not set".into());
    };
    let cfg = AppConfig { grid_len: common::DESK_LEN, ..AppConfig::default() };
    let mut sink = Vec::new();
    let (ds, _) = match app::ingest(Path::new(&dir), &cfg, &mut sink) {
        Ok(v) => v,
        Err(e) => return Outcome::Fail(format!("ingest failed: {e}")),
    };
    // the 100 classes with the most samples among those with at least two
    let mut sizes: Vec<(usize, u32)> = ds.class_index().iter().filter(|(_, v)| v.len() >= 2).map(|(&c, v)| (v.len(), c)).collect();
    sizes.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let keep: BTreeSet<u32> = sizes.iter().take(100).map(|&(_, c)| c).collect();
    let ds = ds.restrict_to(&keep);
    let report = match run_one_shot(&ds, &desk_eval(common::desk_train(), 3), &mut NoObserver) {
        Ok(r) => r,
        Err(e) => return Outcome::Fail(format!("one-shot protocol failed: {e}")),
    };
    let (s, c, l) = (f1(&report, Method::Siamese), f1(&report, Method::NnCosine), f1(&report, Method::NnL2));
    let line = format!("{} classes, {} spectra: siamese {s:.3}, nn_cosine {c:.3}, nn_l2 {l:.3}", ds.n_classes(), ds.len());
    if s > c && s > l {
        Outcome::Pass(line)
    } else {
        // reported, not gated
        Outcome::Skip(format!("completed; siamese does not exceed both baselines: {line}"))
    }
}

fn main() {
    let only: Option<BTreeSet<usize>> =
        std::env::var("ACCEPTANCE_CRITERIA").ok().map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|s| s.contains(&n));
    let desk = if [5, 6, 7].into_iter().any(wanted) {
        Some(synth_dataset(&common::desk_synth(DATA_SEED)).unwrap())
    } else {
        None
    };
    let criteria: Vec<(usize, &str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        (1, "gradient correctness", Box::new(gradients)),
        (2, "oracle equivalence", Box::new(oracles)),
        (3, "pair machinery", Box::new(pairs)),
        (4, "AsLS fixed points and dense oracle", Box::new(asls)),
        (5, "one-shot method ordering (raw)", Box::new(|| table1_raw(desk.as_ref().unwrap()))),
        (6, "AsLS improves raw-spectrum baselines", Box::new(|| table1_preprocessed(desk.as_ref().unwrap()))),
        (7, "multiclass siamese vs classifier", Box::new(|| table2(desk.as_ref().unwrap()))),
        (8, "dynamic database contract", Box::new(db_contract)),
        (9, "pipeline determinism", Box::new(determinism)),
        (10, "RRUFF one-shot (reported)", Box::new(rruff)),
    ];
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !wanted(n) {
            continue;
        }
        let line = match f() {
            Outcome::Pass(d) => format!("PASS criterion {n} ({name}): {d}"),
            Outcome::Fail(d) => {
                failed += 1;
                format!("FAIL criterion {n} ({name}): {d}")
            }
            Outcome::Skip(d) => format!("SKIP criterion {n} ({name}): {d}"),
        };
        println!("{line}");
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
