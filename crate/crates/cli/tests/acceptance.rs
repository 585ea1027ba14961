//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use failprobe::bucketing::{forward_fill, BucketCell, BucketGrid, Fill, NoteCategory};
use failprobe::cohort::{select_cohort, AdmissionTable, LosCutoff};
use failprobe::harness::{self, aggregate, metrics, ConfusionMatrix, Dataset, ExperimentConfig};
use failprobe::head::{self, gradient, init_head, numerical_gradient, Batch, Head, Init, TrainConfig};
use failprobe::store::{EmbeddingStore, StoreKey};
use failprobe::synth::{self, SynthConfig};
use failprobe::{seed, Outcome};
use rand::Rng;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn accounting_invariant() -> Check {
    let config = SynthConfig {
        admissions: 1362,
        death_fraction: 4500.0 / 34100.0,
        dim: 16,
        seed: 1362,
        ..Default::default()
    };
    let data = synth::generate(&config).map_err(|e| e.to_string())?;
    let table = AdmissionTable::from_records(data.admissions.clone()).map_err(|e| e.to_string())?;
    let cohort = select_cohort(&table, synth::INDEX_ICD, LosCutoff::Median).map_err(|e| e.to_string())?;
    ensure(cohort.len() == 1362, || format!("cohort has {} members", cohort.len()))?;
    let grids = failprobe::bucketing::build_filled_grids(
        cohort.members.iter().map(|m| &m.admission),
        &data.notes,
        8,
    )
    .map_err(|e| e.to_string())?
    .grids;
    let members: Vec<(u64, Outcome)> = cohort
        .members
        .iter()
        .map(|m| (m.admission.hadm_id, m.label))
        .collect();
    let dataset = Dataset::assemble(&members, &grids, &data.store, 8).map_err(|e| e.to_string())?;
    let experiment = ExperimentConfig::default();
    let log = harness::run_experiment(&dataset, &experiment).map_err(|e| e.to_string())?;

    let day1 = aggregate(&log, 1);
    for h in 1..=8 {
        let cm = aggregate(&log, h);
        ensure(cm.total() == 34100, || format!("horizon {h} sums to {}", cm.total()))?;
        ensure(
            (cm.true_survival(), cm.true_death()) == (day1.true_survival(), day1.true_death()),
            || format!("horizon {h} true-class columns differ from day 1"),
        )?;
    }
    Ok(format!(
        "8 horizons x 34100 predictions; columns {}/{}",
        day1.true_survival(),
        day1.true_death()
    ))
}

fn random_grid(rng: &mut impl Rng, id: u64) -> BucketGrid {
    let horizon = rng.random_range(1..=12u8);
    let density = rng.random_range(0.0..1.0);
    let mut g = BucketGrid::empty(id, id, horizon);
    for category in NoteCategory::ALL {
        for day in 1..=horizon {
            if rng.random_bool(density) {
                *g.cell_mut(category, day) = BucketCell {
                    text: format!("{category} {day}"),
                    fill: Fill::Original,
                    source_day: Some(day),
                    note_count: rng.random_range(1..4),
                };
            }
        }
    }
    g
}

/// Empty* prefix, then an Original, then only Originals and copies of the
/// latest earlier Original.
fn row_is_well_formed(grid: &BucketGrid, category: NoteCategory) -> bool {
    let mut last: Option<&BucketCell> = None;
    for (i, cell) in grid.row(category).iter().enumerate() {
        let day = i as u8 + 1;
        let ok = match (cell.fill, last) {
            (Fill::Empty, None) => cell.source_day.is_none() && cell.text.is_empty(),
            (Fill::Empty, Some(_)) => false,
            (Fill::Original, _) => cell.source_day == Some(day),
            (Fill::Copied, None) => false,
            (Fill::Copied, Some(src)) => {
                cell.source_day == src.source_day && cell.text == src.text && cell.note_count == 0
            }
        };
        if !ok {
            return false;
        }
        if cell.fill == Fill::Original {
            last = Some(cell);
        }
    }
    true
}

fn forward_fill_laws() -> Check {
    let mut rng = seed::rng(0xF111);
    let mut violations = Vec::new();
    for i in 0..1000u64 {
        let raw = random_grid(&mut rng, i);
        let filled = forward_fill(raw.clone());
        if forward_fill(filled.clone()) != filled {
            violations.push(format!("grid {i}: not idempotent"));
        }
        let originals = |g: &BucketGrid| {
            g.iter()
                .filter(|(_, _, c)| c.fill == Fill::Original)
                .map(|(cat, d, c)| (cat, d, c.clone()))
                .collect::<Vec<_>>()
        };
        if originals(&raw) != originals(&filled) {
            violations.push(format!("grid {i}: Original cells changed"));
        }
        if !NoteCategory::ALL.iter().all(|&c| row_is_well_formed(&filled, c)) {
            violations.push(format!("grid {i}: row not Empty* then filled"));
        }
    }
    ensure(violations.is_empty(), || {
        format!("{} violations, first: {}", violations.len(), violations[0])
    })?;
    Ok("1000 random grids, 0 violations".into())
}

fn gradient_correctness() -> Check {
    let mut rng = seed::rng(0x6EAD);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let dim = rng.random_range(1..=32usize);
        let n = rng.random_range(1..=24usize);
        let head = Head {
            weights: (0..dim).map(|_| rng.random_range(-0.5..0.5)).collect(),
            bias: rng.random_range(-0.5..0.5),
        };
        let xs: Vec<Vec<f32>> = (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let ys: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect();
        let rows: Vec<&[f32]> = xs.iter().map(Vec::as_slice).collect();
        let batch = Batch::new(&rows, &ys);
        let a = gradient(&head, batch).map_err(|e| e.to_string())?;
        let fd = numerical_gradient(&head, batch, 1e-3).map_err(|e| e.to_string())?;
        for (x, y) in a.weights.iter().chain([&a.bias]).zip(fd.weights.iter().chain([&fd.bias])) {
            let scale = x.abs().max(y.abs());
            if scale > 1e-7 {
                worst = worst.max((x - y).abs() / scale);
            }
        }
    }
    ensure(worst < 1e-4, || format!("max relative error {worst:.3e}"))?;
    Ok(format!("100 heads, max relative error {worst:.3e}"))
}

fn convex_training() -> Check {
    let mut rng = seed::rng(0xC0E5);
    let w_true: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    while xs.len() < 50 {
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s: f64 = x.iter().zip(&w_true).map(|(a, b)| a * b).sum();
        if s.abs() < 0.2 {
            continue;
        }
        xs.push(x.iter().map(|v| *v as f32).collect::<Vec<f32>>());
        ys.push(if s > 0.0 { 1.0 } else { 0.0 });
    }
    let rows: Vec<&[f32]> = xs.iter().map(Vec::as_slice).collect();
    let config = TrainConfig {
        epochs: 1000,
        learning_rate: 0.5,
        init: Init::Zeros,
        seed: 0,
    };
    let trained = head::train(init_head(4, Init::Zeros, 0), Batch::new(&rows, &ys), &config)
        .map_err(|e| e.to_string())?;
    let correct = rows
        .iter()
        .zip(&ys)
        .filter(|(x, y)| {
            let p = trained.head.forward(x).unwrap();
            (p >= 0.5) == (**y == 1.0)
        })
        .count();
    let rises = trained.loss_trace.windows(2).filter(|w| w[1] > w[0]).count();
    ensure(correct == 50, || format!("training accuracy {correct}/50"))?;
    ensure(rises == 0, || format!("loss increased {rises} times"))?;
    Ok(format!(
        "accuracy 50/50, loss {:.4} -> {:.4}, non-increasing",
        trained.loss_trace[0],
        trained.loss_trace[999]
    ))
}

fn failprobe(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_failprobe"))
        .args(args)
        .env_remove("FAILPROBE_THREADS")
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim())
    })
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// synthbench → cohort → buckets → store → train → analyze under `dir`.
/// With `stub`, the store comes from embed-stub; otherwise from synthbench.
fn pipeline(dir: &Path, size: &str, threads: &str, stub: bool, train_args: &[&str]) -> Result<(), String> {
    let data = dir.join("data");
    let (admissions, diagnoses, notes) = (
        data.join("admissions.csv"),
        data.join("diagnoses.csv"),
        data.join("notes.csv"),
    );
    let (cohort, buckets, log, analysis) = (
        dir.join("cohort.json"),
        dir.join("buckets.jsonl"),
        dir.join("log.csv"),
        dir.join("analysis.json"),
    );
    failprobe(&["synthbench", "--out-dir", s(&data), "--size", size, "--seed", "7"])?;
    failprobe(&[
        "cohort",
        "--admissions",
        s(&admissions),
        "--diagnoses",
        s(&diagnoses),
        "--out",
        s(&cohort),
    ])?;
    failprobe(&["buckets", "--notes", s(&notes), "--cohort", s(&cohort), "--out", s(&buckets)])?;
    let store = if stub {
        let store = dir.join("stub.ehre");
        failprobe(&[
            "embed-stub",
            "--buckets",
            s(&buckets),
            "--dim",
            "16",
            "--seed",
            "7",
            "--out",
            s(&store),
        ])?;
        store
    } else {
        data.join("store.ehre")
    };
    let mut train = vec![
        "--threads",
        threads,
        "train",
        "--cohort",
        s(&cohort),
        "--buckets",
        s(&buckets),
        "--store",
        s(&store),
        "--seed",
        "7",
        "--out",
        s(&log),
    ];
    train.extend_from_slice(train_args);
    failprobe(&train)?;
    failprobe(&[
        "--threads",
        threads,
        "analyze",
        "--log",
        s(&log),
        "--cohort",
        s(&cohort),
        "--buckets",
        s(&buckets),
        "--store",
        s(&store),
        "--out",
        s(&analysis),
    ])
}

fn determinism() -> Check {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let args = ["--reps", "20", "--horizons", "1..8", "--lr", "0.5"];
    let (a, b) = (root.path().join("t1"), root.path().join("t4"));
    pipeline(&a, "200", "1", true, &args)?;
    pipeline(&b, "200", "4", true, &args)?;
    let read = |dir: &Path, n: &str| fs::read(dir.join(n)).map_err(|e| e.to_string());
    for name in ["log.csv", "analysis.json", "stub.ehre", "buckets.jsonl"] {
        ensure(read(&a, name)? == read(&b, name)?, || format!("{name} differs between --threads 1 and 4"))?;
    }
    let lines = read(&a, "log.csv")?.iter().filter(|&&c| c == b'\n').count() - 1;
    Ok(format!("log ({lines} predictions) and analysis JSON byte-identical at 1 and 4 threads"))
}

fn planted_recovery() -> Check {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = root.path();
    let threads = available_threads();
    pipeline(dir, "400", &threads, false, &["--reps", "100", "--horizons", "1", "--lr", "0.5"])?;
    let json = |n: &str| -> Result<serde_json::Value, String> {
        serde_json::from_slice(&fs::read(dir.join(n)).map_err(|e| e.to_string())?).map_err(|e| e.to_string())
    };
    let manifest = json("data/manifest.json")?;
    let report = json("analysis.json")?;
    let planted: Vec<u64> = serde_json::from_value(manifest["planted"].clone()).map_err(|e| e.to_string())?;
    let members: Vec<u64> =
        serde_json::from_value(report["subgroup_members"].clone()).map_err(|e| e.to_string())?;
    let found = planted.iter().filter(|id| members.contains(id)).count();
    let recall = found as f64 / planted.len() as f64;
    let sub = &report["subgroup"];
    let ratio = |k: &str| sub[k]["ratio"].as_f64();
    let (readmit, readmit_30d) = (ratio("is_readmission"), ratio("readmitted_within_30d"));
    ensure(recall >= 0.7, || format!("recovered {found}/{} planted ({recall:.2})", planted.len()))?;
    ensure(readmit.is_some_and(|r| r >= 5.0), || format!("ratio_is_readmission {readmit:?}"))?;
    ensure(readmit_30d.is_some_and(|r| r >= 3.0), || format!("ratio_readmit_30d {readmit_30d:?}"))?;
    Ok(format!(
        "recovered {found}/{} planted ({:.0}%), subgroup size {}, readmission ratio {:.2}, 30-day ratio {:.2}",
        planted.len(),
        recall * 100.0,
        members.len(),
        readmit.unwrap(),
        readmit_30d.unwrap()
    ))
}

fn available_threads() -> String {
    std::thread::available_parallelism().map_or(1, |n| n.get()).to_string()
}

fn special_value(rng: &mut impl Rng) -> f32 {
    match rng.random_range(0..8) {
        0 => 0.0,
        1 => -0.0,
        2 => f32::from_bits(rng.random_range(1..0x0080_0000)),
        3 => -f32::from_bits(rng.random_range(1..0x0080_0000)),
        4 => f32::MAX,
        5 => f32::MIN_POSITIVE,
        _ => loop {
            let v = f32::from_bits(rng.random());
            if v.is_finite() {
                break v;
            }
        },
    }
}

fn store_codec() -> Check {
    let mut rng = seed::rng(0xE4E);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("fuzz.ehre");
    let mut records = 0;
    for case in 0..1000 {
        let dim = rng.random_range(1..=24u32);
        let mut store = EmbeddingStore::new(dim).map_err(|e| e.to_string())?;
        for _ in 0..rng.random_range(0..16) {
            let key = StoreKey::new(
                rng.random_range(0..1_000_000),
                NoteCategory::from_code(rng.random_range(0..5)).unwrap(),
                rng.random_range(1..=8),
            );
            if store.get(&key).is_none() {
                let v = (0..dim).map(|_| special_value(&mut rng)).collect();
                store.insert(key, v).map_err(|e| e.to_string())?;
            }
        }
        records += store.len();
        store.write(&path).map_err(|e| e.to_string())?;
        let bytes = fs::read(&path).map_err(|e| e.to_string())?;
        let back = EmbeddingStore::read(&path).map_err(|e| e.to_string())?;
        ensure(back.encode() == bytes, || format!("case {case}: re-encoding differs"))?;
        let bits = |s: &EmbeddingStore| {
            s.iter()
                .map(|(k, v)| (*k, v.iter().map(|x| x.to_bits()).collect::<Vec<_>>()))
                .collect::<Vec<_>>()
        };
        ensure(bits(&back) == bits(&store), || format!("case {case}: values not bit-exact"))?;
    }
    EmbeddingStore::new(4).unwrap().write(&path).map_err(|e| e.to_string())?;
    let len = fs::metadata(&path).map_err(|e| e.to_string())?.len();
    ensure(len == 20, || format!("header-only store is {len} bytes"))?;
    Ok(format!("1000 fuzzed stores ({records} records) bit-exact; header-only file 20 bytes"))
}

fn metrics_vs_table() -> Check {
    let acc = |cells| metrics(&ConfusionMatrix::from_cells(cells)).accuracy.unwrap();
    let day1 = acc([13394, 1032, 16206, 3468]);
    let day8 = acc([12692, 1009, 16908, 3491]);
    ensure((day1 - 0.49448).abs() <= 5e-5, || format!("day 1 accuracy {day1:.6}"))?;
    ensure((day8 - 0.47458).abs() <= 5e-5, || format!("day 8 accuracy {day8:.6}"))?;
    Ok(format!("day 1 accuracy {day1:.5}, day 8 accuracy {day8:.5}"))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("accounting invariant", accounting_invariant),
        ("forward-fill laws", forward_fill_laws),
        ("gradient correctness", gradient_correctness),
        ("convex training oracle", convex_training),
        ("determinism across thread counts", determinism),
        ("planted-confounder recovery", planted_recovery),
        ("store codec", store_codec),
        ("metrics arithmetic", metrics_vs_table),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let outcome = check();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail} ({secs:.1}s)"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail} ({secs:.1}s)");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
