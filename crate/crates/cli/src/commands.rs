use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use failprobe::analysis::{self, AnalysisConfig};
use failprobe::bucketing::{self, build_filled_grids, BucketGrid, NoteCategory};
use failprobe::cohort::{self, Cohort};
use failprobe::harness::{self, Dataset, ExperimentConfig};
use failprobe::head::TrainConfig;
use failprobe::store::{self, EmbeddingStore, StoreKey};
use failprobe::synth::{self, SynthConfig};
use failprobe::{Outcome, Result as CoreResult};
use serde::Serialize;

use crate::config::{self, or_default, required, CutoffValue, RunConfig};
use crate::{AnalyzeArgs, BucketsArgs, CohortArgs, EmbedStubArgs, Failure, ReportArgs, SynthArgs, TrainArgs};

type Result<T> = std::result::Result<T, Failure>;

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::validation(format!("{}: {e}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| io_failure(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)
        .map_err(|e| Failure::validation(format!("{}: {e}", path.display())))?;
    w.write_all(b"\n")
        .and_then(|_| w.flush())
        .map_err(|e| io_failure(path, e))
}

fn default_provenance(buckets: &Path) -> PathBuf {
    buckets.with_extension("provenance.json")
}

pub fn cohort(a: &CohortArgs, f: &RunConfig) -> Result<()> {
    let admissions = required(&a.admissions, &f.admissions, "admissions")?;
    let diagnoses = required(&a.diagnoses, &f.diagnoses, "diagnoses")?;
    let out = required(&a.out, &f.out, "out")?;
    let icd = or_default(&a.icd, &f.icd, synth::INDEX_ICD.to_string());
    let cutoff = a
        .cutoff
        .clone()
        .map(CutoffValue::Named)
        .or_else(|| f.cutoff.clone())
        .unwrap_or_else(|| CutoffValue::Named("median".into()));
    let cutoff = config::parse_cutoff(&cutoff)?;

    let table = cohort::load_admissions(&admissions, &diagnoses)?;
    let selected = cohort::select_cohort(&table, &icd, cutoff)?;
    selected.write_json(&out)?;
    println!(
        "cohort: {} members (survival {}, death {}); LOS cutoff {:.3} days over {} admissions with ICD {}",
        selected.len(),
        selected.survival_count,
        selected.death_count,
        selected.cutoff_days,
        selected.icd_matched,
        icd
    );
    Ok(())
}

pub fn buckets(a: &BucketsArgs, f: &RunConfig) -> Result<()> {
    let notes_path = required(&a.notes, &f.notes, "notes")?;
    let cohort_path = required(&a.cohort, &f.cohort, "cohort")?;
    let out = required(&a.out, &f.out, "out")?;
    let provenance = a
        .provenance
        .clone()
        .or_else(|| f.provenance.clone())
        .unwrap_or_else(|| default_provenance(&out));
    let days = or_default(&a.days, &f.days, bucketing::DEFAULT_HORIZON);
    if days == 0 {
        return Err(Failure::usage("--days must be at least 1"));
    }

    let cohort = Cohort::read_json(&cohort_path)?;
    let loaded = bucketing::load_notes(&notes_path)?;
    let build = build_filled_grids(cohort.members.iter().map(|m| &m.admission), &loaded.notes, days)?;

    let mut w = create(&out)?;
    let lines = bucketing::export_buckets(&build.grids, &mut w).map_err(|e| io_failure(&out, e))?;
    w.flush().map_err(|e| io_failure(&out, e))?;
    let prov: Vec<_> = build.grids.iter().map(BucketGrid::provenance).collect();
    write_json(&provenance, &prov)?;

    println!(
        "buckets: {lines} original buckets from {} admissions over {days} days",
        build.grids.len()
    );
    println!(
        "dropped notes: {} out of window, {} unknown category, {} blank, {} outside the cohort",
        build.out_of_window, loaded.unknown_category, loaded.blank_text, build.unmatched_notes
    );
    Ok(())
}

pub fn embed_stub(a: &EmbedStubArgs, f: &RunConfig) -> Result<()> {
    let buckets = required(&a.buckets, &f.buckets, "buckets")?;
    let out = required(&a.out, &f.out, "out")?;
    let dim = or_default(&a.dim, &f.dim, store::DEFAULT_DIM);
    let seed = or_default(&a.seed, &f.seed, 0);
    if dim == 0 {
        return Err(Failure::usage("--dim must be at least 1"));
    }

    let records = bucketing::read_bucket_records(&buckets)?;
    let mut store = EmbeddingStore::new(dim)?;
    for r in &records {
        store.insert(
            StoreKey::new(r.hadm_id, r.category, r.day),
            store::stub_embed(&r.text, dim as usize, seed),
        )?;
    }
    store.write(&out)?;
    println!("embed-stub: {} vectors of dim {dim} written to {}", store.len(), out.display());
    Ok(())
}

fn load_inputs(
    cohort: &Path,
    buckets: &Path,
    provenance: &Path,
    store: &Path,
) -> CoreResult<(Cohort, Vec<BucketGrid>, EmbeddingStore)> {
    Ok((
        Cohort::read_json(cohort)?,
        bucketing::load_grids(buckets, provenance)?,
        EmbeddingStore::read(store)?,
    ))
}

fn grid_horizon(grids: &[BucketGrid]) -> Result<u8> {
    let mut hs = grids.iter().map(|g| g.horizon);
    let first = hs.next().unwrap_or(bucketing::DEFAULT_HORIZON);
    if hs.any(|h| h != first) {
        return Err(Failure::validation("bucket grids disagree on horizon"));
    }
    Ok(first)
}

pub fn train(a: &TrainArgs, f: &RunConfig) -> Result<()> {
    let cohort_path = required(&a.cohort, &f.cohort, "cohort")?;
    let buckets = required(&a.buckets, &f.buckets, "buckets")?;
    let provenance = a
        .provenance
        .clone()
        .or_else(|| f.provenance.clone())
        .unwrap_or_else(|| default_provenance(&buckets));
    let store_path = required(&a.store, &f.store, "store")?;
    let out = required(&a.out, &f.out, "out")?;

    let defaults = ExperimentConfig::default();
    let train_defaults = TrainConfig::default();
    let horizons = match a.horizons.clone().or_else(|| f.horizons.clone()) {
        Some(s) => config::parse_horizons(&s)?,
        None => defaults.horizons.clone(),
    };
    let balance = match a.balance.clone().or_else(|| f.balance.clone()) {
        Some(s) => config::parse_balance(&s)?,
        None => defaults.balance,
    };
    let init = match a.init.clone().or_else(|| f.init.clone()) {
        Some(s) => config::parse_init(&s)?,
        None => train_defaults.init,
    };
    let master_seed = or_default(&a.seed, &f.seed, 0);
    let experiment = ExperimentConfig {
        repetitions: or_default(&a.reps, &f.reps, defaults.repetitions),
        test_fraction: or_default(&a.test_frac, &f.test_frac, defaults.test_fraction),
        horizons,
        balance,
        train: TrainConfig {
            epochs: or_default(&a.epochs, &f.epochs, train_defaults.epochs),
            learning_rate: or_default(&a.lr, &f.lr, train_defaults.learning_rate),
            init,
            seed: master_seed,
        },
        master_seed,
    };

    let (cohort, grids, store) = load_inputs(&cohort_path, &buckets, &provenance, &store_path)?;
    let grid_h = grid_horizon(&grids)?;
    let max_h = *experiment.horizons.iter().max().expect("non-empty horizons");
    if max_h > grid_h {
        return Err(Failure::usage(format!(
            "horizon {max_h} exceeds the {grid_h}-day bucket grids"
        )));
    }
    experiment.validate(max_h).map_err(|e| Failure::usage(e.to_string()))?;
    let members: Vec<(u64, Outcome)> = cohort
        .members
        .iter()
        .map(|m| (m.admission.hadm_id, m.label))
        .collect();
    let dataset = Dataset::assemble(&members, &grids, &store, max_h)?;
    let log = harness::run_experiment(&dataset, &experiment)?;

    let mut w = create(&out)?;
    harness::write_log(&log, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| io_failure(&out, e))?;
    println!(
        "train: {} repetitions × {} horizons over {} members -> {} predictions",
        experiment.repetitions,
        experiment.horizons.len(),
        dataset.len(),
        log.len()
    );
    Ok(())
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into())
}

pub fn report(a: &ReportArgs, f: &RunConfig) -> Result<()> {
    let log_path = required(&a.log, &f.log, "log")?;
    let out = required(&a.out, &f.out, "out")?;
    let log = harness::read_log(&log_path)?;
    if log.is_empty() {
        return Err(Failure::validation(format!("{}: no predictions", log_path.display())));
    }
    let report = harness::confusion_report(&log);
    write_json(&out, &report)?;
    println!("horizon  S|S      S|D      D|S      D|D      total    acc     sens    spec");
    for h in &report {
        let c = h.confusion.cells();
        println!(
            "{:<8} {:<8} {:<8} {:<8} {:<8} {:<8} {:<7} {:<7} {}",
            h.horizon,
            c[0],
            c[1],
            c[2],
            c[3],
            h.total,
            fmt_metric(h.metrics.accuracy),
            fmt_metric(h.metrics.sensitivity),
            fmt_metric(h.metrics.specificity)
        );
    }
    Ok(())
}

pub fn analyze(a: &AnalyzeArgs, f: &RunConfig) -> Result<()> {
    let log_path = required(&a.log, &f.log, "log")?;
    let cohort_path = required(&a.cohort, &f.cohort, "cohort")?;
    let buckets = required(&a.buckets, &f.buckets, "buckets")?;
    let provenance = a
        .provenance
        .clone()
        .or_else(|| f.provenance.clone())
        .unwrap_or_else(|| default_provenance(&buckets));
    let store_path = required(&a.store, &f.store, "store")?;
    let out = required(&a.out, &f.out, "out")?;
    let hist_csv = a.hist_csv.clone().or_else(|| f.hist_csv.clone());

    let defaults = AnalysisConfig::default();
    let cfg = AnalysisConfig {
        horizon: or_default(&a.horizon, &f.horizon, defaults.horizon),
        class: Outcome::Survival,
        max_rate: or_default(&a.threshold, &f.threshold, defaults.max_rate),
        min_appearances: or_default(&a.min_appearances, &f.min_appearances, defaults.min_appearances),
        phase_split: or_default(&a.phase_split, &f.phase_split, defaults.phase_split),
    };
    if !(0.0..=1.0).contains(&cfg.max_rate) {
        return Err(Failure::usage("--threshold must lie in [0, 1]"));
    }

    let log = harness::read_log(&log_path)?;
    let (cohort, grids, store) = load_inputs(&cohort_path, &buckets, &provenance, &store_path)?;
    let report = analysis::analyze(&log, &cohort.members, &grids, &store, &cfg)?;
    write_json(&out, &report)?;

    if let Some(path) = &hist_csv {
        let at = report
            .histograms
            .iter()
            .find(|h| h.horizon == cfg.horizon)
            .expect("analysis horizon present in log");
        let hs: Vec<_> = [&at.survival, &at.death].into_iter().flatten().collect();
        let mut w = create(path)?;
        analysis::write_histogram_csv(&hs, &mut w)
            .and_then(|_| w.flush())
            .map_err(|e| io_failure(path, e))?;
    }

    println!(
        "analyze: horizon {}, {} of {} survivors in the failure subgroup (correct rate < {}, >= {} appearances)",
        cfg.horizon,
        report.subgroup_members.len(),
        cohort.survival_count,
        cfg.max_rate,
        cfg.min_appearances
    );
    if let Some(s) = &report.subgroup {
        println!(
            "ratios vs rest of cohort: readmission {}, 30-day readmission {}, future readmissions {}, LOS {}",
            fmt_metric(s.ratios.ratio_is_readmission()),
            fmt_metric(s.ratios.ratio_readmit_30d()),
            fmt_metric(s.ratios.ratio_future_readmissions()),
            fmt_metric(s.ratios.ratio_los())
        );
        let nursing: HashMap<_, _> = s
            .ratios
            .note_counts
            .iter()
            .filter(|n| n.category == NoteCategory::Nursing)
            .map(|n| (n.phase, n.means.ratio))
            .collect();
        for d in &s.nursing_distinctness {
            println!(
                "nursing {:?}: notes ratio {}, distance to survivor centroid {} vs {}",
                d.phase,
                fmt_metric(nursing.get(&d.phase).copied().flatten()),
                fmt_metric(d.subgroup_mean_distance),
                fmt_metric(d.complement_mean_distance)
            );
        }
    }
    Ok(())
}

pub fn synthbench(a: &SynthArgs, f: &RunConfig) -> Result<()> {
    let out_dir = required(&a.out_dir, &f.out_dir, "out-dir")?;
    let d = SynthConfig::default();
    let config = SynthConfig {
        admissions: or_default(&a.size, &f.size, d.admissions),
        death_fraction: or_default(&a.death_frac, &f.death_frac, d.death_fraction),
        planted_fraction: or_default(&a.planted_frac, &f.planted_frac, d.planted_fraction),
        dim: or_default(&a.dim, &f.dim, d.dim),
        horizon: or_default(&a.days, &f.days, d.horizon),
        seed: or_default(&a.seed, &f.seed, d.seed),
        noise: or_default(&a.noise, &f.noise, d.noise),
        ..d
    };
    config.validate().map_err(|e| Failure::usage(e.to_string()))?;
    std::fs::create_dir_all(&out_dir).map_err(|e| io_failure(&out_dir, e))?;
    let data = synth::generate(&config)?;
    data.write_to_dir(&out_dir)?;
    println!(
        "synthbench: {} cohort admissions ({} deaths, {} planted survivors), {} notes, {} vectors -> {}",
        data.manifest.cohort_size,
        data.manifest.deaths,
        data.manifest.planted.len(),
        data.notes.len(),
        data.store.len(),
        out_dir.display()
    );
    Ok(())
}
