//! Repeated-holdout protocol: one uniform test split per repetition shared by
//! every horizon, 1:1 class balancing of the training side, one head per
//! horizon, and aggregation of all test predictions into confusion matrices.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bucketing::{BucketGrid, CATEGORY_COUNT};
use crate::error::{Error, Result};
use crate::head::{self, Batch, TrainConfig};
use crate::store::{assemble_features, EmbeddingStore};
use crate::{seed, Outcome};

pub const DECISION_THRESHOLD: f64 = 0.5;
/// Added to the repetition seed each time a split leaves a class out of training.
const REDRAW_OFFSET: u64 = 0x5EED_0FF5;
const MAX_REDRAWS: u32 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceMode {
    UndersampleMajority,
    OversampleMinority,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub repetitions: u32,
    pub test_fraction: f64,
    pub horizons: Vec<u8>,
    pub balance: BalanceMode,
    pub train: TrainConfig,
    pub master_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            repetitions: 100,
            test_fraction: 0.25,
            horizons: (1..=8).collect(),
            balance: BalanceMode::UndersampleMajority,
            train: TrainConfig::default(),
            master_seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self, max_horizon: u8) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be at least 1".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!(
                "test fraction must lie in (0, 1), got {}",
                self.test_fraction
            )));
        }
        if self.horizons.is_empty() {
            return Err(Error::Config("no horizons requested".into()));
        }
        if let Some(h) = self.horizons.iter().find(|&&h| h == 0 || h > max_horizon) {
            return Err(Error::Config(format!("horizon {h} outside 1..={max_horizon}")));
        }
        self.train.validate()
    }
}

/// One cohort member's label and its feature vector at the largest horizon.
/// Shorter horizons use a prefix.
#[derive(Debug, Clone)]
pub struct Sample {
    pub hadm_id: u64,
    pub label: Outcome,
    pub features: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub max_horizon: u8,
    /// Feature components contributed by one day (`5 × dim`).
    pub day_width: usize,
}

impl Dataset {
    /// Sorts samples by `hadm_id` and checks every feature vector has the full width.
    pub fn new(mut samples: Vec<Sample>, max_horizon: u8, day_width: usize) -> Result<Self> {
        samples.sort_by_key(|s| s.hadm_id);
        if let Some(w) = samples.windows(2).find(|w| w[0].hadm_id == w[1].hadm_id) {
            return Err(Error::Config(format!("duplicate hadm_id {} in dataset", w[0].hadm_id)));
        }
        let width = max_horizon as usize * day_width;
        if let Some(s) = samples.iter().find(|s| s.features.len() != width) {
            return Err(Error::DimensionMismatch {
                expected: width,
                actual: s.features.len(),
            });
        }
        Ok(Dataset {
            samples,
            max_horizon,
            day_width,
        })
    }

    /// Assembles features from filled grids and an embedding store.
    pub fn assemble(
        members: &[(u64, Outcome)],
        grids: &[BucketGrid],
        store: &EmbeddingStore,
        max_horizon: u8,
    ) -> Result<Self> {
        let by_id: HashMap<u64, &BucketGrid> = grids.iter().map(|g| (g.hadm_id, g)).collect();
        let samples = members
            .par_iter()
            .map(|&(hadm_id, label)| {
                let grid = by_id.get(&hadm_id).ok_or_else(|| {
                    Error::InvalidGrid(format!("no bucket grid for cohort member {hadm_id}"))
                })?;
                Ok(Sample {
                    hadm_id,
                    label,
                    features: assemble_features(grid, store, max_horizon)?.values,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(samples, max_horizon, CATEGORY_COUNT * store.dim())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn features(&self, i: usize, horizon: u8) -> &[f32] {
        &self.samples[i].features[..horizon as usize * self.day_width]
    }
}

/// `ceil(fraction × n)`, tolerant of representation error in the product.
pub fn test_size(n: usize, test_fraction: f64) -> usize {
    let raw = test_fraction * n as f64;
    let rounded = raw.round();
    if (raw - rounded).abs() < 1e-9 {
        rounded as usize
    } else {
        raw.ceil() as usize
    }
}

/// Uniform split without replacement. Returns sorted (train, test) index sets.
pub fn split(n: usize, test_fraction: f64, rep_seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n == 0 {
        return Err(Error::InvalidSplit("empty cohort".into()));
    }
    let k = test_size(n, test_fraction);
    if k == 0 || k >= n {
        return Err(Error::InvalidSplit(format!(
            "test size {k} of {n} leaves one side empty"
        )));
    }
    let mut rng = seed::rng(rep_seed);
    let mut test = index::sample(&mut rng, n, k).into_vec();
    test.sort_unstable();
    let mut in_test = vec![false; n];
    test.iter().for_each(|&i| in_test[i] = true);
    let train = (0..n).filter(|&i| !in_test[i]).collect();
    Ok((train, test))
}

/// Equalizes class counts in `train` (indices into `labels`). Output is sorted.
pub fn balance_train(
    train: &[usize],
    labels: &[Outcome],
    rep_seed: u64,
    mode: BalanceMode,
) -> Result<Vec<usize>> {
    let (deaths, survivors): (Vec<usize>, Vec<usize>) =
        train.iter().partition(|&&i| labels[i] == Outcome::Death);
    if deaths.is_empty() || survivors.is_empty() {
        return Err(Error::InvalidSplit("a class is absent from the training split".into()));
    }
    let (minority, majority) = if deaths.len() <= survivors.len() {
        (deaths, survivors)
    } else {
        (survivors, deaths)
    };
    let mut rng = seed::rng(seed::mix(rep_seed, 0x0BA1_A4CE));
    let mut out = match mode {
        BalanceMode::UndersampleMajority => {
            let mut kept: Vec<usize> = index::sample(&mut rng, majority.len(), minority.len())
                .into_iter()
                .map(|i| majority[i])
                .collect();
            kept.extend_from_slice(&minority);
            kept
        }
        BalanceMode::OversampleMinority => {
            let mut kept = majority.clone();
            kept.extend_from_slice(&minority);
            let extra = majority.len() - minority.len();
            kept.extend((0..extra).map(|_| minority[rng.random_range(0..minority.len())]));
            kept
        }
    };
    out.sort_unstable();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub repetition: u32,
    pub horizon: u8,
    pub hadm_id: u64,
    pub true_label: Outcome,
    pub p_death: f64,
    pub predicted_label: Outcome,
}

/// A repetition's split after any redraws.
#[derive(Debug, Clone)]
pub struct RepetitionSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub redraws: u32,
}

/// Draws the repetition's split, redrawing with an offset seed while a class is
/// missing from training.
pub fn draw_split(dataset: &Dataset, test_fraction: f64, rep_seed: u64) -> Result<RepetitionSplit> {
    let labels: Vec<Outcome> = dataset.samples.iter().map(|s| s.label).collect();
    for redraws in 0..MAX_REDRAWS {
        let s = rep_seed.wrapping_add(u64::from(redraws).wrapping_mul(REDRAW_OFFSET));
        let (train, test) = split(dataset.len(), test_fraction, s)?;
        let has = |o: Outcome| train.iter().any(|&i| labels[i] == o);
        if has(Outcome::Death) && has(Outcome::Survival) {
            return Ok(RepetitionSplit {
                train,
                test,
                redraws,
            });
        }
    }
    Err(Error::InvalidSplit(
        "could not draw a training split containing both classes".into(),
    ))
}

/// Trains one head per horizon on a shared split and predicts every test member.
pub fn run_repetition(rep_id: u32, dataset: &Dataset, config: &ExperimentConfig) -> Result<Vec<PredictionRecord>> {
    let rep_seed = seed::repetition_seed(config.master_seed, rep_id);
    let split = draw_split(dataset, config.test_fraction, rep_seed)?;
    let labels: Vec<Outcome> = dataset.samples.iter().map(|s| s.label).collect();

    let mut records = Vec::with_capacity(config.horizons.len() * split.test.len());
    for &horizon in &config.horizons {
        let balanced = balance_train(
            &split.train,
            &labels,
            seed::mix(rep_seed, u64::from(horizon)),
            config.balance,
        )?;
        let xs: Vec<&[f32]> = balanced.iter().map(|&i| dataset.features(i, horizon)).collect();
        let ys: Vec<f64> = balanced.iter().map(|&i| labels[i].target()).collect();
        let width = horizon as usize * dataset.day_width;
        let init = head::init_head(
            width,
            config.train.init,
            seed::head_seed(config.master_seed, rep_id, horizon),
        );
        let trained = head::train(init, Batch::new(&xs, &ys), &config.train)?;
        for &i in &split.test {
            let (predicted_label, p_death) = trained
                .head
                .predict(dataset.features(i, horizon), DECISION_THRESHOLD)?;
            records.push(PredictionRecord {
                repetition: rep_id,
                horizon,
                hadm_id: dataset.samples[i].hadm_id,
                true_label: labels[i],
                p_death,
                predicted_label,
            });
        }
    }
    Ok(records)
}

/// Runs every repetition on the current rayon pool. The returned log is sorted by
/// (repetition, horizon, hadm_id) and does not depend on thread count.
pub fn run_experiment(dataset: &Dataset, config: &ExperimentConfig) -> Result<Vec<PredictionRecord>> {
    config.validate(dataset.max_horizon)?;
    let per_rep: Vec<Vec<PredictionRecord>> = (0..config.repetitions)
        .into_par_iter()
        .map(|rep| run_repetition(rep, dataset, config))
        .collect::<Result<_>>()?;
    let mut log: Vec<PredictionRecord> = per_rep.into_iter().flatten().collect();
    log.sort_by_key(|r| (r.repetition, r.horizon, r.hadm_id));
    Ok(log)
}

pub const LOG_HEADER: &str = "rep,horizon,hadm_id,true_label,p_death,pred_label";

/// Nine significant digits in scientific notation.
pub fn format_probability(p: f64) -> String {
    format!("{p:.8e}")
}

pub fn write_log<W: Write>(log: &[PredictionRecord], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{LOG_HEADER}")?;
    for r in log {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.repetition,
            r.horizon,
            r.hadm_id,
            r.true_label,
            format_probability(r.p_death),
            r.predicted_label
        )?;
    }
    Ok(())
}

pub fn read_log(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == LOG_HEADER => {}
        _ => {
            return Err(Error::InvalidRow {
                path: path.to_path_buf(),
                row: 1,
                message: format!("expected header `{LOG_HEADER}`"),
            })
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let row = i as u64 + 1;
        let bad = |what: &str| Error::InvalidRow {
            path: path.to_path_buf(),
            row,
            message: format!("bad {what} in `{line}`"),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad("field count"));
        }
        let p_death: f64 = f[4].parse().map_err(|_| bad("p_death"))?;
        let predicted_label = Outcome::parse(f[5]).ok_or_else(|| bad("pred_label"))?;
        // Nine-digit rounding can move a probability onto the threshold.
        if head::classify(p_death, DECISION_THRESHOLD) != predicted_label
            && (p_death - DECISION_THRESHOLD).abs() > 1e-8
        {
            return Err(bad("pred_label (inconsistent with p_death)"));
        }
        out.push(PredictionRecord {
            repetition: f[0].parse().map_err(|_| bad("rep"))?,
            horizon: f[1].parse().map_err(|_| bad("horizon"))?,
            hadm_id: f[2].parse().map_err(|_| bad("hadm_id"))?,
            true_label: Outcome::parse(f[3]).ok_or_else(|| bad("true_label"))?,
            p_death,
            predicted_label,
        });
    }
    Ok(out)
}

/// Counts indexed by (predicted, true).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub pred_survival_true_survival: u64,
    pub pred_survival_true_death: u64,
    pub pred_death_true_survival: u64,
    pub pred_death_true_death: u64,
}

impl ConfusionMatrix {
    /// Cells in (pred S/true S, pred S/true D, pred D/true S, pred D/true D) order.
    pub fn from_cells(cells: [u64; 4]) -> Self {
        ConfusionMatrix {
            pred_survival_true_survival: cells[0],
            pred_survival_true_death: cells[1],
            pred_death_true_survival: cells[2],
            pred_death_true_death: cells[3],
        }
    }

    pub fn cells(&self) -> [u64; 4] {
        [
            self.pred_survival_true_survival,
            self.pred_survival_true_death,
            self.pred_death_true_survival,
            self.pred_death_true_death,
        ]
    }

    pub fn add(&mut self, predicted: Outcome, truth: Outcome) {
        let cell = match (predicted, truth) {
            (Outcome::Survival, Outcome::Survival) => &mut self.pred_survival_true_survival,
            (Outcome::Survival, Outcome::Death) => &mut self.pred_survival_true_death,
            (Outcome::Death, Outcome::Survival) => &mut self.pred_death_true_survival,
            (Outcome::Death, Outcome::Death) => &mut self.pred_death_true_death,
        };
        *cell += 1;
    }

    pub fn total(&self) -> u64 {
        self.cells().iter().sum()
    }

    pub fn true_survival(&self) -> u64 {
        self.pred_survival_true_survival + self.pred_death_true_survival
    }

    pub fn true_death(&self) -> u64 {
        self.pred_survival_true_death + self.pred_death_true_death
    }
}

pub fn aggregate(log: &[PredictionRecord], horizon: u8) -> ConfusionMatrix {
    let mut cm = ConfusionMatrix::default();
    for r in log.iter().filter(|r| r.horizon == horizon) {
        cm.add(r.predicted_label, r.true_label);
    }
    cm
}

/// Ratios with death as the positive class; `None` where the denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn metrics(cm: &ConfusionMatrix) -> Metrics {
    let tp = cm.pred_death_true_death;
    let tn = cm.pred_survival_true_survival;
    Metrics {
        accuracy: ratio(tp + tn, cm.total()),
        sensitivity: ratio(tp, cm.true_death()),
        specificity: ratio(tn, cm.true_survival()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonReport {
    pub horizon: u8,
    pub confusion: ConfusionMatrix,
    pub total: u64,
    pub metrics: Metrics,
}

/// Confusion matrix and metrics for every horizon present in the log.
pub fn confusion_report(log: &[PredictionRecord]) -> Vec<HorizonReport> {
    let horizons: BTreeMap<u8, ()> = log.iter().map(|r| (r.horizon, ())).collect();
    horizons
        .keys()
        .map(|&h| {
            let cm = aggregate(log, h);
            HorizonReport {
                horizon: h,
                confusion: cm,
                total: cm.total(),
                metrics: metrics(&cm),
            }
        })
        .collect()
}
