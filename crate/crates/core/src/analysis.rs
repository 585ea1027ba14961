//! Failure analysis over a prediction log: per-admission correctness profiles,
//! class-conditional histograms of correct-prediction rate, extraction of the
//! persistently misclassified subgroup, and confounder statistics comparing it
//! with the rest of the cohort.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::bucketing::{BucketGrid, Fill, NoteCategory, CATEGORY_COUNT};
use crate::cohort::CohortMember;
use crate::error::{Error, Result};
use crate::harness::PredictionRecord;
use crate::store::{EmbeddingStore, StoreKey};
use crate::Outcome;

pub const BIN_COUNT: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientProfile {
    pub hadm_id: u64,
    pub true_label: Outcome,
    pub appearances: u32,
    pub correct: u32,
    pub correct_rate: f64,
    pub mean_p_death: f64,
}

impl PatientProfile {
    /// Decile bin of the correct rate, computed exactly from the counts.
    /// The last bin is closed at 1.0.
    pub fn bin(&self) -> usize {
        ((self.correct as usize * BIN_COUNT) / self.appearances as usize).min(BIN_COUNT - 1)
    }
}

/// Profiles of every admission that appears at `horizon`, sorted by `hadm_id`.
pub fn build_profiles(log: &[PredictionRecord], horizon: u8) -> Vec<PatientProfile> {
    let mut acc: BTreeMap<u64, (Outcome, u32, u32, f64)> = BTreeMap::new();
    for r in log.iter().filter(|r| r.horizon == horizon) {
        let e = acc.entry(r.hadm_id).or_insert((r.true_label, 0, 0, 0.0));
        e.1 += 1;
        e.2 += u32::from(r.predicted_label == r.true_label);
        e.3 += r.p_death;
    }
    acc.into_iter()
        .map(|(hadm_id, (true_label, appearances, correct, p_sum))| PatientProfile {
            hadm_id,
            true_label,
            appearances,
            correct,
            correct_rate: f64::from(correct) / f64::from(appearances),
            mean_p_death: p_sum / f64::from(appearances),
        })
        .collect()
}

/// Roster members with no profile (never drawn into a test set).
pub fn never_tested(profiles: &[PatientProfile], roster: impl IntoIterator<Item = u64>) -> Vec<u64> {
    let seen: BTreeSet<u64> = profiles.iter().map(|p| p.hadm_id).collect();
    let mut out: Vec<u64> = roster.into_iter().filter(|id| !seen.contains(id)).collect();
    out.sort_unstable();
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassHistogram {
    pub class: Outcome,
    pub total: u64,
    pub counts: [u64; BIN_COUNT],
    /// Percent of the class in each bin `[k/10, (k+1)/10)`; the last bin includes 1.0.
    pub bin_percent: [f64; BIN_COUNT],
}

impl ClassHistogram {
    pub fn bin_bounds(k: usize) -> (f64, f64) {
        (k as f64 / BIN_COUNT as f64, (k + 1) as f64 / BIN_COUNT as f64)
    }
}

pub fn histogram(profiles: &[PatientProfile], class: Outcome) -> Result<ClassHistogram> {
    let mut counts = [0u64; BIN_COUNT];
    for p in profiles.iter().filter(|p| p.true_label == class && p.appearances > 0) {
        counts[p.bin()] += 1;
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::Analysis(format!("no tested {class} admissions")));
    }
    let bin_percent = counts.map(|c| c as f64 * 100.0 / total as f64);
    Ok(ClassHistogram {
        class,
        total,
        counts,
        bin_percent,
    })
}

/// Admissions of `class` tested at least `min_appearances` times whose correct
/// rate is strictly below `max_rate`. Sorted by `hadm_id`.
pub fn failure_subgroup(
    profiles: &[PatientProfile],
    class: Outcome,
    max_rate: f64,
    min_appearances: u32,
) -> Vec<u64> {
    profiles
        .iter()
        .filter(|p| p.true_label == class && p.appearances >= min_appearances && p.correct_rate < max_rate)
        .map(|p| p.hadm_id)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Early,
    Late,
}

impl Phase {
    pub const ALL: [Phase; 2] = [Phase::Early, Phase::Late];

    /// Early covers days `1..=split`; late covers the rest of the horizon.
    pub fn of_day(day: u8, split: u8) -> Phase {
        if day <= split {
            Phase::Early
        } else {
            Phase::Late
        }
    }
}

/// Per-admission quantities compared between the subgroup and its complement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberStats {
    pub hadm_id: u64,
    pub is_readmission: bool,
    pub future_readmissions: u32,
    pub readmitted_within_30d: bool,
    pub los_days: f64,
    /// Notes placed in the grid, indexed `[category][phase]`.
    pub note_counts: [[u32; 2]; CATEGORY_COUNT],
}

impl MemberStats {
    pub fn new(member: &CohortMember, grid: Option<&BucketGrid>, phase_split: u8) -> Self {
        let mut note_counts = [[0u32; 2]; CATEGORY_COUNT];
        if let Some(grid) = grid {
            for (category, day, cell) in grid.iter() {
                note_counts[category as usize][Phase::of_day(day, phase_split) as usize] += cell.note_count;
            }
        }
        MemberStats {
            hadm_id: member.admission.hadm_id,
            is_readmission: member.readmission.is_readmission,
            future_readmissions: member.readmission.future_readmission_count,
            readmitted_within_30d: member.readmission.readmitted_within_30d,
            los_days: member.los_days,
            note_counts,
        }
    }
}

/// `a / b`, undefined (serialized as null) when `b` is zero.
pub fn guarded_ratio(a: f64, b: f64) -> Option<f64> {
    (b != 0.0).then(|| a / b)
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub subgroup: f64,
    pub complement: f64,
    pub ratio: Option<f64>,
}

impl Comparison {
    fn of(subgroup: f64, complement: f64) -> Self {
        Comparison {
            subgroup,
            complement,
            ratio: guarded_ratio(subgroup, complement),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoteCountComparison {
    pub category: NoteCategory,
    pub phase: Phase,
    #[serde(flatten)]
    pub means: Comparison,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfounderRatios {
    pub subgroup_size: usize,
    pub complement_size: usize,
    pub is_readmission: Comparison,
    pub future_readmissions: Comparison,
    pub readmitted_within_30d: Comparison,
    pub los_days: Comparison,
    pub note_counts: Vec<NoteCountComparison>,
}

impl ConfounderRatios {
    pub fn ratio_is_readmission(&self) -> Option<f64> {
        self.is_readmission.ratio
    }

    pub fn ratio_readmit_30d(&self) -> Option<f64> {
        self.readmitted_within_30d.ratio
    }

    pub fn ratio_future_readmissions(&self) -> Option<f64> {
        self.future_readmissions.ratio
    }

    pub fn ratio_los(&self) -> Option<f64> {
        self.los_days.ratio
    }
}

/// Subgroup-over-complement ratios of readmission rates, mean future
/// readmissions, mean LOS and mean note counts per category and phase.
pub fn subgroup_ratios(subgroup: &[&MemberStats], complement: &[&MemberStats]) -> Result<ConfounderRatios> {
    if subgroup.is_empty() {
        return Err(Error::Analysis("empty subgroup".into()));
    }
    if complement.is_empty() {
        return Err(Error::Analysis("empty complement".into()));
    }
    let cmp = |f: &dyn Fn(&MemberStats) -> f64| {
        Comparison::of(
            mean(subgroup.iter().map(|m| f(m))),
            mean(complement.iter().map(|m| f(m))),
        )
    };
    let mut note_counts = Vec::with_capacity(CATEGORY_COUNT * 2);
    for category in NoteCategory::ALL {
        for phase in Phase::ALL {
            note_counts.push(NoteCountComparison {
                category,
                phase,
                means: cmp(&|m| f64::from(m.note_counts[category as usize][phase as usize])),
            });
        }
    }
    Ok(ConfounderRatios {
        subgroup_size: subgroup.len(),
        complement_size: complement.len(),
        is_readmission: cmp(&|m| f64::from(u8::from(m.is_readmission))),
        future_readmissions: cmp(&|m| f64::from(m.future_readmissions)),
        readmitted_within_30d: cmp(&|m| f64::from(u8::from(m.readmitted_within_30d))),
        los_days: cmp(&|m| m.los_days),
        note_counts,
    })
}

/// `1 - cos(a, b)`, clamped to `[0, 2]`. A zero vector is treated as orthogonal.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    (1.0 - dot / (na * nb)).clamp(0.0, 2.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distinctness {
    pub phase: Phase,
    pub subgroup_mean_distance: Option<f64>,
    pub complement_mean_distance: Option<f64>,
    pub subgroup_excluded: usize,
    pub complement_excluded: usize,
}

fn nursing_vectors(grid: &BucketGrid, store: &EmbeddingStore, phase: Phase, split: u8) -> Vec<Vec<f64>> {
    grid.iter()
        .filter(|(c, d, cell)| {
            *c == NoteCategory::Nursing && cell.fill == Fill::Original && Phase::of_day(*d, split) == phase
        })
        .filter_map(|(c, d, _)| store.get(&StoreKey::new(grid.hadm_id, c, d)))
        .map(|v| v.iter().map(|x| f64::from(*x)).collect())
        .collect()
}

/// Mean cosine distance of each group's Original Nursing embeddings to the
/// centroid of all survivors' Original Nursing embeddings in `phase`.
/// Admissions with no such buckets are excluded and counted.
pub fn nursing_distinctness(
    subgroup: &[u64],
    complement: &[u64],
    labels: &HashMap<u64, Outcome>,
    grids: &HashMap<u64, &BucketGrid>,
    store: &EmbeddingStore,
    phase: Phase,
    phase_split: u8,
) -> Result<Distinctness> {
    let dim = store.dim();
    let mut centroid = vec![0.0; dim];
    let mut survivor_buckets = 0usize;
    let mut any_buckets = false;
    let mut ids: Vec<&u64> = grids.keys().collect();
    ids.sort_unstable();
    for id in ids {
        let vs = nursing_vectors(grids[id], store, phase, phase_split);
        any_buckets |= !vs.is_empty();
        if labels.get(id) == Some(&Outcome::Survival) {
            for v in &vs {
                centroid.iter_mut().zip(v).for_each(|(c, x)| *c += x);
            }
            survivor_buckets += vs.len();
        }
    }
    if !any_buckets {
        return Err(Error::Analysis(format!(
            "no Original Nursing buckets in the {phase:?} phase"
        )));
    }
    if survivor_buckets == 0 {
        return Err(Error::Analysis(format!(
            "no survivor Nursing buckets in the {phase:?} phase to form a centroid"
        )));
    }
    centroid.iter_mut().for_each(|c| *c /= survivor_buckets as f64);

    let group_mean = |group: &[u64]| -> (Option<f64>, usize) {
        let mut per_admission = Vec::new();
        let mut excluded = 0;
        for id in group {
            let vs = grids
                .get(id)
                .map(|g| nursing_vectors(g, store, phase, phase_split))
                .unwrap_or_default();
            if vs.is_empty() {
                excluded += 1;
                continue;
            }
            per_admission.push(mean(vs.iter().map(|v| cosine_distance(v, &centroid))));
        }
        let m = (!per_admission.is_empty()).then(|| mean(per_admission.into_iter()));
        (m, excluded)
    };
    let (subgroup_mean_distance, subgroup_excluded) = group_mean(subgroup);
    let (complement_mean_distance, complement_excluded) = group_mean(complement);
    Ok(Distinctness {
        phase,
        subgroup_mean_distance,
        complement_mean_distance,
        subgroup_excluded,
        complement_excluded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub horizon: u8,
    pub class: Outcome,
    pub max_rate: f64,
    pub min_appearances: u32,
    pub phase_split: u8,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            horizon: 1,
            class: Outcome::Survival,
            max_rate: 0.1,
            min_appearances: 5,
            phase_split: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonHistograms {
    pub horizon: u8,
    pub survival: Option<ClassHistogram>,
    pub death: Option<ClassHistogram>,
    pub excluded_never_tested: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupReport {
    pub subgroup_fraction_of_class: f64,
    #[serde(flatten)]
    pub ratios: ConfounderRatios,
    pub nursing_distinctness: Vec<Distinctness>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub config: AnalysisConfig,
    pub histograms: Vec<HorizonHistograms>,
    pub mean_appearances: f64,
    pub excluded_never_tested: Vec<u64>,
    pub subgroup_members: Vec<u64>,
    /// `None` when the subgroup or its complement is empty.
    pub subgroup: Option<SubgroupReport>,
    pub distinctness_metric: String,
}

const DISTINCTNESS_METRIC: &str =
    "mean cosine distance of Original Nursing bucket embeddings to the survivor Nursing centroid, per stay phase";

/// The full failure analysis. The complement is every other cohort member.
pub fn analyze(
    log: &[PredictionRecord],
    members: &[CohortMember],
    grids: &[BucketGrid],
    store: &EmbeddingStore,
    config: &AnalysisConfig,
) -> Result<AnalysisReport> {
    let roster: Vec<u64> = members.iter().map(|m| m.admission.hadm_id).collect();
    let horizons: BTreeSet<u8> = log.iter().map(|r| r.horizon).collect();
    if !horizons.contains(&config.horizon) {
        return Err(Error::Analysis(format!(
            "prediction log has no records at horizon {}",
            config.horizon
        )));
    }
    let histograms = horizons
        .iter()
        .map(|&h| {
            let profiles = build_profiles(log, h);
            HorizonHistograms {
                horizon: h,
                survival: histogram(&profiles, Outcome::Survival).ok(),
                death: histogram(&profiles, Outcome::Death).ok(),
                excluded_never_tested: never_tested(&profiles, roster.iter().copied()).len(),
            }
        })
        .collect();

    let profiles = build_profiles(log, config.horizon);
    // Averaged over the whole roster, never-tested members counting as zero.
    let mean_appearances =
        profiles.iter().map(|p| f64::from(p.appearances)).sum::<f64>() / roster.len().max(1) as f64;
    let excluded_never_tested = never_tested(&profiles, roster.iter().copied());
    let subgroup_members = failure_subgroup(&profiles, config.class, config.max_rate, config.min_appearances);

    let grid_by_id: HashMap<u64, &BucketGrid> = grids.iter().map(|g| (g.hadm_id, g)).collect();
    let in_subgroup: BTreeSet<u64> = subgroup_members.iter().copied().collect();
    let stats: Vec<MemberStats> = members
        .iter()
        .map(|m| MemberStats::new(m, grid_by_id.get(&m.admission.hadm_id).copied(), config.phase_split))
        .collect();
    let (sub, comp): (Vec<&MemberStats>, Vec<&MemberStats>) =
        stats.iter().partition(|s| in_subgroup.contains(&s.hadm_id));

    let subgroup = if sub.is_empty() || comp.is_empty() {
        None
    } else {
        let labels: HashMap<u64, Outcome> = members.iter().map(|m| (m.admission.hadm_id, m.label)).collect();
        let comp_ids: Vec<u64> = comp.iter().map(|s| s.hadm_id).collect();
        let nursing_distinctness = Phase::ALL
            .iter()
            .filter_map(|&phase| {
                nursing_distinctness(
                    &subgroup_members,
                    &comp_ids,
                    &labels,
                    &grid_by_id,
                    store,
                    phase,
                    config.phase_split,
                )
                .ok()
            })
            .collect();
        let class_size = members.iter().filter(|m| m.label == config.class).count();
        Some(SubgroupReport {
            subgroup_fraction_of_class: sub.len() as f64 / class_size.max(1) as f64,
            ratios: subgroup_ratios(&sub, &comp)?,
            nursing_distinctness,
        })
    };

    Ok(AnalysisReport {
        config: config.clone(),
        histograms,
        mean_appearances,
        excluded_never_tested,
        subgroup_members,
        subgroup,
        distinctness_metric: DISTINCTNESS_METRIC.to_string(),
    })
}

pub const HISTOGRAM_CSV_HEADER: &str = "class,bin_low,bin_high,percent";

pub fn write_histogram_csv<W: Write>(histograms: &[&ClassHistogram], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{HISTOGRAM_CSV_HEADER}")?;
    for h in histograms {
        for (k, pct) in h.bin_percent.iter().enumerate() {
            let (lo, hi) = ClassHistogram::bin_bounds(k);
            writeln!(out, "{},{lo:.1},{hi:.1},{pct}", h.class)?;
        }
    }
    Ok(())
}
