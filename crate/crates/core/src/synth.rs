//! Planted-confounder dataset generator.
//!
//! Produces admissions, diagnoses and notes tables plus an EHRE store whose
//! vectors come from a class-conditional generative model. A chosen fraction of
//! survivors ("planted") carry death-like embeddings in every category, more and
//! shifted Nursing notes late in the stay, a longer stay, and inflated
//! readmission history. The manifest lists the planted admissions and the
//! realized subgroup-vs-rest ratios, so downstream analysis can be scored.
//!
//! Alongside every cohort admission the generator emits an equal number of
//! short-stay admissions with the same ICD code, so the median-LOS cutoff falls
//! strictly between the two groups and keeps exactly the generated cohort.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use chrono::{Duration, NaiveDateTime};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bucketing::{build_grid, Fill, NoteCategory, NoteRecord, CATEGORY_COUNT};
use crate::cohort::AdmissionRecord;
use crate::error::{Error, Result};
use crate::store::{EmbeddingStore, StoreKey};
use crate::{seed, timefmt};

pub const INDEX_ICD: &str = "410.71";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    /// Cohort admissions (the short-stay decoys come on top).
    pub admissions: usize,
    pub death_fraction: f64,
    /// Fraction of survivors given the death-like confounder.
    pub planted_fraction: f64,
    pub dim: u32,
    pub horizon: u8,
    pub seed: u64,
    /// Per-dimension noise added to each bucket embedding before normalization.
    pub noise: f64,
    /// Prior-admission rate among planted members and among everyone else.
    pub planted_readmission_rate: f64,
    pub base_readmission_rate: f64,
    /// 30-day readmission rate among planted members and among everyone else.
    pub planted_readmit_30d_rate: f64,
    pub base_readmit_30d_rate: f64,
    /// Mean future readmissions among planted members and among everyone else.
    pub planted_future_mean: f64,
    pub base_future_mean: f64,
    /// LOS multiplier for planted members.
    pub planted_los_factor: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            admissions: 400,
            death_fraction: 0.15,
            planted_fraction: 0.25,
            dim: 16,
            horizon: 8,
            seed: 0,
            noise: 0.25,
            planted_readmission_rate: 0.6,
            base_readmission_rate: 0.06,
            planted_readmit_30d_rate: 0.4,
            base_readmit_30d_rate: 0.05,
            planted_future_mean: 0.6,
            base_future_mean: 0.4,
            planted_los_factor: 1.35,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let frac = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")))
            }
        };
        frac("death_fraction", self.death_fraction)?;
        frac("planted_fraction", self.planted_fraction)?;
        frac("planted_readmission_rate", self.planted_readmission_rate)?;
        frac("base_readmission_rate", self.base_readmission_rate)?;
        frac("planted_readmit_30d_rate", self.planted_readmit_30d_rate)?;
        frac("base_readmit_30d_rate", self.base_readmit_30d_rate)?;
        if self.admissions < 2 {
            return Err(Error::Config("need at least 2 admissions".into()));
        }
        if self.dim == 0 {
            return Err(Error::Config("dim must be at least 1".into()));
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::Config("noise must be >= 0".into()));
        }
        if self.planted_future_mean < self.planted_readmit_30d_rate
            || self.planted_future_mean > self.planted_readmit_30d_rate + 1.0
        {
            return Err(Error::Config(
                "planted_future_mean must lie within [30d rate, 30d rate + 1]".into(),
            ));
        }
        if !(self.planted_los_factor >= 1.0 && self.planted_los_factor <= 3.0) {
            return Err(Error::Config("planted_los_factor must lie in [1, 3]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Survivor,
    Planted,
    Death,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealizedRatios {
    pub is_readmission: Option<f64>,
    pub readmit_30d: Option<f64>,
    pub future_readmissions: Option<f64>,
    pub los: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: SynthConfig,
    pub icd: String,
    pub cohort_size: usize,
    pub deaths: usize,
    pub survivors: usize,
    pub planted: Vec<u64>,
    /// Planted vs every other cohort member, as generated.
    pub realized_ratios: RealizedRatios,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    /// Every admission: cohort, decoys, prior and future stays.
    pub admissions: Vec<AdmissionRecord>,
    pub notes: Vec<NoteRecord>,
    pub store: EmbeddingStore,
    pub roles: BTreeMap<u64, Role>,
    pub manifest: Manifest,
}

const COHORT_HADM_BASE: u64 = 100_000;
const EXTRA_HADM_BASE: u64 = 900_000;
const SUBJECT_BASE: u64 = 10_000;
const DECOY_SUBJECT_BASE: u64 = 60_000;

/// Per-category probability that a day has at least one note.
const DAY_ONE_DENSITY: [f64; CATEGORY_COUNT] = [0.5, 0.85, 0.85, 0.8, 0.9];
const LATER_DENSITY: [f64; CATEGORY_COUNT] = [0.1, 0.4, 0.55, 0.35, 0.6];
/// Planted members chart more Nursing notes per late bucket, not more buckets,
/// so the survivor Nursing centroid is not dominated by them.
const PLANTED_LATE_MAX_NURSING: usize = 5;
/// Magnitude of the confounder direction added to planted Nursing embeddings.
const EARLY_SHIFT: f64 = 0.6;
const LATE_SHIFT: f64 = 2.0;

const PHRASES: [&str; 12] = [
    "patient resting comfortably",
    "vital signs stable",
    "chest pain reported overnight",
    "troponin trending",
    "sinus rhythm",
    "bilateral crackles at bases",
    "ambulating with assistance",
    "family updated at bedside",
    "diuresis continued",
    "heparin drip titrated",
    "tolerating diet",
    "no acute distress",
];

fn base_time() -> NaiveDateTime {
    timefmt::parse("2150-01-01 00:00:00").expect("constant timestamp")
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Picks exactly `round(rate × n)` of `candidates`.
fn choose(rng: &mut ChaCha8Rng, candidates: &[usize], rate: f64) -> Vec<usize> {
    let k = ((rate * candidates.len() as f64).round() as usize).min(candidates.len());
    index::sample(rng, candidates.len(), k)
        .into_iter()
        .map(|i| candidates[i])
        .collect()
}

fn seconds(rng: &mut ChaCha8Rng, lo_days: f64, hi_days: f64) -> Duration {
    Duration::seconds((rng.random_range(lo_days..hi_days) * 86_400.0) as i64)
}

pub fn generate(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let mut rng = seed::rng(seed::mix(config.seed, 0x53_594E_5448));
    let n = config.admissions;
    let dim = config.dim as usize;
    let n_death = ((config.death_fraction * n as f64).round() as usize).min(n);
    let n_surv = n - n_death;
    let n_planted = ((config.planted_fraction * n_surv as f64).round() as usize).min(n_surv);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut roles = vec![Role::Survivor; n];
    for &i in &order[..n_death] {
        roles[i] = Role::Death;
    }
    for &i in &order[n_death..n_death + n_planted] {
        roles[i] = Role::Planted;
    }
    let of_role = |r: Role| -> Vec<usize> { (0..n).filter(|&i| roles[i] == r).collect() };
    let planted_idx = of_role(Role::Planted);
    let survivor_idx = of_role(Role::Survivor);
    let death_idx = of_role(Role::Death);
    let complement: Vec<usize> = (0..n).filter(|&i| roles[i] != Role::Planted).collect();

    // Index admissions.
    let mut admissions = Vec::with_capacity(3 * n);
    let mut index_adm = Vec::with_capacity(n);
    for (i, &role) in roles.iter().enumerate() {
        let admit = base_time() + Duration::days(rng.random_range(400..3000)) + seconds(&mut rng, 0.0, 1.0);
        let factor = if role == Role::Planted {
            config.planted_los_factor
        } else {
            1.0
        };
        let los = seconds(&mut rng, 9.0 * factor, 15.0 * factor);
        let rec = AdmissionRecord {
            subject_id: SUBJECT_BASE + i as u64,
            hadm_id: COHORT_HADM_BASE + i as u64,
            admit_time: admit,
            discharge_time: admit + los,
            death_in_hospital: role == Role::Death,
            icd_codes: [INDEX_ICD.to_string()].into_iter().collect(),
        };
        index_adm.push(rec);
    }

    // Readmission history. Rates are realized as exact counts; the complement
    // includes deaths, who cannot be readmitted, so survivors carry their share.
    let mut extra_id = EXTRA_HADM_BASE;
    let mut next_id = || {
        extra_id += 1;
        extra_id
    };
    let mut has_prior = vec![false; n];
    for i in choose(&mut rng, &planted_idx, config.planted_readmission_rate)
        .into_iter()
        .chain(choose(&mut rng, &complement, config.base_readmission_rate))
    {
        has_prior[i] = true;
    }
    let survivor_share = |rate: f64| -> f64 {
        if survivor_idx.is_empty() {
            0.0
        } else {
            (rate * complement.len() as f64 / survivor_idx.len() as f64).min(1.0)
        }
    };
    let mut r30 = vec![false; n];
    for i in choose(&mut rng, &planted_idx, config.planted_readmit_30d_rate)
        .into_iter()
        .chain(choose(&mut rng, &survivor_idx, survivor_share(config.base_readmit_30d_rate)))
    {
        r30[i] = true;
    }
    let later_rate = |future_mean: f64, r30_rate: f64| (future_mean - r30_rate).clamp(0.0, 1.0);
    let mut later = vec![false; n];
    let base_later = (survivor_share(config.base_future_mean) - survivor_share(config.base_readmit_30d_rate)).clamp(0.0, 1.0);
    for i in choose(
        &mut rng,
        &planted_idx,
        later_rate(config.planted_future_mean, config.planted_readmit_30d_rate),
    )
    .into_iter()
    .chain(choose(&mut rng, &survivor_idx, base_later))
    {
        later[i] = true;
    }

    let other_codes = ["428.0", "401.9", "414.01", "427.31"];
    for i in 0..n {
        let idx = &index_adm[i];
        let code = || other_codes[(idx.hadm_id % other_codes.len() as u64) as usize].to_string();
        if has_prior[i] {
            let end = idx.admit_time - Duration::days(rng.random_range(40..400));
            let start = end - seconds(&mut rng, 2.0, 6.0);
            admissions.push(AdmissionRecord {
                subject_id: idx.subject_id,
                hadm_id: next_id(),
                admit_time: start,
                discharge_time: end,
                death_in_hospital: false,
                icd_codes: [code()].into_iter().collect(),
            });
        }
        if r30[i] {
            let start = idx.discharge_time + seconds(&mut rng, 3.0, 28.0);
            admissions.push(AdmissionRecord {
                subject_id: idx.subject_id,
                hadm_id: next_id(),
                admit_time: start,
                discharge_time: start + seconds(&mut rng, 1.0, 10.0),
                death_in_hospital: false,
                icd_codes: [code()].into_iter().collect(),
            });
        }
        if later[i] {
            let start = idx.discharge_time + seconds(&mut rng, 45.0, 400.0);
            admissions.push(AdmissionRecord {
                subject_id: idx.subject_id,
                hadm_id: next_id(),
                admit_time: start,
                discharge_time: start + seconds(&mut rng, 1.0, 10.0),
                death_in_hospital: false,
                icd_codes: [code()].into_iter().collect(),
            });
        }
    }

    // Short-stay decoys pull the median LOS below every cohort stay.
    for j in 0..n {
        let admit = base_time() + Duration::days(rng.random_range(400..3000));
        admissions.push(AdmissionRecord {
            subject_id: DECOY_SUBJECT_BASE + j as u64,
            hadm_id: next_id(),
            admit_time: admit,
            discharge_time: admit + seconds(&mut rng, 1.0, 7.0),
            death_in_hospital: rng.random_bool(0.05),
            icd_codes: [INDEX_ICD.to_string()].into_iter().collect(),
        });
    }

    // Notes.
    let horizon = config.horizon;
    let late_from = horizon / 2 + 1;
    let mut notes = Vec::new();
    for (i, adm) in index_adm.iter().enumerate() {
        let planted = roles[i] == Role::Planted;
        for category in NoteCategory::ALL {
            let c = category as usize;
            for day in 1..=horizon {
                let density = if day == 1 { DAY_ONE_DENSITY[c] } else { LATER_DENSITY[c] };
                let max_notes = if category == NoteCategory::Nursing && planted && day >= late_from {
                    PLANTED_LATE_MAX_NURSING
                } else {
                    2
                };
                if !rng.random_bool(density) {
                    continue;
                }
                let count = rng.random_range(1..=max_notes);
                for k in 0..count {
                    let at = adm.admit_time
                        + Duration::days(i64::from(day) - 1)
                        + Duration::seconds(rng.random_range(0..86_400));
                    let words: Vec<&str> = (0..3).map(|_| PHRASES[rng.random_range(0..PHRASES.len())]).collect();
                    notes.push(NoteRecord {
                        subject_id: adm.subject_id,
                        hadm_id: adm.hadm_id,
                        category,
                        chart_time: at,
                        text: format!("{category} day {day} #{k}: {}.", words.join("; ")),
                    });
                }
            }
        }
        // Occasional out-of-window notes: charted before admission or past the horizon.
        if rng.random_bool(0.05) {
            notes.push(NoteRecord {
                subject_id: adm.subject_id,
                hadm_id: adm.hadm_id,
                category: NoteCategory::Radiology,
                chart_time: adm.admit_time - Duration::hours(rng.random_range(1..6)),
                text: "Radiology pre-admission film.".into(),
            });
        }
        if rng.random_bool(0.1) {
            notes.push(NoteRecord {
                subject_id: adm.subject_id,
                hadm_id: adm.hadm_id,
                category: NoteCategory::NursingOther,
                chart_time: adm.admit_time + Duration::days(i64::from(horizon)) + Duration::hours(2),
                text: "Nursing/other note after the observation window.".into(),
            });
        }
    }

    // Embeddings for every Original bucket.
    let death_dirs: Vec<Vec<f64>> = (0..CATEGORY_COUNT).map(|_| unit_vector(&mut rng, dim)).collect();
    let survival_dirs: Vec<Vec<f64>> = (0..CATEGORY_COUNT).map(|_| unit_vector(&mut rng, dim)).collect();
    let confounder_dir = unit_vector(&mut rng, dim);
    let mut store = EmbeddingStore::new(config.dim)?;
    let mut notes_by_hadm: BTreeMap<u64, Vec<NoteRecord>> = BTreeMap::new();
    for note in &notes {
        notes_by_hadm.entry(note.hadm_id).or_default().push(note.clone());
    }
    for (i, adm) in index_adm.iter().enumerate() {
        let own = notes_by_hadm.remove(&adm.hadm_id).unwrap_or_default();
        let grid = build_grid(&own, adm, horizon)?;
        for (category, day, cell) in grid.iter() {
            if cell.fill != Fill::Original {
                continue;
            }
            let c = category as usize;
            let signal = match roles[i] {
                Role::Survivor => &survival_dirs[c],
                Role::Planted | Role::Death => &death_dirs[c],
            };
            let mut v: Vec<f64> = signal
                .iter()
                .map(|s| s + config.noise * rng.sample::<f64, _>(StandardNormal))
                .collect();
            if roles[i] == Role::Planted && category == NoteCategory::Nursing {
                let shift = if day >= late_from { LATE_SHIFT } else { EARLY_SHIFT };
                v.iter_mut().zip(&confounder_dir).for_each(|(x, d)| *x += shift * d);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            let values = v.iter().map(|x| (x / norm) as f32).collect();
            store.insert(StoreKey::new(adm.hadm_id, category, day), values)?;
        }
    }

    let ratio_of = |f: &dyn Fn(usize) -> f64| -> Option<f64> {
        let mean = |idx: &[usize]| idx.iter().map(|&i| f(i)).sum::<f64>() / idx.len().max(1) as f64;
        let (a, b) = (mean(&planted_idx), mean(&complement));
        (b != 0.0 && !planted_idx.is_empty()).then(|| a / b)
    };
    let realized_ratios = RealizedRatios {
        is_readmission: ratio_of(&|i| f64::from(u8::from(has_prior[i]))),
        readmit_30d: ratio_of(&|i| f64::from(u8::from(r30[i]))),
        future_readmissions: ratio_of(&|i| f64::from(u8::from(r30[i])) + f64::from(u8::from(later[i]))),
        los: ratio_of(&|i| index_adm[i].los_days()),
    };

    let role_map: BTreeMap<u64, Role> = (0..n).map(|i| (index_adm[i].hadm_id, roles[i])).collect();
    let manifest = Manifest {
        config: config.clone(),
        icd: INDEX_ICD.to_string(),
        cohort_size: n,
        deaths: death_idx.len(),
        survivors: n - death_idx.len(),
        planted: planted_idx.iter().map(|&i| index_adm[i].hadm_id).collect(),
        realized_ratios,
    };

    admissions.extend(index_adm);
    admissions.sort_by_key(|a| a.hadm_id);
    notes.sort_by_key(|n| (n.hadm_id, n.chart_time, n.category));

    Ok(SynthDataset {
        admissions,
        notes,
        store,
        roles: role_map,
        manifest,
    })
}

pub const ADMISSIONS_FILE: &str = "admissions.csv";
pub const DIAGNOSES_FILE: &str = "diagnoses.csv";
pub const NOTES_FILE: &str = "notes.csv";
pub const STORE_FILE: &str = "store.ehre";
pub const MANIFEST_FILE: &str = "manifest.json";

fn write_csv<F>(path: &Path, header: &[&str], mut rows: F) -> Result<()>
where
    F: FnMut(&mut csv::Writer<std::fs::File>) -> csv::Result<()>,
{
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(header).map_err(|e| Error::csv(path, e))?;
    rows(&mut w).map_err(|e| Error::csv(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

impl SynthDataset {
    /// Writes the five dataset files into `dir`, which must exist.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        write_csv(
            &dir.join(ADMISSIONS_FILE),
            &["subject_id", "hadm_id", "admittime", "dischtime", "hospital_expire_flag"],
            |w| {
                for a in &self.admissions {
                    w.write_record([
                        a.subject_id.to_string(),
                        a.hadm_id.to_string(),
                        timefmt::format(&a.admit_time),
                        timefmt::format(&a.discharge_time),
                        u8::from(a.death_in_hospital).to_string(),
                    ])?;
                }
                Ok(())
            },
        )?;
        write_csv(&dir.join(DIAGNOSES_FILE), &["subject_id", "hadm_id", "icd9_code"], |w| {
            for a in &self.admissions {
                for code in &a.icd_codes {
                    w.write_record([a.subject_id.to_string(), a.hadm_id.to_string(), code.clone()])?;
                }
            }
            Ok(())
        })?;
        write_csv(
            &dir.join(NOTES_FILE),
            &["subject_id", "hadm_id", "category", "charttime", "text"],
            |w| {
                for n in &self.notes {
                    w.write_record([
                        n.subject_id.to_string(),
                        n.hadm_id.to_string(),
                        n.category.as_str().to_string(),
                        timefmt::format(&n.chart_time),
                        n.text.clone(),
                    ])?;
                }
                Ok(())
            },
        )?;
        self.store.write(&dir.join(STORE_FILE))?;
        let path = dir.join(MANIFEST_FILE);
        let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = std::io::BufWriter::new(file);
        serde_json::to_writer_pretty(&mut w, &self.manifest).map_err(|e| Error::json(&path, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{select_cohort, AdmissionTable, LosCutoff};

    fn small() -> SynthConfig {
        SynthConfig {
            admissions: 80,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn planted_count_and_determinism() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.manifest, b.manifest);
        assert_eq!(a.store, b.store);
        assert_eq!(a.notes, b.notes);
        assert_eq!(a.manifest.deaths, 12);
        assert_eq!(a.manifest.planted.len(), 17); // round(0.25 × 68)

        let none = generate(&SynthConfig {
            planted_fraction: 0.0,
            ..small()
        })
        .unwrap();
        assert!(none.manifest.planted.is_empty());
    }

    #[test]
    fn median_cutoff_keeps_exactly_the_generated_cohort() {
        let data = generate(&small()).unwrap();
        let table = AdmissionTable::from_records(data.admissions.clone()).unwrap();
        let cohort = select_cohort(&table, INDEX_ICD, LosCutoff::Median).unwrap();
        assert_eq!(cohort.len(), 80);
        assert_eq!(cohort.death_count, 12);
        assert!(cohort.cutoff_days > 7.0 && cohort.cutoff_days < 9.0);
        let planted: Vec<_> = cohort
            .members
            .iter()
            .filter(|m| data.roles[&m.admission.hadm_id] == Role::Planted)
            .collect();
        assert_eq!(planted.len(), 17);
        assert!(planted.iter().all(|m| m.label == crate::Outcome::Survival));
    }

    #[test]
    fn realized_ratios_match_targets() {
        let data = generate(&SynthConfig {
            admissions: 400,
            ..Default::default()
        })
        .unwrap();
        let r = &data.manifest.realized_ratios;
        assert!((r.is_readmission.unwrap() - 10.0).abs() < 1.0, "{r:?}");
        assert!((r.readmit_30d.unwrap() - 8.0).abs() < 1.0, "{r:?}");
        assert!((r.future_readmissions.unwrap() - 1.5).abs() < 0.2, "{r:?}");
        assert!((r.los.unwrap() - 1.35).abs() < 0.1, "{r:?}");
    }
}
