//! Admission ingestion, ICD/LOS cohort selection and readmission features.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use chrono::{Duration, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{timefmt, Outcome};

const SECONDS_PER_DAY: f64 = 86_400.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdmissionRecord {
    pub subject_id: u64,
    pub hadm_id: u64,
    #[serde(with = "crate::timefmt")]
    pub admit_time: NaiveDateTime,
    #[serde(with = "crate::timefmt")]
    pub discharge_time: NaiveDateTime,
    pub death_in_hospital: bool,
    pub icd_codes: BTreeSet<String>,
}

impl AdmissionRecord {
    pub fn los_days(&self) -> f64 {
        (self.discharge_time - self.admit_time).num_seconds() as f64 / SECONDS_PER_DAY
    }
}

/// Admissions keyed by `hadm_id`.
#[derive(Debug, Clone, Default)]
pub struct AdmissionTable {
    records: BTreeMap<u64, AdmissionRecord>,
}

impl AdmissionTable {
    /// Builds a table, rejecting duplicate ids and non-positive stays.
    pub fn from_records(records: impl IntoIterator<Item = AdmissionRecord>) -> Result<Self> {
        let mut table = AdmissionTable::default();
        for (i, rec) in records.into_iter().enumerate() {
            let row = i as u64 + 1;
            if rec.discharge_time <= rec.admit_time {
                return Err(Error::InvalidRow {
                    path: "<records>".into(),
                    row,
                    message: format!("discharge time not after admit time for hadm_id {}", rec.hadm_id),
                });
            }
            let id = rec.hadm_id;
            if table.records.insert(id, rec).is_some() {
                return Err(Error::DuplicateAdmission {
                    path: "<records>".into(),
                    hadm_id: id,
                    row,
                });
            }
        }
        Ok(table)
    }

    pub fn get(&self, hadm_id: u64) -> Option<&AdmissionRecord> {
        self.records.get(&hadm_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &AdmissionRecord> {
        self.records.values()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Each subject's admissions in canonical (admit_time, hadm_id) order.
    pub fn histories(&self) -> HashMap<u64, Vec<&AdmissionRecord>> {
        let mut by_subject: HashMap<u64, Vec<&AdmissionRecord>> = HashMap::new();
        for rec in self.records.values() {
            by_subject.entry(rec.subject_id).or_default().push(rec);
        }
        for history in by_subject.values_mut() {
            history.sort_by_key(|r| (r.admit_time, r.hadm_id));
        }
        by_subject
    }
}

/// Maps header names to column positions, failing on the first missing one.
pub(crate) fn column_indices<const N: usize>(
    path: &Path,
    headers: &csv::StringRecord,
    names: [&str; N],
) -> Result<[usize; N]> {
    let mut out = [0usize; N];
    for (slot, name) in out.iter_mut().zip(names) {
        *slot = headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn {
                path: path.to_path_buf(),
                column: name.to_string(),
            })?;
    }
    Ok(out)
}

pub(crate) fn open_csv(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(file))
}

pub(crate) fn row_number(record: &csv::StringRecord) -> u64 {
    record.position().map(|p| p.line()).unwrap_or(0)
}

pub(crate) fn parse_u64(path: &Path, row: u64, column: &str, raw: &str) -> Result<u64> {
    raw.trim().parse().map_err(|_| Error::InvalidRow {
        path: path.to_path_buf(),
        row,
        message: format!("`{column}` is not an unsigned integer: `{raw}`"),
    })
}

pub(crate) fn parse_time(path: &Path, row: u64, column: &str, raw: &str) -> Result<NaiveDateTime> {
    timefmt::parse(raw).ok_or_else(|| Error::InvalidRow {
        path: path.to_path_buf(),
        row,
        message: format!("`{column}` is not a YYYY-MM-DD HH:MM:SS timestamp: `{raw}`"),
    })
}

/// Reads the admissions and diagnoses tables and merges ICD codes per `hadm_id`.
///
/// Diagnosis rows for admissions absent from the admissions table are ignored.
pub fn load_admissions(admissions_csv: &Path, diagnoses_csv: &Path) -> Result<AdmissionTable> {
    let mut reader = open_csv(admissions_csv)?;
    let headers = reader
        .headers()
        .map_err(|e| Error::csv(admissions_csv, e))?
        .clone();
    let [c_subject, c_hadm, c_admit, c_disch, c_flag] = column_indices(
        admissions_csv,
        &headers,
        ["subject_id", "hadm_id", "admittime", "dischtime", "hospital_expire_flag"],
    )?;

    let mut records: BTreeMap<u64, AdmissionRecord> = BTreeMap::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::csv(admissions_csv, e))?;
        let row = row_number(&rec);
        let field = |i: usize| rec.get(i).unwrap_or("");
        let subject_id = parse_u64(admissions_csv, row, "subject_id", field(c_subject))?;
        let hadm_id = parse_u64(admissions_csv, row, "hadm_id", field(c_hadm))?;
        let admit_time = parse_time(admissions_csv, row, "admittime", field(c_admit))?;
        let discharge_time = parse_time(admissions_csv, row, "dischtime", field(c_disch))?;
        let death_in_hospital = match field(c_flag).trim() {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::InvalidRow {
                    path: admissions_csv.to_path_buf(),
                    row,
                    message: format!("`hospital_expire_flag` must be 0 or 1, got `{other}`"),
                })
            }
        };
        if discharge_time <= admit_time {
            return Err(Error::InvalidRow {
                path: admissions_csv.to_path_buf(),
                row,
                message: format!("dischtime not after admittime for hadm_id {hadm_id}"),
            });
        }
        if records.contains_key(&hadm_id) {
            return Err(Error::DuplicateAdmission {
                path: admissions_csv.to_path_buf(),
                hadm_id,
                row,
            });
        }
        records.insert(
            hadm_id,
            AdmissionRecord {
                subject_id,
                hadm_id,
                admit_time,
                discharge_time,
                death_in_hospital,
                icd_codes: BTreeSet::new(),
            },
        );
    }

    let mut reader = open_csv(diagnoses_csv)?;
    let headers = reader
        .headers()
        .map_err(|e| Error::csv(diagnoses_csv, e))?
        .clone();
    // A zero-byte diagnoses file means "no codes".
    if headers.is_empty() {
        return Ok(AdmissionTable { records });
    }
    let [c_hadm, c_icd] = column_indices(diagnoses_csv, &headers, ["hadm_id", "icd9_code"])?;
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::csv(diagnoses_csv, e))?;
        let row = row_number(&rec);
        let hadm_id = parse_u64(diagnoses_csv, row, "hadm_id", rec.get(c_hadm).unwrap_or(""))?;
        let code = rec.get(c_icd).unwrap_or("");
        if code.is_empty() {
            continue;
        }
        if let Some(adm) = records.get_mut(&hadm_id) {
            adm.icd_codes.insert(code.to_string());
        }
    }

    Ok(AdmissionTable { records })
}

/// Median with the even-count convention of averaging the central pair.
pub fn median_los(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyMedian);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        Ok(sorted[mid])
    } else {
        Ok((sorted[mid - 1] + sorted[mid]) / 2.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ReadmissionFeatures {
    pub is_readmission: bool,
    pub future_readmission_count: u32,
    pub readmitted_within_30d: bool,
}

/// Readmission features of `hadm_id` against one subject's admission history.
/// The history is put in canonical order first, so input order is irrelevant.
pub fn readmission_features(
    history: &[&AdmissionRecord],
    hadm_id: u64,
) -> Result<ReadmissionFeatures> {
    let mut ordered = history.to_vec();
    ordered.sort_by_key(|r| (r.admit_time, r.hadm_id));
    let index = ordered
        .iter()
        .find(|r| r.hadm_id == hadm_id)
        .ok_or(Error::AdmissionNotInHistory(hadm_id))?;

    let is_readmission = ordered.iter().any(|r| r.admit_time < index.admit_time);
    let future: Vec<_> = ordered
        .iter()
        .filter(|r| r.admit_time > index.discharge_time)
        .collect();
    let window_end = index.discharge_time + Duration::hours(30 * 24);
    let readmitted_within_30d = future
        .iter()
        .map(|r| r.admit_time)
        .min()
        .is_some_and(|t| t <= window_end);

    Ok(ReadmissionFeatures {
        is_readmission,
        future_readmission_count: future.len() as u32,
        readmitted_within_30d,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LosCutoff {
    Median,
    Days(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortMember {
    pub admission: AdmissionRecord,
    pub los_days: f64,
    pub label: Outcome,
    pub readmission: ReadmissionFeatures,
}

/// Selected cohort plus the provenance of the LOS cutoff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub icd: String,
    pub cutoff: LosCutoff,
    pub cutoff_days: f64,
    pub icd_matched: usize,
    pub survival_count: usize,
    pub death_count: usize,
    pub members: Vec<CohortMember>,
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_reader(std::io::BufReader::new(file)).map_err(|e| Error::json(path, e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        serde_json::to_writer_pretty(&mut w, self).map_err(|e| Error::json(path, e))?;
        std::io::Write::write_all(&mut w, b"\n").map_err(|e| Error::io(path, e))
    }
}

/// Keeps ICD-matched admissions whose LOS is strictly above the cutoff.
/// The median cutoff is computed over the ICD-matched set only.
pub fn select_cohort(table: &AdmissionTable, icd: &str, cutoff: LosCutoff) -> Result<Cohort> {
    let matched: Vec<&AdmissionRecord> = table.iter().filter(|r| r.icd_codes.contains(icd)).collect();
    if matched.is_empty() {
        return Err(Error::NoIcdMatch(icd.to_string()));
    }
    let icd_matched = matched.len();
    let cutoff_days = match cutoff {
        LosCutoff::Median => median_los(&matched.iter().map(|r| r.los_days()).collect::<Vec<_>>())?,
        LosCutoff::Days(d) => d,
    };

    let histories = table.histories();
    let mut members = Vec::new();
    for rec in matched {
        let los_days = rec.los_days();
        if los_days <= cutoff_days {
            continue;
        }
        let history = &histories[&rec.subject_id];
        members.push(CohortMember {
            admission: rec.clone(),
            los_days,
            label: if rec.death_in_hospital {
                Outcome::Death
            } else {
                Outcome::Survival
            },
            readmission: readmission_features(history, rec.hadm_id)?,
        });
    }
    let death_count = members.iter().filter(|m| m.label == Outcome::Death).count();
    Ok(Cohort {
        icd: icd.to_string(),
        cutoff,
        cutoff_days,
        icd_matched,
        survival_count: members.len() - death_count,
        death_count,
        members,
    })
}
