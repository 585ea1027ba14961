//! Day-resolution text buckets per (note category, stay day), and forward-fill
//! imputation of empty days.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::cohort::{column_indices, open_csv, parse_time, parse_u64, row_number, AdmissionRecord};
use crate::error::{Error, Result};

pub const DEFAULT_HORIZON: u8 = 8;
pub const CATEGORY_COUNT: usize = 5;
const BUCKET_SEPARATOR: &str = "\n\n";
const SECONDS_PER_DAY: i64 = 86_400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NoteCategory {
    #[serde(rename = "Echo")]
    Echo = 0,
    #[serde(rename = "ECG")]
    Ecg = 1,
    #[serde(rename = "Nursing")]
    Nursing = 2,
    #[serde(rename = "Radiology")]
    Radiology = 3,
    #[serde(rename = "Nursing/other")]
    NursingOther = 4,
}

impl NoteCategory {
    pub const ALL: [NoteCategory; CATEGORY_COUNT] = [
        NoteCategory::Echo,
        NoteCategory::Ecg,
        NoteCategory::Nursing,
        NoteCategory::Radiology,
        NoteCategory::NursingOther,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NoteCategory::Echo => "Echo",
            NoteCategory::Ecg => "ECG",
            NoteCategory::Nursing => "Nursing",
            NoteCategory::Radiology => "Radiology",
            NoteCategory::NursingOther => "Nursing/other",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str() == s.trim())
    }
}

impl std::fmt::Display for NoteCategory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NoteRecord {
    pub subject_id: u64,
    pub hadm_id: u64,
    pub category: NoteCategory,
    pub chart_time: NaiveDateTime,
    pub text: String,
}

/// Notes read from CSV plus the rows that were skipped.
#[derive(Debug, Clone, Default)]
pub struct LoadedNotes {
    pub notes: Vec<NoteRecord>,
    pub unknown_category: usize,
    pub blank_text: usize,
}

pub fn load_notes(path: &Path) -> Result<LoadedNotes> {
    let mut reader = open_csv(path)?;
    let headers = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
    let [c_subject, c_hadm, c_cat, c_time, c_text] = column_indices(
        path,
        &headers,
        ["subject_id", "hadm_id", "category", "charttime", "text"],
    )?;
    let mut out = LoadedNotes::default();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let row = row_number(&rec);
        let field = |i: usize| rec.get(i).unwrap_or("");
        let Some(category) = NoteCategory::parse(field(c_cat)) else {
            out.unknown_category += 1;
            continue;
        };
        let text = field(c_text);
        if text.trim().is_empty() {
            out.blank_text += 1;
            continue;
        }
        out.notes.push(NoteRecord {
            subject_id: parse_u64(path, row, "subject_id", field(c_subject))?,
            hadm_id: parse_u64(path, row, "hadm_id", field(c_hadm))?,
            category,
            chart_time: parse_time(path, row, "charttime", field(c_time))?,
            text: text.to_string(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DayAssignment {
    Day(u8),
    OutOfWindow,
}

/// Day `d` covers `[admit + (d-1)·24h, admit + d·24h)`.
pub fn assign_day(chart_time: NaiveDateTime, admit_time: NaiveDateTime, horizon: u8) -> DayAssignment {
    let offset = (chart_time - admit_time).num_seconds();
    if offset < 0 {
        return DayAssignment::OutOfWindow;
    }
    let day = offset / SECONDS_PER_DAY + 1;
    if day > i64::from(horizon) {
        DayAssignment::OutOfWindow
    } else {
        DayAssignment::Day(day as u8)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fill {
    Original,
    Copied,
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BucketCell {
    pub text: String,
    pub fill: Fill,
    /// Day whose text this cell carries; `None` for empty cells.
    pub source_day: Option<u8>,
    /// Notes merged into this cell; zero unless `Original`.
    pub note_count: u32,
}

impl BucketCell {
    fn empty() -> Self {
        BucketCell {
            text: String::new(),
            fill: Fill::Empty,
            source_day: None,
            note_count: 0,
        }
    }
}

/// The (category × day) grid of one admission. Cells are stored category-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BucketGrid {
    pub hadm_id: u64,
    pub subject_id: u64,
    pub horizon: u8,
    pub dropped_out_of_window: usize,
    cells: Vec<BucketCell>,
}

impl BucketGrid {
    pub fn empty(hadm_id: u64, subject_id: u64, horizon: u8) -> Self {
        BucketGrid {
            hadm_id,
            subject_id,
            horizon,
            dropped_out_of_window: 0,
            cells: vec![BucketCell::empty(); CATEGORY_COUNT * horizon as usize],
        }
    }

    fn index(&self, category: NoteCategory, day: u8) -> usize {
        assert!(
            day >= 1 && day <= self.horizon,
            "day {day} outside 1..={}",
            self.horizon
        );
        category as usize * self.horizon as usize + (day as usize - 1)
    }

    pub fn cell(&self, category: NoteCategory, day: u8) -> &BucketCell {
        &self.cells[self.index(category, day)]
    }

    pub fn cell_mut(&mut self, category: NoteCategory, day: u8) -> &mut BucketCell {
        let i = self.index(category, day);
        &mut self.cells[i]
    }

    /// Cells of one category, days ascending.
    pub fn row(&self, category: NoteCategory) -> &[BucketCell] {
        let h = self.horizon as usize;
        let start = category as usize * h;
        &self.cells[start..start + h]
    }

    /// All cells with their keys, in (category, day) order.
    pub fn iter(&self) -> impl Iterator<Item = (NoteCategory, u8, &BucketCell)> {
        let h = self.horizon as usize;
        self.cells.iter().enumerate().map(move |(i, c)| {
            (NoteCategory::ALL[i / h], (i % h) as u8 + 1, c)
        })
    }

    pub fn count(&self, fill: Fill) -> usize {
        self.cells.iter().filter(|c| c.fill == fill).count()
    }

    pub fn notes_placed(&self) -> usize {
        self.cells.iter().map(|c| c.note_count as usize).sum()
    }

    /// Fill provenance without texts, for the sidecar file.
    pub fn provenance(&self) -> GridProvenance {
        GridProvenance {
            hadm_id: self.hadm_id,
            subject_id: self.subject_id,
            horizon: self.horizon,
            dropped_out_of_window: self.dropped_out_of_window,
            cells: self
                .iter()
                .map(|(category, day, c)| CellProvenance {
                    category,
                    day,
                    fill: c.fill,
                    source_day: c.source_day,
                    note_count: c.note_count,
                })
                .collect(),
        }
    }

    /// Rebuilds a grid from its provenance and the exported texts of its Original cells.
    pub fn from_provenance(
        prov: &GridProvenance,
        originals: &HashMap<(u64, NoteCategory, u8), String>,
    ) -> Result<Self> {
        let mut grid = BucketGrid::empty(prov.hadm_id, prov.subject_id, prov.horizon);
        grid.dropped_out_of_window = prov.dropped_out_of_window;
        if prov.cells.len() != grid.cells.len() {
            return Err(Error::InvalidGrid(format!(
                "hadm_id {}: {} cells listed, expected {}",
                prov.hadm_id,
                prov.cells.len(),
                grid.cells.len()
            )));
        }
        let mut seen = vec![false; grid.cells.len()];
        for c in &prov.cells {
            if c.day < 1 || c.day > prov.horizon {
                return Err(Error::InvalidGrid(format!(
                    "hadm_id {}: day {} out of range",
                    prov.hadm_id, c.day
                )));
            }
            let i = grid.index(c.category, c.day);
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidGrid(format!(
                    "hadm_id {}: duplicate cell ({}, {})",
                    prov.hadm_id, c.category, c.day
                )));
            }
            grid.cells[i] = BucketCell {
                text: String::new(),
                fill: c.fill,
                source_day: c.source_day,
                note_count: c.note_count,
            };
        }
        // Resolve texts: originals from the export, copies from their source.
        for category in NoteCategory::ALL {
            for day in 1..=prov.horizon {
                let cell = grid.cell(category, day).clone();
                let text = match (cell.fill, cell.source_day) {
                    (Fill::Empty, None) => continue,
                    (Fill::Original, Some(d)) if d == day => originals
                        .get(&(prov.hadm_id, category, day))
                        .cloned()
                        .ok_or_else(|| {
                            Error::InvalidGrid(format!(
                                "hadm_id {}: no exported text for ({category}, {day})",
                                prov.hadm_id
                            ))
                        })?,
                    (Fill::Copied, Some(d)) if d < day && grid.cell(category, d).fill == Fill::Original => {
                        grid.cell(category, d).text.clone()
                    }
                    _ => {
                        return Err(Error::InvalidGrid(format!(
                            "hadm_id {}: inconsistent provenance at ({category}, {day})",
                            prov.hadm_id
                        )))
                    }
                };
                grid.cell_mut(category, day).text = text;
            }
        }
        Ok(grid)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellProvenance {
    pub category: NoteCategory,
    pub day: u8,
    pub fill: Fill,
    pub source_day: Option<u8>,
    pub note_count: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridProvenance {
    pub hadm_id: u64,
    pub subject_id: u64,
    pub horizon: u8,
    pub dropped_out_of_window: usize,
    pub cells: Vec<CellProvenance>,
}

/// Places each note in its (category, day) bucket. Notes sharing a bucket are
/// joined in chart-time order with a blank line; out-of-window notes are dropped
/// and counted. No fill is applied.
pub fn build_grid(notes: &[NoteRecord], admission: &AdmissionRecord, horizon: u8) -> Result<BucketGrid> {
    let mut grid = BucketGrid::empty(admission.hadm_id, admission.subject_id, horizon);
    let mut placed: BTreeMap<(NoteCategory, u8), Vec<&NoteRecord>> = BTreeMap::new();
    for note in notes {
        if note.hadm_id != admission.hadm_id {
            return Err(Error::MismatchedNote {
                grid: admission.hadm_id,
                note: note.hadm_id,
            });
        }
        match assign_day(note.chart_time, admission.admit_time, horizon) {
            DayAssignment::Day(d) => placed.entry((note.category, d)).or_default().push(note),
            DayAssignment::OutOfWindow => grid.dropped_out_of_window += 1,
        }
    }
    for ((category, day), mut bucket) in placed {
        bucket.sort_by_key(|n| n.chart_time);
        let text = bucket
            .iter()
            .map(|n| n.text.as_str())
            .collect::<Vec<_>>()
            .join(BUCKET_SEPARATOR);
        *grid.cell_mut(category, day) = BucketCell {
            text,
            fill: Fill::Original,
            source_day: Some(day),
            note_count: bucket.len() as u32,
        };
    }
    Ok(grid)
}

/// Copies the most recent earlier non-empty bucket into each empty one.
/// Leading empty days stay empty. Idempotent.
pub fn forward_fill(mut grid: BucketGrid) -> BucketGrid {
    let h = grid.horizon as usize;
    for c in 0..CATEGORY_COUNT {
        let row = &mut grid.cells[c * h..(c + 1) * h];
        let mut last: Option<usize> = None;
        for day in 0..h {
            match row[day].fill {
                Fill::Original => last = Some(day),
                Fill::Copied => {}
                Fill::Empty => {
                    if let Some(src) = last {
                        row[day] = BucketCell {
                            text: row[src].text.clone(),
                            fill: Fill::Copied,
                            source_day: row[src].source_day,
                            note_count: 0,
                        };
                    }
                }
            }
        }
    }
    grid
}

/// One exported bucket: the embedding extractor's unit of work.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketRecord {
    pub hadm_id: u64,
    pub subject_id: u64,
    pub category: NoteCategory,
    pub day: u8,
    pub text: String,
}

/// Writes one JSON line per Original cell, ordered by (hadm_id, category, day).
pub fn export_buckets<W: Write>(grids: &[BucketGrid], mut out: W) -> std::io::Result<usize> {
    let mut order: Vec<&BucketGrid> = grids.iter().collect();
    order.sort_by_key(|g| g.hadm_id);
    let mut lines = 0;
    for grid in order {
        for (category, day, cell) in grid.iter() {
            if cell.fill != Fill::Original {
                continue;
            }
            let rec = BucketRecord {
                hadm_id: grid.hadm_id,
                subject_id: grid.subject_id,
                category,
                day,
                text: cell.text.clone(),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
            lines += 1;
        }
    }
    Ok(lines)
}

pub fn read_bucket_records(path: &Path) -> Result<Vec<BucketRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::json(path, e)))
        .collect()
}

pub fn read_provenance(path: &Path) -> Result<Vec<GridProvenance>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(std::io::BufReader::new(file)).map_err(|e| Error::json(path, e))
}

/// Reassembles filled grids from the export and its provenance sidecar.
pub fn load_grids(buckets: &Path, provenance: &Path) -> Result<Vec<BucketGrid>> {
    let originals: HashMap<(u64, NoteCategory, u8), String> = read_bucket_records(buckets)?
        .into_iter()
        .map(|r| ((r.hadm_id, r.category, r.day), r.text))
        .collect();
    read_provenance(provenance)?
        .iter()
        .map(|p| BucketGrid::from_provenance(p, &originals))
        .collect()
}

/// Grids for a set of admissions plus notes that matched none of them.
#[derive(Debug, Clone)]
pub struct GridBuild {
    pub grids: Vec<BucketGrid>,
    pub out_of_window: usize,
    pub unmatched_notes: usize,
}

/// Builds and forward-fills one grid per admission, in `hadm_id` order.
pub fn build_filled_grids<'a>(
    admissions: impl IntoIterator<Item = &'a AdmissionRecord>,
    notes: &[NoteRecord],
    horizon: u8,
) -> Result<GridBuild> {
    let mut by_hadm: HashMap<u64, Vec<NoteRecord>> = HashMap::new();
    for n in notes {
        by_hadm.entry(n.hadm_id).or_default().push(n.clone());
    }
    let mut admissions: Vec<&AdmissionRecord> = admissions.into_iter().collect();
    admissions.sort_by_key(|a| a.hadm_id);
    let mut grids = Vec::with_capacity(admissions.len());
    let mut matched = 0;
    for adm in admissions {
        let own = by_hadm.get(&adm.hadm_id).map(Vec::as_slice).unwrap_or(&[]);
        matched += own.len();
        grids.push(forward_fill(build_grid(own, adm, horizon)?));
    }
    Ok(GridBuild {
        out_of_window: grids.iter().map(|g| g.dropped_out_of_window).sum(),
        unmatched_notes: notes.len() - matched,
        grids,
    })
}
