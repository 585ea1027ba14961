//! Mortality prediction over day-resolution clinical-note embedding time series,
//! evaluated by repeated holdout, plus analysis of the admissions the classifier
//! gets persistently wrong.
//!
//! Pipeline stages, in order:
//!
//! 1. [`cohort`]: load admissions, select the ICD/LOS cohort, derive readmission features.
//! 2. [`bucketing`]: place notes into a (category × day) grid and forward-fill empty days.
//! 3. [`store`]: the EHRE embedding store, a stub embedder, and feature assembly.
//! 4. [`head`]: the sigmoid classification head and its gradient-descent trainer.
//! 5. [`harness`]: repeated holdout with shared splits and confusion aggregation.
//! 6. [`analysis`]: per-admission correctness profiles, histograms, failure subgroup
//!    mining and confounder ratios.
//!
//! [`synth`] generates planted-confounder datasets for end-to-end checks.

pub mod analysis;
pub mod bucketing;
pub mod cohort;
pub mod error;
pub mod harness;
pub mod head;
pub mod seed;
pub mod store;
pub mod synth;
pub mod timefmt;

pub use error::{Error, Result};

use serde::{Deserialize, Serialize};

/// True or predicted outcome of an admission. Death is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Survival,
    Death,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Survival => "survival",
            Outcome::Death => "death",
        }
    }

    /// Regression target for the sigmoid head: 1 for death, 0 for survival.
    pub fn target(self) -> f64 {
        match self {
            Outcome::Survival => 0.0,
            Outcome::Death => 1.0,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "survival" => Some(Outcome::Survival),
            "death" => Some(Outcome::Death),
            _ => None,
        }
    }
}

impl std::fmt::Display for Outcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}
