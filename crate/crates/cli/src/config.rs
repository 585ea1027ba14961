//! Flat JSON run configuration. Keys mirror the long flag names with
//! underscores; flags given on the command line win over file values.

use std::path::{Path, PathBuf};

use failprobe::cohort::LosCutoff;
use failprobe::harness::BalanceMode;
use failprobe::head::Init;
use serde::Deserialize;

use crate::Failure;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub admissions: Option<PathBuf>,
    pub diagnoses: Option<PathBuf>,
    pub notes: Option<PathBuf>,
    pub cohort: Option<PathBuf>,
    pub buckets: Option<PathBuf>,
    pub provenance: Option<PathBuf>,
    pub store: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub hist_csv: Option<PathBuf>,
    pub icd: Option<String>,
    pub cutoff: Option<CutoffValue>,
    pub days: Option<u8>,
    pub dim: Option<u32>,
    pub seed: Option<u64>,
    pub reps: Option<u32>,
    pub test_frac: Option<f64>,
    pub horizons: Option<String>,
    pub balance: Option<String>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub init: Option<String>,
    pub horizon: Option<u8>,
    pub threshold: Option<f64>,
    pub min_appearances: Option<u32>,
    pub phase_split: Option<u8>,
    pub size: Option<usize>,
    pub death_frac: Option<f64>,
    pub planted_frac: Option<f64>,
    pub noise: Option<f64>,
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum CutoffValue {
    Days(f64),
    Named(String),
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Failure::usage(format!("invalid config {}: {e}", path.display())))
    }
}

/// Flag value, else config value, else a usage error naming the flag.
pub fn required<T: Clone>(flag: &Option<T>, file: &Option<T>, name: &str) -> Result<T, Failure> {
    flag.clone()
        .or_else(|| file.clone())
        .ok_or_else(|| Failure::usage(format!("missing required --{name}")))
}

pub fn or_default<T: Clone>(flag: &Option<T>, file: &Option<T>, default: T) -> T {
    flag.clone().or_else(|| file.clone()).unwrap_or(default)
}

pub fn parse_cutoff(value: &CutoffValue) -> Result<LosCutoff, Failure> {
    match value {
        CutoffValue::Days(d) if d.is_finite() && *d >= 0.0 => Ok(LosCutoff::Days(*d)),
        CutoffValue::Named(s) if s == "median" => Ok(LosCutoff::Median),
        CutoffValue::Named(s) => match s.parse::<f64>() {
            Ok(d) if d.is_finite() && d >= 0.0 => Ok(LosCutoff::Days(d)),
            _ => Err(Failure::usage(format!(
                "--cutoff must be `median` or a non-negative number of days, got `{s}`"
            ))),
        },
        CutoffValue::Days(d) => Err(Failure::usage(format!("invalid cutoff {d}"))),
    }
}

/// Accepts `3`, `1..8`, `1-8` or `1,2,4,8`.
pub fn parse_horizons(s: &str) -> Result<Vec<u8>, Failure> {
    let bad = || Failure::usage(format!("invalid --horizons `{s}`"));
    let range = s.split_once("..").or_else(|| s.split_once('-'));
    let mut out: Vec<u8> = if let Some((a, b)) = range {
        let a: u8 = a.trim().parse().map_err(|_| bad())?;
        let b: u8 = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        if a > b {
            return Err(bad());
        }
        (a..=b).collect()
    } else {
        s.split(',')
            .map(|p| p.trim().parse().map_err(|_| bad()))
            .collect::<Result<_, _>>()?
    };
    out.sort_unstable();
    out.dedup();
    if out.is_empty() || out[0] == 0 {
        return Err(bad());
    }
    Ok(out)
}

pub fn parse_balance(s: &str) -> Result<BalanceMode, Failure> {
    match s {
        "undersample" | "undersample_majority" => Ok(BalanceMode::UndersampleMajority),
        "oversample" | "oversample_minority" => Ok(BalanceMode::OversampleMinority),
        _ => Err(Failure::usage(format!(
            "--balance must be `undersample` or `oversample`, got `{s}`"
        ))),
    }
}

/// `zeros` or `uniform:<scale>`.
pub fn parse_init(s: &str) -> Result<Init, Failure> {
    if s == "zeros" {
        return Ok(Init::Zeros);
    }
    if let Some(scale) = s.strip_prefix("uniform:") {
        if let Ok(v) = scale.parse::<f64>() {
            if v.is_finite() && v >= 0.0 {
                return Ok(Init::SeededUniform(v));
            }
        }
    }
    Err(Failure::usage(format!(
        "--init must be `zeros` or `uniform:<scale>`, got `{s}`"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn horizon_forms() {
        assert_eq!(parse_horizons("1..8").unwrap(), (1..=8).collect::<Vec<u8>>());
        assert_eq!(parse_horizons("1..=3").unwrap(), vec![1, 2, 3]);
        assert_eq!(parse_horizons("2-4").unwrap(), vec![2, 3, 4]);
        assert_eq!(parse_horizons("8,1,4,2").unwrap(), vec![1, 2, 4, 8]);
        assert_eq!(parse_horizons("1").unwrap(), vec![1]);
        assert!(parse_horizons("0..2").is_err());
        assert!(parse_horizons("5..2").is_err());
        assert!(parse_horizons("x").is_err());
    }

    #[test]
    fn cutoff_and_init_forms() {
        assert_eq!(parse_cutoff(&CutoffValue::Named("median".into())).unwrap(), LosCutoff::Median);
        assert_eq!(parse_cutoff(&CutoffValue::Named("8".into())).unwrap(), LosCutoff::Days(8.0));
        assert_eq!(parse_cutoff(&CutoffValue::Days(0.0)).unwrap(), LosCutoff::Days(0.0));
        assert!(parse_cutoff(&CutoffValue::Named("mean".into())).is_err());
        assert_eq!(parse_init("zeros").unwrap(), Init::Zeros);
        assert_eq!(parse_init("uniform:0.01").unwrap(), Init::SeededUniform(0.01));
        assert!(parse_init("uniform:-1").is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"reps": 3}"#).is_ok());
        assert!(serde_json::from_str::<RunConfig>(r#"{"repetitions": 3}"#).is_err());
        let c: RunConfig = serde_json::from_str(r#"{"cutoff": 8.5}"#).unwrap();
        assert!(matches!(c.cutoff, Some(CutoffValue::Days(d)) if d == 8.5));
    }
}
