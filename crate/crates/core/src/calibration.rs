//! Threshold calibration from labeled similarity pairs.
//!
//! Pairs of images from the same reference should score high and pairs from
//! different references low. Sweeping a threshold over a grid and treating
//! `sim > tau` as a positive gives precision, recall (true-match retention),
//! false-positive rate and F1 per candidate; the best-F1 candidate is chosen.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairLabel {
    Same,
    Different,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairSample {
    pub sim: f64,
    pub label: PairLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepPoint {
    pub tau: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub fpr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn at(samples: &[PairSample], tau: f64) -> Confusion {
        let mut c = Confusion::default();
        for s in samples {
            match (s.sim > tau, s.label) {
                (true, PairLabel::Same) => c.tp += 1,
                (true, PairLabel::Different) => c.fp += 1,
                (false, PairLabel::Same) => c.fn_ += 1,
                (false, PairLabel::Different) => c.tn += 1,
            }
        }
        c
    }

    fn ratio(num: usize, den: usize) -> f64 {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    }

    /// Zero when nothing is predicted positive.
    pub fn precision(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fn_)
    }

    pub fn fpr(&self) -> f64 {
        Self::ratio(self.fp, self.fp + self.tn)
    }

    pub fn f1(&self) -> f64 {
        Self::ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }
}

/// Counts per label over equal-width bins spanning `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityHistogram {
    pub edges: Vec<f64>,
    pub same: Vec<usize>,
    pub different: Vec<usize>,
}

pub const HISTOGRAM_BINS: usize = 40;

impl SimilarityHistogram {
    pub fn build(samples: &[PairSample], bins: usize) -> SimilarityHistogram {
        let edges: Vec<f64> = (0..=bins).map(|i| -1.0 + 2.0 * i as f64 / bins as f64).collect();
        let mut same = vec![0; bins];
        let mut different = vec![0; bins];
        for s in samples {
            let idx = (((s.sim + 1.0) / 2.0 * bins as f64).floor() as isize).clamp(0, bins as isize - 1) as usize;
            match s.label {
                PairLabel::Same => same[idx] += 1,
                PairLabel::Different => different[idx] += 1,
            }
        }
        SimilarityHistogram { edges, same, different }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationReport {
    pub mu_same: f64,
    pub mu_diff: f64,
    pub n_same: usize,
    pub n_diff: usize,
    pub chosen_tau: f64,
    pub true_match_retention: f64,
    pub false_positive_rate: f64,
    pub f1: f64,
    /// Ascending in tau.
    pub sweep: Vec<SweepPoint>,
    pub histogram: SimilarityHistogram,
}

/// 0.50, 0.55, ..., 0.90.
pub fn default_grid() -> Vec<f64> {
    (10..=18).map(|i| i as f64 * 5.0 / 100.0).collect()
}

pub fn calibrate(samples: &[PairSample], grid: &[f64]) -> Result<CalibrationReport> {
    if grid.is_empty() {
        return Err(Error::contract("empty calibration grid"));
    }
    if let Some(bad) = samples.iter().find(|s| !s.sim.is_finite()) {
        return Err(Error::Input(format!("non-finite similarity {}", bad.sim)));
    }
    let same: Vec<f64> = samples.iter().filter(|s| s.label == PairLabel::Same).map(|s| s.sim).collect();
    let diff: Vec<f64> = samples.iter().filter(|s| s.label == PairLabel::Different).map(|s| s.sim).collect();
    if same.is_empty() || diff.is_empty() {
        return Err(Error::DegenerateCalibration("both same and different pairs are required"));
    }
    let mut taus = grid.to_vec();
    taus.sort_by(f64::total_cmp);
    taus.dedup();
    let sweep: Vec<SweepPoint> = taus
        .iter()
        .map(|&tau| {
            let c = Confusion::at(samples, tau);
            SweepPoint {
                tau,
                precision: c.precision(),
                recall: c.recall(),
                f1: c.f1(),
                fpr: c.fpr(),
            }
        })
        .collect();
    // strict > keeps the lowest tau on ties
    let best = sweep
        .iter()
        .fold(None::<&SweepPoint>, |acc, p| match acc {
            Some(b) if p.f1 <= b.f1 => Some(b),
            _ => Some(p),
        })
        .expect("grid nonempty");
    Ok(CalibrationReport {
        mu_same: same.iter().sum::<f64>() / same.len() as f64,
        mu_diff: diff.iter().sum::<f64>() / diff.len() as f64,
        n_same: same.len(),
        n_diff: diff.len(),
        chosen_tau: best.tau,
        true_match_retention: best.recall,
        false_positive_rate: best.fpr,
        f1: best.f1,
        histogram: SimilarityHistogram::build(samples, HISTOGRAM_BINS),
        sweep,
    })
}

#[derive(Debug, Deserialize)]
struct PairRow {
    sim: f64,
    label: PairLabel,
}

/// Reads `pairs.csv` with header `sim,label` and labels `same`/`different`.
pub fn read_pairs_csv(path: &Path) -> Result<Vec<PairSample>> {
    let mut reader = csv::Reader::from_path(path)?;
    reader
        .deserialize::<PairRow>()
        .map(|row| {
            let row = row?;
            Ok(PairSample { sim: row.sim, label: row.label })
        })
        .collect()
}
