//! Prompt perturbation analysis.
//!
//! Compares a model's recognition of each reference under its original
//! prompt with recognition under a perturbed prompt (a synonym substitution or
//! a literal description). Retention counts references recognized (at least
//! one aligned generation) under both; ΔCRA averages over every matched
//! reference and ΔCRT over the retained subset only, each with a seeded
//! percentile-bootstrap 95% interval.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Category, Variant};
use crate::realization::ReferenceRealization;
use crate::recognition::ReferenceRecognition;

pub const BOOTSTRAP_RESAMPLES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Retention {
    pub recognized_before: usize,
    pub retained: usize,
    /// `None` when nothing was recognized before.
    pub retention_rate: Option<f64>,
    /// Reference ids present on only one side; excluded from every count.
    pub unmatched: Vec<String>,
    /// Reference ids recognized before and after.
    pub retained_ids: Vec<String>,
    pub matched: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DeltaStat {
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerturbationOutcome {
    pub model: String,
    /// Shared category of the inputs; `None` when mixed.
    pub category: Option<Category>,
    pub variant: Variant,
    pub retention: Retention,
    pub delta_cra: Option<DeltaStat>,
    /// `None` when the retained subset is empty.
    pub delta_crt_retained: Option<DeltaStat>,
}

fn check_sides(before: &[ReferenceRecognition], after: &[ReferenceRecognition]) -> Result<(String, Variant)> {
    let first = before
        .first()
        .or(after.first())
        .ok_or_else(|| Error::contract("perturbation analysis over no references"))?;
    let model = first.model_name.clone();
    if before.iter().chain(after).any(|r| r.model_name != model) {
        return Err(Error::contract("perturbation inputs mix models"));
    }
    if before.iter().any(|r| r.variant != Variant::Original) {
        return Err(Error::contract("'before' records must use the original prompt"));
    }
    let variant = after.first().map_or(Variant::Synonym, |r| r.variant);
    if variant == Variant::Original || after.iter().any(|r| r.variant != variant) {
        return Err(Error::contract("'after' records must share one perturbed variant"));
    }
    Ok((model, variant))
}

pub fn retention(before: &[ReferenceRecognition], after: &[ReferenceRecognition]) -> Result<Retention> {
    check_sides(before, after)?;
    let b: BTreeMap<&str, &ReferenceRecognition> = before.iter().map(|r| (r.reference_id.as_str(), r)).collect();
    let a: BTreeMap<&str, &ReferenceRecognition> = after.iter().map(|r| (r.reference_id.as_str(), r)).collect();
    let mut unmatched: Vec<String> = b
        .keys()
        .filter(|k| !a.contains_key(*k))
        .chain(a.keys().filter(|k| !b.contains_key(*k)))
        .map(|k| k.to_string())
        .collect();
    unmatched.sort();
    if !unmatched.is_empty() {
        log::warn!("{} references lack a counterpart and are excluded: {:?}", unmatched.len(), unmatched);
    }
    let mut recognized_before = 0;
    let mut retained_ids = Vec::new();
    let mut matched = 0;
    for (id, rb) in &b {
        let Some(ra) = a.get(id) else { continue };
        matched += 1;
        if rb.recognized() {
            recognized_before += 1;
            if ra.recognized() {
                retained_ids.push(id.to_string());
            }
        }
    }
    let retained = retained_ids.len();
    Ok(Retention {
        recognized_before,
        retained,
        retention_rate: (recognized_before > 0).then(|| retained as f64 / recognized_before as f64),
        unmatched,
        retained_ids,
        matched,
    })
}

/// Mean with a percentile-bootstrap 95% interval; `None` for no values.
pub fn bootstrap_mean(values: &[f64], resamples: usize, seed: u64) -> Option<DeltaStat> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..resamples.max(1))
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    Some(DeltaStat {
        mean,
        ci_low: quantile_sorted(&means, 0.025),
        ci_high: quantile_sorted(&means, 0.975),
        n,
    })
}

/// Linear interpolation between closest ranks.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn uniform_category(records: &[ReferenceRecognition]) -> Option<Category> {
    let first = records.first()?.category;
    records.iter().all(|r| r.category == first).then_some(first)
}

/// Retention plus ΔCRA (all matched references) and ΔCRT (retained only).
pub fn delta_metrics(
    before: &[ReferenceRecognition],
    after: &[ReferenceRecognition],
    realizations_before: &[ReferenceRealization],
    realizations_after: &[ReferenceRealization],
    seed: u64,
) -> Result<PerturbationOutcome> {
    let (model, variant) = check_sides(before, after)?;
    let ret = retention(before, after)?;
    let a: BTreeMap<&str, &ReferenceRecognition> = after.iter().map(|r| (r.reference_id.as_str(), r)).collect();
    let mut d_cra = Vec::new();
    let mut sorted_before: Vec<&ReferenceRecognition> = before.iter().collect();
    sorted_before.sort_by(|x, y| x.reference_id.cmp(&y.reference_id));
    for rb in sorted_before {
        if let Some(ra) = a.get(rb.reference_id.as_str()) {
            d_cra.push(ra.cra - rb.cra);
        }
    }
    let crt = |reals: &[ReferenceRealization], id: &str| -> Result<f64> {
        reals
            .iter()
            .find(|r| r.reference_id == id)
            .map(|r| r.crt)
            .ok_or_else(|| Error::contract(format!("no realization for retained reference {id}")))
    };
    let d_crt = ret
        .retained_ids
        .iter()
        .map(|id| Ok(crt(realizations_after, id)? - crt(realizations_before, id)?))
        .collect::<Result<Vec<f64>>>()?;
    let mut all = before.to_vec();
    all.extend_from_slice(after);
    Ok(PerturbationOutcome {
        model,
        category: uniform_category(&all),
        variant,
        delta_cra: bootstrap_mean(&d_cra, BOOTSTRAP_RESAMPLES, seed),
        delta_crt_retained: bootstrap_mean(&d_crt, BOOTSTRAP_RESAMPLES, seed ^ 0x5EED),
        retention: ret,
    })
}
