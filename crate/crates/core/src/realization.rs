//! Realization: how much of an aligned generation is reused reference material.
//!
//! Every image is cut into a `grid_side × grid_side` grid. A generated patch is
//! reused when its best cosine to any patch of any reference image exceeds
//! `tau_reuse`; position plays no role. Visual reuse (VR) is the reused share
//! of patches, visual independence (VI) its complement, and the
//! transformation score CRT multiplies recognition by independence.

use serde::Serialize;

use crate::embedding::{dot, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::model::{Category, Thresholds, Variant};
use crate::recognition::{model_level_cra, ReferenceRecognition};
use crate::stats::{summarize, Summary};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RealizationRecord {
    pub image_id: String,
    pub reference_id: String,
    pub reuse_flags: Vec<bool>,
    pub vr: f64,
    pub vi: f64,
    /// Best bank cosine for each generated patch, grid order.
    pub per_patch_max: Vec<f64>,
}

impl RealizationRecord {
    pub fn reused_count(&self) -> usize {
        self.reuse_flags.iter().filter(|&&f| f).count()
    }
}

/// Scores one generated image's patches against the pooled patches of all
/// reference images.
pub fn patch_reuse(
    image_id: &str,
    reference_id: &str,
    generated: &EmbeddingMatrix,
    bank: &EmbeddingMatrix,
    thresholds: &Thresholds,
) -> Result<RealizationRecord> {
    let k = thresholds.patches();
    if generated.rows() != k {
        return Err(Error::GridMismatch {
            expected: k,
            actual: generated.rows(),
        });
    }
    if bank.is_empty() {
        return Err(Error::contract(format!("empty patch bank for {reference_id}")));
    }
    if generated.dim() != bank.dim() {
        return Err(Error::DimensionMismatch(generated.dim(), bank.dim()));
    }
    let per_patch_max: Vec<f64> = generated
        .iter_rows()
        .map(|p| {
            bank.iter_rows()
                .map(|q| dot(p, q).clamp(-1.0, 1.0))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let reuse_flags: Vec<bool> = per_patch_max.iter().map(|&s| s > thresholds.tau_reuse).collect();
    let reused = reuse_flags.iter().filter(|&&f| f).count();
    let vr = reused as f64 / k as f64;
    Ok(RealizationRecord {
        image_id: image_id.to_string(),
        reference_id: reference_id.to_string(),
        reuse_flags,
        vr,
        vi: 1.0 - vr,
        per_patch_max,
    })
}

pub fn compute_crt(cra: f64, vi: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&cra) || !(0.0..=1.0).contains(&vi) {
        return Err(Error::contract(format!("CRT inputs out of [0, 1]: cra={cra}, vi={vi}")));
    }
    Ok(cra * vi)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReferenceRealization {
    pub reference_id: String,
    pub model_name: String,
    pub variant: Variant,
    pub category: Category,
    pub cra: f64,
    /// VR over aligned images; `None` when nothing aligned.
    pub vr_align: Option<Summary>,
    pub vi_mean: Option<f64>,
    pub crt: f64,
    pub records: Vec<RealizationRecord>,
}

impl ReferenceRealization {
    pub fn aligned(&self) -> bool {
        self.vi_mean.is_some()
    }
}

/// Combines a reference's recognition with the realization records of its
/// aligned generations. One record is required per aligned image.
pub fn realize_reference(
    recognition: &ReferenceRecognition,
    records: Vec<RealizationRecord>,
) -> Result<ReferenceRealization> {
    let aligned: Vec<&str> = recognition
        .records
        .iter()
        .filter(|r| r.aligned)
        .map(|r| r.image_id.as_str())
        .collect();
    let mut got: Vec<&str> = records.iter().map(|r| r.image_id.as_str()).collect();
    let mut want = aligned.clone();
    got.sort_unstable();
    want.sort_unstable();
    if got != want {
        return Err(Error::contract(format!(
            "{}: realization records {:?} do not match aligned images {:?}",
            recognition.reference_id, got, want
        )));
    }
    let vrs: Vec<f64> = records.iter().map(|r| r.vr).collect();
    let vr_align = summarize(&vrs);
    let vi_mean = summarize(&records.iter().map(|r| r.vi).collect::<Vec<_>>()).map(|s| s.mean);
    let crt = match vi_mean {
        Some(vi) => compute_crt(recognition.cra, vi)?,
        None => 0.0,
    };
    Ok(ReferenceRealization {
        reference_id: recognition.reference_id.clone(),
        model_name: recognition.model_name.clone(),
        variant: recognition.variant,
        category: recognition.category,
        cra: recognition.cra,
        vr_align,
        vi_mean,
        crt,
        records,
    })
}

/// Model-level aggregates. Standard deviations run across references.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelSummary {
    pub n_references: usize,
    /// Share of references with at least one aligned generation.
    pub cra_model: f64,
    pub vr_align: Option<Summary>,
    /// CRT over references with an aligned generation.
    pub crt_align: Option<Summary>,
    /// CRT over all references, unaligned ones contributing 0.
    pub crt_all: Summary,
}

pub fn aggregate_model(
    realizations: &[ReferenceRealization],
    recognitions: &[ReferenceRecognition],
) -> Result<ModelSummary> {
    let mut a: Vec<&str> = realizations.iter().map(|r| r.reference_id.as_str()).collect();
    let mut b: Vec<&str> = recognitions.iter().map(|r| r.reference_id.as_str()).collect();
    a.sort_unstable();
    b.sort_unstable();
    if a != b {
        return Err(Error::contract("realizations and recognitions cover different references"));
    }
    let cra_model = model_level_cra(recognitions)?;
    let aligned: Vec<&ReferenceRealization> = realizations.iter().filter(|r| r.aligned()).collect();
    let vr_align = summarize(
        &aligned
            .iter()
            .filter_map(|r| r.vr_align.map(|s| s.mean))
            .collect::<Vec<_>>(),
    );
    let crt_align = summarize(&aligned.iter().map(|r| r.crt).collect::<Vec<_>>());
    let crt_all = summarize(&realizations.iter().map(|r| r.crt).collect::<Vec<_>>())
        .expect("nonempty after model_level_cra");
    Ok(ModelSummary {
        n_references: realizations.len(),
        cra_model,
        vr_align,
        crt_align,
        crt_all,
    })
}

/// Aligned images per reused-patch band on a 4×4 grid: `[3, 6)`, `[6, 11)`
/// and `[11, 16]`. Fewer than three reused patches is counted separately and
/// left out of the bands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct VrHistogram {
    pub low: usize,
    pub medium: usize,
    pub high: usize,
    pub below: usize,
}

impl VrHistogram {
    pub fn bands(&self) -> [usize; 3] {
        [self.low, self.medium, self.high]
    }
}

pub fn vr_histogram(records: &[RealizationRecord]) -> VrHistogram {
    let mut h = VrHistogram::default();
    for r in records {
        match r.reused_count() {
            0..=2 => h.below += 1,
            3..=5 => h.low += 1,
            6..=10 => h.medium += 1,
            _ => h.high += 1,
        }
    }
    h
}
