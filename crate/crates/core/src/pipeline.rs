//! End-to-end evaluation driver.
//!
//! Loads a manifest and its EMB1 sidecars, prunes incoherent dynamic
//! reference images, scores every (reference, model, variant) cell, and
//! writes the CSV/JSON artifacts. Work fans out per cell; files are written
//! by a single thread in a fixed order, so reruns are byte-identical.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::correlation::{correlation_table, quadrant_summary, read_features_csv, Feature, FeatureVector};
use crate::embedding::{EmbeddingKind, EmbeddingMatrix};
use crate::error::Error;
use crate::levels::{cra_crc_bins, cra_vr_export, mode_level, stats_by_level, LevelRecord};
use crate::model::{validate_manifest, Category, Manifest, Thresholds, ValidationReport, Variant};
use crate::perturbation::{delta_metrics, BOOTSTRAP_RESAMPLES};
use crate::realization::{aggregate_model, patch_reuse, realize_reference, vr_histogram, ReferenceRealization};
use crate::recognition::{recognize, ReferenceBank, ReferenceRecognition};
use crate::report::{fmt_f64, fmt_opt, write_json, Table};
use crate::stats::derive_seed;

pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_FAIL_THRESHOLD: f64 = 0.10;

/// Keeps candidates that have a similarity above `tau` to at least one other
/// kept candidate, dropping isolated ones until nothing changes. A single
/// candidate is kept as is.
pub fn coherence_filter(candidates: &EmbeddingMatrix, tau: f64) -> Result<(EmbeddingMatrix, Vec<usize>), Error> {
    if candidates.is_empty() {
        return Err(Error::contract("coherence filter over zero candidates"));
    }
    if candidates.rows() == 1 {
        return Ok((candidates.clone(), vec![0]));
    }
    let n = candidates.rows();
    let mut sim = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            sim[i * n + j] = crate::embedding::dot(candidates.row(i), candidates.row(j));
        }
    }
    let mut kept: Vec<usize> = (0..n).collect();
    loop {
        let next: Vec<usize> = kept
            .iter()
            .copied()
            .filter(|&i| kept.iter().any(|&j| j != i && sim[i * n + j] > tau))
            .collect();
        if next.len() == kept.len() {
            break;
        }
        kept = next;
    }
    if kept.is_empty() {
        return Err(Error::NoCoherentBank);
    }
    Ok((candidates.select_rows(&kept), kept))
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub manifest_path: PathBuf,
    pub output_dir: PathBuf,
    pub thresholds: Thresholds,
    pub seed: u64,
    /// Empty means every model.
    pub models: Vec<String>,
    /// Empty means every variant.
    pub variants: Vec<Variant>,
    /// Largest tolerated share of unresolvable images.
    pub fail_threshold: f64,
    pub permutations: usize,
    /// Optional `features.csv` overriding manifest feature values.
    pub features_path: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(manifest_path: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> RunConfig {
        RunConfig {
            manifest_path: manifest_path.into(),
            output_dir: output_dir.into(),
            thresholds: Thresholds::default(),
            seed: DEFAULT_SEED,
            models: Vec::new(),
            variants: Vec::new(),
            fail_threshold: DEFAULT_FAIL_THRESHOLD,
            permutations: crate::correlation::DEFAULT_PERMUTATIONS,
            features_path: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("manifest failed validation with {} violation(s)", .0.violations.len())]
    Validation(ValidationReport),
    #[error("{0}")]
    Format(Error),
    #[error("{failed} of {total} images unresolvable, above the {threshold} failure threshold")]
    Unresolved { failed: usize, total: usize, threshold: f64 },
    #[error(transparent)]
    Io(Error),
}

impl RunError {
    /// 1 for invalid input, 2 for I/O problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Validation(_) | RunError::Format(_) => 1,
            RunError::Unresolved { .. } | RunError::Io(_) => 2,
        }
    }
}

impl From<Error> for RunError {
    fn from(e: Error) -> Self {
        match e {
            Error::Io { .. } => RunError::Io(e),
            other => RunError::Format(other),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct ItemError {
    pub subject: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoherenceRecord {
    pub reference_id: String,
    pub candidates: usize,
    pub kept: Vec<String>,
}

/// Recognition and realization of one (reference, model, variant) cell.
#[derive(Debug, Clone)]
pub struct Cell {
    pub recognition: ReferenceRecognition,
    pub realization: ReferenceRealization,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub manifest: Manifest,
    /// Sorted by (model, variant, reference).
    pub cells: Vec<Cell>,
    pub item_errors: Vec<ItemError>,
    pub skipped_references: Vec<ItemError>,
    pub coherence: Vec<CoherenceRecord>,
    pub images_total: usize,
    pub images_failed: usize,
    /// SHA-256 of each input file, keyed by its manifest-relative path.
    pub digests: BTreeMap<String, String>,
}

/// Parsed matrix and hex digest, or the load error.
type Loaded = Result<(EmbeddingMatrix, String), String>;

struct Store {
    files: BTreeMap<String, Result<EmbeddingMatrix, String>>,
}

impl Store {
    fn load(base: &Path, paths: BTreeSet<String>) -> (Store, BTreeMap<String, String>) {
        let loaded: Vec<(String, Loaded)> = paths
            .into_par_iter()
            .map(|rel| {
                let path = base.join(&rel);
                let result = std::fs::read(&path)
                    .map_err(|e| format!("{}: {e}", path.display()))
                    .and_then(|bytes| {
                        let digest = hex::encode(Sha256::digest(&bytes));
                        EmbeddingMatrix::from_bytes(&bytes)
                            .map(|m| (m, digest))
                            .map_err(|e| format!("{}: {e}", path.display()))
                    });
                (rel, result)
            })
            .collect();
        let mut files = BTreeMap::new();
        let mut digests = BTreeMap::new();
        for (rel, r) in loaded {
            match r {
                Ok((m, d)) => {
                    digests.insert(rel.clone(), d);
                    files.insert(rel, Ok(m));
                }
                Err(e) => {
                    files.insert(rel, Err(e));
                }
            }
        }
        (Store { files }, digests)
    }

    fn file(&self, rel: &str) -> Result<&EmbeddingMatrix, String> {
        match self.files.get(rel) {
            Some(Ok(m)) => Ok(m),
            Some(Err(e)) => Err(e.clone()),
            None => Err(format!("{rel}: not loaded")),
        }
    }
}

struct Resolver<'a> {
    manifest: &'a Manifest,
    store: &'a Store,
    k: usize,
}

impl Resolver<'_> {
    fn global(&self, image_id: &str) -> Result<&[f32], String> {
        let entry = self
            .manifest
            .image_registry
            .get(image_id)
            .ok_or_else(|| "not in image registry".to_string())?;
        let m = self.store.file(&entry.global)?;
        if m.kind() != EmbeddingKind::Global {
            return Err(format!("{} is not a global embedding file", entry.global));
        }
        if entry.row >= m.rows() {
            return Err(format!("row {} out of range for {} ({} rows)", entry.row, entry.global, m.rows()));
        }
        Ok(m.row(entry.row))
    }

    fn patches(&self, image_id: &str) -> Result<EmbeddingMatrix, String> {
        let entry = self
            .manifest
            .image_registry
            .get(image_id)
            .ok_or_else(|| "not in image registry".to_string())?;
        let rel = entry.patches.as_ref().ok_or_else(|| "no patch embeddings registered".to_string())?;
        let m = self.store.file(rel)?;
        if m.kind() != EmbeddingKind::Patch {
            return Err(format!("{rel} is not a patch embedding file"));
        }
        let start = entry.patch_block * self.k;
        if m.rows() % self.k != 0 || start + self.k > m.rows() {
            return Err(format!(
                "{rel}: {} rows cannot hold patch block {} of {} rows",
                m.rows(),
                entry.patch_block,
                self.k
            ));
        }
        if m.rows() == self.k {
            return Ok(m.clone());
        }
        Ok(m.select_rows(&(start..start + self.k).collect::<Vec<_>>()))
    }
}

struct PreparedBank {
    bank: ReferenceBank,
    /// Errors are reported only once an aligned generation needs the bank.
    patches: Result<EmbeddingMatrix, Vec<ItemError>>,
}

fn err(subject: &str, message: impl Into<String>) -> ItemError {
    ItemError {
        subject: subject.to_string(),
        message: message.into(),
    }
}

fn prepare_bank(
    resolver: &Resolver<'_>,
    reference: &crate::model::Reference,
    thresholds: &Thresholds,
    errors: &mut Vec<ItemError>,
) -> Result<(PreparedBank, CoherenceRecord), ItemError> {
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for image in &reference.reference_image_ids {
        match resolver.global(image) {
            Ok(v) => {
                ids.push(image.clone());
                rows.extend_from_slice(v);
            }
            Err(e) => errors.push(err(image, e)),
        }
    }
    if ids.is_empty() {
        return Err(err(&reference.id, "no resolvable reference images"));
    }
    let dim = rows.len() / ids.len();
    let global = EmbeddingMatrix::new(EmbeddingKind::Global, dim, rows, "reference")
        .map_err(|e| err(&reference.id, e.to_string()))?;
    let candidates = ids.len();
    let (global, ids) = match reference.category {
        Category::Static => (global, ids),
        Category::Dynamic => {
            let (kept, idx) = coherence_filter(&global, thresholds.tau_coherence)
                .map_err(|e| err(&reference.id, e.to_string()))?;
            (kept, idx.into_iter().map(|i| ids[i].clone()).collect::<Vec<_>>())
        }
    };
    let coherence = CoherenceRecord {
        reference_id: reference.id.clone(),
        candidates,
        kept: ids.clone(),
    };
    let mut patch_parts = Vec::new();
    let mut patch_errors = Vec::new();
    for image in &ids {
        match resolver.patches(image) {
            Ok(m) => patch_parts.push(m),
            Err(e) => patch_errors.push(err(image, e)),
        }
    }
    let patches = if patch_errors.is_empty() {
        EmbeddingMatrix::concat(&patch_parts.iter().collect::<Vec<_>>())
            .map_err(|e| vec![err(&reference.id, e.to_string())])
    } else {
        Err(patch_errors)
    };
    let bank = ReferenceBank::new(reference.id.clone(), reference.category, ids, global)
        .map_err(|e| err(&reference.id, e.to_string()))?;
    Ok((PreparedBank { bank, patches }, coherence))
}

fn evaluate_cell(
    resolver: &Resolver<'_>,
    prepared: &PreparedBank,
    set: &crate::model::GenerationSet,
    thresholds: &Thresholds,
) -> (Option<Cell>, Vec<ItemError>) {
    let mut errors = Vec::new();
    let subject = format!("{}/{}/{}", set.reference_id, set.model_name, set.variant);
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for image in &set.image_ids {
        match resolver.global(image) {
            Ok(v) => {
                ids.push(image.clone());
                rows.extend_from_slice(v);
            }
            Err(e) => errors.push(err(image, e)),
        }
    }
    if ids.is_empty() {
        errors.push(err(&subject, "no resolvable generations"));
        return (None, errors);
    }
    let dim = rows.len() / ids.len();
    let result = (|| -> Result<Option<Cell>, Error> {
        let gens = EmbeddingMatrix::new(EmbeddingKind::Global, dim, rows, "generation")?;
        let recognition = recognize(&prepared.bank, &set.model_name, set.variant, &ids, &gens, thresholds)?;
        let mut records = Vec::new();
        for rec in recognition.records.iter().filter(|r| r.aligned) {
            let bank = match &prepared.patches {
                Ok(bank) => bank,
                Err(bank_errors) => {
                    errors.extend(bank_errors.iter().cloned());
                    return Ok(None);
                }
            };
            match resolver.patches(&rec.image_id) {
                Ok(p) => records.push(patch_reuse(&rec.image_id, &set.reference_id, &p, bank, thresholds)?),
                Err(e) => {
                    errors.push(err(&rec.image_id, e));
                    return Ok(None);
                }
            }
        }
        let realization = realize_reference(&recognition, records)?;
        Ok(Some(Cell {
            recognition,
            realization,
        }))
    })();
    match result {
        Ok(cell) => (cell, errors),
        Err(e) => {
            errors.push(err(&subject, e.to_string()));
            (None, errors)
        }
    }
}

/// Scores every selected cell without writing anything.
pub fn evaluate(config: &RunConfig) -> Result<Evaluation, RunError> {
    config.thresholds.validate()?;
    let manifest_bytes =
        std::fs::read(&config.manifest_path).map_err(|e| RunError::Io(Error::io(&config.manifest_path, e)))?;
    let text = String::from_utf8(manifest_bytes.clone())
        .map_err(|e| RunError::Format(Error::Input(format!("manifest is not UTF-8: {e}"))))?;
    let manifest = Manifest::from_json_str(&text)?;
    let report = validate_manifest(&manifest, &config.thresholds);
    if !report.is_valid() {
        return Err(RunError::Validation(report));
    }
    let base = config.manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let thresholds = config.thresholds;

    let mut sets: Vec<&crate::model::GenerationSet> = manifest
        .generation_sets
        .iter()
        .filter(|s| config.models.is_empty() || config.models.contains(&s.model_name))
        .filter(|s| config.variants.is_empty() || config.variants.contains(&s.variant))
        .collect();
    sets.sort_by(|a, b| {
        (&a.model_name, a.variant, &a.reference_id).cmp(&(&b.model_name, b.variant, &b.reference_id))
    });
    let ref_ids: BTreeSet<&str> = sets.iter().map(|s| s.reference_id.as_str()).collect();

    let mut needed: BTreeSet<&str> = BTreeSet::new();
    for id in &ref_ids {
        let r = manifest.reference(id).expect("validated");
        needed.extend(r.reference_image_ids.iter().map(String::as_str));
    }
    for s in &sets {
        needed.extend(s.image_ids.iter().map(String::as_str));
    }
    let mut paths = BTreeSet::new();
    for id in &needed {
        let entry = &manifest.image_registry[*id];
        paths.insert(entry.global.clone());
        if let Some(p) = &entry.patches {
            paths.insert(p.clone());
        }
    }
    let (store, mut digests) = Store::load(&base, paths);
    digests.insert(
        config
            .manifest_path
            .file_name()
            .map_or("manifest".into(), |f| f.to_string_lossy().into_owned()),
        hex::encode(Sha256::digest(&manifest_bytes)),
    );
    let resolver = Resolver {
        manifest: &manifest,
        store: &store,
        k: thresholds.patches(),
    };

    let mut item_errors = Vec::new();
    let mut skipped_references = Vec::new();
    let mut coherence = Vec::new();
    let mut banks: BTreeMap<&str, PreparedBank> = BTreeMap::new();
    for id in &ref_ids {
        let reference = manifest.reference(id).expect("validated");
        match prepare_bank(&resolver, reference, &thresholds, &mut item_errors) {
            Ok((bank, record)) => {
                coherence.push(record);
                banks.insert(id, bank);
            }
            Err(e) => skipped_references.push(e),
        }
    }

    let outcomes: Vec<(Option<Cell>, Vec<ItemError>)> = sets
        .par_iter()
        .map(|set| match banks.get(set.reference_id.as_str()) {
            Some(bank) => evaluate_cell(&resolver, bank, set, &thresholds),
            None => (None, Vec::new()),
        })
        .collect();
    let mut cells = Vec::new();
    for (cell, errors) in outcomes {
        item_errors.extend(errors);
        cells.extend(cell);
    }
    item_errors.sort();
    item_errors.dedup();
    for e in item_errors.iter().chain(&skipped_references) {
        log::warn!("{}: {}", e.subject, e.message);
    }

    let failed: BTreeSet<&str> = item_errors
        .iter()
        .map(|e| e.subject.as_str())
        .filter(|s| needed.contains(s))
        .collect();
    let images_failed = failed.len();
    let images_total = needed.len();
    if images_total > 0 && images_failed as f64 / images_total as f64 > config.fail_threshold {
        return Err(RunError::Unresolved {
            failed: images_failed,
            total: images_total,
            threshold: config.fail_threshold,
        });
    }
    drop(banks);
    Ok(Evaluation {
        manifest,
        cells,
        item_errors,
        skipped_references,
        coherence,
        images_total,
        images_failed,
        digests,
    })
}

/// Which artifact groups a run writes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    /// recognition, realization, model summary, VR histogram
    Evaluate,
    Perturb,
    /// correlations and quadrants
    Correlate,
    /// level variance, CRA/VR scatter, CRA/CRC bins
    Breakdowns,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Evaluate, Stage::Perturb, Stage::Correlate, Stage::Breakdowns];
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub files: Vec<String>,
    pub cells: usize,
    pub images_total: usize,
    pub images_failed: usize,
    pub item_errors: usize,
}

pub fn recognition_table(ev: &Evaluation) -> Table {
    let mut t = Table::new(&["reference_id", "model", "variant", "category", "cra", "crc", "n_aligned", "n"]);
    for c in &ev.cells {
        let r = &c.recognition;
        t.push(vec![
            r.reference_id.clone(),
            r.model_name.clone(),
            r.variant.to_string(),
            r.category.to_string(),
            fmt_f64(r.cra),
            fmt_opt(r.crc),
            r.n_aligned().to_string(),
            r.n().to_string(),
        ]);
    }
    t
}

pub fn realization_table(ev: &Evaluation) -> Table {
    let mut t = Table::new(&["image_id", "reference_id", "model", "variant", "vr", "vi", "reused_patch_count", "per_patch_max"]);
    for c in &ev.cells {
        let r = &c.realization;
        for rec in &r.records {
            let maxima: Vec<String> = rec.per_patch_max.iter().map(|v| fmt_f64(*v)).collect();
            t.push(vec![
                rec.image_id.clone(),
                rec.reference_id.clone(),
                r.model_name.clone(),
                r.variant.to_string(),
                fmt_f64(rec.vr),
                fmt_f64(rec.vi),
                rec.reused_count().to_string(),
                maxima.join(" "),
            ]);
        }
    }
    t
}

type GroupKey = (String, Variant, Category);

fn groups(ev: &Evaluation) -> BTreeMap<GroupKey, Vec<&Cell>> {
    let mut out: BTreeMap<GroupKey, Vec<&Cell>> = BTreeMap::new();
    for c in &ev.cells {
        let r = &c.recognition;
        out.entry((r.model_name.clone(), r.variant, r.category)).or_default().push(c);
    }
    out
}

pub fn model_summary_table(ev: &Evaluation) -> Result<Table, Error> {
    let mut t = Table::new(&[
        "model",
        "variant",
        "category",
        "n_references",
        "cra",
        "vr_align_mean",
        "vr_align_sd",
        "crt_align_mean",
        "crt_align_sd",
        "crt_all_mean",
        "crt_all_sd",
    ]);
    for ((model, variant, category), cells) in groups(ev) {
        let recs: Vec<ReferenceRecognition> = cells.iter().map(|c| c.recognition.clone()).collect();
        let reals: Vec<ReferenceRealization> = cells.iter().map(|c| c.realization.clone()).collect();
        let s = aggregate_model(&reals, &recs)?;
        t.push(vec![
            model,
            variant.to_string(),
            category.to_string(),
            s.n_references.to_string(),
            fmt_f64(s.cra_model),
            fmt_opt(s.vr_align.map(|x| x.mean)),
            fmt_opt(s.vr_align.map(|x| x.sd)),
            fmt_opt(s.crt_align.map(|x| x.mean)),
            fmt_opt(s.crt_align.map(|x| x.sd)),
            fmt_f64(s.crt_all.mean),
            fmt_f64(s.crt_all.sd),
        ]);
    }
    Ok(t)
}

pub fn vr_histogram_table(ev: &Evaluation) -> Table {
    let mut t = Table::new(&["model", "variant", "category", "low_3_6", "medium_6_11", "high_11_16", "below_3"]);
    for ((model, variant, category), cells) in groups(ev) {
        let records: Vec<_> = cells.iter().flat_map(|c| c.realization.records.iter().cloned()).collect();
        let h = vr_histogram(&records);
        t.push(vec![
            model,
            variant.to_string(),
            category.to_string(),
            h.low.to_string(),
            h.medium.to_string(),
            h.high.to_string(),
            h.below.to_string(),
        ]);
    }
    t
}

pub fn perturbation_table(ev: &Evaluation, seed: u64) -> Result<Table, Error> {
    let mut t = Table::new(&[
        "model",
        "category",
        "variant",
        "before",
        "retained",
        "retention_pct",
        "n_matched",
        "delta_cra_mean",
        "delta_cra_ci_low",
        "delta_cra_ci_high",
        "n_retained",
        "delta_crt_mean",
        "delta_crt_ci_low",
        "delta_crt_ci_high",
    ]);
    let g = groups(ev);
    let models: BTreeSet<&String> = g.keys().map(|k| &k.0).collect();
    let mut stream = 0u64;
    for model in models {
        for category in Category::ALL {
            let Some(before) = g.get(&(model.clone(), Variant::Original, category)) else { continue };
            for variant in [Variant::Synonym, Variant::Description] {
                let Some(after) = g.get(&(model.clone(), variant, category)) else { continue };
                stream += 1;
                let rb: Vec<_> = before.iter().map(|c| c.recognition.clone()).collect();
                let ra: Vec<_> = after.iter().map(|c| c.recognition.clone()).collect();
                let zb: Vec<_> = before.iter().map(|c| c.realization.clone()).collect();
                let za: Vec<_> = after.iter().map(|c| c.realization.clone()).collect();
                let out = delta_metrics(&rb, &ra, &zb, &za, derive_seed(seed, stream))?;
                let ret = &out.retention;
                t.push(vec![
                    model.clone(),
                    category.to_string(),
                    variant.to_string(),
                    ret.recognized_before.to_string(),
                    ret.retained.to_string(),
                    fmt_opt(ret.retention_rate.map(|r| r * 100.0)),
                    ret.matched.to_string(),
                    fmt_opt(out.delta_cra.map(|d| d.mean)),
                    fmt_opt(out.delta_cra.map(|d| d.ci_low)),
                    fmt_opt(out.delta_cra.map(|d| d.ci_high)),
                    ret.retained.to_string(),
                    fmt_opt(out.delta_crt_retained.map(|d| d.mean)),
                    fmt_opt(out.delta_crt_retained.map(|d| d.ci_low)),
                    fmt_opt(out.delta_crt_retained.map(|d| d.ci_high)),
                ]);
            }
        }
    }
    Ok(t)
}

pub const ALL_MODELS: &str = "all";

/// Per-reference CRA under the original prompt, per model plus the mean over
/// models under [`ALL_MODELS`].
fn cra_by_model(ev: &Evaluation) -> BTreeMap<String, BTreeMap<String, f64>> {
    let mut out: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    let mut pooled: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for c in ev.cells.iter().filter(|c| c.recognition.variant == Variant::Original) {
        let r = &c.recognition;
        out.entry(r.model_name.clone()).or_default().insert(r.reference_id.clone(), r.cra);
        pooled.entry(r.reference_id.clone()).or_default().push(r.cra);
    }
    if !pooled.is_empty() {
        out.insert(
            ALL_MODELS.to_string(),
            pooled.into_iter().map(|(k, v)| (k, v.iter().sum::<f64>() / v.len() as f64)).collect(),
        );
    }
    out
}

fn feature_vectors(ev: &Evaluation, features_path: Option<&Path>) -> Result<Vec<FeatureVector>, Error> {
    let mut by_id: BTreeMap<String, FeatureVector> = ev
        .manifest
        .references
        .iter()
        .map(|r| (r.id.clone(), FeatureVector::from_reference(r)))
        .collect();
    if let Some(path) = features_path {
        for fv in read_features_csv(path)? {
            let entry = by_id.entry(fv.reference_id.clone()).or_insert_with(|| FeatureVector {
                reference_id: fv.reference_id.clone(),
                values: BTreeMap::new(),
            });
            entry.values.extend(fv.values);
        }
    }
    Ok(by_id.into_values().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuadrantEntry {
    pub model: String,
    pub category: Category,
    pub feature: Feature,
    pub n: usize,
    pub summary: crate::correlation::QuadrantSummary,
}

pub const QUADRANT_FEATURES: [Feature; 3] =
    [Feature::CreationYear, Feature::ImageMemorability, Feature::TextUniqueness];

pub fn correlation_outputs(
    ev: &Evaluation,
    features_path: Option<&Path>,
    permutations: usize,
    seed: u64,
) -> Result<(Table, Vec<QuadrantEntry>), Error> {
    let features = feature_vectors(ev, features_path)?;
    let categories: BTreeMap<String, Category> =
        ev.manifest.references.iter().map(|r| (r.id.clone(), r.category)).collect();
    let mut t = Table::new(&["model", "category", "feature", "rho", "p_value", "n_used", "significant", "flag"]);
    let mut quads = Vec::new();
    for (mi, (model, cra)) in cra_by_model(ev).into_iter().enumerate() {
        for row in correlation_table(&features, &cra, &categories, permutations, derive_seed(seed, mi as u64)) {
            t.push(vec![
                model.clone(),
                row.category.to_string(),
                row.feature.to_string(),
                fmt_opt(row.rho),
                fmt_opt(row.p_value),
                row.n_used.to_string(),
                row.significant.to_string(),
                match row.flag {
                    Some(crate::correlation::RowFlag::InsufficientN) => "insufficient n".into(),
                    Some(crate::correlation::RowFlag::Undefined) => "undefined".into(),
                    None => String::new(),
                },
            ]);
        }
        for category in Category::ALL {
            for feature in QUADRANT_FEATURES {
                let (mut xs, mut ys, mut cs) = (Vec::new(), Vec::new(), Vec::new());
                for fv in &features {
                    if categories.get(&fv.reference_id) != Some(&category) {
                        continue;
                    }
                    if let (Some(x), Some(y), Some(c)) =
                        (fv.get(feature), fv.get(Feature::NDedupPairs), cra.get(&fv.reference_id))
                    {
                        xs.push(x);
                        ys.push(y);
                        cs.push(*c);
                    }
                }
                if xs.len() < 4 {
                    continue;
                }
                quads.push(QuadrantEntry {
                    model: model.clone(),
                    category,
                    feature,
                    n: xs.len(),
                    summary: quadrant_summary(&xs, &ys, &cs)?,
                });
            }
        }
    }
    Ok((t, quads))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HighCrtShare {
    pub model: String,
    pub category: Category,
    pub aligned_references: usize,
    pub high_crt_percent: Option<f64>,
}

pub struct Breakdowns {
    pub level_variance: Table,
    pub scatter: Table,
    pub crc_bins: Table,
    pub high_crt: Vec<HighCrtShare>,
    pub rejected_levels: usize,
}

pub fn breakdowns(ev: &Evaluation) -> Breakdowns {
    let levels = ev.manifest.pdfe_levels_by_reference_model();
    let mut level_variance =
        Table::new(&["category", "level", "metric", "mean", "sd", "min", "max", "n"]);
    let mut scatter = Table::new(&["model", "category", "reference_id", "cra", "vr_mean", "crt", "high_crt"]);
    let mut crc_bins = Table::new(&["model", "cra_bin", "mean_crc", "count"]);
    let mut high_crt = Vec::new();
    let mut rejected_levels = 0;
    let g = groups(ev);

    for category in Category::ALL {
        let records: Vec<LevelRecord> = ev
            .cells
            .iter()
            .filter(|c| c.recognition.variant == Variant::Original && c.recognition.category == category)
            .filter_map(|c| {
                let r = &c.realization;
                let level = mode_level(levels.get(&(r.reference_id.clone(), r.model_name.clone()))?)?;
                Some(LevelRecord {
                    reference_id: r.reference_id.clone(),
                    model: r.model_name.clone(),
                    pdfe_level: level,
                    cra: r.cra,
                    vr: r.vr_align.map(|s| s.mean),
                    crt: r.crt,
                })
            })
            .collect();
        let b = stats_by_level(&records);
        rejected_levels += b.rejected.len();
        for s in b.stats {
            level_variance.push(vec![
                category.to_string(),
                s.level.to_string(),
                s.metric.as_str().to_string(),
                fmt_f64(s.summary.mean),
                fmt_f64(s.summary.sd),
                fmt_f64(s.summary.min),
                fmt_f64(s.summary.max),
                s.summary.n.to_string(),
            ]);
        }
    }

    for ((model, variant, category), cells) in &g {
        if *variant != Variant::Original {
            continue;
        }
        let input: Vec<(String, f64, Option<f64>, f64)> = cells
            .iter()
            .map(|c| {
                let r = &c.realization;
                (r.reference_id.clone(), r.cra, r.vr_align.map(|s| s.mean), r.crt)
            })
            .collect();
        let export = cra_vr_export(&input);
        for row in &export.rows {
            scatter.push(vec![
                model.clone(),
                category.to_string(),
                row.reference_id.clone(),
                fmt_f64(row.cra),
                fmt_f64(row.vr_mean),
                fmt_f64(row.crt),
                row.high_crt.to_string(),
            ]);
        }
        high_crt.push(HighCrtShare {
            model: model.clone(),
            category: *category,
            aligned_references: export.rows.len(),
            high_crt_percent: export.high_crt_percent,
        });
        if *category == Category::Dynamic {
            let input: Vec<(String, f64, f64)> = cells
                .iter()
                .filter_map(|c| {
                    let r = &c.recognition;
                    r.crc.map(|crc| (r.reference_id.clone(), r.cra, crc))
                })
                .collect();
            for bin in cra_crc_bins(&input).bins {
                crc_bins.push(vec![
                    model.clone(),
                    format!("{:.1}", bin.cra_bin),
                    fmt_f64(bin.mean_crc),
                    bin.count.to_string(),
                ]);
            }
        }
    }
    Breakdowns {
        level_variance,
        scatter,
        crc_bins,
        high_crt,
        rejected_levels,
    }
}

#[derive(Serialize)]
struct RunMeta<'a> {
    tool: &'static str,
    version: &'static str,
    thresholds: &'a Thresholds,
    seed: u64,
    permutations: usize,
    bootstrap_resamples: usize,
    fail_threshold: f64,
    models: &'a [String],
    variants: Vec<Variant>,
    input_digests: &'a BTreeMap<String, String>,
    cells: usize,
    images_total: usize,
    images_failed: usize,
    item_errors: &'a [ItemError],
    skipped_references: &'a [ItemError],
    coherence: &'a [CoherenceRecord],
    high_crt: Option<&'a [HighCrtShare]>,
    rejected_level_records: Option<usize>,
}

/// Evaluates and writes the artifacts of the requested stages.
pub fn run_stages(config: &RunConfig, stages: &[Stage]) -> Result<RunSummary, RunError> {
    let ev = evaluate(config)?;
    let out = &config.output_dir;
    std::fs::create_dir_all(out).map_err(|e| RunError::Io(Error::io(out, e)))?;
    let mut files = Vec::new();
    let mut write = |name: &str, table: &Table| -> Result<(), RunError> {
        table.write(&out.join(name)).map_err(RunError::from)?;
        files.push(name.to_string());
        Ok(())
    };
    let mut digests = ev.digests.clone();

    if stages.contains(&Stage::Evaluate) {
        write("recognition.csv", &recognition_table(&ev))?;
        write("realization.csv", &realization_table(&ev))?;
        write("model_summary.csv", &model_summary_table(&ev)?)?;
        write("vr_histogram.csv", &vr_histogram_table(&ev))?;
    }
    if stages.contains(&Stage::Perturb) {
        write("perturbation.csv", &perturbation_table(&ev, config.seed)?)?;
    }
    let mut quadrants = None;
    if stages.contains(&Stage::Correlate) {
        if let Some(p) = &config.features_path {
            let bytes = std::fs::read(p).map_err(|e| RunError::Io(Error::io(p, e)))?;
            digests.insert(
                p.file_name().map_or("features".into(), |f| f.to_string_lossy().into_owned()),
                hex::encode(Sha256::digest(&bytes)),
            );
        }
        let (table, quads) =
            correlation_outputs(&ev, config.features_path.as_deref(), config.permutations, config.seed)?;
        write("correlations.csv", &table)?;
        quadrants = Some(quads);
    }
    let mut breakdown = None;
    if stages.contains(&Stage::Breakdowns) {
        let b = breakdowns(&ev);
        write("level_variance.csv", &b.level_variance)?;
        write("cra_vr_scatter.csv", &b.scatter)?;
        write("cra_crc_bins.csv", &b.crc_bins)?;
        breakdown = Some(b);
    }
    if let Some(q) = quadrants {
        write_json(&out.join("quadrants.json"), &q)?;
        files.push("quadrants.json".into());
    }
    let meta = RunMeta {
        tool: "iconometer",
        version: env!("CARGO_PKG_VERSION"),
        thresholds: &config.thresholds,
        seed: config.seed,
        permutations: config.permutations,
        bootstrap_resamples: BOOTSTRAP_RESAMPLES,
        fail_threshold: config.fail_threshold,
        models: &config.models,
        variants: config.variants.clone(),
        input_digests: &digests,
        cells: ev.cells.len(),
        images_total: ev.images_total,
        images_failed: ev.images_failed,
        item_errors: &ev.item_errors,
        skipped_references: &ev.skipped_references,
        coherence: &ev.coherence,
        high_crt: breakdown.as_ref().map(|b| b.high_crt.as_slice()),
        rejected_level_records: breakdown.as_ref().map(|b| b.rejected_levels),
    };
    write_json(&out.join("run_meta.json"), &meta)?;
    files.push("run_meta.json".into());

    Ok(RunSummary {
        files,
        cells: ev.cells.len(),
        images_total: ev.images_total,
        images_failed: ev.images_failed,
        item_errors: ev.item_errors.len(),
    })
}

/// Full run: every artifact.
pub fn run_pipeline(config: &RunConfig) -> Result<RunSummary, RunError> {
    run_stages(config, &Stage::ALL)
}
