//! Shared domain types, thresholds, and manifest validation.
//!
//! A manifest is one JSON document describing the cultural references under
//! evaluation, the generation sets produced for them, where each image's
//! embeddings live on disk, and optional third-party replication scores.
//! Embeddings themselves are stored in EMB1 sidecar files (see
//! [`crate::embedding`]).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum sitelink count (exclusive) for a reference in compliance mode.
pub const SITELINK_MINIMUM: u64 = 20;

/// Default number of generations per (reference, model, variant).
pub const DEFAULT_GENERATIONS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    /// One canonical image (artwork, album cover, photograph).
    Static,
    /// Many valid depictions sharing recognizable motifs (film, series).
    Dynamic,
}

impl Category {
    pub const ALL: [Category; 2] = [Category::Static, Category::Dynamic];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Static => "static",
            Category::Dynamic => "dynamic",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which prompt produced a generation set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Original,
    Synonym,
    Description,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Original, Variant::Synonym, Variant::Description];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Original => "original",
            Variant::Synonym => "synonym",
            Variant::Description => "description",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(Variant::Original),
            "synonym" => Ok(Variant::Synonym),
            "description" => Ok(Variant::Description),
            other => Err(Error::Input(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub id: String,
    /// Prompt text.
    pub title: String,
    pub category: Category,
    pub reference_image_ids: Vec<String>,
    #[serde(default)]
    pub sitelink_count: u64,
    #[serde(default)]
    pub creation_year: Option<i32>,
    /// Ingested per-reference feature values keyed by feature name.
    #[serde(default)]
    pub features: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationSet {
    pub reference_id: String,
    pub model_name: String,
    pub variant: Variant,
    pub image_ids: Vec<String>,
}

/// Decision thresholds shared by every metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Global similarity above which a generation counts as aligned.
    pub tau_align: f64,
    /// Patch similarity above which a patch counts as reused.
    pub tau_reuse: f64,
    /// Pairwise similarity used to prune incoherent dynamic reference images.
    pub tau_coherence: f64,
    /// Copy-detection score above which a training match is a near-duplicate.
    pub tau_dedup: f64,
    /// Patches per grid side; an image yields `grid_side²` patches.
    pub grid_side: usize,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            tau_align: 0.7,
            tau_reuse: 0.6,
            tau_coherence: 0.7,
            tau_dedup: 0.90,
            grid_side: 4,
        }
    }
}

impl Thresholds {
    /// Number of patches per image.
    pub fn patches(&self) -> usize {
        self.grid_side * self.grid_side
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("tau_align", self.tau_align),
            ("tau_reuse", self.tau_reuse),
            ("tau_coherence", self.tau_coherence),
            ("tau_dedup", self.tau_dedup),
        ];
        for (name, value) in named {
            if !(value > 0.0 && value < 1.0) {
                return Err(Error::Thresholds(format!(
                    "{name} = {value} is not strictly between 0 and 1"
                )));
            }
        }
        if self.grid_side == 0 {
            return Err(Error::Thresholds("grid_side must be at least 1".into()));
        }
        Ok(())
    }
}

/// Where one image's embeddings are stored, relative to the manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageEntry {
    /// EMB1 file holding the global embedding.
    pub global: String,
    /// Row of `global` belonging to this image.
    #[serde(default)]
    pub row: usize,
    /// EMB1 patch file (`grid_side²` rows); needed only for realization.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patches: Option<String>,
    /// Block of `grid_side²` rows in `patches` belonging to this image, for
    /// files holding several images.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub patch_block: usize,
}

fn is_zero(v: &usize) -> bool {
    *v == 0
}

/// Third-party replication scores for one (generated image, reference) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalScore {
    pub image_id: String,
    pub reference_id: String,
    #[serde(default)]
    pub sscd: Option<f64>,
    #[serde(default)]
    pub pdfe_level: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default)]
    pub compliance_mode: bool,
    pub references: Vec<Reference>,
    #[serde(default)]
    pub generation_sets: Vec<GenerationSet>,
    #[serde(default)]
    pub image_registry: BTreeMap<String, ImageEntry>,
    #[serde(default)]
    pub external_scores: Vec<ExternalScore>,
}

impl Manifest {
    /// Parses a manifest, reporting the line and column of any syntax or
    /// schema error.
    pub fn from_json_str(text: &str) -> Result<Manifest> {
        serde_json::from_str(text).map_err(|e| Error::ManifestFormat {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }

    pub fn from_path(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Manifest::from_json_str(&text)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn reference(&self, id: &str) -> Option<&Reference> {
        self.references.iter().find(|r| r.id == id)
    }

    /// PDFE levels per (reference id, model) collected from external scores,
    /// joined through the generation sets that own each image.
    pub fn pdfe_levels_by_reference_model(&self) -> BTreeMap<(String, String), Vec<i64>> {
        let mut owner: BTreeMap<(&str, &str), &str> = BTreeMap::new();
        for set in &self.generation_sets {
            if set.variant != Variant::Original {
                continue;
            }
            for image in &set.image_ids {
                owner.insert((image.as_str(), set.reference_id.as_str()), set.model_name.as_str());
            }
        }
        let mut out: BTreeMap<(String, String), Vec<i64>> = BTreeMap::new();
        for score in &self.external_scores {
            let Some(level) = score.pdfe_level else { continue };
            if let Some(model) = owner.get(&(score.image_id.as_str(), score.reference_id.as_str())) {
                out.entry((score.reference_id.clone(), (*model).to_string()))
                    .or_default()
                    .push(level);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ViolationKind {
    InvalidThresholds,
    DuplicateReference,
    StaticCardinality,
    EmptyDynamicBank,
    SitelinkThreshold,
    UnresolvedImage,
    DanglingReference,
    EmptyGenerationSet,
    DuplicateGenerationSet,
    PdfeLevelOutOfRange,
    NonFiniteValue,
    ImplausibleYear,
}

impl ViolationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ViolationKind::InvalidThresholds => "invalid thresholds",
            ViolationKind::DuplicateReference => "duplicate reference",
            ViolationKind::StaticCardinality => "static cardinality",
            ViolationKind::EmptyDynamicBank => "empty dynamic bank",
            ViolationKind::SitelinkThreshold => "sitelink threshold",
            ViolationKind::UnresolvedImage => "unresolved image",
            ViolationKind::DanglingReference => "dangling reference",
            ViolationKind::EmptyGenerationSet => "empty generation set",
            ViolationKind::DuplicateGenerationSet => "duplicate generation set",
            ViolationKind::PdfeLevelOutOfRange => "pdfe level out of range",
            ViolationKind::NonFiniteValue => "non-finite value",
            ViolationKind::ImplausibleYear => "implausible year",
        }
    }
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Violation {
    pub kind: ViolationKind,
    /// Reference, generation set or image the violation is about.
    pub subject: String,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} [{}]: {}", self.kind, self.subject, self.detail)
    }
}

/// Every invariant violation found in a manifest, sorted.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn count(&self, kind: ViolationKind) -> usize {
        self.violations.iter().filter(|v| v.kind == kind).count()
    }
}

pub fn validate_manifest(manifest: &Manifest, thresholds: &Thresholds) -> ValidationReport {
    let mut out = Vec::new();
    let mut push = |kind, subject: &str, detail: String| {
        out.push(Violation {
            kind,
            subject: subject.to_string(),
            detail,
        })
    };

    if let Err(e) = thresholds.validate() {
        push(ViolationKind::InvalidThresholds, "thresholds", e.to_string());
    }

    let registry = &manifest.image_registry;
    let mut seen = BTreeSet::new();
    for r in &manifest.references {
        if !seen.insert(r.id.as_str()) {
            push(ViolationKind::DuplicateReference, &r.id, "reference id appears more than once".into());
        }
        match r.category {
            Category::Static if r.reference_image_ids.len() != 1 => push(
                ViolationKind::StaticCardinality,
                &r.id,
                format!("static reference has {} reference images, expected 1", r.reference_image_ids.len()),
            ),
            Category::Dynamic if r.reference_image_ids.is_empty() => push(
                ViolationKind::EmptyDynamicBank,
                &r.id,
                "dynamic reference has no reference images".into(),
            ),
            _ => {}
        }
        if manifest.compliance_mode && r.sitelink_count <= SITELINK_MINIMUM {
            push(
                ViolationKind::SitelinkThreshold,
                &r.id,
                format!("{} sitelinks, need more than {SITELINK_MINIMUM}", r.sitelink_count),
            );
        }
        for image in &r.reference_image_ids {
            if !registry.contains_key(image) {
                push(ViolationKind::UnresolvedImage, image, format!("reference image of {}", r.id));
            }
        }
        if let Some(year) = r.creation_year {
            if !(1000..=2100).contains(&year) {
                push(ViolationKind::ImplausibleYear, &r.id, format!("creation_year {year}"));
            }
        }
        for (name, value) in &r.features {
            if !value.is_finite() {
                push(ViolationKind::NonFiniteValue, &r.id, format!("feature {name}"));
            }
        }
    }

    let mut sets = BTreeSet::new();
    for set in &manifest.generation_sets {
        let subject = format!("{}/{}/{}", set.reference_id, set.model_name, set.variant);
        if !seen.contains(set.reference_id.as_str()) {
            push(ViolationKind::DanglingReference, &subject, format!("unknown reference {}", set.reference_id));
        }
        if set.image_ids.is_empty() {
            push(ViolationKind::EmptyGenerationSet, &subject, "no generated images".into());
        }
        if !sets.insert((set.reference_id.as_str(), set.model_name.as_str(), set.variant)) {
            push(ViolationKind::DuplicateGenerationSet, &subject, "declared more than once".into());
        }
        for image in &set.image_ids {
            if !registry.contains_key(image) {
                push(ViolationKind::UnresolvedImage, image, format!("generated image of {subject}"));
            }
        }
    }

    for score in &manifest.external_scores {
        let subject = format!("{}@{}", score.image_id, score.reference_id);
        if !registry.contains_key(&score.image_id) {
            push(ViolationKind::UnresolvedImage, &score.image_id, "external score image".into());
        }
        if !seen.contains(score.reference_id.as_str()) {
            push(ViolationKind::DanglingReference, &subject, format!("unknown reference {}", score.reference_id));
        }
        if let Some(level) = score.pdfe_level {
            if !(0..=5).contains(&level) {
                push(ViolationKind::PdfeLevelOutOfRange, &subject, format!("pdfe_level {level}"));
            }
        }
        if let Some(sscd) = score.sscd {
            if !sscd.is_finite() {
                push(ViolationKind::NonFiniteValue, &subject, "sscd".into());
            }
        }
    }

    out.sort();
    ValidationReport { violations: out }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(path: &str) -> ImageEntry {
        ImageEntry {
            global: path.into(),
            row: 0,
            patches: None,
            patch_block: 0,
        }
    }

    fn two_reference_manifest() -> Manifest {
        let mut registry = BTreeMap::new();
        for id in ["mona", "jaws1", "jaws2", "g1", "g2"] {
            registry.insert(id.to_string(), entry(&format!("{id}.emb1")));
        }
        Manifest {
            compliance_mode: true,
            references: vec![
                Reference {
                    id: "mona-lisa".into(),
                    title: "Mona Lisa".into(),
                    category: Category::Static,
                    reference_image_ids: vec!["mona".into()],
                    sitelink_count: 150,
                    creation_year: Some(1503),
                    features: BTreeMap::new(),
                },
                Reference {
                    id: "jaws".into(),
                    title: "Jaws".into(),
                    category: Category::Dynamic,
                    reference_image_ids: vec!["jaws1".into(), "jaws2".into()],
                    sitelink_count: 80,
                    creation_year: Some(1975),
                    features: BTreeMap::new(),
                },
            ],
            generation_sets: vec![GenerationSet {
                reference_id: "jaws".into(),
                model_name: "sdxl".into(),
                variant: Variant::Original,
                image_ids: vec!["g1".into(), "g2".into()],
            }],
            image_registry: registry,
            external_scores: vec![],
        }
    }

    #[test]
    fn defaults_match_reference_constants() {
        let t = Thresholds::default();
        assert_eq!(t.tau_align, 0.7);
        assert_eq!(t.tau_reuse, 0.6);
        assert_eq!(t.tau_coherence, 0.7);
        assert_eq!(t.tau_dedup, 0.90);
        assert_eq!(t.grid_side, 4);
        assert_eq!(t.patches(), 16);
        t.validate().unwrap();
    }

    #[test]
    fn rejects_out_of_range_thresholds() {
        let t = Thresholds { tau_align: 1.0, ..Thresholds::default() };
        assert!(t.validate().is_err());
        let t = Thresholds { grid_side: 0, ..Thresholds::default() };
        assert!(t.validate().is_err());
    }

    #[test]
    fn well_formed_manifest_is_valid() {
        let report = validate_manifest(&two_reference_manifest(), &Thresholds::default());
        assert!(report.is_valid(), "{:?}", report.violations);
    }

    #[test]
    fn static_with_two_images_is_one_violation() {
        let mut m = two_reference_manifest();
        m.references[0].reference_image_ids.push("jaws1".into());
        let report = validate_manifest(&m, &Thresholds::default());
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].kind, ViolationKind::StaticCardinality);
        assert_eq!(report.violations[0].subject, "mona-lisa");
    }

    #[test]
    fn dangling_generation_set() {
        let mut m = two_reference_manifest();
        m.generation_sets[0].reference_id = "ghost".into();
        let report = validate_manifest(&m, &Thresholds::default());
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].kind, ViolationKind::DanglingReference);
    }

    #[test]
    fn sitelinks_checked_only_in_compliance_mode() {
        let mut m = two_reference_manifest();
        m.references[1].sitelink_count = 20;
        let report = validate_manifest(&m, &Thresholds::default());
        assert_eq!(report.count(ViolationKind::SitelinkThreshold), 1);
        m.compliance_mode = false;
        assert!(validate_manifest(&m, &Thresholds::default()).is_valid());
        m.compliance_mode = true;
        m.references[1].sitelink_count = 21;
        assert!(validate_manifest(&m, &Thresholds::default()).is_valid());
    }

    #[test]
    fn pdfe_and_registry_checks() {
        let mut m = two_reference_manifest();
        m.external_scores.push(ExternalScore {
            image_id: "g1".into(),
            reference_id: "jaws".into(),
            sscd: Some(0.4),
            pdfe_level: Some(6),
        });
        m.generation_sets[0].image_ids.push("missing".into());
        let report = validate_manifest(&m, &Thresholds::default());
        assert_eq!(report.count(ViolationKind::PdfeLevelOutOfRange), 1);
        assert_eq!(report.count(ViolationKind::UnresolvedImage), 1);
    }

    #[test]
    fn validation_is_order_insensitive_and_idempotent() {
        let mut m = two_reference_manifest();
        m.references[0].reference_image_ids.push("x".into());
        m.references[1].reference_image_ids.clear();
        let t = Thresholds::default();
        let a = validate_manifest(&m, &t);
        assert_eq!(a, validate_manifest(&m, &t));
        m.references.reverse();
        assert_eq!(a, validate_manifest(&m, &t));
    }

    #[test]
    fn parse_error_reports_position() {
        let err = Manifest::from_json_str("{\n  \"references\": [,]\n}").unwrap_err();
        match err {
            Error::ManifestFormat { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn json_round_trip() {
        let m = two_reference_manifest();
        let back = Manifest::from_json_str(&m.to_json_string()).unwrap();
        assert_eq!(m, back);
    }
}
