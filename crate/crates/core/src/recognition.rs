//! Recognition: does a generation evoke the intended reference at all?
//!
//! Each generated image is scored by its highest global cosine similarity to
//! the reference images and counts as aligned when that score is strictly
//! above `tau_align`. Per reference this yields the alignment rate (CRA) and,
//! for dynamic references, the share of reference depictions reached by at
//! least one generation (CRC).

use serde::Serialize;

use crate::embedding::{dot, max_similarity, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::model::{Category, Thresholds, Variant};

/// Global embeddings of one reference's images, in manifest order.
#[derive(Debug, Clone)]
pub struct ReferenceBank {
    pub reference_id: String,
    pub category: Category,
    pub image_ids: Vec<String>,
    pub global: EmbeddingMatrix,
}

impl ReferenceBank {
    pub fn new(
        reference_id: impl Into<String>,
        category: Category,
        image_ids: Vec<String>,
        global: EmbeddingMatrix,
    ) -> Result<Self> {
        let reference_id = reference_id.into();
        if image_ids.len() != global.rows() {
            return Err(Error::contract(format!(
                "bank for {reference_id}: {} ids for {} rows",
                image_ids.len(),
                global.rows()
            )));
        }
        if global.is_empty() {
            return Err(Error::contract(format!("bank for {reference_id} is empty")));
        }
        if category == Category::Static && global.rows() != 1 {
            return Err(Error::contract(format!(
                "static reference {reference_id} needs exactly one image, got {}",
                global.rows()
            )));
        }
        Ok(ReferenceBank {
            reference_id,
            category,
            image_ids,
            global,
        })
    }

    pub fn len(&self) -> usize {
        self.image_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image_ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignmentRecord {
    pub image_id: String,
    pub reference_id: String,
    /// Highest cosine to any reference image.
    pub s: f64,
    pub aligned: bool,
    pub best_reference_image: String,
}

/// Cosines between every generation (rows) and every reference image (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    generations: usize,
    references: usize,
    values: Vec<f64>,
}

impl ScoreMatrix {
    pub fn from_embeddings(generations: &EmbeddingMatrix, bank: &EmbeddingMatrix) -> Result<Self> {
        if generations.dim() != bank.dim() {
            return Err(Error::DimensionMismatch(generations.dim(), bank.dim()));
        }
        let mut values = Vec::with_capacity(generations.rows() * bank.rows());
        for g in generations.iter_rows() {
            values.extend(bank.iter_rows().map(|r| dot(g, r).clamp(-1.0, 1.0)));
        }
        Ok(ScoreMatrix {
            generations: generations.rows(),
            references: bank.rows(),
            values,
        })
    }

    /// Row-major `generations × references` values.
    pub fn from_values(generations: usize, references: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != generations * references {
            return Err(Error::contract(format!(
                "{} scores for a {generations}×{references} matrix",
                values.len()
            )));
        }
        Ok(ScoreMatrix {
            generations,
            references,
            values,
        })
    }

    pub fn generations(&self) -> usize {
        self.generations
    }

    pub fn references(&self) -> usize {
        self.references
    }

    pub fn get(&self, generation: usize, reference: usize) -> f64 {
        self.values[generation * self.references + reference]
    }

    /// Reference images matched above `tau` by at least one generation.
    pub fn covered(&self, tau: f64) -> Vec<bool> {
        (0..self.references)
            .map(|j| (0..self.generations).any(|i| self.get(i, j) > tau))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReferenceRecognition {
    pub reference_id: String,
    pub model_name: String,
    pub variant: Variant,
    pub category: Category,
    pub cra: f64,
    /// Defined for dynamic references only.
    pub crc: Option<f64>,
    pub records: Vec<AlignmentRecord>,
}

impl ReferenceRecognition {
    pub fn n(&self) -> usize {
        self.records.len()
    }

    pub fn n_aligned(&self) -> usize {
        self.records.iter().filter(|r| r.aligned).count()
    }

    /// At least one aligned generation.
    pub fn recognized(&self) -> bool {
        self.records.iter().any(|r| r.aligned)
    }
}

pub fn align_one(
    image_id: &str,
    generation: &[f32],
    bank: &ReferenceBank,
    thresholds: &Thresholds,
) -> Result<AlignmentRecord> {
    let (s, j) = max_similarity(generation, &bank.global)?;
    Ok(AlignmentRecord {
        image_id: image_id.to_string(),
        reference_id: bank.reference_id.clone(),
        s,
        aligned: s > thresholds.tau_align,
        best_reference_image: bank.image_ids[j].clone(),
    })
}

/// Fraction of aligned records.
pub fn compute_cra(records: &[AlignmentRecord]) -> Result<f64> {
    let first = records
        .first()
        .ok_or_else(|| Error::contract("CRA of zero generations"))?;
    if records.iter().any(|r| r.reference_id != first.reference_id) {
        return Err(Error::contract("CRA over records of different references"));
    }
    let aligned = records.iter().filter(|r| r.aligned).count();
    Ok(aligned as f64 / records.len() as f64)
}

/// Fraction of a dynamic reference's images matched above `tau_align` by
/// some generation.
pub fn compute_crc(
    reference_id: &str,
    category: Category,
    scores: &ScoreMatrix,
    thresholds: &Thresholds,
) -> Result<f64> {
    if category == Category::Static {
        return Err(Error::CrcUndefinedForStatic(reference_id.to_string()));
    }
    if scores.references() == 0 || scores.generations() == 0 {
        return Err(Error::contract(format!("empty score matrix for {reference_id}")));
    }
    let covered = scores.covered(thresholds.tau_align).into_iter().filter(|&c| c).count();
    Ok(covered as f64 / scores.references() as f64)
}

/// Aligns every generation of one (reference, model, variant) cell and
/// computes its CRA and, when dynamic, CRC.
pub fn recognize(
    bank: &ReferenceBank,
    model_name: &str,
    variant: Variant,
    image_ids: &[String],
    generations: &EmbeddingMatrix,
    thresholds: &Thresholds,
) -> Result<ReferenceRecognition> {
    if image_ids.len() != generations.rows() {
        return Err(Error::contract(format!(
            "{} image ids for {} generation embeddings",
            image_ids.len(),
            generations.rows()
        )));
    }
    let records = image_ids
        .iter()
        .enumerate()
        .map(|(i, id)| align_one(id, generations.row(i), bank, thresholds))
        .collect::<Result<Vec<_>>>()?;
    let cra = compute_cra(&records)?;
    let crc = match bank.category {
        Category::Static => None,
        Category::Dynamic => {
            let scores = ScoreMatrix::from_embeddings(generations, &bank.global)?;
            Some(compute_crc(&bank.reference_id, bank.category, &scores, thresholds)?)
        }
    };
    Ok(ReferenceRecognition {
        reference_id: bank.reference_id.clone(),
        model_name: model_name.to_string(),
        variant,
        category: bank.category,
        cra,
        crc,
        records,
    })
}

/// Share of references with at least one aligned generation.
pub fn model_level_cra(per_reference: &[ReferenceRecognition]) -> Result<f64> {
    if per_reference.is_empty() {
        return Err(Error::contract("model-level CRA over zero references"));
    }
    let hit = per_reference.iter().filter(|r| r.cra > 0.0).count();
    Ok(hit as f64 / per_reference.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{cosine, EmbeddingKind};
    use proptest::prelude::*;

    fn matrix(rows: &[Vec<f32>]) -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows_normalized(EmbeddingKind::Global, rows, "t").unwrap()
    }

    fn basis(dim: usize, i: usize) -> Vec<f32> {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        v
    }

    fn bank(category: Category, rows: &[Vec<f32>]) -> ReferenceBank {
        let ids = (0..rows.len()).map(|i| format!("ref{i}")).collect();
        ReferenceBank::new("r", category, ids, matrix(rows)).unwrap()
    }

    fn record(aligned: bool) -> AlignmentRecord {
        AlignmentRecord {
            image_id: "g".into(),
            reference_id: "r".into(),
            s: if aligned { 0.9 } else { 0.1 },
            aligned,
            best_reference_image: "ref0".into(),
        }
    }

    #[test]
    fn identical_to_static_reference() {
        let b = bank(Category::Static, &[basis(3, 0)]);
        let rec = align_one("g", &basis(3, 0), &b, &Thresholds::default()).unwrap();
        assert_eq!(rec.s, 1.0);
        assert!(rec.aligned);
    }

    #[test]
    fn orthogonal_generation_is_not_aligned() {
        let b = bank(Category::Dynamic, &[basis(3, 1), basis(3, 2)]);
        let rec = align_one("g", &basis(3, 0), &b, &Thresholds::default()).unwrap();
        assert_eq!(rec.s, 0.0);
        assert!(!rec.aligned);
    }

    #[test]
    fn picks_highest_of_planted_cosines() {
        // bank row j = c_j·e0 + sqrt(1 − c_j²)·e_{j+1}, so cos(e0, row j) = c_j
        let targets = [0.65f64, 0.72, 0.40];
        let rows: Vec<Vec<f32>> = targets
            .iter()
            .enumerate()
            .map(|(j, &c)| {
                let mut v = vec![0.0f32; 4];
                v[0] = c as f32;
                v[j + 1] = (1.0 - c * c).sqrt() as f32;
                v
            })
            .collect();
        let b = bank(Category::Dynamic, &rows);
        let rec = align_one("g", &basis(4, 0), &b, &Thresholds::default()).unwrap();
        let oracle = (0..3)
            .map(|j| cosine(&basis(4, 0), b.global.row(j)).unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(rec.s, oracle);
        assert!((rec.s - 0.72).abs() < 1e-6);
        assert!(rec.aligned);
        assert_eq!(rec.best_reference_image, "ref1");
    }

    #[test]
    fn boundary_score_is_not_aligned() {
        let b = bank(Category::Static, &[basis(2, 0)]);
        let t = Thresholds { tau_align: 0.6, ..Thresholds::default() };
        let g = [0.6f32, 0.8];
        let rec = align_one("g", &g, &b, &t).unwrap();
        let t_at = Thresholds { tau_align: rec.s, ..t };
        assert!(!align_one("g", &g, &b, &t_at).unwrap().aligned);
    }

    #[test]
    fn cra_counts() {
        let six: Vec<_> = (0..10).map(|i| record(i < 6)).collect();
        assert_eq!(compute_cra(&six).unwrap(), 0.6);
        let none: Vec<_> = (0..10).map(|_| record(false)).collect();
        assert_eq!(compute_cra(&none).unwrap(), 0.0);
        let seven: Vec<_> = (0..10).map(|i| record(i % 10 < 7)).collect();
        assert_eq!(compute_cra(&seven).unwrap(), 7.0 / 10.0);
        assert!(compute_cra(&[]).is_err());
    }

    #[test]
    fn crc_single_covered_image() {
        let b = bank(Category::Dynamic, &[basis(4, 0), basis(4, 1), basis(4, 2), basis(4, 3)]);
        let gens = matrix(&vec![basis(4, 0); 10]);
        let scores = ScoreMatrix::from_embeddings(&gens, &b.global).unwrap();
        let crc = compute_crc("r", Category::Dynamic, &scores, &Thresholds::default()).unwrap();
        assert_eq!(crc, 0.25);
    }

    #[test]
    fn crc_full_coverage_and_static_error() {
        let scores = ScoreMatrix::from_values(2, 3, vec![0.9; 6]).unwrap();
        assert_eq!(compute_crc("r", Category::Dynamic, &scores, &Thresholds::default()).unwrap(), 1.0);
        let err = compute_crc("r", Category::Static, &scores, &Thresholds::default()).unwrap_err();
        assert!(err.to_string().contains("CRC undefined for static"));
    }

    #[test]
    fn model_level_examples() {
        let mk = |cra: f64| ReferenceRecognition {
            reference_id: "r".into(),
            model_name: "m".into(),
            variant: Variant::Original,
            category: Category::Static,
            cra,
            crc: None,
            records: vec![],
        };
        let v = model_level_cra(&[mk(0.0), mk(0.3), mk(1.0)]).unwrap();
        assert_eq!(v, 2.0 / 3.0);
        assert_eq!(model_level_cra(&[mk(0.0), mk(0.0)]).unwrap(), 0.0);
        assert!(model_level_cra(&[]).is_err());
    }

    fn rows_strategy(rows: usize, dim: usize) -> impl Strategy<Value = Vec<Vec<f32>>> {
        prop::collection::vec(prop::collection::vec(-1.0f32..1.0, dim), rows).prop_filter(
            "nonzero",
            |rs| rs.iter().all(|r| r.iter().map(|v| v * v).sum::<f32>() > 1e-3),
        )
    }

    proptest! {
        #[test]
        fn crc_matches_double_loop(gens in rows_strategy(3, 4), refs in rows_strategy(5, 4), tau in 0.05f64..0.95) {
            let t = Thresholds { tau_align: tau, ..Thresholds::default() };
            let g = matrix(&gens);
            let b = bank(Category::Dynamic, &refs);
            let scores = ScoreMatrix::from_embeddings(&g, &b.global).unwrap();
            let crc = compute_crc("r", Category::Dynamic, &scores, &t).unwrap();
            let mut covered = 0;
            for j in 0..b.len() {
                let mut hit = false;
                for i in 0..g.rows() {
                    if cosine(g.row(i), b.global.row(j)).unwrap() > tau {
                        hit = true;
                    }
                }
                covered += hit as usize;
            }
            prop_assert_eq!(crc, covered as f64 / 5.0);
            // coverage bound: any single generation's covered fraction
            for i in 0..g.rows() {
                let single = (0..b.len()).filter(|&j| scores.get(i, j) > tau).count();
                prop_assert!(crc >= single as f64 / 5.0);
            }
        }

        #[test]
        fn raising_tau_never_increases(gens in rows_strategy(6, 5), refs in rows_strategy(3, 5)) {
            let g = matrix(&gens);
            let b = bank(Category::Dynamic, &refs);
            let ids: Vec<String> = (0..6).map(|i| format!("g{i}")).collect();
            let mut prev: Option<(f64, f64)> = None;
            for step in 1..20 {
                let t = Thresholds { tau_align: step as f64 * 0.05, ..Thresholds::default() };
                let r = recognize(&b, "m", Variant::Original, &ids, &g, &t).unwrap();
                let cur = (r.cra, r.crc.unwrap());
                if let Some(p) = prev {
                    prop_assert!(cur.0 <= p.0 && cur.1 <= p.1);
                }
                prev = Some(cur);
            }
        }

        #[test]
        fn order_of_generations_and_bank_is_irrelevant(gens in rows_strategy(5, 4), refs in rows_strategy(4, 4), rot in 0usize..5) {
            let t = Thresholds::default();
            let ids: Vec<String> = (0..5).map(|i| format!("g{i}")).collect();
            let base = recognize(&bank(Category::Dynamic, &refs), "m", Variant::Original, &ids, &matrix(&gens), &t).unwrap();
            let mut g2 = gens.clone();
            g2.rotate_left(rot);
            let mut r2 = refs.clone();
            r2.reverse();
            let other = recognize(&bank(Category::Dynamic, &r2), "m", Variant::Original, &ids, &matrix(&g2), &t).unwrap();
            prop_assert_eq!(base.cra, other.cra);
            prop_assert_eq!(base.crc, other.crc);
        }
    }
}
