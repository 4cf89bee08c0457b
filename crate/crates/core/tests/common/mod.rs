#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use iconometer::model::{ExternalScore, GenerationSet, ImageEntry, Reference};
use iconometer::{write_embeddings, Category, EmbeddingKind, EmbeddingMatrix, Manifest, Variant};

pub const DIM: usize = 16;
pub const K: usize = 16;

pub fn unit(i: usize) -> Vec<f32> {
    let mut v = vec![0.0; DIM];
    v[i] = 1.0;
    v
}

/// `c·e_i + sqrt(1-c²)·e_j`, cosine `c` with `e_i`.
pub fn tilt(i: usize, j: usize, c: f32) -> Vec<f32> {
    let mut v = vec![0.0; DIM];
    v[i] = c;
    v[j] = (1.0 - c * c).sqrt();
    v
}

pub fn combo(terms: &[(usize, f32)]) -> Vec<f32> {
    let mut v = vec![0.0; DIM];
    for &(i, c) in terms {
        v[i] = c;
    }
    v
}

fn patch(i: usize) -> Vec<f32> {
    let mut v = vec![0.0; 2 * K];
    v[i] = 1.0;
    v
}

/// Reference grid: patch `k` is `e_k` in a `2K`-dimensional space.
pub fn ref_grid() -> Vec<Vec<f32>> {
    (0..K).map(patch).collect()
}

/// Every reference patch, shuffled to other positions.
pub fn rotated_copy(r: usize) -> Vec<Vec<f32>> {
    (0..K).map(|k| patch((k + r) % K)).collect()
}

/// Patches orthogonal to every reference patch.
pub fn fresh() -> Vec<Vec<f32>> {
    (0..K).map(|k| patch(K + k)).collect()
}

/// First `copied` patches come from the reference grid, the rest are fresh.
pub fn partial_copy(copied: usize) -> Vec<Vec<f32>> {
    (0..K).map(|k| if k < copied { patch(k) } else { patch(K + k) }).collect()
}

pub struct Image {
    pub id: &'static str,
    pub global: Vec<f32>,
    pub patches: Option<Vec<Vec<f32>>>,
}

fn img(id: &'static str, global: Vec<f32>, patches: Option<Vec<Vec<f32>>>) -> Image {
    Image { id, global, patches }
}

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub manifest_path: PathBuf,
    pub manifest: Manifest,
}

fn reference(id: &str, category: Category, images: &[&str], year: i32, features: &[(&str, f64)]) -> Reference {
    Reference {
        id: id.into(),
        title: format!("title of {id}"),
        category,
        reference_image_ids: images.iter().map(|s| s.to_string()).collect(),
        sitelink_count: 50,
        creation_year: Some(year),
        features: features.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
    }
}

fn set(reference: &str, model: &str, variant: Variant, images: &[&str]) -> GenerationSet {
    GenerationSet {
        reference_id: reference.into(),
        model_name: model.into(),
        variant,
        image_ids: images.iter().map(|s| s.to_string()).collect(),
    }
}

/// Five references, one model, original and synonym prompts.
///
/// | ref | category | original CRA | CRC | aligned VR |
/// |-----|----------|--------------|-----|------------|
/// | A   | static   | 2/4          |     | 1, 0.5     |
/// | B   | dynamic  | 1/2          | 1/2 | 0          |
/// | C   | static   | 0/2          |     |            |
/// | D   | dynamic  | 2/2          | 1/1 | 0.25, 0.25 |
/// | E   | static   | 1/1          |     | 0.75       |
///
/// B's third reference image is an outlier removed by the coherence filter.
pub fn images() -> Vec<Image> {
    vec![
        // A
        img("a_ref", unit(0), Some(ref_grid())),
        img("a_g1", unit(0), Some(rotated_copy(3))),
        img("a_g2", tilt(0, 9, 0.8), Some(partial_copy(8))),
        img("a_g3", tilt(0, 9, 0.65), None),
        img("a_g4", unit(5), None),
        img("a_s1", tilt(0, 10, 0.75), Some(rotated_copy(5))),
        img("a_s2", unit(6), None),
        // B
        img("b_ref0", unit(1), Some(ref_grid())),
        img("b_ref1", tilt(1, 2, 0.8), Some(ref_grid())),
        img("b_ref2", unit(7), Some(ref_grid())),
        img("b_g1", combo(&[(1, 0.8), (2, -0.6)]), Some(fresh())),
        img("b_g2", unit(7), None),
        img("b_s1", unit(8), None),
        // C
        img("c_ref", unit(3), Some(ref_grid())),
        img("c_g1", unit(11), None),
        img("c_g2", tilt(3, 11, 0.69), None),
        // D
        img("d_ref0", unit(4), Some(ref_grid())),
        img("d_ref1", tilt(4, 12, 0.9), Some(ref_grid())),
        img("d_g1", unit(4), Some(partial_copy(4))),
        img("d_g2", tilt(4, 13, 0.9), Some(partial_copy(4))),
        // E
        img("e_ref", unit(14), Some(ref_grid())),
        img("e_g1", tilt(14, 15, 0.95), Some(partial_copy(12))),
    ]
}

pub fn build(dir: tempfile::TempDir) -> Fixture {
    let images = images();
    let rows: Vec<Vec<f32>> = images.iter().map(|i| i.global.clone()).collect();
    let globals = EmbeddingMatrix::from_rows_normalized(EmbeddingKind::Global, &rows, "fixture").unwrap();
    write_embeddings(&dir.path().join("global.emb"), &globals).unwrap();
    std::fs::create_dir_all(dir.path().join("patches")).unwrap();
    let mut registry = BTreeMap::new();
    for (row, image) in images.iter().enumerate() {
        let patches = image.patches.as_ref().map(|p| {
            let rel = format!("patches/{}.emb", image.id);
            let m = EmbeddingMatrix::from_rows_normalized(EmbeddingKind::Patch, p, "fixture").unwrap();
            write_embeddings(&dir.path().join(&rel), &m).unwrap();
            rel
        });
        registry.insert(
            image.id.to_string(),
            ImageEntry {
                global: "global.emb".into(),
                row,
                patches,
                patch_block: 0,
            },
        );
    }
    let m = "model-x";
    let manifest = Manifest {
        compliance_mode: false,
        references: vec![
            reference("A", Category::Static, &["a_ref"], 1503, &[("popularity", 900.0), ("n_dedup_pairs", 40.0)]),
            reference("B", Category::Dynamic, &["b_ref0", "b_ref1", "b_ref2"], 1977, &[("popularity", 500.0), ("n_dedup_pairs", 12.0)]),
            reference("C", Category::Static, &["c_ref"], 2015, &[("popularity", 30.0), ("n_dedup_pairs", 0.0)]),
            reference("D", Category::Dynamic, &["d_ref0", "d_ref1"], 1999, &[("popularity", 700.0), ("n_dedup_pairs", 25.0)]),
            reference("E", Category::Static, &["e_ref"], 1889, &[("popularity", 800.0), ("n_dedup_pairs", 33.0)]),
        ],
        generation_sets: vec![
            set("A", m, Variant::Original, &["a_g1", "a_g2", "a_g3", "a_g4"]),
            set("A", m, Variant::Synonym, &["a_s1", "a_s2"]),
            set("B", m, Variant::Original, &["b_g1", "b_g2"]),
            set("B", m, Variant::Synonym, &["b_s1"]),
            set("C", m, Variant::Original, &["c_g1", "c_g2"]),
            set("D", m, Variant::Original, &["d_g1", "d_g2"]),
            set("E", m, Variant::Original, &["e_g1"]),
        ],
        image_registry: registry,
        external_scores: vec![
            ExternalScore { image_id: "a_g1".into(), reference_id: "A".into(), sscd: Some(0.9), pdfe_level: Some(4) },
            ExternalScore { image_id: "a_g2".into(), reference_id: "A".into(), sscd: Some(0.6), pdfe_level: Some(4) },
            ExternalScore { image_id: "d_g1".into(), reference_id: "D".into(), sscd: None, pdfe_level: Some(2) },
            ExternalScore { image_id: "e_g1".into(), reference_id: "E".into(), sscd: None, pdfe_level: Some(3) },
        ],
    };
    let manifest_path = dir.path().join("manifest.json");
    std::fs::write(&manifest_path, manifest.to_json_string()).unwrap();
    Fixture {
        dir,
        manifest_path,
        manifest,
    }
}

pub fn fixture() -> Fixture {
    build(tempfile::tempdir().unwrap())
}

pub fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap()
}

