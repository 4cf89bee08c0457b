//! Controlled-overlap composites for validating patch-level visual reuse.
//!
//! A composite copies a known share of a source image's grid cells into a
//! target image. Four conditions are supported: an exact copy, half of the
//! grid copied as one contiguous side (top, bottom, left or right), a quarter
//! of the grid copied as 2×2 blocks moved to random non-overlapping
//! positions, and an unrelated target with nothing copied. Scoring the
//! composite against the source under VR should track the copied share.
//!
//! Compositing happens at the cell level ([`CellMap`]), so the same plan can
//! drive pixel composites ([`apply_cell_map`]) or planted patch embeddings
//! ([`planted_patches`]) when no encoder is available.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingKind, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::model::Thresholds;
use crate::realization::patch_reuse;
use crate::report::{fmt_f64, fmt_opt, Table};
use crate::stats::{derive_seed, summarize, Summary};

/// RGB8 raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterImage {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl RasterImage {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        if data.len() != width as usize * height as usize * 3 {
            return Err(Error::contract(format!(
                "{} bytes for a {width}×{height} RGB image",
                data.len()
            )));
        }
        Ok(RasterImage { width, height, data })
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        RasterImage { width, height, data }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let o = (y as usize * self.width as usize + x as usize) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    fn check_grid(&self, grid_side: usize) -> Result<()> {
        let g = grid_side as u32;
        if g == 0 || !self.width.is_multiple_of(g) || !self.height.is_multiple_of(g) {
            return Err(Error::contract(format!(
                "{}×{} image is not divisible into a {grid_side}×{grid_side} grid",
                self.width, self.height
            )));
        }
        Ok(())
    }

    /// Pixel bounds `(x0, y0, w, h)` of a grid cell.
    pub fn cell_rect(&self, grid_side: usize, cell: usize) -> (u32, u32, u32, u32) {
        let g = grid_side as u32;
        let (cw, ch) = (self.width / g, self.height / g);
        let (r, c) = ((cell / grid_side) as u32, (cell % grid_side) as u32);
        (c * cw, r * ch, cw, ch)
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        RasterImage::new(w, h, img.into_raw())
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        image::save_buffer(path, &self.data, self.width, self.height, image::ColorType::Rgb8)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapKind {
    ExactCopy,
    HalfSpatial,
    QuarterLocalized,
    Unrelated,
}

impl OverlapKind {
    pub const ALL: [OverlapKind; 4] = [
        OverlapKind::ExactCopy,
        OverlapKind::HalfSpatial,
        OverlapKind::QuarterLocalized,
        OverlapKind::Unrelated,
    ];

    pub fn true_overlap_fraction(self) -> f64 {
        match self {
            OverlapKind::ExactCopy => 1.0,
            OverlapKind::HalfSpatial => 0.5,
            OverlapKind::QuarterLocalized => 0.25,
            OverlapKind::Unrelated => 0.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OverlapKind::ExactCopy => "exact_copy",
            OverlapKind::HalfSpatial => "half_spatial",
            OverlapKind::QuarterLocalized => "quarter_localized",
            OverlapKind::Unrelated => "unrelated",
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for OverlapKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for OverlapKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OverlapKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Input(format!("unknown overlap condition {s:?}")))
    }
}

/// For each target cell, the source cell copied into it, if any.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellMap {
    pub grid_side: usize,
    pub cells: Vec<Option<usize>>,
}

impl CellMap {
    pub fn copied(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }
}

const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

/// Picks `count` non-overlapping 2×2 blocks by rejection sampling; returns
/// their top-left cells as `(row, col)`.
fn place_blocks(grid_side: usize, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<(usize, usize)>> {
    'restart: for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let mut taken = vec![false; grid_side * grid_side];
        let mut blocks = Vec::with_capacity(count);
        while blocks.len() < count {
            let mut placed = false;
            for _ in 0..MAX_PLACEMENT_ATTEMPTS {
                let r = rng.random_range(0..grid_side - 1);
                let c = rng.random_range(0..grid_side - 1);
                let cells = [(r, c), (r, c + 1), (r + 1, c), (r + 1, c + 1)];
                if cells.iter().any(|&(rr, cc)| taken[rr * grid_side + cc]) {
                    continue;
                }
                for (rr, cc) in cells {
                    taken[rr * grid_side + cc] = true;
                }
                blocks.push((r, c));
                placed = true;
                break;
            }
            if !placed {
                continue 'restart;
            }
        }
        return Ok(blocks);
    }
    Err(Error::contract(format!(
        "could not place {count} disjoint 2×2 blocks on a {grid_side}×{grid_side} grid"
    )))
}

pub fn plan_cells(kind: OverlapKind, grid_side: usize, rng: &mut ChaCha8Rng) -> Result<CellMap> {
    let k = grid_side * grid_side;
    let mut cells = vec![None; k];
    match kind {
        OverlapKind::ExactCopy => {
            for (i, c) in cells.iter_mut().enumerate() {
                *c = Some(i);
            }
        }
        OverlapKind::Unrelated => {}
        OverlapKind::HalfSpatial => {
            if !grid_side.is_multiple_of(2) {
                return Err(Error::contract("half-spatial overlap needs an even grid side"));
            }
            let half = grid_side / 2;
            let side = rng.random_range(0..4u8);
            for r in 0..grid_side {
                for c in 0..grid_side {
                    let copy = match side {
                        0 => r < half,  // top
                        1 => r >= half, // bottom
                        2 => c < half,  // left
                        _ => c >= half, // right
                    };
                    if copy {
                        cells[r * grid_side + c] = Some(r * grid_side + c);
                    }
                }
            }
        }
        OverlapKind::QuarterLocalized => {
            if !grid_side.is_multiple_of(4) {
                return Err(Error::contract(
                    "quarter-localized overlap needs a grid side divisible by 4",
                ));
            }
            let blocks = k / 16;
            let from = place_blocks(grid_side, blocks, rng)?;
            let to = place_blocks(grid_side, blocks, rng)?;
            for (&(sr, sc), &(tr, tc)) in from.iter().zip(&to) {
                for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    cells[(tr + dr) * grid_side + tc + dc] = Some((sr + dr) * grid_side + sc + dc);
                }
            }
        }
    }
    Ok(CellMap { grid_side, cells })
}

pub fn apply_cell_map(source: &RasterImage, target: &RasterImage, map: &CellMap) -> Result<RasterImage> {
    if (source.width, source.height) != (target.width, target.height) {
        return Err(Error::contract(format!(
            "source {}×{} and target {}×{} differ",
            source.width, source.height, target.width, target.height
        )));
    }
    source.check_grid(map.grid_side)?;
    let mut out = target.clone();
    let row_bytes = source.width as usize * 3;
    for (dst, src) in map.cells.iter().enumerate() {
        let Some(src) = *src else { continue };
        let (sx, sy, w, h) = source.cell_rect(map.grid_side, src);
        let (dx, dy, _, _) = source.cell_rect(map.grid_side, dst);
        for y in 0..h as usize {
            let s = (sy as usize + y) * row_bytes + sx as usize * 3;
            let d = (dy as usize + y) * row_bytes + dx as usize * 3;
            out.data[d..d + w as usize * 3].copy_from_slice(&source.data[s..s + w as usize * 3]);
        }
    }
    Ok(out)
}

pub fn make_composite(
    source: &RasterImage,
    target: &RasterImage,
    kind: OverlapKind,
    grid_side: usize,
    seed: u64,
) -> Result<RasterImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let map = plan_cells(kind, grid_side, &mut rng)?;
    apply_cell_map(source, target, &map)
}

/// Turns an image into one unit vector per grid cell.
pub trait PatchEmbedder: Sync {
    fn embed(&self, image: &RasterImage, grid_side: usize) -> Result<EmbeddingMatrix>;
}

/// Encoder-free embedder: each cell is box-downsampled to
/// `resolution × resolution` RGB, mean-centred and normalized. Identical
/// cells map to identical vectors.
#[derive(Debug, Clone, Copy)]
pub struct PixelPatchEmbedder {
    pub resolution: usize,
}

impl Default for PixelPatchEmbedder {
    fn default() -> Self {
        PixelPatchEmbedder { resolution: 8 }
    }
}

impl PatchEmbedder for PixelPatchEmbedder {
    fn embed(&self, image: &RasterImage, grid_side: usize) -> Result<EmbeddingMatrix> {
        image.check_grid(grid_side)?;
        let res = self.resolution.max(1);
        let mut rows = Vec::with_capacity(grid_side * grid_side);
        for cell in 0..grid_side * grid_side {
            let (x0, y0, w, h) = image.cell_rect(grid_side, cell);
            let mut sums = vec![0f64; res * res * 3];
            let mut counts = vec![0u32; res * res];
            for y in 0..h {
                for x in 0..w {
                    let bin = (y as usize * res / h as usize) * res + x as usize * res / w as usize;
                    let p = image.pixel(x0 + x, y0 + y);
                    for ch in 0..3 {
                        sums[bin * 3 + ch] += f64::from(p[ch]);
                    }
                    counts[bin] += 1;
                }
            }
            let mut v: Vec<f64> = sums
                .iter()
                .enumerate()
                .map(|(i, s)| s / f64::from(counts[i / 3].max(1)))
                .collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let centred: Vec<f64> = v.iter().map(|x| x - mean).collect();
            if centred.iter().any(|x| x.abs() > 1e-9) {
                v = centred;
            } else {
                // flat cell: fall back to the raw (offset) colour
                v.iter_mut().for_each(|x| *x += 1.0);
            }
            rows.push(v.into_iter().map(|x| x as f32).collect::<Vec<f32>>());
        }
        Ok(EmbeddingMatrix::from_rows_normalized(EmbeddingKind::Patch, &rows, "pixel-box")?)
    }
}

/// One (condition, source reference, pair) composite to score.
#[derive(Debug, Clone, PartialEq)]
pub struct PairPlan {
    pub condition: OverlapKind,
    pub source: usize,
    pub pair_index: usize,
    pub target: usize,
    pub cells: CellMap,
}

impl PairPlan {
    /// File stem for the composite, e.g. `half_spatial_mona_03`.
    pub fn stem(&self, reference_ids: &[String]) -> String {
        format!("{}_{}_{:02}", self.condition, reference_ids[self.source], self.pair_index)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ValidationConfig {
    pub pairs_per_reference: usize,
    pub seed: u64,
    pub thresholds: Thresholds,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        ValidationConfig {
            pairs_per_reference: 10,
            seed: 42,
            thresholds: Thresholds::default(),
        }
    }
}

/// Deterministic pairing: every source gets `pairs_per_reference` composites
/// per condition; targets are distinct other references while enough exist.
pub fn plan_validation(n_references: usize, config: &ValidationConfig) -> Result<Vec<PairPlan>> {
    if n_references < 2 {
        return Err(Error::contract("synthetic validation needs at least two references"));
    }
    let grid_side = config.thresholds.grid_side;
    let mut plans = Vec::new();
    for kind in OverlapKind::ALL {
        for source in 0..n_references {
            let stream = kind.index() << 32 | source as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, stream));
            let mut others: Vec<usize> = (0..n_references).filter(|&i| i != source).collect();
            others.shuffle(&mut rng);
            for pair_index in 0..config.pairs_per_reference {
                let target = match kind {
                    OverlapKind::ExactCopy => source,
                    _ => others[pair_index % others.len()],
                };
                let cells = plan_cells(kind, grid_side, &mut rng)?;
                plans.push(PairPlan {
                    condition: kind,
                    source,
                    pair_index,
                    target,
                    cells,
                });
            }
        }
    }
    Ok(plans)
}

/// Planted patch embeddings for a plan: source cell `k` is basis vector
/// `e_k`, target cell `k` is `e_{K+k}`, so copied cells match the source at
/// cosine 1 and all others at cosine 0. Returns `(composite, source)`.
pub fn planted_patches(plan: &PairPlan) -> (EmbeddingMatrix, EmbeddingMatrix) {
    let k = plan.cells.grid_side * plan.cells.grid_side;
    let basis = |i: usize| {
        let mut v = vec![0f32; 2 * k];
        v[i] = 1.0;
        v
    };
    let source: Vec<Vec<f32>> = (0..k).map(basis).collect();
    let composite: Vec<Vec<f32>> = plan
        .cells
        .cells
        .iter()
        .enumerate()
        .map(|(cell, src)| match src {
            Some(s) => basis(*s),
            None => basis(k + cell),
        })
        .collect();
    let m = |rows: &[Vec<f32>]| {
        EmbeddingMatrix::from_rows_normalized(EmbeddingKind::Patch, rows, "planted").expect("basis rows")
    };
    (m(&composite), m(&source))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PairKey {
    pub condition: OverlapKind,
    pub source: usize,
    pub pair_index: usize,
}

/// Ingested copy-detection (SSCD) and replication-level (PDFE) scores.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PairScore {
    pub sscd: Option<f64>,
    pub pdfe_level: Option<f64>,
}

pub type PairScores = HashMap<PairKey, PairScore>;

#[derive(Debug, Deserialize)]
struct PairScoreRow {
    condition: String,
    reference_id: String,
    pair_index: usize,
    sscd: Option<f64>,
    pdfe_level: Option<f64>,
}

/// Reads `condition,reference_id,pair_index,sscd,pdfe_level`; blank cells are
/// missing scores. Rows naming unknown references are ignored.
pub fn read_pair_scores_csv(path: &Path, reference_ids: &[String]) -> Result<PairScores> {
    let index: HashMap<&str, usize> = reference_ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut out = PairScores::new();
    let mut reader = csv::Reader::from_path(path)?;
    for row in reader.deserialize::<PairScoreRow>() {
        let row = row?;
        let Some(&source) = index.get(row.reference_id.as_str()) else {
            log::warn!("pair score for unknown reference {}", row.reference_id);
            continue;
        };
        let key = PairKey {
            condition: row.condition.parse()?,
            source,
            pair_index: row.pair_index,
        };
        out.insert(key, PairScore { sscd: row.sscd, pdfe_level: row.pdfe_level });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationRow {
    pub condition: OverlapKind,
    pub true_overlap: f64,
    /// References with at least one scored pair.
    pub n_references: usize,
    /// Across references of the per-reference mean VR.
    pub vr: Option<Summary>,
    pub sscd: Option<Summary>,
    pub pdfe: Option<Summary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationGap {
    pub condition: OverlapKind,
    pub source: usize,
    pub pair_index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationOutcome {
    pub rows: Vec<ValidationRow>,
    pub gaps: Vec<ValidationGap>,
    /// VR per scored pair, plan order.
    pub pair_vr: Vec<(PairKey, f64)>,
}

/// Scores every plan with `patches`, which returns `(composite, source)` patch
/// embeddings or `None` when they are unavailable (recorded as a gap), and
/// aggregates per condition: mean VR per reference, then mean/sd/min/max
/// across references.
pub fn score_plans<F>(
    plans: &[PairPlan],
    thresholds: &Thresholds,
    external: Option<&PairScores>,
    patches: F,
) -> ValidationOutcome
where
    F: Fn(&PairPlan) -> Result<Option<(EmbeddingMatrix, EmbeddingMatrix)>> + Sync,
{
    let scored: Vec<std::result::Result<f64, String>> = plans
        .par_iter()
        .map(|plan| match patches(plan) {
            Ok(Some((composite, source))) => patch_reuse("composite", "source", &composite, &source, thresholds)
                .map(|r| r.vr)
                .map_err(|e| e.to_string()),
            Ok(None) => Err("missing embeddings".to_string()),
            Err(e) => Err(e.to_string()),
        })
        .collect();

    let mut gaps = Vec::new();
    let mut pair_vr = Vec::new();
    // condition -> source -> values
    let mut vr_by: BTreeMap<OverlapKind, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    let mut sscd_by: BTreeMap<OverlapKind, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    let mut pdfe_by: BTreeMap<OverlapKind, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for (plan, result) in plans.iter().zip(scored) {
        let key = PairKey {
            condition: plan.condition,
            source: plan.source,
            pair_index: plan.pair_index,
        };
        if let Some(score) = external.and_then(|e| e.get(&key)) {
            if let Some(v) = score.sscd {
                sscd_by.entry(plan.condition).or_default().entry(plan.source).or_default().push(v);
            }
            if let Some(v) = score.pdfe_level {
                pdfe_by.entry(plan.condition).or_default().entry(plan.source).or_default().push(v);
            }
        }
        match result {
            Ok(vr) => {
                vr_by.entry(plan.condition).or_default().entry(plan.source).or_default().push(vr);
                pair_vr.push((key, vr));
            }
            Err(reason) => gaps.push(ValidationGap {
                condition: plan.condition,
                source: plan.source,
                pair_index: plan.pair_index,
                reason,
            }),
        }
    }

    let per_reference = |m: Option<&BTreeMap<usize, Vec<f64>>>| -> Vec<f64> {
        m.map(|by_source| {
            by_source
                .values()
                .map(|v| v.iter().sum::<f64>() / v.len() as f64)
                .collect()
        })
        .unwrap_or_default()
    };
    let rows = OverlapKind::ALL
        .into_iter()
        .filter(|k| plans.iter().any(|p| p.condition == *k))
        .map(|kind| {
            let vr = per_reference(vr_by.get(&kind));
            ValidationRow {
                condition: kind,
                true_overlap: kind.true_overlap_fraction(),
                n_references: vr.len(),
                vr: summarize(&vr),
                sscd: summarize(&per_reference(sscd_by.get(&kind))),
                pdfe: summarize(&per_reference(pdfe_by.get(&kind))),
            }
        })
        .collect();
    ValidationOutcome { rows, gaps, pair_vr }
}

/// Validation over raster references with an in-process embedder.
pub fn run_validation(
    references: &[RasterImage],
    config: &ValidationConfig,
    embedder: &dyn PatchEmbedder,
    external: Option<&PairScores>,
) -> Result<ValidationOutcome> {
    let plans = plan_validation(references.len(), config)?;
    let grid_side = config.thresholds.grid_side;
    let sources = references
        .par_iter()
        .map(|r| embedder.embed(r, grid_side))
        .collect::<Result<Vec<_>>>()?;
    Ok(score_plans(&plans, &config.thresholds, external, |plan| {
        let composite = apply_cell_map(&references[plan.source], &references[plan.target], &plan.cells)?;
        Ok(Some((embedder.embed(&composite, grid_side)?, sources[plan.source].clone())))
    }))
}

/// Validation on planted embeddings; needs no images or encoder.
pub fn run_planted(n_references: usize, config: &ValidationConfig) -> Result<ValidationOutcome> {
    let plans = plan_validation(n_references, config)?;
    Ok(score_plans(&plans, &config.thresholds, None, |plan| Ok(Some(planted_patches(plan)))))
}

/// Writes each plan's composite to `dir/<stem>.png`.
pub fn write_composites(
    references: &[RasterImage],
    reference_ids: &[String],
    plans: &[PairPlan],
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    plans.par_iter().try_for_each(|plan| {
        let image = apply_cell_map(&references[plan.source], &references[plan.target], &plan.cells)?;
        image.write_png(&dir.join(format!("{}.png", plan.stem(reference_ids))))
    })
}

/// Reads every `.png` in `dir` sorted by file name; ids are the file stems.
pub fn read_reference_dir(dir: &Path) -> Result<(Vec<String>, Vec<RasterImage>)> {
    let mut paths = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            paths.push(path);
        }
    }
    paths.sort();
    let images = paths.par_iter().map(|p| RasterImage::read_png(p)).collect::<Result<Vec<_>>>()?;
    let ids = paths
        .iter()
        .map(|p| p.file_stem().unwrap_or_default().to_string_lossy().into_owned())
        .collect();
    Ok((ids, images))
}

/// Externally computed patch embeddings: one file holding a block of
/// `grid_side²` rows per id, in id-list order.
#[derive(Debug, Clone)]
pub struct PatchLibrary {
    index: HashMap<String, usize>,
    matrix: EmbeddingMatrix,
    k: usize,
}

impl PatchLibrary {
    pub fn new(matrix: EmbeddingMatrix, ids: Vec<String>, grid_side: usize) -> Result<Self> {
        let k = grid_side * grid_side;
        if matrix.kind() != EmbeddingKind::Patch || matrix.rows() != ids.len() * k {
            return Err(Error::Input(format!(
                "patch library has {} rows ({:?}), expected {} ids × {k}",
                matrix.rows(),
                matrix.kind(),
                ids.len()
            )));
        }
        let index = ids.into_iter().enumerate().map(|(i, id)| (id, i)).collect();
        Ok(PatchLibrary { index, matrix, k })
    }

    pub fn get(&self, id: &str) -> Option<EmbeddingMatrix> {
        let block = *self.index.get(id)?;
        Some(self.matrix.select_rows(&(block * self.k..(block + 1) * self.k).collect::<Vec<_>>()))
    }
}

/// One row per condition. SSCD and PDFE columns appear only when some pair
/// carried those scores.
pub fn validation_table(outcome: &ValidationOutcome) -> Table {
    let has_sscd = outcome.rows.iter().any(|r| r.sscd.is_some());
    let has_pdfe = outcome.rows.iter().any(|r| r.pdfe.is_some());
    let mut header = vec!["condition", "true_overlap", "n_references", "vr_mean", "vr_sd", "vr_min", "vr_max"];
    if has_sscd {
        header.extend(["sscd_mean", "sscd_sd"]);
    }
    if has_pdfe {
        header.extend(["pdfe_mean", "pdfe_sd"]);
    }
    let mut t = Table::new(&header);
    for r in &outcome.rows {
        let mut row = vec![
            r.condition.to_string(),
            fmt_f64(r.true_overlap),
            r.n_references.to_string(),
            fmt_opt(r.vr.map(|s| s.mean)),
            fmt_opt(r.vr.map(|s| s.sd)),
            fmt_opt(r.vr.map(|s| s.min)),
            fmt_opt(r.vr.map(|s| s.max)),
        ];
        if has_sscd {
            row.extend([fmt_opt(r.sscd.map(|s| s.mean)), fmt_opt(r.sscd.map(|s| s.sd))]);
        }
        if has_pdfe {
            row.extend([fmt_opt(r.pdfe.map(|s| s.mean)), fmt_opt(r.pdfe.map(|s| s.sd))]);
        }
        t.push(row);
    }
    t
}

pub fn gaps_table(outcome: &ValidationOutcome, reference_ids: &[String]) -> Table {
    let mut t = Table::new(&["condition", "reference_id", "pair_index", "reason"]);
    for g in &outcome.gaps {
        t.push(vec![
            g.condition.to_string(),
            reference_ids[g.source].clone(),
            g.pair_index.to_string(),
            g.reason.clone(),
        ]);
    }
    t
}
