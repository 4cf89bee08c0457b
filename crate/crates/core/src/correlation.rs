//! Rank correlation between per-reference CRA and ingested reference features.
//!
//! Spearman's rho is the Pearson correlation of mean ranks. Its p-value comes
//! from a seeded permutation test, so results are reproducible and need no
//! distribution tables.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Category, Reference};
use crate::stats::{derive_seed, median};

pub const DEFAULT_PERMUTATIONS: usize = 10_000;
pub const SIGNIFICANCE: f64 = 0.05;
const PERMUTATION_CHUNK: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    TextUniqueness,
    ImageUniqueness,
    NDedupPairs,
    Popularity,
    CreationYear,
    ImageMemorability,
    WordMemorability,
    TextConcreteness,
}

impl Feature {
    pub const ALL: [Feature; 8] = [
        Feature::TextUniqueness,
        Feature::ImageUniqueness,
        Feature::NDedupPairs,
        Feature::Popularity,
        Feature::CreationYear,
        Feature::ImageMemorability,
        Feature::WordMemorability,
        Feature::TextConcreteness,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Feature::TextUniqueness => "text_uniqueness",
            Feature::ImageUniqueness => "image_uniqueness",
            Feature::NDedupPairs => "n_dedup_pairs",
            Feature::Popularity => "popularity",
            Feature::CreationYear => "creation_year",
            Feature::ImageMemorability => "image_memorability",
            Feature::WordMemorability => "word_memorability",
            Feature::TextConcreteness => "text_concreteness",
        }
    }

    pub fn parse(name: &str) -> Option<Feature> {
        Feature::ALL.into_iter().find(|f| f.as_str() == name)
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureVector {
    pub reference_id: String,
    pub values: BTreeMap<Feature, f64>,
}

impl FeatureVector {
    /// Known features from the reference's feature map. Popularity falls back
    /// to the sitelink count and creation year to the reference's year.
    pub fn from_reference(reference: &Reference) -> FeatureVector {
        let mut values: BTreeMap<Feature, f64> = reference
            .features
            .iter()
            .filter_map(|(k, v)| Feature::parse(k).map(|f| (f, *v)))
            .collect();
        if reference.sitelink_count > 0 {
            values.entry(Feature::Popularity).or_insert(reference.sitelink_count as f64);
        }
        if let Some(year) = reference.creation_year {
            values.entry(Feature::CreationYear).or_insert(f64::from(year));
        }
        FeatureVector {
            reference_id: reference.id.clone(),
            values,
        }
    }

    pub fn get(&self, feature: Feature) -> Option<f64> {
        self.values.get(&feature).copied()
    }
}

/// Reads `features.csv`: a `reference_id` column plus any feature columns;
/// blank cells are missing values and unknown columns are ignored.
pub fn read_features_csv(path: &Path) -> Result<Vec<FeatureVector>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let id_col = headers
        .iter()
        .position(|h| h == "reference_id")
        .ok_or_else(|| Error::Input(format!("{}: no reference_id column", path.display())))?;
    let columns: Vec<(usize, Feature)> = headers
        .iter()
        .enumerate()
        .filter_map(|(i, h)| Feature::parse(h.trim()).map(|f| (i, f)))
        .collect();
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record?;
        let mut fv = FeatureVector {
            reference_id: record[id_col].to_string(),
            values: BTreeMap::new(),
        };
        for &(i, f) in &columns {
            let cell = record.get(i).unwrap_or("").trim();
            if cell.is_empty() {
                continue;
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| Error::Input(format!("{}: bad {f} value {cell:?}", fv.reference_id)))?;
            if !v.is_finite() {
                return Err(Error::Input(format!("{}: non-finite {f}", fv.reference_id)));
            }
            fv.values.insert(f, v);
        }
        out.push(fv);
    }
    Ok(out)
}

/// 1-based ranks; tied values share the mean of their ranks.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn centred(v: &[f64]) -> (Vec<f64>, f64) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let c: Vec<f64> = v.iter().map(|x| x - mean).collect();
    let ss = c.iter().map(|x| x * x).sum::<f64>();
    (c, ss)
}

/// Pearson correlation; `None` when either input is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let (cx, sx) = centred(x);
    let (cy, sy) = centred(y);
    if sx == 0.0 || sy == 0.0 {
        return None;
    }
    let num: f64 = cx.iter().zip(&cy).map(|(a, b)| a * b).sum();
    Some((num / (sx * sy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Spearman {
    /// `None` when either input is constant.
    pub rho: Option<f64>,
    pub p_value: Option<f64>,
    pub n: usize,
    pub permutations: usize,
}

pub fn spearman(x: &[f64], y: &[f64], permutations: usize, seed: u64) -> Result<Spearman> {
    if x.len() != y.len() {
        return Err(Error::contract(format!("spearman inputs of length {} and {}", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::contract(format!("spearman needs at least 3 points, got {}", x.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::contract("spearman inputs must be finite"));
    }
    let n = x.len();
    let (cx, sx) = centred(&average_ranks(x));
    let (cy, sy) = centred(&average_ranks(y));
    if sx == 0.0 || sy == 0.0 {
        return Ok(Spearman {
            rho: None,
            p_value: None,
            n,
            permutations,
        });
    }
    let norm = (sx * sy).sqrt();
    let dot = |perm: &[f64]| cx.iter().zip(perm).map(|(a, b)| a * b).sum::<f64>() / norm;
    let rho = dot(&cy).clamp(-1.0, 1.0);
    let observed = rho.abs() - 1e-12;

    let chunks = permutations.div_ceil(PERMUTATION_CHUNK);
    let extreme: usize = (0..chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, chunk as u64));
            let mut perm = cy.clone();
            let todo = PERMUTATION_CHUNK.min(permutations - chunk * PERMUTATION_CHUNK);
            (0..todo)
                .filter(|_| {
                    perm.shuffle(&mut rng);
                    dot(&perm).abs() >= observed
                })
                .count()
        })
        .sum();
    Ok(Spearman {
        rho: Some(rho),
        p_value: Some((extreme + 1) as f64 / (permutations + 1) as f64),
        n,
        permutations,
    })
}

/// Training matches left after removing near-duplicates: candidates whose
/// score is at most `tau_dedup`.
pub fn dedup_filter(match_scores: &[f64], tau_dedup: f64) -> usize {
    match_scores.iter().filter(|&&s| s <= tau_dedup).count()
}

/// As [`dedup_filter`], with each candidate scored by its best match over
/// several reference images.
pub fn dedup_filter_multi(match_scores: &[Vec<f64>], tau_dedup: f64) -> usize {
    let best: Vec<f64> = match_scores
        .iter()
        .map(|v| v.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    dedup_filter(&best, tau_dedup)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RowFlag {
    InsufficientN,
    Undefined,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationRow {
    pub feature: Feature,
    pub category: Category,
    pub rho: Option<f64>,
    pub p_value: Option<f64>,
    pub n_used: usize,
    pub significant: bool,
    pub flag: Option<RowFlag>,
}

/// One row per feature × category, dropping references that lack the
/// feature or a CRA value.
pub fn correlation_table(
    features: &[FeatureVector],
    cra_by_reference: &BTreeMap<String, f64>,
    category_by_reference: &BTreeMap<String, Category>,
    permutations: usize,
    seed: u64,
) -> Vec<CorrelationRow> {
    let mut rows = Vec::new();
    for (ci, category) in Category::ALL.into_iter().enumerate() {
        for (fi, feature) in Feature::ALL.into_iter().enumerate() {
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            let mut sorted: Vec<&FeatureVector> = features.iter().collect();
            sorted.sort_by(|a, b| a.reference_id.cmp(&b.reference_id));
            for fv in sorted {
                if category_by_reference.get(&fv.reference_id) != Some(&category) {
                    continue;
                }
                if let (Some(x), Some(&y)) = (fv.get(feature), cra_by_reference.get(&fv.reference_id)) {
                    xs.push(x);
                    ys.push(y);
                }
            }
            let n_used = xs.len();
            let mut row = CorrelationRow {
                feature,
                category,
                rho: None,
                p_value: None,
                n_used,
                significant: false,
                flag: None,
            };
            if n_used < 3 {
                row.flag = Some(RowFlag::InsufficientN);
            } else {
                let cell_seed = derive_seed(seed, (ci * Feature::ALL.len() + fi) as u64);
                let s = spearman(&xs, &ys, permutations, cell_seed).expect("validated inputs");
                row.rho = s.rho;
                row.p_value = s.p_value;
                row.significant = s.p_value.is_some_and(|p| p < SIGNIFICANCE);
                if s.rho.is_none() {
                    row.flag = Some(RowFlag::Undefined);
                }
            }
            rows.push(row);
        }
    }
    rows
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Quadrant {
    pub mean_cra: Option<f64>,
    pub n: usize,
}

/// CRA averaged over the four median-split quadrants of (feature, dedup
/// count). Points on a median fall on the low side.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuadrantSummary {
    pub median_x: f64,
    pub median_y: f64,
    pub low_x_low_y: Quadrant,
    pub low_x_high_y: Quadrant,
    pub high_x_low_y: Quadrant,
    pub high_x_high_y: Quadrant,
    /// Every x (or every y) equal, so one side of a split is empty.
    pub degenerate: bool,
}

impl QuadrantSummary {
    pub fn quadrants(&self) -> [Quadrant; 4] {
        [self.low_x_low_y, self.low_x_high_y, self.high_x_low_y, self.high_x_high_y]
    }
}

pub fn quadrant_summary(x: &[f64], y: &[f64], cra: &[f64]) -> Result<QuadrantSummary> {
    if x.len() != y.len() || x.len() != cra.len() {
        return Err(Error::contract("quadrant inputs differ in length"));
    }
    if x.len() < 4 {
        return Err(Error::contract(format!("quadrant summary needs 4 points, got {}", x.len())));
    }
    let mx = median(x).expect("nonempty");
    let my = median(y).expect("nonempty");
    let mut sums = [(0.0, 0usize); 4];
    for i in 0..x.len() {
        let q = (usize::from(x[i] > mx) << 1) | usize::from(y[i] > my);
        sums[q].0 += cra[i];
        sums[q].1 += 1;
    }
    let quad = |q: usize| Quadrant {
        mean_cra: (sums[q].1 > 0).then(|| sums[q].0 / sums[q].1 as f64),
        n: sums[q].1,
    };
    let constant = |v: &[f64]| v.iter().all(|&a| a == v[0]);
    Ok(QuadrantSummary {
        median_x: mx,
        median_y: my,
        low_x_low_y: quad(0),
        low_x_high_y: quad(1),
        high_x_low_y: quad(2),
        high_x_high_y: quad(3),
        degenerate: constant(x) || constant(y),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn monotone_inputs() {
        let s = spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0], 999, 42).unwrap();
        assert_eq!(s.rho, Some(1.0));
        let s = spearman(&[1.0, 2.0, 3.0], &[30.0, 20.0, 10.0], 999, 42).unwrap();
        assert_eq!(s.rho, Some(-1.0));
    }

    #[test]
    fn tied_example_by_hand() {
        // x = (1,2,2,3) → ranks (1, 2.5, 2.5, 4); y = (1,3,2,4) → ranks (1,3,2,4)
        // centred: (-1.5, 0, 0, 1.5) and (-1.5, 0.5, -0.5, 1.5)
        // rho = 4.5 / sqrt(4.5 · 5) = 0.948683...
        let s = spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 3.0, 2.0, 4.0], 100, 1).unwrap();
        let expected = 4.5 / (4.5f64 * 5.0).sqrt();
        assert!((s.rho.unwrap() - expected).abs() < 1e-12);
        assert_eq!(average_ranks(&[1.0, 2.0, 2.0, 3.0]), vec![1.0, 2.5, 2.5, 4.0]);
    }

    #[test]
    fn constant_input_is_undefined() {
        let s = spearman(&[1.0, 1.0, 1.0, 1.0], &[1.0, 2.0, 3.0, 4.0], 100, 1).unwrap();
        assert_eq!((s.rho, s.p_value), (None, None));
    }

    #[test]
    fn rejects_short_or_ragged() {
        assert!(spearman(&[1.0, 2.0], &[1.0, 2.0], 10, 0).is_err());
        assert!(spearman(&[1.0, 2.0, 3.0], &[1.0, 2.0], 10, 0).is_err());
        assert!(spearman(&[1.0, f64::NAN, 3.0], &[1.0, 2.0, 3.0], 10, 0).is_err());
    }

    #[test]
    fn p_value_reproducible_and_bounded() {
        let x: Vec<f64> = (0..30).map(|i| (i as f64 * 1.3).sin()).collect();
        let y: Vec<f64> = (0..30).map(|i| (i as f64 * 0.7).cos()).collect();
        let a = spearman(&x, &y, 2000, 42).unwrap();
        let b = spearman(&x, &y, 2000, 42).unwrap();
        assert_eq!(a.p_value.unwrap().to_bits(), b.p_value.unwrap().to_bits());
        let p = a.p_value.unwrap();
        assert!((1.0 / 2001.0..=1.0).contains(&p));
    }

    #[test]
    fn dedup_examples() {
        assert_eq!(dedup_filter(&[0.95, 0.91], 0.90), 0);
        assert_eq!(dedup_filter(&[0.3, 0.89, 0.90], 0.90), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scores: Vec<f64> = (0..50).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut oracle = 0;
        for s in &scores {
            if *s <= 0.90 {
                oracle += 1;
            }
        }
        assert_eq!(dedup_filter(&scores, 0.90), oracle);
        assert_eq!(dedup_filter_multi(&[vec![0.2, 0.95], vec![0.5, 0.6]], 0.9), 1);
    }

    fn table_inputs(n: usize, link: impl Fn(f64, usize) -> f64) -> (Vec<FeatureVector>, BTreeMap<String, f64>, BTreeMap<String, Category>) {
        let mut fvs = Vec::new();
        let mut cra = BTreeMap::new();
        let mut cat = BTreeMap::new();
        for i in 0..n {
            let id = format!("r{i:03}");
            let t = i as f64 / n as f64;
            let mut values = BTreeMap::new();
            values.insert(Feature::TextUniqueness, t);
            values.insert(Feature::Popularity, 42.0);
            fvs.push(FeatureVector { reference_id: id.clone(), values });
            cra.insert(id.clone(), link(t, i));
            cat.insert(id, if i % 2 == 0 { Category::Static } else { Category::Dynamic });
        }
        (fvs, cra, cat)
    }

    #[test]
    fn planted_monotone_link() {
        // noisy monotone: cra = t + small deterministic wobble
        let (fvs, cra, cat) = table_inputs(60, |t, i| (t + 0.01 * ((i * 37 % 11) as f64 / 11.0)).min(1.0));
        let rows = correlation_table(&fvs, &cra, &cat, 2000, 42);
        assert_eq!(rows.len(), 16);
        for category in Category::ALL {
            let r = rows
                .iter()
                .find(|r| r.feature == Feature::TextUniqueness && r.category == category)
                .unwrap();
            assert!(r.rho.unwrap() > 0.9, "{r:?}");
            assert!(r.p_value.unwrap() < 0.05);
            assert!(r.significant);
            assert_eq!(r.n_used, 30);
        }
        let pop = rows.iter().find(|r| r.feature == Feature::Popularity).unwrap();
        assert_eq!(pop.flag, Some(RowFlag::Undefined));
        let absent = rows.iter().find(|r| r.feature == Feature::WordMemorability).unwrap();
        assert_eq!((absent.flag, absent.n_used), (Some(RowFlag::InsufficientN), 0));
    }

    #[test]
    fn quadrant_centres() {
        let q = quadrant_summary(&[0.0, 0.0, 1.0, 1.0], &[0.0, 1.0, 0.0, 1.0], &[0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!((q.median_x, q.median_y), (0.5, 0.5));
        let means: Vec<f64> = q.quadrants().iter().map(|q| q.mean_cra.unwrap()).collect();
        assert_eq!(means, vec![0.1, 0.2, 0.3, 0.4]);
        assert!(!q.degenerate);
    }

    #[test]
    fn identical_x_is_degenerate() {
        let q = quadrant_summary(&[1.0; 5], &[0.0, 1.0, 2.0, 3.0, 4.0], &[0.5; 5]).unwrap();
        assert!(q.degenerate);
        assert!(q.high_x_low_y.mean_cra.is_none());
        assert!(q.high_x_high_y.mean_cra.is_none());
    }

    #[test]
    fn hundred_point_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..100).map(|_| (rng.random_range(0..20) as f64) / 2.0).collect();
        let y: Vec<f64> = (0..100).map(|_| rng.random_range(0..15) as f64).collect();
        let cra: Vec<f64> = (0..100).map(|_| rng.random_range(0..=10) as f64 / 10.0).collect();
        let q = quadrant_summary(&x, &y, &cra).unwrap();
        // brute force: sort copies for medians, then partition
        let med = |v: &[f64]| {
            let mut s = v.to_vec();
            s.sort_by(|a, b| a.partial_cmp(b).unwrap());
            (s[49] + s[50]) / 2.0
        };
        let (mx, my) = (med(&x), med(&y));
        assert_eq!((q.median_x, q.median_y), (mx, my));
        let part = |hx: bool, hy: bool| {
            let v: Vec<f64> = (0..100).filter(|&i| (x[i] > mx) == hx && (y[i] > my) == hy).map(|i| cra[i]).collect();
            (v.iter().sum::<f64>() / v.len() as f64, v.len())
        };
        for (got, (hx, hy)) in q.quadrants().iter().zip([(false, false), (false, true), (true, false), (true, true)]) {
            let (m, n) = part(hx, hy);
            assert_eq!(got.n, n);
            assert!((got.mean_cra.unwrap() - m).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn rank_transform_invariance(x in prop::collection::vec(-100.0f64..100.0, 5..30), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y: Vec<f64> = x.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
            let a = spearman(&x, &y, 10, 1).unwrap();
            let xt: Vec<f64> = x.iter().map(|v| (v / 50.0).exp() * 3.0 + 7.0).collect();
            let yt: Vec<f64> = y.iter().map(|v| v * v * v).collect();
            let b = spearman(&xt, &yt, 10, 1).unwrap();
            match (a.rho, b.rho) {
                (Some(p), Some(q)) => prop_assert!((p - q).abs() < 1e-12),
                (p, q) => prop_assert_eq!(p, q),
            }
        }

        #[test]
        fn self_correlation(x in prop::collection::vec(-10.0f64..10.0, 3..40)) {
            let s = spearman(&x, &x, 10, 0).unwrap();
            let neg: Vec<f64> = x.iter().map(|v| -v).collect();
            let t = spearman(&x, &neg, 10, 0).unwrap();
            if let Some(r) = s.rho {
                prop_assert!((r - 1.0).abs() < 1e-12);
                prop_assert!((t.rho.unwrap() + 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn dedup_monotone(scores in prop::collection::vec(0.0f64..1.0, 0..60), a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(dedup_filter(&scores, lo) <= dedup_filter(&scores, hi));
        }
    }
}
