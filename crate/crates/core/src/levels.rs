//! Breakdowns of per-reference metrics: dispersion within ingested PDFE
//! replication levels, the CRA/VR scatter export, and mean CRC per CRA bin.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::stats::{summarize, Summary};

pub const HIGH_CRT: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LevelMetric {
    Cra,
    Vr,
    Crt,
}

impl LevelMetric {
    pub fn as_str(self) -> &'static str {
        match self {
            LevelMetric::Cra => "cra",
            LevelMetric::Vr => "vr",
            LevelMetric::Crt => "crt",
        }
    }
}

/// One (reference, model) row joined with its replication level.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelRecord {
    pub reference_id: String,
    pub model: String,
    pub pdfe_level: i64,
    pub cra: f64,
    /// Absent when nothing aligned.
    pub vr: Option<f64>,
    pub crt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelStats {
    pub level: u8,
    pub metric: LevelMetric,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LevelBreakdown {
    pub stats: Vec<LevelStats>,
    /// Records dropped for a level outside 0..=5.
    pub rejected: Vec<LevelRecord>,
}

/// Most frequent level; ties go to the lower level.
pub fn mode_level(levels: &[i64]) -> Option<i64> {
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for &l in levels {
        *counts.entry(l).or_default() += 1;
    }
    counts
        .into_iter()
        .fold(None, |best: Option<(i64, usize)>, (l, c)| match best {
            Some((_, bc)) if bc >= c => best,
            _ => Some((l, c)),
        })
        .map(|(l, _)| l)
}

/// Mean, population SD, range and count per (level, metric). VR only counts
/// records that have one.
pub fn stats_by_level(records: &[LevelRecord]) -> LevelBreakdown {
    let mut groups: BTreeMap<(u8, LevelMetric), Vec<f64>> = BTreeMap::new();
    let mut rejected = Vec::new();
    for r in records {
        let level = match u8::try_from(r.pdfe_level) {
            Ok(l) if l <= 5 => l,
            _ => {
                log::warn!("{}/{}: pdfe level {} outside 0..=5", r.reference_id, r.model, r.pdfe_level);
                rejected.push(r.clone());
                continue;
            }
        };
        groups.entry((level, LevelMetric::Cra)).or_default().push(r.cra);
        if let Some(vr) = r.vr {
            groups.entry((level, LevelMetric::Vr)).or_default().push(vr);
        }
        groups.entry((level, LevelMetric::Crt)).or_default().push(r.crt);
    }
    let stats = groups
        .into_iter()
        .map(|((level, metric), mut values)| {
            // order-independent sums
            values.sort_by(f64::total_cmp);
            LevelStats {
                level,
                metric,
                summary: summarize(&values).expect("groups are nonempty"),
            }
        })
        .collect();
    LevelBreakdown { stats, rejected }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScatterRow {
    pub reference_id: String,
    pub cra: f64,
    pub vr_mean: f64,
    pub crt: f64,
    pub high_crt: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScatterExport {
    pub rows: Vec<ScatterRow>,
    /// Share of exported (aligned) references with CRT above 0.8, in percent.
    pub high_crt_percent: Option<f64>,
}

/// Per-reference input: `(reference_id, cra, vr_mean over aligned images, crt)`.
/// References without a VR (nothing aligned) are left out.
pub fn cra_vr_export(per_reference: &[(String, f64, Option<f64>, f64)]) -> ScatterExport {
    let rows: Vec<ScatterRow> = per_reference
        .iter()
        .filter_map(|(id, cra, vr, crt)| {
            vr.map(|vr_mean| ScatterRow {
                reference_id: id.clone(),
                cra: *cra,
                vr_mean,
                crt: *crt,
                high_crt: *crt > HIGH_CRT,
            })
        })
        .collect();
    let high = rows.iter().filter(|r| r.high_crt).count();
    let high_crt_percent = (!rows.is_empty()).then(|| 100.0 * high as f64 / rows.len() as f64);
    ScatterExport { rows, high_crt_percent }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CraBin {
    /// Bin centre, a multiple of 0.1.
    pub cra_bin: f64,
    pub mean_crc: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CraCrcBins {
    pub bins: Vec<CraBin>,
    /// Reference ids whose CRA was off the 0.1 lattice and got rounded.
    pub off_lattice: Vec<String>,
}

/// Mean CRC of recognized dynamic references grouped by CRA rounded to the
/// nearest tenth, highest bin first. Empty bins are omitted.
pub fn cra_crc_bins(per_reference: &[(String, f64, f64)]) -> CraCrcBins {
    let mut groups: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    let mut off_lattice = Vec::new();
    for (id, cra, crc) in per_reference {
        if *cra <= 0.0 {
            continue;
        }
        let tenths = (cra * 10.0).round();
        if (cra * 10.0 - tenths).abs() > 1e-9 {
            log::warn!("{id}: CRA {cra} is not a multiple of 0.1; using nearest bin");
            off_lattice.push(id.clone());
        }
        groups.entry(tenths as u32).or_default().push(*crc);
    }
    let bins = groups
        .into_iter()
        .rev()
        .map(|(tenths, crcs)| CraBin {
            cra_bin: f64::from(tenths) / 10.0,
            mean_crc: crcs.iter().sum::<f64>() / crcs.len() as f64,
            count: crcs.len(),
        })
        .collect();
    CraCrcBins { bins, off_lattice }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(level: i64, cra: f64, vr: Option<f64>, crt: f64) -> LevelRecord {
        LevelRecord {
            reference_id: "r".into(),
            model: "m".into(),
            pdfe_level: level,
            cra,
            vr,
            crt,
        }
    }

    fn find(b: &LevelBreakdown, level: u8, metric: LevelMetric) -> Summary {
        b.stats.iter().find(|s| s.level == level && s.metric == metric).unwrap().summary
    }

    #[test]
    fn single_record() {
        let b = stats_by_level(&[rec(3, 0.5, Some(0.25), 0.375)]);
        let s = find(&b, 3, LevelMetric::Cra);
        assert_eq!((s.mean, s.min, s.max, s.sd, s.n), (0.5, 0.5, 0.5, 0.0, 1));
    }

    #[test]
    fn population_sd_of_two() {
        let b = stats_by_level(&[rec(1, 0.0, None, 0.0), rec(1, 1.0, Some(0.5), 0.5)]);
        let s = find(&b, 1, LevelMetric::Cra);
        assert_eq!((s.mean, s.sd), (0.5, 0.5));
        assert_eq!(find(&b, 1, LevelMetric::Vr).n, 1);
    }

    #[test]
    fn out_of_range_levels_rejected() {
        let b = stats_by_level(&[rec(6, 0.5, None, 0.0), rec(-1, 0.5, None, 0.0), rec(0, 0.5, None, 0.0)]);
        assert_eq!(b.rejected.len(), 2);
        assert_eq!(find(&b, 0, LevelMetric::Cra).n, 1);
    }

    #[test]
    fn mode_prefers_lower_on_ties() {
        assert_eq!(mode_level(&[3, 4, 4, 3, 5]), Some(3));
        assert_eq!(mode_level(&[2, 5, 5]), Some(5));
        assert_eq!(mode_level(&[]), None);
    }

    #[test]
    fn high_crt_is_strict() {
        let e = cra_vr_export(&[
            ("a".into(), 1.0, Some(0.19), 0.81),
            ("b".into(), 1.0, Some(0.2), 0.8),
            ("c".into(), 0.0, None, 0.0),
        ]);
        assert_eq!(e.rows.len(), 2);
        assert!(e.rows[0].high_crt);
        assert!(!e.rows[1].high_crt);
        assert_eq!(e.high_crt_percent, Some(50.0));
    }

    #[test]
    fn fifty_reference_percentage() {
        let input: Vec<_> = (0..50)
            .map(|i| {
                let crt = (i % 10) as f64 / 9.0;
                (format!("r{i}"), 1.0, if i % 7 == 0 { None } else { Some(0.1) }, crt)
            })
            .collect();
        let e = cra_vr_export(&input);
        let aligned: Vec<_> = input.iter().filter(|r| r.2.is_some()).collect();
        let high = aligned.iter().filter(|r| r.3 > 0.8).count();
        assert_eq!(e.high_crt_percent, Some(100.0 * high as f64 / aligned.len() as f64));
    }

    #[test]
    fn crc_bins() {
        let b = cra_crc_bins(&[("a".into(), 0.9, 0.2), ("b".into(), 0.9, 0.4)]);
        assert_eq!(b.bins.len(), 1);
        assert_eq!(b.bins[0].cra_bin, 0.9);
        assert!((b.bins[0].mean_crc - 0.3).abs() < 1e-15);
        assert!(b.off_lattice.is_empty());
        let b = cra_crc_bins(&[("a".into(), 0.85, 0.2)]);
        assert_eq!(b.off_lattice, vec!["a"]);
    }

    #[test]
    fn thirty_reference_group_by() {
        let input: Vec<(String, f64, f64)> = (0..30)
            .map(|i| (format!("r{i}"), ((i * 7) % 11) as f64 / 10.0, ((i * 5) % 9) as f64 / 8.0))
            .collect();
        let b = cra_crc_bins(&input);
        for bin in &b.bins {
            let members: Vec<f64> = input
                .iter()
                .filter(|(_, cra, _)| *cra > 0.0 && ((cra * 10.0).round() as u32) == (bin.cra_bin * 10.0).round() as u32)
                .map(|r| r.2)
                .collect();
            assert_eq!(bin.count, members.len());
            assert!((bin.mean_crc - members.iter().sum::<f64>() / members.len() as f64).abs() < 1e-12);
        }
        let total: usize = b.bins.iter().map(|b| b.count).sum();
        assert_eq!(total, input.iter().filter(|r| r.1 > 0.0).count());
    }

    proptest! {
        #[test]
        fn group_by_oracle(rows in prop::collection::vec((0i64..=6, 0.0f64..1.0, prop::option::of(0.0f64..1.0), 0.0f64..1.0), 1..60), shift in 0usize..60) {
            let recs: Vec<LevelRecord> = rows.iter().map(|&(l, c, v, t)| rec(l, c, v, t)).collect();
            let b = stats_by_level(&recs);
            let mut rotated = recs.clone();
            rotated.rotate_left(shift % recs.len());
            prop_assert_eq!(&b.stats, &stats_by_level(&rotated).stats);

            let accepted: Vec<&LevelRecord> = recs.iter().filter(|r| r.pdfe_level <= 5).collect();
            let n_cra: usize = b.stats.iter().filter(|s| s.metric == LevelMetric::Cra).map(|s| s.summary.n).sum();
            prop_assert_eq!(n_cra, accepted.len());
            let n_vr: usize = b.stats.iter().filter(|s| s.metric == LevelMetric::Vr).map(|s| s.summary.n).sum();
            prop_assert_eq!(n_vr, accepted.iter().filter(|r| r.vr.is_some()).count());
            for s in &b.stats {
                let vals: Vec<f64> = accepted
                    .iter()
                    .filter(|r| r.pdfe_level == i64::from(s.level))
                    .filter_map(|r| match s.metric {
                        LevelMetric::Cra => Some(r.cra),
                        LevelMetric::Vr => r.vr,
                        LevelMetric::Crt => Some(r.crt),
                    })
                    .collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                prop_assert!((s.summary.mean - mean).abs() < 1e-12);
                prop_assert!(s.summary.min <= s.summary.mean && s.summary.mean <= s.summary.max);
            }
        }
    }
}
