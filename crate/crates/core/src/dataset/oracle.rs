//! Rule-based attribute oracle.
//!
//! Each leaf pair of the default criteria maps to one geometric statistic of
//! the point cloud; a pair is POS when its statistic is inside threshold.

use std::f64::consts::TAU;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::generate::unit_lattice;
use super::Sample;
use crate::error::{Error, Result};
use crate::taxonomy::{applicable_pairs, AttributeSet, AttributeTree, Family, Polarity};

pub const RING_CLOSURE: &str = "RING_CLOSURE";
pub const GRID_REGULARITY: &str = "GRID_REGULARITY";
pub const CENTER_BALANCE: &str = "CENTER_BALANCE";
pub const SPREAD_SCALE: &str = "SPREAD_SCALE";

/// Target RMS radius of a well-dispersed sample.
pub const TARGET_RADIUS: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleThresholds {
    /// Largest tolerated missing-arc fraction of a ring.
    pub gap_max: f64,
    /// Largest tolerated lattice residual, relative to the fitted lattice scale.
    pub jitter_max: f64,
    pub centroid_max: f64,
    /// Open interval of acceptable RMS radius over target.
    pub dispersion_band: (f64, f64),
}

impl Default for OracleThresholds {
    fn default() -> Self {
        Self {
            gap_max: 0.10,
            jitter_max: 0.05,
            centroid_max: 0.15,
            dispersion_band: (0.8, 1.25),
        }
    }
}

impl OracleThresholds {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.dispersion_band;
        if self.gap_max > 0.0
            && self.jitter_max > 0.0
            && self.centroid_max > 0.0
            && lo > 0.0
            && lo < 1.0
            && 1.0 < hi
        {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "bad oracle thresholds: {self:?}"
            )))
        }
    }
}

/// Measured statistics of one sample. Shape-specific entries are `None` for
/// the other family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeStats {
    /// Fraction of the circle covered by the ring's points.
    pub arc_coverage: Option<f64>,
    pub grid_residual: Option<f64>,
    /// Distance of the shape center (fitted circle center, or point mean for
    /// grids) from the origin.
    pub centroid_norm: f64,
    pub dispersion: f64,
}

fn as_points(sample: &Sample) -> Result<Vec<[f64; 2]>> {
    if !sample.points.len().is_multiple_of(2) || sample.points.len() < 6 {
        return Err(Error::DegenerateSample(
            "need an even number of coordinates for at least 3 points",
        ));
    }
    if !sample.points.iter().all(|x| x.is_finite()) {
        return Err(Error::DegenerateSample("non-finite coordinates"));
    }
    Ok(sample.points.chunks(2).map(|p| [p[0], p[1]]).collect())
}

fn mean(pts: &[[f64; 2]]) -> [f64; 2] {
    let n = pts.len() as f64;
    [
        pts.iter().map(|p| p[0]).sum::<f64>() / n,
        pts.iter().map(|p| p[1]).sum::<f64>() / n,
    ]
}

fn rms_about(pts: &[[f64; 2]], c: [f64; 2]) -> f64 {
    let n = pts.len() as f64;
    (pts.iter()
        .map(|p| (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2))
        .sum::<f64>()
        / n)
        .sqrt()
}

/// Algebraic least-squares circle fit; returns the center.
pub fn fit_circle_center(pts: &[[f64; 2]]) -> Result<[f64; 2]> {
    let m = mean(pts);
    let mut ata = Matrix3::<f64>::zeros();
    let mut atb = Vector3::<f64>::zeros();
    for p in pts {
        let (x, y) = (p[0] - m[0], p[1] - m[1]);
        let row = Vector3::new(x, y, 1.0);
        ata += row * row.transpose();
        atb += row * -(x * x + y * y);
    }
    let sol = ata
        .lu()
        .solve(&atb)
        .filter(|s| s.iter().all(|v| v.is_finite()))
        .ok_or(Error::DegenerateSample(
            "collinear points admit no circle fit",
        ))?;
    Ok([m[0] - sol[0] / 2.0, m[1] - sol[1] / 2.0])
}

/// Covered fraction of the circle around `center`: one minus the largest
/// angular gap in excess of the typical (median) point spacing.
pub fn arc_coverage(pts: &[[f64; 2]], center: [f64; 2]) -> f64 {
    let mut ang: Vec<f64> = pts
        .iter()
        .map(|p| (p[1] - center[1]).atan2(p[0] - center[0]))
        .collect();
    ang.sort_by(f64::total_cmp);
    let mut gaps: Vec<f64> = ang.windows(2).map(|w| w[1] - w[0]).collect();
    gaps.push(TAU - (ang[ang.len() - 1] - ang[0]));
    let max_gap = gaps.iter().copied().fold(0.0, f64::max);
    gaps.sort_by(f64::total_cmp);
    let n = gaps.len();
    let median = if n % 2 == 1 {
        gaps[n / 2]
    } else {
        0.5 * (gaps[n / 2 - 1] + gaps[n / 2])
    };
    (1.0 - (max_gap - median) / TAU).clamp(0.0, 1.0)
}

/// RMS residual of an ordered least-squares fit `p_i ≈ s·L_i + c` against the
/// unit lattice, divided by the fitted scale `s`.
pub fn grid_residual(pts: &[[f64; 2]]) -> Result<f64> {
    let lattice = unit_lattice(pts.len());
    let c = mean(pts);
    let num: f64 = pts
        .iter()
        .zip(&lattice)
        .map(|(p, l)| (p[0] - c[0]) * l[0] + (p[1] - c[1]) * l[1])
        .sum();
    let den: f64 = lattice.iter().map(|l| l[0] * l[0] + l[1] * l[1]).sum();
    let s = num / den;
    if s <= 1e-9 {
        return Err(Error::DegenerateSample("lattice fit collapsed"));
    }
    let sq: f64 = pts
        .iter()
        .zip(&lattice)
        .map(|(p, l)| (p[0] - s * l[0] - c[0]).powi(2) + (p[1] - s * l[1] - c[1]).powi(2))
        .sum();
    Ok((sq / (2 * pts.len()) as f64).sqrt() / s)
}

pub fn measure(sample: &Sample) -> Result<ShapeStats> {
    let pts = as_points(sample)?;
    let m = mean(&pts);
    if rms_about(&pts, m) < 1e-9 {
        return Err(Error::DegenerateSample("all points coincident"));
    }
    match sample.family {
        Family::Ring => {
            let c = fit_circle_center(&pts)?;
            Ok(ShapeStats {
                arc_coverage: Some(arc_coverage(&pts, c)),
                grid_residual: None,
                centroid_norm: c[0].hypot(c[1]),
                dispersion: rms_about(&pts, c) / TARGET_RADIUS,
            })
        }
        Family::Grid => Ok(ShapeStats {
            arc_coverage: None,
            grid_residual: Some(grid_residual(&pts)?),
            centroid_norm: m[0].hypot(m[1]),
            dispersion: rms_about(&pts, m) / TARGET_RADIUS,
        }),
    }
}

fn pair_passes(pair_id: &str, stats: &ShapeStats, th: &OracleThresholds) -> Result<bool> {
    let missing = |what: &'static str| Error::DegenerateSample(what);
    Ok(match pair_id {
        RING_CLOSURE => {
            1.0 - stats
                .arc_coverage
                .ok_or_else(|| missing("arc coverage needs a ring"))?
                <= th.gap_max
        }
        GRID_REGULARITY => {
            stats
                .grid_residual
                .ok_or_else(|| missing("lattice residual needs a grid"))?
                <= th.jitter_max
        }
        CENTER_BALANCE => stats.centroid_norm <= th.centroid_max,
        SPREAD_SCALE => {
            let (lo, hi) = th.dispersion_band;
            lo < stats.dispersion && stats.dispersion < hi
        }
        other => return Err(Error::NoOracleRule(other.to_string())),
    })
}

/// Label every applicable pair of the sample's family as POS or NEG.
pub fn annotate(
    sample: &Sample,
    tree: &AttributeTree,
    thresholds: &OracleThresholds,
) -> Result<(AttributeSet, AttributeSet)> {
    let stats = measure(sample)?;
    let mut pos = AttributeSet::new();
    let mut neg = AttributeSet::new();
    for pair in applicable_pairs(tree, sample.family) {
        if pair_passes(&pair, &stats, thresholds)? {
            pos.insert(pair, Polarity::Pos);
        } else {
            neg.insert(pair, Polarity::Neg);
        }
    }
    Ok((pos, neg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate::{generate_sample, GeneratorKnobs};
    use crate::taxonomy::{check_exclusivity, default_tree};
    use proptest::prelude::*;

    fn clean() -> GeneratorKnobs {
        GeneratorKnobs::default()
    }

    #[test]
    fn perfect_ring_is_all_positive() {
        let t = default_tree();
        let s = generate_sample(Family::Ring, &clean(), 32, 1).unwrap();
        let (pos, neg) = annotate(&s, &t, &OracleThresholds::default()).unwrap();
        assert_eq!(
            pos.pair_ids().collect::<Vec<_>>(),
            [CENTER_BALANCE, RING_CLOSURE, SPREAD_SCALE]
        );
        assert!(neg.is_empty());
        let st = measure(&s).unwrap();
        assert!((st.arc_coverage.unwrap() - 1.0).abs() < 1e-12);
        assert!(st.centroid_norm < 1e-12);
        assert!((st.dispersion - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gap_quarter_measures_three_quarter_coverage() {
        for seed in 0..20 {
            let k = GeneratorKnobs {
                gap_fraction: 0.25,
                ..clean()
            };
            let s = generate_sample(Family::Ring, &k, 32, seed).unwrap();
            let cov = measure(&s).unwrap().arc_coverage.unwrap();
            assert!((cov - 0.75).abs() < 0.05, "seed {seed}: coverage {cov}");
        }
    }

    #[test]
    fn doubled_centroid_offset_is_negative() {
        let th = OracleThresholds::default();
        let t = default_tree();
        for fam in Family::ALL {
            let k = GeneratorKnobs {
                centroid_offset: 2.0 * th.centroid_max,
                ..clean()
            };
            let s = generate_sample(fam, &k, 32, 9).unwrap();
            let st = measure(&s).unwrap();
            assert!(
                st.centroid_norm > th.centroid_max,
                "{fam}: {}",
                st.centroid_norm
            );
            let (_, neg) = annotate(&s, &t, &th).unwrap();
            assert!(neg.contains_pair(CENTER_BALANCE));
        }
    }

    #[test]
    fn doubled_jitter_is_negative() {
        let th = OracleThresholds::default();
        let t = default_tree();
        for seed in 0..20 {
            let k = GeneratorKnobs {
                jitter_sigma: 2.0 * th.jitter_max,
                ..clean()
            };
            let s = generate_sample(Family::Grid, &k, 32, seed).unwrap();
            let r = measure(&s).unwrap().grid_residual.unwrap();
            assert!(r > th.jitter_max, "seed {seed}: residual {r}");
            let (_, neg) = annotate(&s, &t, &th).unwrap();
            assert!(neg.contains_pair(GRID_REGULARITY));
        }
    }

    #[test]
    fn doubled_gap_and_dispersion_are_negative() {
        let th = OracleThresholds::default();
        let t = default_tree();
        let gap = GeneratorKnobs {
            gap_fraction: 2.0 * th.gap_max,
            ..clean()
        };
        let (_, neg) = annotate(
            &generate_sample(Family::Ring, &gap, 32, 2).unwrap(),
            &t,
            &th,
        )
        .unwrap();
        assert_eq!(neg.pair_ids().collect::<Vec<_>>(), [RING_CLOSURE]);
        for ratio in [0.6, 1.5] {
            let k = GeneratorKnobs {
                dispersion_ratio: ratio,
                ..clean()
            };
            for fam in Family::ALL {
                let (_, neg) =
                    annotate(&generate_sample(fam, &k, 32, 2).unwrap(), &t, &th).unwrap();
                assert_eq!(
                    neg.pair_ids().collect::<Vec<_>>(),
                    [SPREAD_SCALE],
                    "{fam} {ratio}"
                );
            }
        }
    }

    #[test]
    fn coincident_points_are_degenerate() {
        let s = Sample {
            points: vec![0.3; 64],
            family: Family::Grid,
        };
        assert!(matches!(measure(&s), Err(Error::DegenerateSample(_))));
        let s = Sample {
            points: vec![0.3; 64],
            family: Family::Ring,
        };
        assert!(matches!(
            annotate(&s, &default_tree(), &OracleThresholds::default()),
            Err(Error::DegenerateSample(_))
        ));
    }

    #[test]
    fn circle_fit_recovers_center_on_partial_arc() {
        let pts: Vec<[f64; 2]> = (0..20)
            .map(|i| {
                let a = 0.1 * i as f64;
                [0.4 + 2.0 * a.cos(), -0.7 + 2.0 * a.sin()]
            })
            .collect();
        let c = fit_circle_center(&pts).unwrap();
        assert!((c[0] - 0.4).abs() < 1e-9 && (c[1] + 0.7).abs() < 1e-9);
    }

    fn knobs_strategy() -> impl Strategy<Value = GeneratorKnobs> {
        (
            0.0..0.5f64,
            0.0..0.2f64,
            0.0..0.5f64,
            0.4..2.0f64,
            0.0..0.03f64,
        )
            .prop_map(|(g, j, c, d, n)| GeneratorKnobs {
                gap_fraction: g,
                jitter_sigma: j,
                centroid_offset: c,
                dispersion_ratio: d,
                noise_sigma: n,
            })
    }

    proptest! {
        #[test]
        fn every_applicable_pair_gets_exactly_one_polarity(
            k in knobs_strategy(), fam in 0usize..2, seed in any::<u64>()
        ) {
            let t = default_tree();
            let fam = Family::ALL[fam];
            let s = generate_sample(fam, &k, 32, seed).unwrap();
            let (pos, neg) = annotate(&s, &t, &OracleThresholds::default()).unwrap();
            let app = applicable_pairs(&t, fam);
            prop_assert_eq!(pos.len() + neg.len(), app.len());
            for p in &app {
                prop_assert!(pos.contains_pair(p) ^ neg.contains_pair(p));
            }
            prop_assert!(check_exclusivity(&t, &pos).unwrap().is_empty());
            // deterministic
            prop_assert_eq!(annotate(&s, &t, &OracleThresholds::default()).unwrap(), (pos, neg));
        }

        #[test]
        fn clean_samples_have_no_negatives(fam in 0usize..2, seed in any::<u64>()) {
            let s = generate_sample(Family::ALL[fam], &clean(), 32, seed).unwrap();
            let (_, neg) = annotate(&s, &default_tree(), &OracleThresholds::default()).unwrap();
            prop_assert!(neg.is_empty());
        }

        #[test]
        fn centroid_balance_is_monotone_in_offset(
            fam in 0usize..2, seed in any::<u64>(), a in 0.0..0.6f64, b in 0.0..0.6f64
        ) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let th = OracleThresholds::default();
            let t = default_tree();
            let fam = Family::ALL[fam];
            let at = |off: f64| {
                let k = GeneratorKnobs { centroid_offset: off, ..clean() };
                let s = generate_sample(fam, &k, 32, seed).unwrap();
                annotate(&s, &t, &th).unwrap().1.contains_pair(CENTER_BALANCE)
            };
            // NEG at the smaller offset implies NEG at the larger
            prop_assert!(!at(lo) || at(hi));
        }
    }
}
