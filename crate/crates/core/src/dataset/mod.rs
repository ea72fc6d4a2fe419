//! Synthetic point-cloud corpus: generation, oracle annotation and persistence.

mod generate;
mod io;
pub mod oracle;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use generate::{generate_sample, unit_lattice, GeneratorKnobs};
pub use io::{read_dataset, write_dataset, DatasetHeader, SCHEMA_VERSION};
pub use oracle::{annotate, measure, OracleThresholds, ShapeStats};

use crate::error::{Error, Result};
use crate::rng::SeedStream;
use crate::taxonomy::{AttributeSet, AttributeTree, Family};

pub const DEFAULT_POINTS: usize = 32;

/// One point cloud: `2K` interleaved coordinates `x0, y0, x1, y1, ...`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub points: Vec<f64>,
    pub family: Family,
}

impl Sample {
    pub fn num_points(&self) -> usize {
        self.points.len() / 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// A training record `(x0, y, A_pos, A_neg)` plus its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedSample {
    pub sample: Sample,
    pub a_pos: AttributeSet,
    pub a_neg: AttributeSet,
    pub knobs: GeneratorKnobs,
    pub split: Split,
}

impl AnnotatedSample {
    /// The content label `y`.
    pub fn y(&self) -> Family {
        self.sample.family
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: Option<DatasetHeader>,
    pub samples: Vec<AnnotatedSample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &AnnotatedSample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn split_vec(&self, split: Split) -> Vec<AnnotatedSample> {
        self.split(split).cloned().collect()
    }
}

/// How knobs are drawn for a generated corpus. Each defect knob is
/// independently "good" (uniform within half its threshold) with probability
/// `p_good`, otherwise "bad" (set to `bad_multiplier` times its threshold).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnobMix {
    pub p_good: f64,
    pub bad_multiplier: f64,
    pub p_ring: f64,
    pub noise_sigma: f64,
}

impl Default for KnobMix {
    fn default() -> Self {
        Self {
            p_good: 0.6,
            bad_multiplier: 2.0,
            p_ring: 0.5,
            noise_sigma: 0.01,
        }
    }
}

impl KnobMix {
    pub fn draw<R: Rng>(
        &self,
        family: Family,
        th: &OracleThresholds,
        rng: &mut R,
    ) -> GeneratorKnobs {
        let bad = self.bad_multiplier;
        let defect = |limit: f64, rng: &mut R| {
            if rng.random::<f64>() < self.p_good {
                rng.random::<f64>() * 0.5 * limit
            } else {
                bad * limit
            }
        };
        let gap = defect(th.gap_max, rng);
        let jitter = defect(th.jitter_max, rng);
        let offset = defect(th.centroid_max, rng);
        let (lo, hi) = th.dispersion_band;
        let dispersion = if rng.random::<f64>() < self.p_good {
            let (a, b) = (1.0 - 0.5 * (1.0 - lo), 1.0 + 0.5 * (hi - 1.0));
            a + rng.random::<f64>() * (b - a)
        } else if rng.random::<bool>() {
            1.0 + bad * (hi - 1.0)
        } else {
            (1.0 - bad * (1.0 - lo)).max(0.05)
        };
        GeneratorKnobs {
            gap_fraction: if family == Family::Ring {
                gap.min(1.0)
            } else {
                0.0
            },
            jitter_sigma: if family == Family::Grid { jitter } else { 0.0 },
            centroid_offset: offset,
            dispersion_ratio: dispersion,
            noise_sigma: self.noise_sigma,
        }
    }
}

/// Split sizes for `n` records: 80% / 10% / remainder.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 8 / 10;
    let val = n / 10;
    (train, val, n - train - val)
}

/// Generate and annotate `n` samples; deterministic in `seed`.
pub fn build_dataset(
    n: usize,
    mix: &KnobMix,
    tree: &AttributeTree,
    thresholds: &OracleThresholds,
    k: usize,
    seed: u64,
) -> Result<Dataset> {
    if n < 10 {
        return Err(Error::InvalidArgument(format!(
            "dataset needs n >= 10, got {n}"
        )));
    }
    thresholds.validate()?;
    let root = SeedStream::new(seed).child("data");
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let s = root.index(i as u64);
        let mut rng = s.child("knobs").rng();
        let family = if rng.random::<f64>() < mix.p_ring {
            Family::Ring
        } else {
            Family::Grid
        };
        let knobs = mix.draw(family, thresholds, &mut rng);
        let sample = generate_sample(family, &knobs, k, s.child("points").as_u64())?;
        let (a_pos, a_neg) = annotate(&sample, tree, thresholds)?;
        samples.push(AnnotatedSample {
            sample,
            a_pos,
            a_neg,
            knobs,
            split: Split::Train,
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut root.child("split").rng());
    let (train, val, _) = split_sizes(n);
    for (rank, &i) in order.iter().enumerate() {
        samples[i].split = if rank < train {
            Split::Train
        } else if rank < train + val {
            Split::Val
        } else {
            Split::Test
        };
    }

    Ok(Dataset {
        header: Some(DatasetHeader {
            schema: SCHEMA_VERSION,
            tree_hash: tree.content_hash(),
            thresholds: *thresholds,
            k,
            seed,
        }),
        samples,
    })
}

/// Mean count of negative attributes.
pub fn mean_a_neg<'a, I>(samples: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a AttributeSet>,
{
    let (sum, n) = samples
        .into_iter()
        .fold((0usize, 0usize), |(s, n), a| (s + a.len(), n + 1));
    if n == 0 {
        return Err(Error::Empty("mean_a_neg over no samples"));
    }
    Ok(sum as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::{applicable_pairs, default_tree};

    #[test]
    fn split_ratios() {
        assert_eq!(split_sizes(1000), (800, 100, 100));
        assert_eq!(split_sizes(10), (8, 1, 1));
    }

    #[test]
    fn build_small_dataset() {
        let t = default_tree();
        let d = build_dataset(
            10,
            &KnobMix::default(),
            &t,
            &OracleThresholds::default(),
            32,
            3,
        )
        .unwrap();
        assert_eq!(d.split(Split::Train).count(), 8);
        assert_eq!(d.split(Split::Val).count(), 1);
        assert_eq!(d.split(Split::Test).count(), 1);
        for s in &d.samples {
            assert_eq!(s.sample.points.len(), 64);
            assert_eq!(
                s.a_pos.len() + s.a_neg.len(),
                applicable_pairs(&t, s.y()).len()
            );
        }
        assert!(build_dataset(
            9,
            &KnobMix::default(),
            &t,
            &OracleThresholds::default(),
            32,
            3
        )
        .is_err());
    }

    #[test]
    fn build_is_deterministic() {
        let t = default_tree();
        let th = OracleThresholds::default();
        let a = build_dataset(50, &KnobMix::default(), &t, &th, 32, 21).unwrap();
        let b = build_dataset(50, &KnobMix::default(), &t, &th, 32, 21).unwrap();
        let c = build_dataset(50, &KnobMix::default(), &t, &th, 32, 22).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn labels_track_knobs() {
        // good knobs stay inside thresholds with margin, bad knobs outside
        let t = default_tree();
        let th = OracleThresholds::default();
        let d = build_dataset(400, &KnobMix::default(), &t, &th, 32, 5).unwrap();
        let mut agree = 0;
        let mut total = 0;
        for s in &d.samples {
            let k = &s.knobs;
            let expected_neg = [
                (
                    oracle::RING_CLOSURE,
                    s.y() == Family::Ring && k.gap_fraction > th.gap_max,
                ),
                (
                    oracle::GRID_REGULARITY,
                    s.y() == Family::Grid && k.jitter_sigma > th.jitter_max,
                ),
                (oracle::CENTER_BALANCE, k.centroid_offset > th.centroid_max),
                (
                    oracle::SPREAD_SCALE,
                    !(th.dispersion_band.0 < k.dispersion_ratio
                        && k.dispersion_ratio < th.dispersion_band.1),
                ),
            ];
            for (pair, neg) in expected_neg {
                if applicable_pairs(&t, s.y()).contains(pair) {
                    total += 1;
                    agree += usize::from(s.a_neg.contains_pair(pair) == neg);
                }
            }
        }
        assert_eq!(agree, total);
    }

    #[test]
    fn mean_a_neg_examples() {
        let none = AttributeSet::new();
        assert_eq!(mean_a_neg([&none, &none]).unwrap(), 0.0);
        let one = AttributeSet::neg(["A"]);
        let three = AttributeSet::neg(["A", "B", "C"]);
        assert_eq!(mean_a_neg([&one, &three]).unwrap(), 2.0);
        assert!(matches!(
            mean_a_neg(std::iter::empty()),
            Err(Error::Empty(_))
        ));
    }
}
