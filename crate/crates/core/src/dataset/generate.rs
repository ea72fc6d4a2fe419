use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::rng::SeedStream;
use crate::taxonomy::Family;

/// Defect and noise controls for one generated sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorKnobs {
    /// Fraction of the ring's circumference left empty.
    pub gap_fraction: f64,
    /// Per-coordinate lattice perturbation, in units of the unit-spread lattice.
    pub jitter_sigma: f64,
    pub centroid_offset: f64,
    /// Actual over target RMS radius.
    pub dispersion_ratio: f64,
    pub noise_sigma: f64,
}

impl Default for GeneratorKnobs {
    fn default() -> Self {
        Self {
            gap_fraction: 0.0,
            jitter_sigma: 0.0,
            centroid_offset: 0.0,
            dispersion_ratio: 1.0,
            noise_sigma: 0.0,
        }
    }
}

impl GeneratorKnobs {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.gap_fraction)
            && self.jitter_sigma >= 0.0
            && self.centroid_offset >= 0.0
            && self.dispersion_ratio > 0.0
            && self.noise_sigma >= 0.0
            && [
                self.gap_fraction,
                self.jitter_sigma,
                self.centroid_offset,
                self.dispersion_ratio,
                self.noise_sigma,
            ]
            .iter()
            .all(|x| x.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "knobs out of range: {self:?}"
            )))
        }
    }
}

/// Row-major `⌈√k⌉ × ⌈√k⌉` lattice truncated to `k` nodes, centered on its
/// mean and scaled to unit RMS radius.
pub fn unit_lattice(k: usize) -> Vec<[f64; 2]> {
    let side = (k as f64).sqrt().ceil() as usize;
    let mut pts: Vec<[f64; 2]> = (0..k)
        .map(|i| [(i % side) as f64, (i / side) as f64])
        .collect();
    let n = k as f64;
    let mx = pts.iter().map(|p| p[0]).sum::<f64>() / n;
    let my = pts.iter().map(|p| p[1]).sum::<f64>() / n;
    for p in &mut pts {
        p[0] -= mx;
        p[1] -= my;
    }
    let rms = (pts.iter().map(|p| p[0] * p[0] + p[1] * p[1]).sum::<f64>() / n).sqrt();
    for p in &mut pts {
        p[0] /= rms;
        p[1] /= rms;
    }
    pts
}

/// Draw one point cloud of `k` points. Deterministic in `(family, knobs, k, seed)`.
pub fn generate_sample(
    family: Family,
    knobs: &GeneratorKnobs,
    k: usize,
    seed: u64,
) -> Result<Sample> {
    knobs.validate()?;
    if k < 3 {
        return Err(Error::InvalidArgument(format!(
            "need at least 3 points, got {k}"
        )));
    }
    let stream = SeedStream::new(seed).child("sample");
    let mut rng = stream.rng();

    let mut pts: Vec<[f64; 2]> = match family {
        Family::Ring => {
            // fixed phase: point i always sits at the same angle, the gap
            // always opens at the end of the sweep
            let arc = (1.0 - knobs.gap_fraction) * TAU;
            (0..k)
                .map(|i| {
                    let a = (i as f64 + 0.5) * arc / k as f64;
                    [a.cos(), a.sin()]
                })
                .collect()
        }
        Family::Grid => {
            let mut pts = unit_lattice(k);
            if knobs.jitter_sigma > 0.0 {
                let jitter = Normal::new(0.0, knobs.jitter_sigma).expect("finite sigma");
                for p in &mut pts {
                    p[0] += jitter.sample(&mut rng);
                    p[1] += jitter.sample(&mut rng);
                }
            }
            pts
        }
    };

    let dir = rng.random::<f64>() * TAU;
    let (ox, oy) = (
        knobs.centroid_offset * dir.cos(),
        knobs.centroid_offset * dir.sin(),
    );
    for p in &mut pts {
        p[0] = p[0] * knobs.dispersion_ratio + ox;
        p[1] = p[1] * knobs.dispersion_ratio + oy;
    }
    if knobs.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, knobs.noise_sigma).expect("finite sigma");
        for p in &mut pts {
            p[0] += noise.sample(&mut rng);
            p[1] += noise.sample(&mut rng);
        }
    }

    Ok(Sample {
        points: pts.into_iter().flatten().collect(),
        family,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(knobs: GeneratorKnobs) -> GeneratorKnobs {
        GeneratorKnobs {
            dispersion_ratio: 1.0,
            ..knobs
        }
    }

    #[test]
    fn perfect_ring_lies_on_unit_circle() {
        let s = generate_sample(Family::Ring, &unit(Default::default()), 32, 11).unwrap();
        assert_eq!(s.points.len(), 64);
        let mut cx = 0.0;
        let mut cy = 0.0;
        for p in s.points.chunks(2) {
            assert!(((p[0] * p[0] + p[1] * p[1]).sqrt() - 1.0).abs() < 1e-12);
            cx += p[0];
            cy += p[1];
        }
        assert!(cx.abs() < 1e-12 && cy.abs() < 1e-12);
    }

    #[test]
    fn zero_jitter_grid_is_exact_lattice() {
        let s = generate_sample(Family::Grid, &unit(Default::default()), 32, 5).unwrap();
        let lattice = unit_lattice(32);
        for (p, q) in s.points.chunks(2).zip(&lattice) {
            assert_eq!(p, q.as_slice());
        }
        let side = 6;
        // horizontal spacing is uniform
        let dx = lattice[1][0] - lattice[0][0];
        for r in 0..5 {
            for c in 0..side - 1 {
                let i = r * side + c;
                assert!((lattice[i + 1][0] - lattice[i][0] - dx).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unit_lattice_is_normalized() {
        for k in [4, 9, 32, 50] {
            let l = unit_lattice(k);
            let n = k as f64;
            let mx: f64 = l.iter().map(|p| p[0]).sum::<f64>() / n;
            let rms = (l.iter().map(|p| p[0] * p[0] + p[1] * p[1]).sum::<f64>() / n).sqrt();
            assert!(mx.abs() < 1e-12);
            assert!((rms - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let k = GeneratorKnobs {
            gap_fraction: 0.2,
            jitter_sigma: 0.1,
            centroid_offset: 0.3,
            dispersion_ratio: 1.2,
            noise_sigma: 0.01,
        };
        for fam in Family::ALL {
            let a = generate_sample(fam, &k, 32, 3).unwrap();
            let b = generate_sample(fam, &k, 32, 3).unwrap();
            let c = generate_sample(fam, &k, 32, 4).unwrap();
            assert_eq!(a, b);
            assert_ne!(a, c);
            assert!(a.points.iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn rejects_out_of_range_knobs() {
        let bad = GeneratorKnobs {
            gap_fraction: 1.5,
            ..Default::default()
        };
        assert!(generate_sample(Family::Ring, &bad, 32, 0).is_err());
        let bad = GeneratorKnobs {
            dispersion_ratio: 0.0,
            ..Default::default()
        };
        assert!(generate_sample(Family::Grid, &bad, 32, 0).is_err());
    }
}
