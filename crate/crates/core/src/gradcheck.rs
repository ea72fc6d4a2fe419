//! Central finite differences over flattened parameter coordinates.

use rand::seq::index::sample;

use crate::denoiser::Tensors;
use crate::rng::SeedStream;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

/// `(f(p + h·e_i) − f(p − h·e_i)) / 2h`.
pub fn central_difference<F>(f: &F, params: &Tensors, i: usize, h: f64) -> f64
where
    F: Fn(&Tensors) -> f64,
{
    let mut p = params.clone();
    let x = p.get(i);
    p.set(i, x + h);
    let up = f(&p);
    p.set(i, x - h);
    let down = f(&p);
    (up - down) / (2.0 * h)
}

/// `|a − n| / max(|a|, |n|, 1e-6)`; the floor keeps near-zero pairs from
/// inflating the ratio.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// `count` distinct coordinates out of `len`, seeded.
pub fn sample_coordinates(len: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = SeedStream::new(seed).child("gradcheck").rng();
    let mut v = sample(&mut rng, len, count.min(len)).into_vec();
    v.sort_unstable();
    v
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub worst_coordinate: usize,
    /// Largest |analytic| among the checked coordinates; near zero means the
    /// comparison was vacuous.
    pub max_abs_gradient: f64,
}

impl GradCheck {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Compare `analytic` against central differences of `f` at sampled coordinates.
pub fn check_gradient<F>(
    f: &F,
    params: &Tensors,
    analytic: &Tensors,
    count: usize,
    seed: u64,
) -> GradCheck
where
    F: Fn(&Tensors) -> f64,
{
    let mut out = GradCheck {
        coordinates: 0,
        max_rel_error: 0.0,
        worst_coordinate: 0,
        max_abs_gradient: 0.0,
    };
    for i in sample_coordinates(params.len(), count, seed) {
        let err = relative_error(analytic.get(i), central_difference(f, params, i, FD_STEP));
        out.coordinates += 1;
        out.max_abs_gradient = out.max_abs_gradient.max(analytic.get(i).abs());
        if err > out.max_rel_error || err.is_nan() {
            out.max_rel_error = err;
            out.worst_coordinate = i;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!(relative_error(1e-9, 0.0) < 1e-2);
    }

    #[test]
    fn coordinates_distinct_and_seeded() {
        let a = sample_coordinates(1000, 100, 1);
        assert_eq!(a.len(), 100);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(a, sample_coordinates(1000, 100, 1));
        assert_eq!(sample_coordinates(5, 100, 1).len(), 5);
    }
}
