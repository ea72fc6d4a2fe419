//! Noise schedule, closed-form forward noising, `x̂₀` reconstruction,
//! classifier-free guidance and the deterministic (η = 0) DDIM sampler.
//!
//! Timesteps are 1-based: `t ∈ 1..=T`, with `alpha_bar(0) = 1` by convention.

use ndarray::{Array2, ArrayView2};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedStream;

/// Parameters that fully determine a [`NoiseSchedule`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_min: 1e-4,
            beta_max: 0.2,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_min, self.beta_max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    spec: ScheduleSpec,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Linear-beta schedule over `steps` timesteps.
pub fn make_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::InvalidArgument(format!(
            "schedule needs T >= 2, got {steps}"
        )));
    }
    if !(0.0 < beta_min && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}"
        )));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64)
        .collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for b in &beta {
        acc *= 1.0 - b;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule {
        spec: ScheduleSpec {
            steps,
            beta_min,
            beta_max,
        },
        beta,
        alpha_bar,
    })
}

impl NoiseSchedule {
    pub fn spec(&self) -> ScheduleSpec {
        self.spec
    }

    /// `T`.
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    fn check(&self, t: usize) -> usize {
        assert!(
            (1..=self.len()).contains(&t),
            "timestep {t} outside 1..={}",
            self.len()
        );
        t - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[self.check(t)]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta(t)
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[self.check(t)]
        }
    }

    /// `√(1 − ᾱ_t)`.
    pub fn sigma(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar(t)).sqrt()
    }

    /// Signal-to-noise ratio `ᾱ_t / (1 − ᾱ_t)`.
    pub fn snr(&self, t: usize) -> f64 {
        let a = self.alpha_bar(t);
        a / (1.0 - a)
    }
}

/// A noised sample together with the draw that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyState {
    pub x_t: Vec<f64>,
    pub t: usize,
    pub eps: Vec<f64>,
}

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() == b.len() {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        })
    }
}

/// `x_t = √ᾱ_t·x₀ + √(1−ᾱ_t)·ε`.
pub fn q_sample(x0: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<NoisyState> {
    same_len(x0, eps)?;
    let (a, s) = (sched.alpha_bar(t).sqrt(), sched.sigma(t));
    Ok(NoisyState {
        x_t: x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect(),
        t,
        eps: eps.to_vec(),
    })
}

/// `x̂₀ = (x_t − √(1−ᾱ_t)·z) / √ᾱ_t`.
pub fn predict_x0(x_t: &[f64], z: &[f64], t: usize, sched: &NoiseSchedule) -> Vec<f64> {
    let (a, s) = (sched.alpha_bar(t).sqrt(), sched.sigma(t));
    x_t.iter().zip(z).map(|(x, z)| (x - s * z) / a).collect()
}

/// Inverse of [`predict_x0`]: `x_t = √ᾱ_t·x̂₀ + √(1−ᾱ_t)·z`.
pub fn reconstruct_xt(x0_hat: &[f64], z: &[f64], t: usize, sched: &NoiseSchedule) -> Vec<f64> {
    let (a, s) = (sched.alpha_bar(t).sqrt(), sched.sigma(t));
    x0_hat.iter().zip(z).map(|(x, z)| a * x + s * z).collect()
}

/// Guidance extrapolation `(1 − ω)·base + ω·cond`.
pub fn cfg_combine(eps_base: &[f64], eps_cond: &[f64], omega: f64) -> Result<Vec<f64>> {
    same_len(eps_base, eps_cond)?;
    Ok(eps_base
        .iter()
        .zip(eps_cond)
        .map(|(b, c)| (1.0 - omega) * b + omega * c)
        .collect())
}

/// A conditional noise predictor evaluated on a batch (one row per item).
pub trait NoisePredictor {
    fn data_dim(&self) -> usize;
    fn predict(&self, x_t: ArrayView2<f64>, t: &[usize], cond: ArrayView2<f64>) -> Array2<f64>;
}

/// Timesteps visited by a `steps`-step sampler: `T, T − k, ..., k` with
/// stride `k = T / steps`.
pub fn sampler_timesteps(sched: &NoiseSchedule, steps: usize) -> Result<Vec<usize>> {
    let total = sched.len();
    if steps == 0 || !total.is_multiple_of(steps) {
        return Err(Error::InvalidArgument(format!(
            "sampler steps {steps} must divide T = {total}"
        )));
    }
    let stride = total / steps;
    Ok((1..=steps).rev().map(|i| i * stride).collect())
}

/// Standard-normal starting point `x_T` for a seed.
pub fn initial_noise(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = SeedStream::new(seed).child("x_T").rng();
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Deterministic DDIM sampling of a batch; row `i` starts from
/// `initial_noise(dim, seeds[i])` and is conditioned on `conds.row(i)`.
pub fn ddim_sample_batch<M: NoisePredictor + ?Sized>(
    model: &M,
    conds: ArrayView2<f64>,
    sched: &NoiseSchedule,
    steps: usize,
    seeds: &[u64],
) -> Result<Array2<f64>> {
    if conds.nrows() != seeds.len() {
        return Err(Error::DimensionMismatch {
            expected: seeds.len(),
            got: conds.nrows(),
        });
    }
    let dim = model.data_dim();
    let ts = sampler_timesteps(sched, steps)?;
    let stride = sched.len() / steps;
    let mut x = Array2::zeros((seeds.len(), dim));
    for (mut row, &seed) in x.rows_mut().into_iter().zip(seeds) {
        row.assign(&ndarray::Array1::from(initial_noise(dim, seed)));
    }
    for t in ts {
        let z = model.predict(x.view(), &vec![t; seeds.len()], conds);
        let (a, s) = (sched.alpha_bar(t).sqrt(), sched.sigma(t));
        let prev = t - stride;
        let (ap, sp) = (sched.alpha_bar(prev).sqrt(), sched.sigma(prev));
        ndarray::Zip::from(&mut x).and(&z).for_each(|x, &z| {
            let x0 = (*x - s * z) / a;
            *x = ap * x0 + sp * z;
        });
    }
    Ok(x)
}

/// Single-sample form of [`ddim_sample_batch`].
pub fn ddim_sample<M: NoisePredictor + ?Sized>(
    model: &M,
    cond: &[f64],
    sched: &NoiseSchedule,
    steps: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let conds = ArrayView2::from_shape((1, cond.len()), cond).expect("row view");
    let out = ddim_sample_batch(model, conds, sched, steps, &[seed])?;
    Ok(out.row(0).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[allow(clippy::excessive_precision)]
    const ALPHA_BAR_100_SMALL_BETA: f64 = 0.363_563_248_055_491_915;

    #[test]
    fn first_step_identity() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        assert_eq!(s.alpha_bar(1), 1.0 - 1e-4);
        assert_eq!(s.alpha_bar(1), 0.9999);
    }

    #[test]
    fn hundred_step_product_matches_high_precision_value() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        assert!((s.alpha_bar(100) - ALPHA_BAR_100_SMALL_BETA).abs() < 1e-14);
        let d = ScheduleSpec::default().build().unwrap();
        assert!((d.alpha_bar(100) - 2.139_966_547_611_151_4e-5).abs() < 1e-17);
    }

    #[test]
    fn schedule_monotone() {
        for (t, lo, hi) in [
            (100, 1e-4, 0.02),
            (100, 1e-4, 0.2),
            (2, 0.5, 0.5),
            (1000, 1e-4, 0.02),
        ] {
            let s = make_schedule(t, lo, hi).unwrap();
            for i in 1..t {
                assert!(s.alpha_bar(i + 1) < s.alpha_bar(i));
                assert!(s.snr(i + 1) < s.snr(i));
            }
            for i in 1..=t {
                assert!(s.alpha_bar(i) > 0.0 && s.alpha_bar(i) < 1.0);
            }
        }
    }

    #[test]
    fn schedule_rejects_bad_ranges() {
        assert!(make_schedule(1, 1e-4, 0.02).is_err());
        assert!(make_schedule(10, 0.0, 0.02).is_err());
        assert!(make_schedule(10, 0.1, 0.05).is_err());
        assert!(make_schedule(10, 1e-4, 1.0).is_err());
    }

    fn randn(n: usize, seed: u64) -> Vec<f64> {
        let mut r = SeedStream::new(seed).rng();
        (0..n).map(|_| r.sample(StandardNormal)).collect()
    }

    #[test]
    fn q_sample_special_cases() {
        let s = ScheduleSpec::default().build().unwrap();
        let x0 = randn(8, 1);
        let eps = randn(8, 2);
        let zero = vec![0.0; 8];
        let st = q_sample(&x0, 30, &zero, &s).unwrap();
        for (a, b) in st.x_t.iter().zip(&x0) {
            assert_eq!(*a, s.alpha_bar(30).sqrt() * b);
        }
        let st = q_sample(&zero, 30, &eps, &s).unwrap();
        for (a, b) in st.x_t.iter().zip(&eps) {
            assert_eq!(*a, s.sigma(30) * b);
        }
        let st = q_sample(&x0, 1, &eps, &s).unwrap();
        let dist = st
            .x_t
            .iter()
            .zip(&x0)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm_x0 = x0.iter().map(|v| v * v).sum::<f64>().sqrt();
        let norm_eps = eps.iter().map(|v| v * v).sum::<f64>().sqrt();
        // |x_t - x0| <= (1 - sqrt(abar))|x0| + sqrt(1 - abar)|eps|, and 1 - sqrt(abar) <= beta_1
        assert!(dist <= s.beta(1) * norm_x0 + s.beta(1).sqrt() * norm_eps + 1e-15);
        assert!(q_sample(&x0, 3, &eps[..4], &s).is_err());
    }

    #[test]
    fn predict_x0_inverts_q_sample() {
        let s = ScheduleSpec::default().build().unwrap();
        for t in [1, 17, 50, 100] {
            let x0 = randn(64, t as u64);
            let eps = randn(64, 1000 + t as u64);
            let st = q_sample(&x0, t, &eps, &s).unwrap();
            let back = predict_x0(&st.x_t, &eps, t, &s);
            let scale = if t == 100 { 1e-7 } else { 1e-10 };
            for (a, b) in back.iter().zip(&x0) {
                assert!((a - b).abs() < scale, "t={t}: {a} vs {b}");
            }
            let again = reconstruct_xt(&back, &eps, t, &s);
            for (a, b) in again.iter().zip(&st.x_t) {
                assert!((a - b).abs() < 1e-12);
            }
            let z0 = predict_x0(&st.x_t, &vec![0.0; 64], t, &s);
            for (a, b) in z0.iter().zip(&st.x_t) {
                assert_eq!(*a, b / s.alpha_bar(t).sqrt());
            }
        }
    }

    #[test]
    fn cfg_examples() {
        let base = [0.3, -1.0];
        let cond = [2.0, 0.5];
        assert_eq!(cfg_combine(&base, &cond, 1.0).unwrap(), cond);
        assert_eq!(cfg_combine(&base, &cond, 0.0).unwrap(), base);
        assert_eq!(
            cfg_combine(&[0.0, 0.0], &[1.0, 1.0], 2.0).unwrap(),
            [2.0, 2.0]
        );
        assert!(cfg_combine(&base, &[1.0], 2.0).is_err());
        // affine in omega: three collinear omegas
        let f = |w: f64| cfg_combine(&base, &cond, w).unwrap();
        let (a, b, c) = (f(0.5), f(1.5), f(2.5));
        for i in 0..2 {
            assert!((b[i] - 0.5 * (a[i] + c[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn timesteps_and_stride() {
        let s = ScheduleSpec::default().build().unwrap();
        assert_eq!(sampler_timesteps(&s, 100).unwrap().len(), 100);
        assert_eq!(sampler_timesteps(&s, 4).unwrap(), [100, 75, 50, 25]);
        assert!(sampler_timesteps(&s, 3).is_err());
    }

    /// Predicts noise exactly for a point mass at `target`.
    struct Oracle {
        target: Vec<f64>,
        sched: NoiseSchedule,
    }

    impl NoisePredictor for Oracle {
        fn data_dim(&self) -> usize {
            self.target.len()
        }
        fn predict(&self, x: ArrayView2<f64>, t: &[usize], _c: ArrayView2<f64>) -> Array2<f64> {
            let mut out = x.to_owned();
            for (mut row, &t) in out.rows_mut().into_iter().zip(t) {
                let (a, s) = (self.sched.alpha_bar(t).sqrt(), self.sched.sigma(t));
                for (v, x0) in row.iter_mut().zip(&self.target) {
                    *v = (*v - a * x0) / s;
                }
            }
            out
        }
    }

    #[test]
    fn ddim_is_deterministic_and_exact_for_point_mass() {
        let sched = ScheduleSpec::default().build().unwrap();
        let m = Oracle {
            target: vec![0.5, -0.25, 1.0],
            sched: sched.clone(),
        };
        let a = ddim_sample(&m, &[0.0], &sched, 100, 9).unwrap();
        let b = ddim_sample(&m, &[0.0], &sched, 100, 9).unwrap();
        assert_eq!(a, b);
        for (x, y) in a.iter().zip(&m.target) {
            assert!((x - y).abs() < 1e-9);
        }
        let c = ddim_sample(&m, &[0.0], &sched, 10, 9).unwrap();
        for (x, y) in c.iter().zip(&m.target) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}
