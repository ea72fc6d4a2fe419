//! Analytic and numerical identities that need no training: schedule
//! invariants, forward-process round trips, guidance identities, the ln 2
//! initialization value of every preference loss, the surrogate norm and
//! gradient-balance identities, finite-difference gradient checks and the
//! CPO→DPO reduction.
//!
//! Each check returns its worst measured deviation next to the tolerance it
//! is judged against, so callers can print or gate on the numbers directly.

use std::f64::consts::LN_2;
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::cpo::{
    bracket, cpo_loss, cpo_s_loss, dpo_loss, preference_total, stabilized_target,
    surrogate_gradient, DpoBatch, NoiseTargets,
};
use crate::denoiser::{Arch, Denoiser, TIME_EMBED_DIM};
use crate::diffusion::{
    cfg_combine, make_schedule, predict_x0, q_sample, NoiseSchedule, ScheduleSpec,
};
use crate::error::{Error, Result};
use crate::gradcheck::{check_gradient, GradCheck, FD_TOLERANCE};
use crate::rng::SeedStream;
use crate::train_sft::sft_loss_at;

pub const LN2_TOLERANCE: f64 = 1e-9;
pub const BALANCE_TOLERANCE: f64 = 1e-9;
pub const NORM_TOLERANCE: f64 = 1e-12;
pub const REDUCTION_TOLERANCE: f64 = 1e-12;
pub const ROUND_TRIP_TOLERANCE: f64 = 1e-9;

/// The three preference losses with a closed-form value at `θ = θ_ref`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum IdentityLoss {
    Cpo,
    CpoS,
    Dpo,
}

impl IdentityLoss {
    pub const ALL: [IdentityLoss; 3] = [IdentityLoss::Cpo, IdentityLoss::CpoS, IdentityLoss::Dpo];

    pub fn as_str(self) -> &'static str {
        match self {
            IdentityLoss::Cpo => "cpo",
            IdentityLoss::CpoS => "cpo-s",
            IdentityLoss::Dpo => "dpo",
        }
    }
}

/// A small network shape that keeps finite differences cheap.
pub fn probe_arch() -> Arch {
    Arch {
        data_dim: 6,
        time_dim: TIME_EMBED_DIM,
        cond_width: 4,
        hidden: 12,
        time_scale: 100,
    }
}

/// Default initialization plus `N(0, scale²/fan_in)` on every weight
/// (including the zeroed output layer), with biases drawn from `N(0, scale²)`.
pub fn randomized_denoiser(arch: Arch, seed: u64, scale: f64) -> Denoiser {
    let mut d = Denoiser::new(arch, seed);
    let mut rng = SeedStream::new(seed).child("randomize").rng();
    for layer in d.params.layers.iter_mut() {
        // weight noise shrinks with fan-in so activations stay O(1) at any width
        let ws = scale / (layer.w.nrows() as f64).sqrt();
        layer.w.mapv_inplace(|w| w + ws * normal(&mut rng));
        layer.b.mapv_inplace(|_| scale * normal(&mut rng));
    }
    d
}

/// A copy of `base` with weights shifted by `N(0, scale²/fan_in)` and biases
/// by `N(0, scale²)`.
pub fn perturbed(base: &Denoiser, seed: u64, scale: f64) -> Denoiser {
    let mut d = base.clone();
    let mut rng = SeedStream::new(seed).child("perturb").rng();
    for layer in d.params.layers.iter_mut() {
        let ws = scale / (layer.w.nrows() as f64).sqrt();
        layer.w.mapv_inplace(|w| w + ws * normal(&mut rng));
        layer.b.mapv_inplace(|b| b + scale * normal(&mut rng));
    }
    d
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    Distribution::<f64>::sample(&StandardNormal, rng)
}

fn randn<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || normal(rng))
}

fn randv<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

/// One random preference instance on the probe architecture.
struct Instance {
    x_t: Array2<f64>,
    t: Vec<usize>,
    z_w: Array2<f64>,
    z_l: Array2<f64>,
    cond: Array2<f64>,
    x0_w: Array2<f64>,
    x0_l: Array2<f64>,
    eps_w: Array2<f64>,
    eps_l: Array2<f64>,
}

fn instance<R: Rng>(arch: &Arch, rows: usize, sched: &NoiseSchedule, rng: &mut R) -> Instance {
    let d = arch.data_dim;
    Instance {
        x_t: randn(rows, d, rng),
        t: (0..rows)
            .map(|_| rng.random_range(1..=sched.len()))
            .collect(),
        z_w: randn(rows, d, rng),
        z_l: randn(rows, d, rng),
        cond: Array2::from_shape_simple_fn((rows, arch.cond_width), || {
            f64::from(rng.random_range(0..2u8))
        }),
        x0_w: randn(rows, d, rng),
        x0_l: randn(rows, d, rng),
        eps_w: randn(rows, d, rng),
        eps_l: randn(rows, d, rng),
    }
}

impl Instance {
    fn targets(&self) -> NoiseTargets {
        NoiseTargets {
            x_t: self.x_t.clone(),
            t: self.t.clone(),
            z_w: self.z_w.clone(),
            z_l: self.z_l.clone(),
        }
    }

    fn dpo_batch(&self) -> DpoBatch {
        DpoBatch {
            x0_w: self.x0_w.clone(),
            x0_l: self.x0_l.clone(),
            t: self.t.clone(),
            eps_w: self.eps_w.clone(),
            eps_l: self.eps_l.clone(),
        }
    }
}

fn probe_schedule() -> NoiseSchedule {
    ScheduleSpec::default()
        .build()
        .expect("default schedule is valid")
}

/// Largest `|total − ln 2|` over `instances` random inputs with `θ = θ_ref`.
pub fn init_identity(loss: IdentityLoss, instances: usize, seed: u64) -> Result<f64> {
    let sched = probe_schedule();
    let arch = probe_arch();
    let mut rng = SeedStream::new(seed)
        .child("init-identity")
        .child(loss.as_str())
        .rng();
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let theta = randomized_denoiser(arch, seed.wrapping_add(i as u64), 0.5);
        let inst = instance(&arch, 4, &sched, &mut rng);
        let kappa = rng.random_range(0.1..20.0);
        let (parts, _) = match loss {
            IdentityLoss::Cpo => {
                cpo_loss(&theta, &theta, &inst.targets(), inst.cond.view(), kappa)?
            }
            IdentityLoss::CpoS => {
                cpo_s_loss(&theta, &theta, &inst.targets(), inst.cond.view(), kappa)?
            }
            IdentityLoss::Dpo => dpo_loss(
                &theta,
                &theta,
                &inst.dpo_batch(),
                inst.cond.view(),
                &sched,
                kappa,
            )?,
        };
        worst = worst.max((parts.total - LN_2).abs());
    }
    Ok(worst)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Random `(e, z_w, z_l)` triples with `‖e − z_l‖ ≥ 1e-6`.
fn triples(count: usize, dim: usize, seed: u64, label: &str) -> Vec<[Vec<f64>; 3]> {
    let mut rng = SeedStream::new(seed).child(label).rng();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        // mixed scales so near-degenerate and large offsets are both covered
        let s = 10f64.powf(rng.random_range(-3.0..2.0));
        let e = randv(dim, &mut rng);
        let z_w: Vec<f64> = e.iter().map(|v| v + s * normal(&mut rng)).collect();
        let z_l: Vec<f64> = e.iter().map(|v| v + s * normal(&mut rng)).collect();
        if dist(&e, &z_l) >= 1e-6 {
            out.push([e, z_w, z_l]);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BalanceCheck {
    /// Worst `|‖g‖ − 2‖e − z_w‖| / (2‖e − z_w‖)`.
    pub norm_rel_error: f64,
    /// Worst `|cos(−g, e − z_l) − 1|`, `g` the detached surrogate gradient.
    pub cosine_error: f64,
}

/// Gradient balance of the detached surrogate loser term. The gradient of
/// `‖z_tgt − e‖²` is `−2(e − z_l)·‖e − z_w‖/‖e − z_l‖`, so the descent step it
/// induces points along `e − z_l` (away from the loser) with the winner
/// term's magnitude.
pub fn gradient_balance(count: usize, dim: usize, seed: u64) -> Result<BalanceCheck> {
    let mut out = BalanceCheck {
        norm_rel_error: 0.0,
        cosine_error: 0.0,
    };
    for [e, z_w, z_l] in triples(count, dim, seed, "balance") {
        let g = surrogate_gradient(&e, &z_w, &z_l)?;
        let m = 2.0 * dist(&e, &z_w);
        let ng = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        out.norm_rel_error = out
            .norm_rel_error
            .max((ng - m).abs() / m.max(f64::MIN_POSITIVE));
        let d: Vec<f64> = e.iter().zip(&z_l).map(|(a, b)| a - b).collect();
        let nd = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        let cos = -g.iter().zip(&d).map(|(a, b)| a * b).sum::<f64>() / (ng * nd);
        out.cosine_error = out.cosine_error.max((cos - 1.0).abs());
    }
    Ok(out)
}

/// Worst `|‖e − z_tgt‖ − ‖e − z_w‖|` over random triples.
pub fn surrogate_norm(count: usize, dim: usize, seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for [e, z_w, z_l] in triples(count, dim, seed, "surrogate-norm") {
        let tgt = stabilized_target(&e, &z_w, &z_l)?;
        worst = worst.max((dist(&e, &tgt) - dist(&e, &z_w)).abs());
    }
    Ok(worst)
}

/// Which objective a finite-difference check differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FdLoss {
    Sft,
    Cpo,
    CpoS,
    Dpo,
}

impl FdLoss {
    pub const ALL: [FdLoss; 4] = [FdLoss::Sft, FdLoss::Cpo, FdLoss::CpoS, FdLoss::Dpo];

    pub fn as_str(self) -> &'static str {
        match self {
            FdLoss::Sft => "sft",
            FdLoss::Cpo => "cpo",
            FdLoss::CpoS => "cpo-s",
            FdLoss::Dpo => "dpo",
        }
    }
}

/// CPO-S total with the surrogate targets supplied as data.
fn cpo_s_frozen(
    theta: &Denoiser,
    r: &Array2<f64>,
    inst: &Instance,
    tgt: &Array2<f64>,
    kappa: f64,
) -> Result<f64> {
    let e = theta.forward(inst.x_t.view(), &inst.t, inst.cond.view())?;
    let n = e.nrows() as f64;
    Ok((0..e.nrows())
        .map(|i| {
            let s = bracket(inst.z_w.row(i), e.row(i), r.row(i))
                + bracket(tgt.row(i), e.row(i), r.row(i));
            preference_total(kappa, s)
        })
        .sum::<f64>()
        / n)
}

/// Analytic parameter gradient against central differences at `coordinates`
/// sampled coordinates. For CPO-S the surrogate target is computed once at
/// the evaluation point and held fixed while differencing.
pub fn fd_check(loss: FdLoss, arch: Arch, coordinates: usize, seed: u64) -> Result<GradCheck> {
    let sched = probe_schedule();
    let mut rng = SeedStream::new(seed).child("fd").child(loss.as_str()).rng();
    let theta_ref = randomized_denoiser(arch, seed, 0.3);
    let theta = perturbed(&theta_ref, seed, 0.05);
    let inst = instance(&arch, 5, &sched, &mut rng);
    let kappa = 1.0;
    let with = |p: &crate::denoiser::Tensors| Denoiser {
        arch,
        params: p.clone(),
    };
    let check = match loss {
        FdLoss::Sft => {
            let (_, g) = sft_loss_at(
                &theta,
                inst.x0_w.view(),
                inst.cond.view(),
                &inst.t,
                inst.eps_w.view(),
                &sched,
            )?;
            let f = |p: &crate::denoiser::Tensors| {
                sft_loss_at(
                    &with(p),
                    inst.x0_w.view(),
                    inst.cond.view(),
                    &inst.t,
                    inst.eps_w.view(),
                    &sched,
                )
                .expect("shapes fixed")
                .0
            };
            check_gradient(&f, &theta.params, &g, coordinates, seed)
        }
        FdLoss::Cpo => {
            let targets = inst.targets();
            let (_, g) = cpo_loss(&theta, &theta_ref, &targets, inst.cond.view(), kappa)?;
            let f = |p: &crate::denoiser::Tensors| {
                cpo_loss(&with(p), &theta_ref, &targets, inst.cond.view(), kappa)
                    .expect("shapes fixed")
                    .0
                    .total
            };
            check_gradient(&f, &theta.params, &g, coordinates, seed)
        }
        FdLoss::CpoS => {
            let (_, g) = cpo_s_loss(&theta, &theta_ref, &inst.targets(), inst.cond.view(), kappa)?;
            let e = theta.forward(inst.x_t.view(), &inst.t, inst.cond.view())?;
            let r = theta_ref.forward(inst.x_t.view(), &inst.t, inst.cond.view())?;
            let mut tgt = Array2::zeros(e.raw_dim());
            for i in 0..e.nrows() {
                let row = stabilized_target(
                    &e.row(i).to_vec(),
                    &inst.z_w.row(i).to_vec(),
                    &inst.z_l.row(i).to_vec(),
                )?;
                tgt.row_mut(i).assign(&Array1::from(row));
            }
            let f = |p: &crate::denoiser::Tensors| {
                cpo_s_frozen(&with(p), &r, &inst, &tgt, kappa).expect("shapes fixed")
            };
            check_gradient(&f, &theta.params, &g, coordinates, seed)
        }
        FdLoss::Dpo => {
            let batch = inst.dpo_batch();
            let (_, g) = dpo_loss(&theta, &theta_ref, &batch, inst.cond.view(), &sched, kappa)?;
            let f = |p: &crate::denoiser::Tensors| {
                dpo_loss(
                    &with(p),
                    &theta_ref,
                    &batch,
                    inst.cond.view(),
                    &sched,
                    kappa,
                )
                .expect("shapes fixed")
                .0
                .total
            };
            check_gradient(&f, &theta.params, &g, coordinates, seed)
        }
    };
    Ok(check)
}

/// CPO with static targets `z_w = ε_w`, `z_l = ε_l` at a shared `x_t` against
/// Diffusion-DPO on a pair built to noise into that same `x_t`: the loser's
/// clean sample is `x0_w + (σ_t/√ᾱ_t)(ε_w − ε_l)`. Returns the worst absolute
/// difference in total loss over `instances`.
pub fn dpo_reduction(instances: usize, seed: u64) -> Result<f64> {
    let sched = probe_schedule();
    let arch = probe_arch();
    let mut rng = SeedStream::new(seed).child("reduction").rng();
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let theta_ref = randomized_denoiser(arch, seed.wrapping_add(i as u64), 0.3);
        let theta = perturbed(&theta_ref, seed.wrapping_add(i as u64), 0.05);
        let inst = instance(&arch, 4, &sched, &mut rng);
        let kappa = rng.random_range(0.1..5.0);
        let mut x0_l = inst.x0_w.clone();
        let mut x_t = inst.x0_w.clone();
        for (k, &t) in inst.t.iter().enumerate() {
            let (a, s) = (sched.alpha_bar(t).sqrt(), sched.sigma(t));
            for d in 0..arch.data_dim {
                x0_l[[k, d]] =
                    inst.x0_w[[k, d]] + s / a * (inst.eps_w[[k, d]] - inst.eps_l[[k, d]]);
                x_t[[k, d]] = a * inst.x0_w[[k, d]] + s * inst.eps_w[[k, d]];
            }
        }
        let targets = NoiseTargets {
            x_t,
            t: inst.t.clone(),
            z_w: inst.eps_w.clone(),
            z_l: inst.eps_l.clone(),
        };
        let batch = DpoBatch {
            x0_l,
            ..inst.dpo_batch()
        };
        let (c, _) = cpo_loss(&theta, &theta_ref, &targets, inst.cond.view(), kappa)?;
        let (d, _) = dpo_loss(&theta, &theta_ref, &batch, inst.cond.view(), &sched, kappa)?;
        worst = worst.max((c.total - d.total).abs());
    }
    Ok(worst)
}

/// Schedule sanity: `ᾱ` strictly decreasing in `(0, 1)` with `ᾱ_0 = 1`,
/// checked on the default and the small-β schedule. Returns the number of
/// violations.
pub fn schedule_invariants() -> Result<usize> {
    let mut bad = 0;
    for s in [
        ScheduleSpec::default().build()?,
        make_schedule(100, 1e-4, 0.02)?,
    ] {
        bad += usize::from(s.alpha_bar(0) != 1.0);
        for t in 1..=s.len() {
            let (a, prev) = (s.alpha_bar(t), s.alpha_bar(t - 1));
            bad += usize::from(!(a > 0.0 && a < prev && a < 1.0));
            bad += usize::from((s.sigma(t) - (1.0 - a).sqrt()).abs() > 1e-15);
        }
    }
    Ok(bad)
}

/// Worst `|predict_x0(q_sample(x0, t, ε), ε) − x0|` over every `t`.
pub fn forward_round_trip(dim: usize, seed: u64) -> Result<f64> {
    let sched = probe_schedule();
    let mut rng = SeedStream::new(seed).child("round-trip").rng();
    let mut worst: f64 = 0.0;
    for t in 1..=sched.len() {
        let x0 = randv(dim, &mut rng);
        let eps = randv(dim, &mut rng);
        let st = q_sample(&x0, t, &eps, &sched)?;
        let back = predict_x0(&st.x_t, &eps, t, &sched);
        worst = worst.max(dist(&back, &x0) / (dim as f64).sqrt());
    }
    Ok(worst)
}

/// Guidance identities `ω = 1 → cond`, `ω = 0 → base`, `base = cond → base`.
/// Returns the worst deviation.
pub fn cfg_identities(count: usize, dim: usize, seed: u64) -> Result<f64> {
    let mut rng = SeedStream::new(seed).child("cfg").rng();
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let base = randv(dim, &mut rng);
        let cond = randv(dim, &mut rng);
        let w = rng.random_range(-5.0..5.0);
        worst = worst
            .max(dist(&cfg_combine(&base, &cond, 1.0)?, &cond))
            .max(dist(&cfg_combine(&base, &cond, 0.0)?, &base))
            .max(dist(&cfg_combine(&base, &base, w)?, &base));
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub tolerance: f64,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelfCheckReport {
    pub passed: bool,
    pub fast: bool,
    pub seed: u64,
    pub checks: Vec<CheckResult>,
}

fn timed<F>(name: &str, tolerance: f64, f: F) -> CheckResult
where
    F: FnOnce() -> Result<(f64, String)>,
{
    let start = Instant::now();
    let (measured, detail) = match f() {
        Ok(v) => v,
        Err(e) => (f64::NAN, format!("error: {e}")),
    };
    CheckResult {
        name: name.to_string(),
        // NaN compares false, so errors fail
        passed: measured <= tolerance,
        measured,
        tolerance,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Run the whole suite. `fast` uses the criterion-level sample sizes on the
/// probe architecture; the full run multiplies the sample sizes by ten and
/// adds finite-difference checks on the default-size network.
pub fn run_selfcheck(fast: bool, seed: u64) -> SelfCheckReport {
    let k = if fast { 1 } else { 10 };
    let mut checks = vec![
        timed("schedule-invariants", 0.0, || {
            Ok((schedule_invariants()? as f64, "violations".into()))
        }),
        timed("q-sample-round-trip", ROUND_TRIP_TOLERANCE, || {
            Ok((
                forward_round_trip(64, seed)?,
                "rms error over t = 1..T".into(),
            ))
        }),
        timed("cfg-identities", 1e-12, || {
            Ok((
                cfg_identities(100 * k, 64, seed)?,
                "max L2 deviation".into(),
            ))
        }),
    ];
    for loss in IdentityLoss::ALL {
        checks.push(timed(
            &format!("ln2-init-{}", loss.as_str()),
            LN2_TOLERANCE,
            || {
                Ok((
                    init_identity(loss, 100 * k, seed)?,
                    format!("{} instances, theta = theta_ref", 100 * k),
                ))
            },
        ));
    }
    checks.push(timed("surrogate-norm", NORM_TOLERANCE, || {
        Ok((
            surrogate_norm(1000 * k, 64, seed)?,
            format!("{} triples", 1000 * k),
        ))
    }));
    let balance = gradient_balance(1000 * k, 64, seed).map_err(|e| e.to_string());
    let balance = || balance.clone().map_err(Error::InvalidArgument);
    checks.push(timed("gradient-balance-norm", BALANCE_TOLERANCE, || {
        let b = balance()?;
        Ok((b.norm_rel_error, format!("{} triples, relative", 1000 * k)))
    }));
    checks.push(timed(
        "gradient-balance-direction",
        BALANCE_TOLERANCE,
        || {
            let b = balance()?;
            Ok((b.cosine_error, "|cos(descent step, e - z_l) - 1|".into()))
        },
    ));
    let mut archs = vec![("probe", probe_arch())];
    if !fast {
        archs.push(("default", Arch::new(64, 10, 100)));
    }
    for (label, arch) in archs {
        for loss in FdLoss::ALL {
            checks.push(timed(
                &format!("fd-{}-{label}", loss.as_str()),
                FD_TOLERANCE,
                || {
                    let g = fd_check(loss, arch, 100 * k.min(2), seed)?;
                    Ok((
                        g.max_rel_error,
                        format!(
                            "{} coordinates, worst #{}",
                            g.coordinates, g.worst_coordinate
                        ),
                    ))
                },
            ));
        }
    }
    checks.push(timed("cpo-dpo-reduction", REDUCTION_TOLERANCE, || {
        Ok((
            dpo_reduction(100 * k, seed)?,
            format!("{} instances", 100 * k),
        ))
    }));
    SelfCheckReport {
        passed: checks.iter().all(|c| c.passed),
        fast,
        seed,
        checks,
    }
}
