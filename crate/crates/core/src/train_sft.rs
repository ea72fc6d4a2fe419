//! Stage 1: attribute-conditioned denoising fine-tuning with per-block
//! condition dropout, producing the expert model θ₁.

use ndarray::{Array2, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{AnnotatedSample, Dataset, OracleThresholds, Split};
use crate::denoiser::{
    adam_step, gather_rows, AdamConfig, AdamState, Arch, Denoiser, GradientBundle,
};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::eval::{condition_matrix, conditioning_iou};
use crate::rng::SeedStream;
use crate::taxonomy::{AttributeTree, ConditionVocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutPolicy {
    pub p_y: f64,
    pub p_pos: f64,
    pub p_neg: f64,
    /// Zero the whole condition; overrides the per-block draws.
    pub p_null: f64,
}

impl Default for DropoutPolicy {
    fn default() -> Self {
        Self {
            p_y: 0.10,
            p_pos: 0.15,
            p_neg: 0.15,
            p_null: 0.10,
        }
    }
}

impl DropoutPolicy {
    pub const NONE: Self = Self {
        p_y: 0.0,
        p_pos: 0.0,
        p_neg: 0.0,
        p_null: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        let ps = [self.p_y, self.p_pos, self.p_neg, self.p_null];
        if ps.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidArgument(format!(
                "dropout probabilities must lie in [0,1]: {ps:?}"
            )));
        }
        let retention = (1.0 - self.p_y).min(1.0 - self.p_pos).min(1.0 - self.p_neg);
        if self.p_null > retention && self.p_null < 1.0 {
            return Err(Error::InvalidArgument(format!(
                "p_null {} exceeds the smallest block retention {retention}",
                self.p_null
            )));
        }
        Ok(())
    }
}

/// Apply the dropout policy to one encoded condition. Always consumes exactly
/// four uniforms from `rng`.
pub fn mask_condition<R: Rng>(
    cond: &[f64],
    vocab: &ConditionVocabulary,
    policy: &DropoutPolicy,
    rng: &mut R,
) -> Vec<f64> {
    let draws: [f64; 4] = std::array::from_fn(|_| rng.random());
    let mut out = cond.to_vec();
    if draws[3] < policy.p_null {
        out.fill(0.0);
        return out;
    }
    for (u, p, block) in [
        (draws[0], policy.p_y, vocab.family_block()),
        (draws[1], policy.p_pos, vocab.pos_block()),
        (draws[2], policy.p_neg, vocab.neg_block()),
    ] {
        if u < p {
            out[block].fill(0.0);
        }
    }
    out
}

/// Denoising loss with explicit `t` and `eps`: mean over batch and dimensions
/// of `(eps − ε_θ(x_t, t, c))²`, and its exact gradient.
pub fn sft_loss_at(
    model: &Denoiser,
    x0: ArrayView2<f64>,
    cond: ArrayView2<f64>,
    t: &[usize],
    eps: ArrayView2<f64>,
    sched: &NoiseSchedule,
) -> Result<(f64, GradientBundle)> {
    let n = x0.len();
    if n == 0 {
        return Err(Error::Empty("sft batch"));
    }
    let mut x_t = x0.to_owned();
    for ((mut row, e), &ti) in x_t.rows_mut().into_iter().zip(eps.rows()).zip(t) {
        let (a, s) = (sched.alpha_bar(ti).sqrt(), sched.sigma(ti));
        Zip::from(&mut row)
            .and(e)
            .for_each(|x, &e| *x = a * *x + s * e);
    }
    let (out, tape) = model.forward_tape(x_t.view(), t, cond)?;
    let resid = &out - &eps;
    let loss = resid.mapv(|r| r * r).sum() / n as f64;
    let adj = resid * (2.0 / n as f64);
    Ok((loss, model.backward(&tape, adj.view())))
}

/// Draw `t ~ U{1..T}` and `eps ~ N(0, I)` per row.
pub fn draw_noise<R: Rng>(
    rows: usize,
    dim: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> (Vec<usize>, Array2<f64>) {
    let t: Vec<usize> = (0..rows)
        .map(|_| rng.random_range(1..=sched.len()))
        .collect();
    let eps = Array2::from_shape_simple_fn((rows, dim), || StandardNormal.sample(rng));
    (t, eps)
}

/// Denoising loss with `t` and `eps` drawn from `rng`.
pub fn sft_loss<R: Rng>(
    model: &Denoiser,
    x0: ArrayView2<f64>,
    cond: ArrayView2<f64>,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<(f64, GradientBundle)> {
    let (t, eps) = draw_noise(x0.nrows(), x0.ncols(), sched, rng);
    sft_loss_at(model, x0, cond, &t, eps.view(), sched)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Final learning rate as a fraction of `lr`, reached by cosine decay.
    pub lr_floor: f64,
    pub hidden: usize,
    /// Exponential moving average of the weights; the average is the returned
    /// model. 0 disables it.
    pub ema_decay: f64,
    pub dropout: DropoutPolicy,
    pub seed: u64,
    /// Sampler steps used for the end-of-training IoU report; 0 skips it.
    pub iou_sampler_steps: usize,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            batch_size: 64,
            lr: 1e-3,
            lr_floor: 0.02,
            hidden: crate::denoiser::DEFAULT_HIDDEN,
            ema_decay: 0.999,
            dropout: DropoutPolicy::default(),
            seed: 0,
            iou_sampler_steps: 100,
        }
    }
}

/// Cosine decay from `lr` to `lr · floor` over `total` steps.
pub fn cosine_lr(lr: f64, floor: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return lr;
    }
    let p = step as f64 / (total - 1) as f64;
    lr * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SftLogRow {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub iou_pos: Option<f64>,
    pub iou_neg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SftOutcome {
    pub model: Denoiser,
    pub log: Vec<SftLogRow>,
}

impl SftOutcome {
    pub fn train_losses(&self) -> Vec<f64> {
        self.log
            .iter()
            .filter(|r| r.split == Split::Train)
            .map(|r| r.loss)
            .collect()
    }
}

pub(crate) fn stack_points(records: &[&AnnotatedSample]) -> Result<Array2<f64>> {
    let dim = records
        .first()
        .ok_or(Error::Empty("no records"))?
        .sample
        .points
        .len();
    let mut x = Array2::zeros((records.len(), dim));
    for (mut row, r) in x.rows_mut().into_iter().zip(records) {
        if r.sample.points.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: r.sample.points.len(),
            });
        }
        row.assign(&ndarray::ArrayView1::from(r.sample.points.as_slice()));
    }
    Ok(x)
}

/// Mean denoising loss over `x0` with fixed per-row draws (no gradient use).
fn fixed_loss(
    model: &Denoiser,
    x0: &Array2<f64>,
    cond: &Array2<f64>,
    t: &[usize],
    eps: &Array2<f64>,
    sched: &NoiseSchedule,
) -> Result<f64> {
    let mut total = 0.0;
    let chunk = 256;
    for start in (0..x0.nrows()).step_by(chunk) {
        let end = (start + chunk).min(x0.nrows());
        let (l, _) = sft_loss_at(
            model,
            x0.slice(ndarray::s![start..end, ..]),
            cond.slice(ndarray::s![start..end, ..]),
            &t[start..end],
            eps.slice(ndarray::s![start..end, ..]),
            sched,
        )?;
        total += l * (end - start) as f64;
    }
    Ok(total / x0.nrows() as f64)
}

/// Train θ₁ from a freshly initialized θ₀. Epoch 0 of the log evaluates θ₀.
pub fn train_sft(
    data: &Dataset,
    tree: &AttributeTree,
    thresholds: &OracleThresholds,
    cfg: &SftConfig,
    sched: &NoiseSchedule,
) -> Result<SftOutcome> {
    cfg.dropout.validate()?;
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let vocab = ConditionVocabulary::from_tree(tree);
    let train: Vec<&AnnotatedSample> = data.split(Split::Train).collect();
    let val: Vec<&AnnotatedSample> = data.split(Split::Val).collect();
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let x_train = stack_points(&train)?;
    let full_conds = |rs: &[&AnnotatedSample]| -> Result<Array2<f64>> {
        let rows = rs
            .iter()
            .map(|r| vocab.encode(Some(r.y()), Some(&r.a_pos), Some(&r.a_neg)))
            .collect::<Result<Vec<_>>>()?;
        Ok(condition_matrix(&rows, vocab.width()))
    };
    let c_train = full_conds(&train)?;
    let dim = x_train.ncols();

    let arch = Arch {
        hidden: cfg.hidden,
        ..Arch::new(dim, vocab.width(), sched.len())
    };
    let mut model = Denoiser::new(arch, cfg.seed);
    let root = SeedStream::new(cfg.seed);
    let mut rng = root.child("training").rng();

    // fixed monitoring draws so per-epoch numbers are comparable
    let mut mon_rng = root.child("monitor").rng();
    let (t_mon, eps_mon) = draw_noise(train.len(), dim, sched, &mut mon_rng);
    let val_set = if val.is_empty() {
        None
    } else {
        let x = stack_points(&val)?;
        let c = full_conds(&val)?;
        let (t, e) = draw_noise(val.len(), dim, sched, &mut mon_rng);
        Some((x, c, t, e))
    };
    let mut log = Vec::new();
    let record = |model: &Denoiser, epoch: usize, log: &mut Vec<SftLogRow>| -> Result<()> {
        log.push(SftLogRow {
            epoch,
            split: Split::Train,
            loss: fixed_loss(model, &x_train, &c_train, &t_mon, &eps_mon, sched)?,
            iou_pos: None,
            iou_neg: None,
        });
        if let Some((x, c, t, e)) = &val_set {
            log.push(SftLogRow {
                epoch,
                split: Split::Val,
                loss: fixed_loss(model, x, c, t, e, sched)?,
                iou_pos: None,
                iou_neg: None,
            });
        }
        Ok(())
    };
    record(&model, 0, &mut log)?;

    let batches_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut adam = AdamState::new(&model.params);
    let mut ema = model.params.clone();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch_size) {
            let x0 = gather_rows(&x_train, idx);
            let mut cond = gather_rows(&c_train, idx);
            for mut row in cond.axis_iter_mut(Axis(0)) {
                let masked = mask_condition(
                    row.as_slice().expect("row-major"),
                    &vocab,
                    &cfg.dropout,
                    &mut rng,
                );
                row.assign(&ndarray::ArrayView1::from(masked.as_slice()));
            }
            let (loss, grads) = sft_loss(&model, x0.view(), cond.view(), sched, &mut rng)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::Diverged {
                    stage: "sft",
                    step,
                    loss,
                });
            }
            let opt = AdamConfig {
                lr: cosine_lr(cfg.lr, cfg.lr_floor, step, total_steps),
                ..AdamConfig::default()
            };
            adam_step(&mut model.params, &grads, &mut adam, &opt);
            if cfg.ema_decay > 0.0 {
                ema.scale(cfg.ema_decay);
                ema.add_scaled(&model.params, 1.0 - cfg.ema_decay);
            }
            step += 1;
        }
        if cfg.ema_decay > 0.0 {
            let averaged = Denoiser {
                arch: model.arch,
                params: ema.clone(),
            };
            record(&averaged, epoch, &mut log)?;
        } else {
            record(&model, epoch, &mut log)?;
        }
    }

    if cfg.ema_decay > 0.0 && cfg.epochs > 0 {
        model.params = ema;
    }
    if cfg.iou_sampler_steps > 0 && !val.is_empty() {
        let recs: Vec<AnnotatedSample> = val.iter().map(|r| (*r).clone()).collect();
        let (ip, ineg) = conditioning_iou(
            &model,
            &recs,
            tree,
            &vocab,
            thresholds,
            sched,
            cfg.iou_sampler_steps,
            root.child("sampling").as_u64(),
        )?;
        if let Some(last) = log.iter_mut().rev().find(|r| r.split == Split::Val) {
            last.iou_pos = ip;
            last.iou_neg = ineg;
        }
    }
    Ok(SftOutcome { model, log })
}

pub fn write_sft_log(path: impl AsRef<std::path::Path>, log: &[SftLogRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| crate::eval::csv_err(path, e))?;
    for row in log {
        w.serialize(row)
            .map_err(|e| crate::eval::csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_dataset, KnobMix};
    use crate::diffusion::ScheduleSpec;
    use crate::gradcheck::check_gradient;
    use crate::taxonomy::{default_tree, AttributeSet, Family};

    fn vocab() -> ConditionVocabulary {
        ConditionVocabulary::from_tree(&default_tree())
    }

    fn full_cond(v: &ConditionVocabulary) -> Vec<f64> {
        v.encode(
            Some(Family::Ring),
            Some(&AttributeSet::pos(["RING_CLOSURE", "CENTER_BALANCE"])),
            Some(&AttributeSet::neg(["SPREAD_SCALE"])),
        )
        .unwrap()
    }

    #[test]
    fn mask_policy_extremes() {
        let v = vocab();
        let c = full_cond(&v);
        let mut rng = SeedStream::new(1).rng();
        for _ in 0..100 {
            assert_eq!(mask_condition(&c, &v, &DropoutPolicy::NONE, &mut rng), c);
        }
        let all = DropoutPolicy {
            p_null: 1.0,
            ..DropoutPolicy::NONE
        };
        for _ in 0..100 {
            assert_eq!(mask_condition(&c, &v, &all, &mut rng), v.null());
        }
    }

    #[test]
    fn mask_pos_rate_matches_probability() {
        let v = vocab();
        let c = full_cond(&v);
        let p = DropoutPolicy {
            p_pos: 0.15,
            ..DropoutPolicy::NONE
        };
        let mut rng = SeedStream::new(2).rng();
        let n = 10_000;
        let zeroed = (0..n)
            .filter(|_| {
                let m = mask_condition(&c, &v, &p, &mut rng);
                m[v.pos_block()].iter().all(|&x| x == 0.0)
            })
            .count();
        let frac = zeroed as f64 / n as f64;
        assert!((frac - 0.15).abs() <= 0.02, "{frac}");
    }

    #[test]
    fn policy_validation() {
        assert!(DropoutPolicy::default().validate().is_ok());
        assert!(DropoutPolicy {
            p_y: 1.5,
            ..DropoutPolicy::NONE
        }
        .validate()
        .is_err());
        assert!(DropoutPolicy {
            p_y: 0.9,
            p_null: 0.5,
            ..DropoutPolicy::NONE
        }
        .validate()
        .is_err());
    }

    #[test]
    fn zero_init_loss_is_mean_square_noise() {
        let sched = ScheduleSpec::default().build().unwrap();
        let v = vocab();
        let m = Denoiser::new(Arch::new(64, v.width(), 100), 1);
        let x0 = Array2::from_elem((256, 64), 0.3);
        let c = Array2::zeros((256, v.width()));
        let (l, _) = sft_loss(
            &m,
            x0.view(),
            c.view(),
            &sched,
            &mut SeedStream::new(4).rng(),
        )
        .unwrap();
        assert!((l - 1.0).abs() < 0.03, "{l}");
    }

    #[test]
    fn sft_gradient_matches_finite_differences() {
        let sched = ScheduleSpec::default().build().unwrap();
        let arch = Arch {
            hidden: 16,
            ..Arch::new(8, 10, 100)
        };
        let mut m = Denoiser::new(arch, 2);
        let mut rng = SeedStream::new(9).rng();
        m.params.layers[3]
            .w
            .mapv_inplace(|_| 0.3 * rng.random::<f64>() - 0.15);
        let x0 = Array2::from_shape_simple_fn((4, 8), || StandardNormal.sample(&mut rng));
        let c = Array2::from_shape_simple_fn((4, 10), || f64::from(rng.random::<bool>()));
        let (t, eps) = draw_noise(4, 8, &sched, &mut rng);
        let (_, g) = sft_loss_at(&m, x0.view(), c.view(), &t, eps.view(), &sched).unwrap();
        let f = |p: &GradientBundle| {
            let mm = Denoiser {
                arch,
                params: p.clone(),
            };
            sft_loss_at(&mm, x0.view(), c.view(), &t, eps.view(), &sched)
                .unwrap()
                .0
        };
        let r = check_gradient(&f, &m.params, &g, 120, 5);
        assert!(r.passed(1e-4), "{r:?}");
    }

    #[test]
    fn zero_epochs_returns_init_and_runs_are_reproducible() {
        let tree = default_tree();
        let th = OracleThresholds::default();
        let data = build_dataset(40, &KnobMix::default(), &tree, &th, 32, 1).unwrap();
        let sched = ScheduleSpec::default().build().unwrap();
        let cfg = SftConfig {
            epochs: 0,
            hidden: 16,
            iou_sampler_steps: 0,
            seed: 3,
            ..Default::default()
        };
        let out = train_sft(&data, &tree, &th, &cfg, &sched).unwrap();
        assert_eq!(out.model.params, Denoiser::new(out.model.arch, 3).params);

        let cfg = SftConfig {
            epochs: 3,
            batch_size: 8,
            iou_sampler_steps: 10,
            ..cfg
        };
        let a = train_sft(&data, &tree, &th, &cfg, &sched).unwrap();
        let b = train_sft(&data, &tree, &th, &cfg, &sched).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train_losses().len(), 4);
        assert!(a.log.last().unwrap().iou_pos.is_some());
    }
}
