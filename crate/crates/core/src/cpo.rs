//! Stage 2: preference alignment. Dynamic winner/loser noise targets from the
//! frozen expert θ₁, the CPO objective, its gradient-balanced variant CPO-S,
//! the static-pair Diffusion-DPO baseline, and the pair builders used by the
//! reward-granularity ablation.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{AnnotatedSample, Dataset, Split};
use crate::denoiser::{adam_step, gather_rows, AdamConfig, AdamState, Denoiser, GradientBundle};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::eval::{condition_matrix, LossParts};
use crate::rng::SeedStream;
use crate::taxonomy::{applicable_pairs, AttributeTree, ConditionVocabulary, Family};
use crate::train_sft::{draw_noise, stack_points};

/// Smallest `‖e − z_l‖` for which the surrogate target is defined.
pub const DEGENERATE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossVariant {
    #[serde(rename = "cpo")]
    Cpo,
    #[serde(rename = "cpo-s")]
    CpoS,
    /// Diffusion-DPO on binary (|A_neg|-ordered) pairs.
    #[serde(rename = "dpo")]
    Dpo,
    #[serde(rename = "dpo-scalar")]
    DpoScalar,
    #[serde(rename = "dpo-binary")]
    DpoBinary,
}

impl LossVariant {
    pub const ALL: [LossVariant; 5] = [
        Self::Cpo,
        Self::CpoS,
        Self::Dpo,
        Self::DpoScalar,
        Self::DpoBinary,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Cpo => "cpo",
            Self::CpoS => "cpo-s",
            Self::Dpo => "dpo",
            Self::DpoScalar => "dpo-scalar",
            Self::DpoBinary => "dpo-binary",
        }
    }

    pub fn uses_static_pairs(self) -> bool {
        matches!(self, Self::Dpo | Self::DpoScalar | Self::DpoBinary)
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| {
                v.as_str().eq_ignore_ascii_case(s)
                    || v.as_str().replace('-', "_").eq_ignore_ascii_case(s)
            })
            .ok_or_else(|| Error::InvalidArgument(format!("unknown loss variant `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CpoConfig {
    pub variant: LossVariant,
    pub omega_w: f64,
    pub omega_l: f64,
    pub beta_pref: f64,
    /// Overrides `beta_pref · T` when set.
    pub kappa: Option<f64>,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for CpoConfig {
    fn default() -> Self {
        Self {
            variant: LossVariant::CpoS,
            omega_w: 2.0,
            omega_l: 2.0,
            beta_pref: 0.1,
            kappa: None,
            steps: 500,
            batch_size: 32,
            lr: 1e-5,
            seed: 0,
        }
    }
}

impl CpoConfig {
    /// Effective coefficient `κ = β · T · ω(λ_t)` with `ω ≡ 1`.
    pub fn kappa(&self, sched: &NoiseSchedule) -> f64 {
        self.kappa.unwrap_or(self.beta_pref * sched.len() as f64)
    }

    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        let k = self.kappa(sched);
        if !(k.is_finite() && k > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "kappa must be finite and positive, got {k}"
            )));
        }
        for (name, w) in [("omega_w", self.omega_w), ("omega_l", self.omega_l)] {
            if !(w.is_finite() && w >= 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be >= 1, got {w}"
                )));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `−log σ(−κ·s) = softplus(κ·s)`.
pub fn preference_total(kappa: f64, s: f64) -> f64 {
    softplus(kappa * s)
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Per-item bracket `‖z − e‖² − ‖z − r‖²`.
pub fn bracket(z: ArrayView1<f64>, e: ArrayView1<f64>, r: ArrayView1<f64>) -> f64 {
    sq_dist(z, e) - sq_dist(z, r)
}

/// Winner noise: `(1 − ω_w)·ε₁(x_t, t, c_neg) + ω_w·ε₁(x_t, t, c_pos)`.
pub fn winner_noise(
    theta1: &Denoiser,
    x_t: ArrayView2<f64>,
    t: &[usize],
    c_neg: ArrayView2<f64>,
    c_pos: ArrayView2<f64>,
    omega_w: f64,
) -> Result<Array2<f64>> {
    let base = theta1.forward(x_t, t, c_neg)?;
    let cond = theta1.forward(x_t, t, c_pos)?;
    Ok(base * (1.0 - omega_w) + cond * omega_w)
}

/// Loser noise: `(1 − ω_l)·ε₁(x_t, t, ∅) + ω_l·ε₁(x_t, t, c_all)`.
pub fn loser_noise(
    theta1: &Denoiser,
    x_t: ArrayView2<f64>,
    t: &[usize],
    c_null: ArrayView2<f64>,
    c_all: ArrayView2<f64>,
    omega_l: f64,
) -> Result<Array2<f64>> {
    let base = theta1.forward(x_t, t, c_null)?;
    let cond = theta1.forward(x_t, t, c_all)?;
    Ok(base * (1.0 - omega_l) + cond * omega_l)
}

/// The four expert conditionings plus the content-only condition θ sees.
#[derive(Debug, Clone, PartialEq)]
pub struct CpoConditions {
    pub c_pos: Array2<f64>,
    pub c_neg: Array2<f64>,
    pub c_all: Array2<f64>,
    pub c_null: Array2<f64>,
    pub c_content: Array2<f64>,
}

pub fn cpo_conditions(
    vocab: &ConditionVocabulary,
    items: &[&AnnotatedSample],
) -> Result<CpoConditions> {
    let enc = |f: &dyn Fn(&AnnotatedSample) -> Result<Vec<f64>>| -> Result<Array2<f64>> {
        let rows = items.iter().map(|s| f(s)).collect::<Result<Vec<_>>>()?;
        Ok(condition_matrix(&rows, vocab.width()))
    };
    Ok(CpoConditions {
        c_pos: enc(&|s| vocab.encode(Some(s.y()), Some(&s.a_pos), None))?,
        c_neg: enc(&|s| vocab.encode(None, None, Some(&s.a_neg)))?,
        c_all: enc(&|s| vocab.encode(Some(s.y()), Some(&s.a_pos), Some(&s.a_neg)))?,
        c_null: Array2::zeros((items.len(), vocab.width())),
        c_content: enc(&|s| vocab.encode(Some(s.y()), None, None))?,
    })
}

/// Targets for one batch at a shared noisy state.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseTargets {
    pub x_t: Array2<f64>,
    pub t: Vec<usize>,
    pub z_w: Array2<f64>,
    pub z_l: Array2<f64>,
}

impl NoiseTargets {
    pub fn build(
        theta1: &Denoiser,
        x_t: Array2<f64>,
        t: Vec<usize>,
        conds: &CpoConditions,
        omega_w: f64,
        omega_l: f64,
    ) -> Result<Self> {
        let z_w = winner_noise(
            theta1,
            x_t.view(),
            &t,
            conds.c_neg.view(),
            conds.c_pos.view(),
            omega_w,
        )?;
        let z_l = loser_noise(
            theta1,
            x_t.view(),
            &t,
            conds.c_null.view(),
            conds.c_all.view(),
            omega_l,
        )?;
        Ok(Self { x_t, t, z_w, z_l })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// `z_tgt = e + (e − z_l)/‖e − z_l‖ · ‖e − z_w‖`, to be used as a constant.
pub fn stabilized_target(e: &[f64], z_w: &[f64], z_l: &[f64]) -> Result<Vec<f64>> {
    stabilized_target_view(e.into(), z_w.into(), z_l.into())
}

fn stabilized_target_view(
    e: ArrayView1<f64>,
    z_w: ArrayView1<f64>,
    z_l: ArrayView1<f64>,
) -> Result<Vec<f64>> {
    let away = sq_dist(e, z_l).sqrt();
    // negated so that NaN also lands here
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(away >= DEGENERATE_FLOOR) {
        return Err(Error::DegenerateLoserDirection {
            norm: away,
            floor: DEGENERATE_FLOOR,
        });
    }
    let scale = sq_dist(e, z_w).sqrt() / away;
    Ok(e.iter()
        .zip(z_l)
        .map(|(&e, &l)| e + (e - l) * scale)
        .collect())
}

/// `∇_e ‖z_tgt − e‖²` with `z_tgt` held fixed: `2(e − z_tgt)`.
pub fn surrogate_gradient(e: &[f64], z_w: &[f64], z_l: &[f64]) -> Result<Vec<f64>> {
    let tgt = stabilized_target(e, z_w, z_l)?;
    Ok(e.iter().zip(&tgt).map(|(e, t)| 2.0 * (e - t)).collect())
}

/// Per-row scalar parts and `∂total/∂e`.
struct RowLoss {
    win: f64,
    lose: f64,
    total: f64,
    de: Vec<f64>,
}

fn cpo_row(
    e: ArrayView1<f64>,
    r: ArrayView1<f64>,
    z_w: ArrayView1<f64>,
    z_l: ArrayView1<f64>,
    kappa: f64,
) -> RowLoss {
    let win = bracket(z_w, e, r);
    let lose = bracket(z_l, e, r);
    let s = win - lose;
    // d/de [‖z_w−e‖² − ‖z_l−e‖²] = 2(z_l − z_w)
    let g = kappa * sigmoid(kappa * s);
    RowLoss {
        win,
        lose,
        total: preference_total(kappa, s),
        de: z_w
            .iter()
            .zip(z_l)
            .map(|(w, l)| g * 2.0 * (l - w))
            .collect(),
    }
}

fn cpo_s_row(
    e: ArrayView1<f64>,
    r: ArrayView1<f64>,
    z_w: ArrayView1<f64>,
    z_l: ArrayView1<f64>,
    kappa: f64,
) -> Result<RowLoss> {
    let tgt = stabilized_target_view(e, z_w, z_l)?;
    let tgt = ArrayView1::from(tgt.as_slice());
    let win = bracket(z_w, e, r);
    let stab = bracket(tgt, e, r);
    let s = win + stab;
    let g = kappa * sigmoid(kappa * s);
    let de = e
        .iter()
        .zip(z_w)
        .zip(tgt)
        .map(|((e, w), t)| g * (2.0 * (e - w) + 2.0 * (e - t)))
        .collect();
    Ok(RowLoss {
        win,
        lose: stab,
        total: preference_total(kappa, s),
        de,
    })
}

/// Mean of per-row losses and the gradient of that mean.
fn finish(
    theta: &Denoiser,
    tape: &crate::denoiser::Tape,
    rows: &[Option<RowLoss>],
    dim: usize,
) -> Result<(LossParts, GradientBundle)> {
    let used = rows.iter().flatten().count();
    if used == 0 {
        return Err(Error::Empty("no usable rows in preference batch"));
    }
    let n = used as f64;
    let mut adj = Array2::zeros((rows.len(), dim));
    let mut parts = LossParts {
        step: 0,
        win_part: 0.0,
        lose_part: 0.0,
        total: 0.0,
    };
    for (mut a, row) in adj.rows_mut().into_iter().zip(rows) {
        let Some(row) = row else { continue };
        parts.win_part += row.win / n;
        parts.lose_part += row.lose / n;
        parts.total += row.total / n;
        Zip::from(&mut a)
            .and(&ArrayView1::from(row.de.as_slice()))
            .for_each(|a, &d| *a = d / n);
    }
    Ok((parts, theta.backward(tape, adj.view())))
}

fn policy_and_ref(
    theta: &Denoiser,
    theta_ref: &Denoiser,
    x_t: ArrayView2<f64>,
    t: &[usize],
    cond: ArrayView2<f64>,
) -> Result<(Array2<f64>, crate::denoiser::Tape, Array2<f64>)> {
    let (e, tape) = theta.forward_tape(x_t, t, cond)?;
    let r = theta_ref.forward(x_t, t, cond)?;
    Ok((e, tape, r))
}

/// CPO objective averaged over the batch; `cond` is the content-only condition.
pub fn cpo_loss(
    theta: &Denoiser,
    theta_ref: &Denoiser,
    targets: &NoiseTargets,
    cond: ArrayView2<f64>,
    kappa: f64,
) -> Result<(LossParts, GradientBundle)> {
    let (e, tape, r) = policy_and_ref(theta, theta_ref, targets.x_t.view(), &targets.t, cond)?;
    let rows: Vec<Option<RowLoss>> = (0..targets.len())
        .map(|i| {
            Some(cpo_row(
                e.row(i),
                r.row(i),
                targets.z_w.row(i),
                targets.z_l.row(i),
                kappa,
            ))
        })
        .collect();
    finish(theta, &tape, &rows, e.ncols())
}

/// CPO-S objective. Rows whose loser direction falls under the floor are an
/// error here; see [`cpo_s_loss_skipping`] for the training form.
pub fn cpo_s_loss(
    theta: &Denoiser,
    theta_ref: &Denoiser,
    targets: &NoiseTargets,
    cond: ArrayView2<f64>,
    kappa: f64,
) -> Result<(LossParts, GradientBundle)> {
    let (e, tape, r) = policy_and_ref(theta, theta_ref, targets.x_t.view(), &targets.t, cond)?;
    let rows = (0..targets.len())
        .map(|i| {
            cpo_s_row(
                e.row(i),
                r.row(i),
                targets.z_w.row(i),
                targets.z_l.row(i),
                kappa,
            )
            .map(Some)
        })
        .collect::<Result<Vec<_>>>()?;
    finish(theta, &tape, &rows, e.ncols())
}

/// CPO-S that drops degenerate rows; returns how many were dropped.
pub fn cpo_s_loss_skipping(
    theta: &Denoiser,
    theta_ref: &Denoiser,
    targets: &NoiseTargets,
    cond: ArrayView2<f64>,
    kappa: f64,
) -> Result<(LossParts, GradientBundle, usize)> {
    let (e, tape, r) = policy_and_ref(theta, theta_ref, targets.x_t.view(), &targets.t, cond)?;
    let mut skipped = 0;
    let mut rows = Vec::with_capacity(targets.len());
    for i in 0..targets.len() {
        match cpo_s_row(
            e.row(i),
            r.row(i),
            targets.z_w.row(i),
            targets.z_l.row(i),
            kappa,
        ) {
            Ok(row) => rows.push(Some(row)),
            Err(Error::DegenerateLoserDirection { .. }) => {
                skipped += 1;
                rows.push(None);
            }
            Err(err) => return Err(err),
        }
    }
    let (parts, grads) = finish(theta, &tape, &rows, e.ncols())?;
    Ok((parts, grads, skipped))
}

/// A static preference pair for Diffusion-DPO, at noise level `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct DpoBatch {
    pub x0_w: Array2<f64>,
    pub x0_l: Array2<f64>,
    pub t: Vec<usize>,
    pub eps_w: Array2<f64>,
    pub eps_l: Array2<f64>,
}

fn noised(x0: &Array2<f64>, t: &[usize], eps: &Array2<f64>, sched: &NoiseSchedule) -> Array2<f64> {
    let mut x = x0.clone();
    for ((mut row, e), &ti) in x.rows_mut().into_iter().zip(eps.rows()).zip(t) {
        let (a, s) = (sched.alpha_bar(ti).sqrt(), sched.sigma(ti));
        Zip::from(&mut row)
            .and(e)
            .for_each(|x, &e| *x = a * *x + s * e);
    }
    x
}

/// Diffusion-DPO: winner and loser noised independently at a shared `t`;
/// `total = −log σ(−κ(Δ_w − Δ_l))` with `Δ = ‖ε − ε_θ‖² − ‖ε − ε_ref‖²`.
pub fn dpo_loss(
    theta: &Denoiser,
    theta_ref: &Denoiser,
    batch: &DpoBatch,
    cond: ArrayView2<f64>,
    sched: &NoiseSchedule,
    kappa: f64,
) -> Result<(LossParts, GradientBundle)> {
    let b = batch.t.len();
    let xw = noised(&batch.x0_w, &batch.t, &batch.eps_w, sched);
    let xl = noised(&batch.x0_l, &batch.t, &batch.eps_l, sched);
    let x = ndarray::concatenate(Axis(0), &[xw.view(), xl.view()]).expect("equal widths");
    let t2: Vec<usize> = batch.t.iter().chain(&batch.t).copied().collect();
    let c2 = ndarray::concatenate(Axis(0), &[cond, cond]).expect("equal widths");
    let (e, tape, r) = policy_and_ref(theta, theta_ref, x.view(), &t2, c2.view())?;
    let dim = e.ncols();
    let n = b as f64;
    let mut adj = Array2::zeros((2 * b, dim));
    let mut parts = LossParts {
        step: 0,
        win_part: 0.0,
        lose_part: 0.0,
        total: 0.0,
    };
    for i in 0..b {
        let (ew, el) = (e.row(i), e.row(b + i));
        let win = bracket(batch.eps_w.row(i), ew, r.row(i));
        let lose = bracket(batch.eps_l.row(i), el, r.row(b + i));
        let s = win - lose;
        let g = kappa * sigmoid(kappa * s) / n;
        parts.win_part += win / n;
        parts.lose_part += lose / n;
        parts.total += preference_total(kappa, s) / n;
        Zip::from(adj.row_mut(i))
            .and(ew)
            .and(batch.eps_w.row(i))
            .for_each(|a, &e, &z| *a = g * 2.0 * (e - z));
        Zip::from(adj.row_mut(b + i))
            .and(el)
            .and(batch.eps_l.row(i))
            .for_each(|a, &e, &z| *a = -g * 2.0 * (e - z));
    }
    Ok((parts, theta.backward(&tape, adj.view())))
}

/// Indices into a sample list; `y` is the content label the pair is trained under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub winner: usize,
    pub loser: usize,
    pub y: Family,
}

/// Within each family, every pair of samples whose negative counts differ;
/// the sample with fewer negatives wins. Ties are skipped.
pub fn build_pairs_binary(samples: &[AnnotatedSample]) -> Result<Vec<PreferencePair>> {
    let mut out = Vec::new();
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            let (a, b) = (&samples[i], &samples[j]);
            if a.y() != b.y() || a.a_neg.len() == b.a_neg.len() {
                continue;
            }
            let (winner, loser) = if a.a_neg.len() < b.a_neg.len() {
                (i, j)
            } else {
                (j, i)
            };
            out.push(PreferencePair {
                winner,
                loser,
                y: a.y(),
            });
        }
    }
    if out.is_empty() {
        return Err(Error::NoPairs);
    }
    Ok(out)
}

/// Fraction of a sample's applicable pairs that came out positive.
pub fn scalar_score(sample: &AnnotatedSample, tree: &AttributeTree) -> f64 {
    let n = applicable_pairs(tree, sample.y()).len();
    if n == 0 {
        return 0.0;
    }
    sample.a_pos.len() as f64 / n as f64
}

/// Every pair of samples with different scalar scores, across families; the
/// higher score wins and the pair is trained under the winner's label.
pub fn build_pairs_scalar(
    samples: &[AnnotatedSample],
    tree: &AttributeTree,
) -> Result<Vec<PreferencePair>> {
    let scores: Vec<f64> = samples.iter().map(|s| scalar_score(s, tree)).collect();
    let mut out = Vec::new();
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            if scores[i] == scores[j] {
                continue;
            }
            let (winner, loser) = if scores[i] > scores[j] {
                (i, j)
            } else {
                (j, i)
            };
            out.push(PreferencePair {
                winner,
                loser,
                y: samples[winner].y(),
            });
        }
    }
    if out.is_empty() {
        return Err(Error::NoPairs);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CpoOutcome {
    pub model: Denoiser,
    pub log: Vec<LossParts>,
    /// Sampled items dropped because their `A_neg` was empty.
    pub skipped_empty_neg: usize,
    /// Sampled items dropped for a degenerate loser direction.
    pub skipped_degenerate: usize,
    /// Number of static pairs available (DPO variants).
    pub pairs: usize,
}

/// Run Stage 2 from `theta_init` with θ₁ and θ_ref frozen.
pub fn train_cpo(
    theta_init: &Denoiser,
    theta1: &Denoiser,
    theta_ref: &Denoiser,
    data: &Dataset,
    tree: &AttributeTree,
    cfg: &CpoConfig,
    sched: &NoiseSchedule,
) -> Result<CpoOutcome> {
    cfg.validate(sched)?;
    let kappa = cfg.kappa(sched);
    let vocab = ConditionVocabulary::from_tree(tree);
    let train: Vec<AnnotatedSample> = data.split_vec(Split::Train);
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let refs: Vec<&AnnotatedSample> = train.iter().collect();
    let x_all = stack_points(&refs)?;
    let dim = x_all.ncols();
    let pairs = match cfg.variant {
        LossVariant::Dpo | LossVariant::DpoBinary => build_pairs_binary(&train)?,
        LossVariant::DpoScalar => build_pairs_scalar(&train, tree)?,
        LossVariant::Cpo | LossVariant::CpoS => Vec::new(),
    };

    let mut model = theta_init.clone();
    let mut adam = AdamState::new(&model.params);
    let opt = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut rng = SeedStream::new(cfg.seed).child("training").rng();
    let mut out = CpoOutcome {
        model: model.clone(),
        log: Vec::with_capacity(cfg.steps),
        skipped_empty_neg: 0,
        skipped_degenerate: 0,
        pairs: pairs.len(),
    };

    for step in 0..cfg.steps {
        let (parts, grads) = if cfg.variant.uses_static_pairs() {
            let picked: Vec<PreferencePair> = (0..cfg.batch_size)
                .map(|_| pairs[rng.random_range(0..pairs.len())])
                .collect();
            let w: Vec<usize> = picked.iter().map(|p| p.winner).collect();
            let l: Vec<usize> = picked.iter().map(|p| p.loser).collect();
            let (t, eps_w) = draw_noise(picked.len(), dim, sched, &mut rng);
            let (_, eps_l) = draw_noise(picked.len(), dim, sched, &mut rng);
            let cond = picked
                .iter()
                .map(|p| vocab.encode(Some(p.y), None, None))
                .collect::<Result<Vec<_>>>()?;
            let batch = DpoBatch {
                x0_w: gather_rows(&x_all, &w),
                x0_l: gather_rows(&x_all, &l),
                t,
                eps_w,
                eps_l,
            };
            dpo_loss(
                &model,
                theta_ref,
                &batch,
                condition_matrix(&cond, vocab.width()).view(),
                sched,
                kappa,
            )?
        } else {
            let drawn: Vec<usize> = (0..cfg.batch_size)
                .map(|_| rng.random_range(0..train.len()))
                .collect();
            let (t_all, eps_all) = draw_noise(drawn.len(), dim, sched, &mut rng);
            let keep: Vec<usize> = (0..drawn.len())
                .filter(|&k| !train[drawn[k]].a_neg.is_empty())
                .collect();
            out.skipped_empty_neg += drawn.len() - keep.len();
            if keep.is_empty() {
                continue;
            }
            let idx: Vec<usize> = keep.iter().map(|&k| drawn[k]).collect();
            let items: Vec<&AnnotatedSample> = idx.iter().map(|&i| &train[i]).collect();
            let t: Vec<usize> = keep.iter().map(|&k| t_all[k]).collect();
            let eps = gather_rows(&eps_all, &keep);
            let x_t = noised(&gather_rows(&x_all, &idx), &t, &eps, sched);
            let conds = cpo_conditions(&vocab, &items)?;
            let targets = NoiseTargets::build(theta1, x_t, t, &conds, cfg.omega_w, cfg.omega_l)?;
            match cfg.variant {
                LossVariant::Cpo => {
                    cpo_loss(&model, theta_ref, &targets, conds.c_content.view(), kappa)?
                }
                _ => match cpo_s_loss_skipping(
                    &model,
                    theta_ref,
                    &targets,
                    conds.c_content.view(),
                    kappa,
                ) {
                    Ok((p, g, skipped)) => {
                        out.skipped_degenerate += skipped;
                        (p, g)
                    }
                    Err(Error::Empty(_)) => {
                        out.skipped_degenerate += targets.len();
                        continue;
                    }
                    Err(e) => return Err(e),
                },
            }
        };
        if !parts.total.is_finite() || !grads.is_finite() {
            return Err(Error::Diverged {
                stage: "align",
                step,
                loss: parts.total,
            });
        }
        adam_step(&mut model.params, &grads, &mut adam, &opt);
        out.log.push(LossParts { step, ..parts });
    }
    out.model = model;
    Ok(out)
}
