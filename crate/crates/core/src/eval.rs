//! Oracle-based evaluation: `#A_neg` with bootstrap intervals, attribute IoU,
//! loss-part curve summaries and model ranking.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{annotate, AnnotatedSample, OracleThresholds, Sample};
use crate::diffusion::{ddim_sample_batch, NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result};
use crate::rng::SeedStream;
use crate::taxonomy::{applicable_pairs, AttributeSet, AttributeTree, ConditionVocabulary, Family};

pub const DEFAULT_BOOTSTRAP: usize = 2000;
pub const DEFAULT_WINDOW: usize = 25;

/// Intersection over union of `(pair_id, polarity)` entries; two empty sets
/// score 1.
pub fn iou(requested: &AttributeSet, realized: &AttributeSet) -> f64 {
    let union = requested.union_len(realized);
    if union == 0 {
        return 1.0;
    }
    requested.intersection_len(realized) as f64 / union as f64
}

/// [`iou`] after checking that both sets only name pairs of `tree`.
pub fn iou_checked(
    tree: &AttributeTree,
    requested: &AttributeSet,
    realized: &AttributeSet,
) -> Result<f64> {
    for id in requested.pair_ids().chain(realized.pair_ids()) {
        if tree.pair(id).is_none() {
            return Err(Error::UnknownPair(id.to_string()));
        }
    }
    Ok(iou(requested, realized))
}

/// Percentile bootstrap interval for the mean.
pub fn bootstrap_mean_ci(
    values: &[f64],
    resamples: usize,
    level: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Empty("bootstrap over no values"));
    }
    if !(0.0 < level && level < 1.0) || resamples == 0 {
        return Err(Error::InvalidArgument(format!(
            "bootstrap needs level in (0,1) and resamples > 0, got {level}, {resamples}"
        )));
    }
    let mut rng = SeedStream::new(seed).child("bootstrap").rng();
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let pick = |q: f64| means[((q * resamples as f64).floor() as usize).min(resamples - 1)];
    let mean = values.iter().sum::<f64>() / n as f64;
    // guard against float noise pushing the point estimate outside the interval
    Ok((pick(tail).min(mean), pick(1.0 - tail).max(mean)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_per_prompt: usize,
    pub seed: u64,
    pub sampler_steps: usize,
    pub bootstrap_resamples: usize,
    pub ci_level: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_per_prompt: 250,
            seed: 0,
            sampler_steps: 100,
            bootstrap_resamples: DEFAULT_BOOTSTRAP,
            ci_level: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: String,
    /// Samples that annotated cleanly and enter the mean.
    pub n_samples: usize,
    /// Samples the oracle rejected (collapsed or non-finite clouds).
    pub n_degenerate: usize,
    pub mean_a_neg: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Conditioning fidelity; only set when requested attributes are known.
    pub iou_pos: Option<f64>,
    pub iou_neg: Option<f64>,
    /// Fraction of applicable samples on which each pair came out negative.
    pub per_pair_neg_rate: BTreeMap<String, f64>,
    pub seed: u64,
}

/// Annotate already generated samples and summarize them.
pub fn evaluate_samples(
    model_id: &str,
    samples: &[Sample],
    tree: &AttributeTree,
    thresholds: &OracleThresholds,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let mut counts = Vec::new();
    let mut degenerate = 0;
    let mut neg_hits: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for s in samples {
        match annotate(s, tree, thresholds) {
            Ok((_, neg)) => {
                counts.push(neg.len() as f64);
                for p in applicable_pairs(tree, s.family) {
                    let e = neg_hits.entry(p.clone()).or_default();
                    e.1 += 1;
                    e.0 += usize::from(neg.contains_pair(&p));
                }
            }
            Err(Error::DegenerateSample(_)) => degenerate += 1,
            Err(e) => return Err(e),
        }
    }
    if counts.is_empty() {
        return Err(Error::Empty("every generated sample was degenerate"));
    }
    let mean = counts.iter().sum::<f64>() / counts.len() as f64;
    let (lo, hi) = bootstrap_mean_ci(&counts, cfg.bootstrap_resamples, cfg.ci_level, cfg.seed)?;
    Ok(EvalReport {
        model_id: model_id.to_string(),
        n_samples: counts.len(),
        n_degenerate: degenerate,
        mean_a_neg: mean,
        ci_low: lo,
        ci_high: hi,
        iou_pos: None,
        iou_neg: None,
        per_pair_neg_rate: neg_hits
            .into_iter()
            .map(|(k, (hit, n))| (k, hit as f64 / n as f64))
            .collect(),
        seed: cfg.seed,
    })
}

/// Seed of the `i`-th generated sample of an evaluation run.
pub fn sample_seed(seed: u64, i: usize) -> u64 {
    SeedStream::new(seed)
        .child("sampling")
        .index(i as u64)
        .as_u64()
}

/// Generate one batch with DDIM under the given conditions.
pub fn generate<M: NoisePredictor + ?Sized>(
    model: &M,
    families: &[Family],
    conds: &Array2<f64>,
    sched: &NoiseSchedule,
    sampler_steps: usize,
    seed: u64,
) -> Result<Vec<Sample>> {
    let seeds: Vec<u64> = (0..families.len()).map(|i| sample_seed(seed, i)).collect();
    let x = ddim_sample_batch(model, conds.view(), sched, sampler_steps, &seeds)?;
    Ok(x.rows()
        .into_iter()
        .zip(families)
        .map(|(r, &family)| Sample {
            points: r.to_vec(),
            family,
        })
        .collect())
}

/// Stack encoded conditions into a batch matrix.
pub fn condition_matrix(rows: &[Vec<f64>], width: usize) -> Array2<f64> {
    let mut m = Array2::zeros((rows.len(), width));
    for (mut r, c) in m.rows_mut().into_iter().zip(rows) {
        r.assign(&ndarray::ArrayView1::from(c.as_slice()));
    }
    m
}

/// Content-only evaluation: `n_per_prompt` samples for each prompt family,
/// conditioned on `y` alone.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_model<M: NoisePredictor + ?Sized>(
    model_id: &str,
    model: &M,
    prompts: &[Family],
    tree: &AttributeTree,
    vocab: &ConditionVocabulary,
    thresholds: &OracleThresholds,
    sched: &NoiseSchedule,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if cfg.n_per_prompt == 0 || prompts.is_empty() {
        return Err(Error::InvalidArgument(
            "evaluation needs n_per_prompt >= 1 and a prompt".into(),
        ));
    }
    let families: Vec<Family> = prompts
        .iter()
        .flat_map(|&f| std::iter::repeat_n(f, cfg.n_per_prompt))
        .collect();
    let conds = families
        .iter()
        .map(|&f| vocab.encode(Some(f), None, None))
        .collect::<Result<Vec<_>>>()?;
    let conds = condition_matrix(&conds, vocab.width());
    let samples = generate(model, &families, &conds, sched, cfg.sampler_steps, cfg.seed)?;
    evaluate_samples(model_id, &samples, tree, thresholds, cfg)
}

/// Conditioning fidelity on reference records: sample under `(y, A_pos)` and
/// compare realized attributes against each record's labels. `iou_pos` averages
/// over records with non-empty `A_pos`, `iou_neg` over records with non-empty
/// `A_neg`, so the both-empty convention cannot inflate either score.
#[allow(clippy::too_many_arguments)]
pub fn conditioning_iou<M: NoisePredictor + ?Sized>(
    model: &M,
    records: &[AnnotatedSample],
    tree: &AttributeTree,
    vocab: &ConditionVocabulary,
    thresholds: &OracleThresholds,
    sched: &NoiseSchedule,
    sampler_steps: usize,
    seed: u64,
) -> Result<(Option<f64>, Option<f64>)> {
    if records.is_empty() {
        return Ok((None, None));
    }
    let families: Vec<Family> = records.iter().map(|r| r.y()).collect();
    let conds = records
        .iter()
        .map(|r| vocab.encode(Some(r.y()), Some(&r.a_pos), None))
        .collect::<Result<Vec<_>>>()?;
    let conds = condition_matrix(&conds, vocab.width());
    let samples = generate(model, &families, &conds, sched, sampler_steps, seed)?;
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (r, s) in records.iter().zip(&samples) {
        // a collapsed sample realizes nothing
        let (rp, rn) = match annotate(s, tree, thresholds) {
            Ok(v) => v,
            Err(Error::DegenerateSample(_)) => (AttributeSet::new(), AttributeSet::new()),
            Err(e) => return Err(e),
        };
        if !r.a_pos.is_empty() {
            pos.push(iou(&r.a_pos, &rp));
        }
        if !r.a_neg.is_empty() {
            neg.push(iou(&r.a_neg, &rn));
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    Ok((mean(&pos), mean(&neg)))
}

/// One row of a preference-loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub step: usize,
    pub win_part: f64,
    pub lose_part: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub steps: usize,
    pub terminal_win: f64,
    pub terminal_lose: f64,
    pub terminal_total: f64,
    /// Standard deviation of first differences of the raw total.
    pub oscillation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossCurves {
    pub step: Vec<usize>,
    pub win: Vec<f64>,
    pub lose: Vec<f64>,
    pub total: Vec<f64>,
    pub summary: CurveSummary,
}

impl LossCurves {
    /// First logged step whose smoothed win part is at or below `level`.
    pub fn steps_to_win(&self, level: f64) -> Option<usize> {
        self.win
            .iter()
            .position(|&w| w <= level)
            .map(|i| self.step[i])
    }
}

/// Trailing moving average: entry `i` is the mean of the last `min(window, i+1)` values.
pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(xs.len());
    for (i, &x) in xs.iter().enumerate() {
        acc += x;
        if i >= w {
            acc -= xs[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}

fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

pub fn loss_curves(log: &[LossParts], window: usize) -> Result<LossCurves> {
    if log.is_empty() {
        return Err(Error::Empty("loss log"));
    }
    let col = |f: fn(&LossParts) -> f64| log.iter().map(f).collect::<Vec<_>>();
    let total_raw = col(|p| p.total);
    let win = moving_average(&col(|p| p.win_part), window);
    let lose = moving_average(&col(|p| p.lose_part), window);
    let total = moving_average(&total_raw, window);
    let diffs: Vec<f64> = total_raw.windows(2).map(|w| w[1] - w[0]).collect();
    let summary = CurveSummary {
        steps: log.len(),
        terminal_win: *win.last().unwrap(),
        terminal_lose: *lose.last().unwrap(),
        terminal_total: *total.last().unwrap(),
        oscillation: std_dev(&diffs),
    };
    Ok(LossCurves {
        step: log.iter().map(|p| p.step).collect(),
        win,
        lose,
        total,
        summary,
    })
}

pub fn write_loss_log(path: impl AsRef<std::path::Path>, log: &[LossParts]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for row in log {
        w.serialize(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_loss_log(path: impl AsRef<std::path::Path>) -> Result<Vec<LossParts>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 2,
                message: e.to_string(),
            })
        })
        .collect()
}

pub(crate) fn csv_err(path: &std::path::Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: format!("{other:?}"),
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedModel {
    pub rank: usize,
    pub model_id: String,
    pub mean_a_neg: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CiOverlap {
    pub a: String,
    pub b: String,
    pub overlap: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub ranking: Vec<RankedModel>,
    pub overlaps: Vec<CiOverlap>,
}

pub fn cis_overlap(a: &EvalReport, b: &EvalReport) -> bool {
    a.ci_low <= b.ci_high && b.ci_low <= a.ci_high
}

/// Rank by `mean_a_neg` ascending (stable on ties) and flag every pair of
/// overlapping intervals.
pub fn compare_models(reports: &[EvalReport]) -> Result<Comparison> {
    if reports.len() < 2 {
        return Err(Error::InvalidArgument(
            "comparison needs at least two reports".into(),
        ));
    }
    let mut order: Vec<&EvalReport> = reports.iter().collect();
    order.sort_by(|a, b| a.mean_a_neg.total_cmp(&b.mean_a_neg));
    let ranking = order
        .iter()
        .enumerate()
        .map(|(i, r)| RankedModel {
            rank: i + 1,
            model_id: r.model_id.clone(),
            mean_a_neg: r.mean_a_neg,
            ci_low: r.ci_low,
            ci_high: r.ci_high,
        })
        .collect();
    let mut overlaps = Vec::new();
    for i in 0..order.len() {
        for j in i + 1..order.len() {
            overlaps.push(CiOverlap {
                a: order[i].model_id.clone(),
                b: order[j].model_id.clone(),
                overlap: cis_overlap(order[i], order[j]),
            });
        }
    }
    Ok(Comparison { ranking, overlaps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_sample, GeneratorKnobs};
    use crate::taxonomy::default_tree;

    fn report(id: &str, mean: f64, lo: f64, hi: f64) -> EvalReport {
        EvalReport {
            model_id: id.into(),
            n_samples: 10,
            n_degenerate: 0,
            mean_a_neg: mean,
            ci_low: lo,
            ci_high: hi,
            iou_pos: None,
            iou_neg: None,
            per_pair_neg_rate: BTreeMap::new(),
            seed: 0,
        }
    }

    #[test]
    fn iou_examples() {
        let ab = AttributeSet::pos(["a", "b"]);
        let bc = AttributeSet::pos(["b", "c"]);
        assert_eq!(iou(&ab, &ab), 1.0);
        assert_eq!(iou(&ab, &AttributeSet::pos(["c", "d"])), 0.0);
        assert!((iou(&ab, &bc) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou(&ab, &bc), iou(&bc, &ab));
        assert_eq!(iou(&AttributeSet::new(), &AttributeSet::new()), 1.0);
        // polarity is part of the entry
        assert_eq!(
            iou(&AttributeSet::pos(["a"]), &AttributeSet::neg(["a"])),
            0.0
        );
    }

    #[test]
    fn iou_checked_rejects_foreign_pairs() {
        let t = default_tree();
        let ok = AttributeSet::pos(["RING_CLOSURE"]);
        assert_eq!(iou_checked(&t, &ok, &ok).unwrap(), 1.0);
        assert!(iou_checked(&t, &ok, &AttributeSet::pos(["FOO"])).is_err());
    }

    #[test]
    fn perfect_samples_score_zero() {
        let t = default_tree();
        let samples: Vec<Sample> = (0..20)
            .map(|i| {
                let f = if i % 2 == 0 {
                    Family::Ring
                } else {
                    Family::Grid
                };
                generate_sample(f, &GeneratorKnobs::default(), 32, i).unwrap()
            })
            .collect();
        let r = evaluate_samples(
            "perfect",
            &samples,
            &t,
            &OracleThresholds::default(),
            &EvalConfig::default(),
        )
        .unwrap();
        assert_eq!((r.mean_a_neg, r.ci_low, r.ci_high), (0.0, 0.0, 0.0));
        assert_eq!(r.n_samples, 20);
        assert!(r.per_pair_neg_rate.values().all(|&v| v == 0.0));
    }

    #[test]
    fn degenerate_samples_are_counted_not_averaged() {
        let t = default_tree();
        let good = generate_sample(Family::Ring, &GeneratorKnobs::default(), 32, 1).unwrap();
        let collapsed = Sample {
            points: vec![0.5; 64],
            family: Family::Grid,
        };
        let nan = Sample {
            points: vec![f64::NAN; 64],
            family: Family::Ring,
        };
        let r = evaluate_samples(
            "m",
            &[good, collapsed, nan],
            &t,
            &OracleThresholds::default(),
            &EvalConfig::default(),
        )
        .unwrap();
        assert_eq!((r.n_samples, r.n_degenerate), (1, 2));
    }

    #[test]
    fn bootstrap_contains_mean_and_shrinks() {
        let mut rng = SeedStream::new(3).rng();
        let small: Vec<f64> = (0..100).map(|_| rng.random_range(0..4) as f64).collect();
        let large: Vec<f64> = (0..400).map(|_| rng.random_range(0..4) as f64).collect();
        let m = small.iter().sum::<f64>() / 100.0;
        let (lo, hi) = bootstrap_mean_ci(&small, 2000, 0.95, 1).unwrap();
        assert!(lo <= m && m <= hi);
        let (lo4, hi4) = bootstrap_mean_ci(&large, 2000, 0.95, 1).unwrap();
        assert!(hi4 - lo4 < hi - lo);
        assert!(bootstrap_mean_ci(&[], 10, 0.95, 1).is_err());
    }

    #[test]
    fn curve_examples() {
        let flat: Vec<LossParts> = (0..50)
            .map(|step| LossParts {
                step,
                win_part: -0.5,
                lose_part: 0.2,
                total: 0.3,
            })
            .collect();
        let c = loss_curves(&flat, 25).unwrap();
        assert_eq!(c.summary.oscillation, 0.0);
        assert_eq!(c.summary.terminal_win, -0.5);
        let xs = [1.0, 5.0, -2.0, 4.0];
        assert_eq!(moving_average(&xs, 1), xs);
        assert_eq!(moving_average(&xs, 2), [1.0, 3.0, 1.5, 1.0]);
        assert!(loss_curves(&[], 25).is_err());
    }

    #[test]
    fn steps_to_win_finds_first_crossing() {
        let log: Vec<LossParts> = (0..10)
            .map(|step| LossParts {
                step,
                win_part: -(step as f64),
                lose_part: 0.0,
                total: 0.0,
            })
            .collect();
        let c = loss_curves(&log, 1).unwrap();
        assert_eq!(c.steps_to_win(-3.0), Some(3));
        assert_eq!(c.steps_to_win(-30.0), None);
    }

    #[test]
    fn loss_log_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("parts.csv");
        let log = vec![
            LossParts {
                step: 0,
                win_part: -0.1,
                lose_part: 0.25,
                total: std::f64::consts::LN_2,
            },
            LossParts {
                step: 1,
                win_part: 1e-17,
                lose_part: -3.5,
                total: 0.1,
            },
        ];
        write_loss_log(&p, &log).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("step,win_part,lose_part,total\n"));
        assert_eq!(read_loss_log(&p).unwrap(), log);
    }

    #[test]
    fn compare_examples() {
        let c = compare_models(&[report("b", 1.5, 1.0, 2.0), report("a", 0.0, 0.0, 0.0)]).unwrap();
        assert_eq!(c.ranking[0].model_id, "a");
        assert_eq!(c.ranking[1].rank, 2);
        assert!(!c.overlaps[0].overlap);
        let same =
            compare_models(&[report("x", 1.0, 0.5, 1.5), report("y", 1.0, 0.5, 1.5)]).unwrap();
        assert!(same.overlaps[0].overlap);
        assert!(compare_models(&[report("x", 1.0, 0.5, 1.5)]).is_err());
    }
}
