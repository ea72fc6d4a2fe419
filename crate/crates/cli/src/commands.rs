use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use cpolab_core::cpo::{train_cpo, CpoOutcome, LossVariant};
use cpolab_core::dataset::{
    annotate, build_dataset, read_dataset, write_dataset, Dataset, OracleThresholds, Split,
};
use cpolab_core::denoiser::Checkpoint;
use cpolab_core::eval::{
    compare_models, condition_matrix, conditioning_iou, evaluate_model, generate, loss_curves,
    read_loss_log, sample_seed, write_loss_log, Comparison, EvalReport, LossCurves,
};
use cpolab_core::selfcheck::{run_selfcheck, SelfCheckReport};
use cpolab_core::taxonomy::{
    default_tree, validate_tree, AttributeSet, AttributeTree, ConditionVocabulary, Family,
};
use cpolab_core::train_sft::{train_sft, write_sft_log, SftOutcome};
use serde::Serialize;

use crate::config::{env_overrides, parse_assignment, resolve, write_snapshot, Settings};
use crate::{CliError, Command, Common, TaxonomyAction, EXIT_OK, EXIT_SELFCHECK, EXIT_VALIDATION};

type Overrides = Vec<(String, toml::Value)>;

fn push<T: Into<toml::Value>>(o: &mut Overrides, key: &str, v: Option<T>) {
    if let Some(v) = v {
        o.push((key.to_string(), v.into()));
    }
}

fn push_path(o: &mut Overrides, key: &str, v: Option<PathBuf>) {
    push(o, key, v.map(|p| p.to_string_lossy().into_owned()));
}

fn push_u64(o: &mut Overrides, key: &str, v: Option<u64>) -> Result<(), CliError> {
    if let Some(v) = v {
        let v = i64::try_from(v)
            .map_err(|_| CliError::validation(format!("{key} {v} is out of range")))?;
        o.push((key.to_string(), v.into()));
    }
    Ok(())
}

fn push_usize(o: &mut Overrides, key: &str, v: Option<usize>) -> Result<(), CliError> {
    push_u64(o, key, v.map(|v| v as u64))
}

fn settings(
    common: &Common,
    env: Vec<(String, String)>,
    flags: Overrides,
) -> Result<Settings, CliError> {
    let mut cli = common
        .set
        .iter()
        .map(|s| parse_assignment(s))
        .collect::<Result<Overrides, _>>()?;
    cli.extend(flags);
    resolve(common.config.as_deref(), env_overrides(env), cli)
}

/// Print to stdout, tolerating a closed pipe.
fn emit(text: &str) {
    let _ = writeln!(std::io::stdout(), "{text}");
}

fn runtime(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::runtime(format!("{}: {e}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::runtime(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| runtime(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| runtime(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
}

/// `<dir>/<stem><suffix>` next to `out`.
fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    out.with_file_name(format!("{stem}{suffix}"))
}

/// Dispatch a parsed command; the `Ok` value is the exit code.
pub fn run(command: Command, common: &Common, env: Vec<(String, String)>) -> Result<i32, CliError> {
    match command {
        Command::GenData { n, seed, out } => {
            let mut o = Vec::new();
            push_usize(&mut o, "n", n)?;
            push_u64(&mut o, "seed", seed)?;
            push_path(&mut o, "out", out);
            let s = settings(common, env, o)?;
            let data = gen_data(&s)?;
            eprintln!(
                "wrote {} records to {}",
                data.samples.len(),
                s.path("out")?.display()
            );
        }
        Command::TrainSft {
            data,
            epochs,
            seed,
            out,
            log,
        } => {
            let mut o = Vec::new();
            push_path(&mut o, "data", data);
            push_usize(&mut o, "epochs", epochs)?;
            push_u64(&mut o, "seed", seed)?;
            push_path(&mut o, "out", out);
            push_path(&mut o, "log", log);
            let s = settings(common, env, o)?;
            let outcome = train_sft_cmd(&s)?;
            if let Some(last) = outcome.log.iter().rev().find(|r| r.split == Split::Train) {
                eprintln!("final train loss {:.6}", last.loss);
            }
        }
        Command::TrainAlign {
            sft,
            data,
            variant,
            omega_w,
            omega_l,
            kappa,
            steps,
            seed,
            out,
            log,
        } => {
            let mut o = Vec::new();
            push_path(&mut o, "sft", sft);
            push_path(&mut o, "data", data);
            if let Some(v) = variant {
                let v: LossVariant = v.parse()?;
                push(&mut o, "variant", Some(v.as_str()));
            }
            push(&mut o, "omega_w", omega_w);
            push(&mut o, "omega_l", omega_l);
            push(&mut o, "kappa", kappa);
            push_usize(&mut o, "align_steps", steps)?;
            push_u64(&mut o, "seed", seed)?;
            push_path(&mut o, "out", out);
            push_path(&mut o, "log", log);
            let s = settings(common, env, o)?;
            let outcome = train_align_cmd(&s)?;
            eprintln!(
                "{} steps, skipped {} items without negatives and {} degenerate rows",
                outcome.log.len(),
                outcome.skipped_empty_neg,
                outcome.skipped_degenerate
            );
        }
        Command::Sample {
            model,
            n,
            family,
            pos,
            neg,
            seed,
            out,
        } => {
            let mut o = Vec::new();
            push_path(&mut o, "model", model);
            push_usize(&mut o, "eval_n", n)?;
            push_u64(&mut o, "seed", seed)?;
            push_path(&mut o, "out", out);
            let s = settings(common, env, o)?;
            let family = family
                .map(|f| f.to_ascii_uppercase().parse::<Family>())
                .transpose()?;
            let count = sample_cmd(&s, family, &pos, &neg)?;
            eprintln!("wrote {count} samples to {}", s.path("out")?.display());
        }
        Command::Eval {
            model,
            n,
            seed,
            data,
            out,
        } => {
            let mut o = Vec::new();
            push_path(&mut o, "model", model);
            push_usize(&mut o, "eval_n", n)?;
            push_u64(&mut o, "seed", seed)?;
            push_path(&mut o, "data", data);
            push_path(&mut o, "out", out);
            let s = settings(common, env, o)?;
            let r = eval_cmd(&s)?;
            emit(&format!(
                "{}: mean #A_neg {:.4} [{:.4}, {:.4}] over {} samples ({} degenerate)",
                r.model_id, r.mean_a_neg, r.ci_low, r.ci_high, r.n_samples, r.n_degenerate
            ));
        }
        Command::Compare { reports, out } => {
            let c = compare_cmd(&reports)?;
            let text =
                serde_json::to_string_pretty(&c).map_err(|e| CliError::runtime(e.to_string()))?;
            match out {
                Some(p) => fs::write(&p, text + "\n").map_err(|e| runtime(&p, e))?,
                None => emit(&text),
            }
        }
        Command::Curves { log, out, window } => {
            let mut o = Vec::new();
            push_path(&mut o, "log", log);
            push_path(&mut o, "out", out);
            push_usize(&mut o, "window", window)?;
            let s = settings(common, env, o)?;
            let c = curves_cmd(&s)?;
            let text = serde_json::to_string_pretty(&c.summary)
                .map_err(|e| CliError::runtime(e.to_string()))?;
            emit(&text);
        }
        Command::Selfcheck { fast, seed, out } => {
            let report = selfcheck_cmd(fast, seed, out.as_deref())?;
            let text = serde_json::to_string_pretty(&report)
                .map_err(|e| CliError::runtime(e.to_string()))?;
            emit(&text);
            if !report.passed {
                return Ok(EXIT_SELFCHECK);
            }
        }
        Command::Taxonomy { action } => match action {
            TaxonomyAction::Validate { file } => {
                let tree = match file {
                    Some(p) => load_tree(&p)?,
                    None => default_tree(),
                };
                let report = validate_tree(&tree);
                if report.is_ok() {
                    emit(&format!(
                        "ok: {} leaf pairs, hash {}",
                        tree.leaves().len(),
                        tree.content_hash()
                    ));
                } else {
                    for v in &report.violations {
                        emit(&v.to_string());
                    }
                    return Ok(EXIT_VALIDATION);
                }
            }
            TaxonomyAction::Show => emit(&default_tree().to_json()),
        },
    }
    Ok(EXIT_OK)
}

fn load_tree(path: &Path) -> Result<AttributeTree, CliError> {
    let text = fs::read_to_string(path).map_err(|e| runtime(path, e))?;
    AttributeTree::from_json(&text)
        .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
}

/// The configured tree, rejected if it violates any structural invariant.
pub fn tree(s: &Settings) -> Result<AttributeTree, CliError> {
    let t = match &s.tree {
        Some(p) => load_tree(p)?,
        None => default_tree(),
    };
    let report = validate_tree(&t);
    if let Some(v) = report.violations.first() {
        return Err(CliError::validation(format!(
            "attribute tree has {} violation(s), first: {v}",
            report.violations.len()
        )));
    }
    Ok(t)
}

/// Read a dataset and check it was annotated under `tree`.
pub fn load_dataset(path: &Path, tree: &AttributeTree) -> Result<Dataset, CliError> {
    let data = read_dataset(path)?;
    if let Some(h) = &data.header {
        if h.tree_hash != tree.content_hash() {
            return Err(CliError::validation(format!(
                "{}: annotated under tree {} but the configured tree is {}",
                path.display(),
                h.tree_hash,
                tree.content_hash()
            )));
        }
    }
    Ok(data)
}

/// Thresholds recorded in the dataset header win over the configured ones.
fn thresholds(s: &Settings, data: Option<&Dataset>) -> OracleThresholds {
    data.and_then(|d| d.header.as_ref())
        .map(|h| h.thresholds)
        .unwrap_or_else(|| s.thresholds())
}

pub fn gen_data(s: &Settings) -> Result<Dataset, CliError> {
    let out = s.path("out")?;
    let tree = tree(s)?;
    let data = build_dataset(s.n, &s.knob_mix(), &tree, &s.thresholds(), s.k, s.seed)?;
    write_dataset(out, &data)?;
    write_snapshot(s, out)?;
    Ok(data)
}

pub fn train_sft_cmd(s: &Settings) -> Result<SftOutcome, CliError> {
    let out = s.path("out")?;
    let tree = tree(s)?;
    let data = load_dataset(s.path("data")?, &tree)?;
    let spec = s.schedule();
    let sched = spec.build()?;
    let outcome = train_sft(
        &data,
        &tree,
        &thresholds(s, Some(&data)),
        &s.sft_config(),
        &sched,
    )?;
    Checkpoint {
        model: outcome.model.clone(),
        schedule: spec,
    }
    .save(out)?;
    let log = s.log.clone().unwrap_or_else(|| sibling(out, ".log.csv"));
    write_sft_log(&log, &outcome.log)?;
    write_snapshot(s, out)?;
    Ok(outcome)
}

/// Alignment from an SFT checkpoint, which serves as the starting point, the
/// frozen expert θ₁ and the frozen reference.
pub fn train_align_cmd(s: &Settings) -> Result<CpoOutcome, CliError> {
    let out = s.path("out")?;
    let tree = tree(s)?;
    let data = load_dataset(s.path("data")?, &tree)?;
    let ck = Checkpoint::load(s.path("sft")?)?;
    let sched = ck.schedule.build()?;
    let outcome = train_cpo(
        &ck.model,
        &ck.model,
        &ck.model,
        &data,
        &tree,
        &s.cpo_config(),
        &sched,
    )?;
    Checkpoint {
        model: outcome.model.clone(),
        schedule: ck.schedule,
    }
    .save(out)?;
    let log = s.log.clone().unwrap_or_else(|| sibling(out, ".log.csv"));
    write_loss_log(&log, &outcome.log)?;
    write_snapshot(s, out)?;
    Ok(outcome)
}

#[derive(Serialize)]
struct SampleCondition {
    y: Family,
    a_pos: Vec<String>,
    a_neg: Vec<String>,
}

#[derive(Serialize)]
struct SampleRecord<'a> {
    index: usize,
    seed: u64,
    family: Family,
    condition: &'a SampleCondition,
    points: &'a [f64],
    /// Oracle labels of the generated cloud, absent when it is degenerate.
    realized: Option<SampleCondition>,
}

/// Returns the number of samples written.
pub fn sample_cmd(
    s: &Settings,
    family: Option<Family>,
    pos: &[String],
    neg: &[String],
) -> Result<usize, CliError> {
    let out = s.path("out")?;
    let tree = tree(s)?;
    let vocab = ConditionVocabulary::from_tree(&tree);
    let ck = Checkpoint::load(s.path("model")?)?;
    let sched = ck.schedule.build()?;
    let prompts: Vec<Family> = family.map_or_else(|| Family::ALL.to_vec(), |f| vec![f]);
    let cfg = s.eval_config(s.eval_n, prompts.len())?;
    let a_pos = AttributeSet::pos(pos.iter().map(String::as_str));
    let a_neg = AttributeSet::neg(neg.iter().map(String::as_str));
    let families: Vec<Family> = prompts
        .iter()
        .flat_map(|&f| std::iter::repeat_n(f, cfg.n_per_prompt))
        .collect();
    let conds = families
        .iter()
        .map(|&f| vocab.encode(Some(f), Some(&a_pos), Some(&a_neg)))
        .collect::<Result<Vec<_>, _>>()?;
    let samples = generate(
        &ck.model,
        &families,
        &condition_matrix(&conds, vocab.width()),
        &sched,
        cfg.sampler_steps,
        s.seed,
    )?;
    let ids = |set: &AttributeSet| set.pair_ids().map(str::to_string).collect::<Vec<_>>();
    let th = s.thresholds();
    let mut w = std::io::BufWriter::new(fs::File::create(out).map_err(|e| runtime(out, e))?);
    for (i, sample) in samples.iter().enumerate() {
        let condition = SampleCondition {
            y: sample.family,
            a_pos: ids(&a_pos),
            a_neg: ids(&a_neg),
        };
        let realized = annotate(sample, &tree, &th)
            .ok()
            .map(|(p, n)| SampleCondition {
                y: sample.family,
                a_pos: ids(&p),
                a_neg: ids(&n),
            });
        let rec = SampleRecord {
            index: i,
            seed: sample_seed(s.seed, i),
            family: sample.family,
            condition: &condition,
            points: &sample.points,
            realized,
        };
        let line = serde_json::to_string(&rec).map_err(|e| CliError::runtime(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| runtime(out, e))?;
    }
    w.flush().map_err(|e| runtime(out, e))?;
    write_snapshot(s, out)?;
    Ok(samples.len())
}

/// Content-only evaluation of `model`. With a dataset configured, the oracle
/// uses the dataset's thresholds and conditioning IoU is measured on its
/// validation split.
pub fn eval_cmd(s: &Settings) -> Result<EvalReport, CliError> {
    let out = s.path("out")?;
    let tree = tree(s)?;
    let vocab = ConditionVocabulary::from_tree(&tree);
    let model_path = s.path("model")?;
    let ck = Checkpoint::load(model_path)?;
    let sched = ck.schedule.build()?;
    let data = s
        .data
        .as_deref()
        .map(|p| load_dataset(p, &tree))
        .transpose()?;
    let th = thresholds(s, data.as_ref());
    let cfg = s.eval_config(s.eval_n, Family::ALL.len())?;
    let id = model_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    let mut report = evaluate_model(
        &id,
        &ck.model,
        &Family::ALL,
        &tree,
        &vocab,
        &th,
        &sched,
        &cfg,
    )?;
    if let Some(d) = &data {
        let val = d.split_vec(Split::Val);
        let (p, n) = conditioning_iou(
            &ck.model,
            &val,
            &tree,
            &vocab,
            &th,
            &sched,
            cfg.sampler_steps,
            s.seed,
        )?;
        report.iou_pos = p;
        report.iou_neg = n;
    }
    write_json(out, &report)?;
    write_snapshot(s, out)?;
    Ok(report)
}

pub fn compare_cmd(paths: &[PathBuf]) -> Result<Comparison, CliError> {
    let reports = paths
        .iter()
        .map(|p| read_json::<EvalReport>(p))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(compare_models(&reports)?)
}

#[derive(Serialize)]
struct CurveRow {
    step: usize,
    win_part: f64,
    lose_part: f64,
    total: f64,
}

pub fn curves_cmd(s: &Settings) -> Result<LossCurves, CliError> {
    let out = s.path("out")?;
    let log = read_loss_log(s.path("log")?)?;
    let c = loss_curves(&log, s.window)?;
    let mut w = csv::Writer::from_path(out).map_err(|e| runtime(out, e))?;
    for i in 0..c.step.len() {
        w.serialize(CurveRow {
            step: c.step[i],
            win_part: c.win[i],
            lose_part: c.lose[i],
            total: c.total[i],
        })
        .map_err(|e| runtime(out, e))?;
    }
    w.flush().map_err(|e| runtime(out, e))?;
    write_json(&sibling(out, ".summary.json"), &c.summary)?;
    write_snapshot(s, out)?;
    Ok(c)
}

pub fn selfcheck_cmd(
    fast: bool,
    seed: u64,
    out: Option<&Path>,
) -> Result<SelfCheckReport, CliError> {
    let report = run_selfcheck(fast, seed);
    if let Some(p) = out {
        write_json(p, &report)?;
    }
    Ok(report)
}
