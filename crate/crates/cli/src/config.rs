//! Flat run configuration.
//!
//! Values are layered, later layers winning: built-in defaults, a TOML file
//! (`--config`), `CPOLAB_*` environment variables, then command-line flags and
//! `--set key=value` pairs. The merged result is written next to every output
//! as `<stem>.resolved.toml`, and passing that file back through `--config`
//! reproduces the run.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use cpolab_core::cpo::{CpoConfig, LossVariant};
use cpolab_core::dataset::{KnobMix, OracleThresholds};
use cpolab_core::diffusion::ScheduleSpec;
use cpolab_core::eval::{EvalConfig, DEFAULT_BOOTSTRAP, DEFAULT_WINDOW};
use cpolab_core::train_sft::{DropoutPolicy, SftConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const ENV_PREFIX: &str = "CPOLAB_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub seed: u64,

    // inputs and outputs
    pub tree: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub sft: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub log: Option<PathBuf>,

    // dataset
    pub n: usize,
    pub k: usize,
    pub p_good: f64,
    pub bad_multiplier: f64,
    pub p_ring: f64,
    pub noise_sigma: f64,
    pub gap_max: f64,
    pub jitter_max: f64,
    pub centroid_max: f64,
    pub dispersion_lo: f64,
    pub dispersion_hi: f64,

    // schedule and sampler
    pub schedule_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub sampler_steps: usize,

    // stage 1
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_floor: f64,
    pub hidden: usize,
    pub ema_decay: f64,
    pub p_y: f64,
    pub p_pos: f64,
    pub p_neg: f64,
    pub p_null: f64,

    // stage 2
    pub variant: LossVariant,
    pub omega_w: f64,
    pub omega_l: f64,
    pub beta_pref: f64,
    pub kappa: Option<f64>,
    pub align_steps: usize,
    pub align_batch_size: usize,
    pub align_lr: f64,

    // evaluation
    pub eval_n: usize,
    pub bootstrap: usize,
    pub ci_level: f64,
    pub window: usize,
}

impl Default for Settings {
    fn default() -> Self {
        let mix = KnobMix::default();
        let th = OracleThresholds::default();
        let sched = ScheduleSpec::default();
        let sft = SftConfig::default();
        let cpo = CpoConfig::default();
        let eval = EvalConfig::default();
        Self {
            seed: 0,
            tree: None,
            data: None,
            sft: None,
            model: None,
            out: None,
            log: None,
            n: 1000,
            k: 32,
            p_good: mix.p_good,
            bad_multiplier: mix.bad_multiplier,
            p_ring: mix.p_ring,
            noise_sigma: mix.noise_sigma,
            gap_max: th.gap_max,
            jitter_max: th.jitter_max,
            centroid_max: th.centroid_max,
            dispersion_lo: th.dispersion_band.0,
            dispersion_hi: th.dispersion_band.1,
            schedule_steps: sched.steps,
            beta_min: sched.beta_min,
            beta_max: sched.beta_max,
            sampler_steps: eval.sampler_steps,
            epochs: sft.epochs,
            batch_size: sft.batch_size,
            lr: sft.lr,
            lr_floor: sft.lr_floor,
            hidden: sft.hidden,
            ema_decay: sft.ema_decay,
            p_y: sft.dropout.p_y,
            p_pos: sft.dropout.p_pos,
            p_neg: sft.dropout.p_neg,
            p_null: sft.dropout.p_null,
            variant: cpo.variant,
            omega_w: cpo.omega_w,
            omega_l: cpo.omega_l,
            beta_pref: cpo.beta_pref,
            kappa: cpo.kappa,
            align_steps: cpo.steps,
            align_batch_size: cpo.batch_size,
            align_lr: cpo.lr,
            eval_n: 500,
            bootstrap: DEFAULT_BOOTSTRAP,
            ci_level: eval.ci_level,
            window: DEFAULT_WINDOW,
        }
    }
}

impl Settings {
    pub fn knob_mix(&self) -> KnobMix {
        KnobMix {
            p_good: self.p_good,
            bad_multiplier: self.bad_multiplier,
            p_ring: self.p_ring,
            noise_sigma: self.noise_sigma,
        }
    }

    pub fn thresholds(&self) -> OracleThresholds {
        OracleThresholds {
            gap_max: self.gap_max,
            jitter_max: self.jitter_max,
            centroid_max: self.centroid_max,
            dispersion_band: (self.dispersion_lo, self.dispersion_hi),
        }
    }

    pub fn schedule(&self) -> ScheduleSpec {
        ScheduleSpec {
            steps: self.schedule_steps,
            beta_min: self.beta_min,
            beta_max: self.beta_max,
        }
    }

    pub fn sft_config(&self) -> SftConfig {
        SftConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            lr_floor: self.lr_floor,
            hidden: self.hidden,
            ema_decay: self.ema_decay,
            dropout: DropoutPolicy {
                p_y: self.p_y,
                p_pos: self.p_pos,
                p_neg: self.p_neg,
                p_null: self.p_null,
            },
            seed: self.seed,
            iou_sampler_steps: self.sampler_steps,
        }
    }

    pub fn cpo_config(&self) -> CpoConfig {
        CpoConfig {
            variant: self.variant,
            omega_w: self.omega_w,
            omega_l: self.omega_l,
            beta_pref: self.beta_pref,
            kappa: self.kappa,
            steps: self.align_steps,
            batch_size: self.align_batch_size,
            lr: self.align_lr,
            seed: self.seed,
        }
    }

    /// Evaluation settings for `total` samples split evenly over `prompts`.
    pub fn eval_config(&self, total: usize, prompts: usize) -> Result<EvalConfig, CliError> {
        if prompts == 0 || total == 0 || !total.is_multiple_of(prompts) {
            return Err(CliError::validation(format!(
                "sample count {total} must be a positive multiple of the {prompts} prompt families"
            )));
        }
        Ok(EvalConfig {
            n_per_prompt: total / prompts,
            seed: self.seed,
            sampler_steps: self.sampler_steps,
            bootstrap_resamples: self.bootstrap,
            ci_level: self.ci_level,
        })
    }

    /// A required path setting.
    pub fn path(&self, key: &str) -> Result<&Path, CliError> {
        let p = match key {
            "tree" => &self.tree,
            "data" => &self.data,
            "sft" => &self.sft,
            "model" => &self.model,
            "out" => &self.out,
            "log" => &self.log,
            _ => unreachable!("not a path key: {key}"),
        };
        p.as_deref().ok_or_else(|| {
            CliError::validation(format!("missing required setting `{key}` (flag --{key})"))
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("settings serialize to TOML")
    }
}

/// Parse a command-line or environment value: anything TOML accepts as a
/// value (numbers, booleans, quoted strings, arrays), otherwise a bare string.
pub fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Split `key=value`.
pub fn parse_assignment(s: &str) -> Result<(String, toml::Value), CliError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CliError::validation(format!("expected key=value, got `{s}`")))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(CliError::validation(format!("empty key in `{s}`")));
    }
    Ok((k.replace('-', "_"), parse_value(v.trim())))
}

/// `CPOLAB_OMEGA_W=3` becomes `omega_w = 3`.
pub fn env_overrides<I>(vars: I) -> Vec<(String, toml::Value)>
where
    I: IntoIterator<Item = (String, String)>,
{
    vars.into_iter()
        .filter_map(|(k, v)| {
            let key = k.strip_prefix(ENV_PREFIX)?.to_ascii_lowercase();
            Some((key, parse_value(&v)))
        })
        .collect()
}

/// Merge the layers. `cli` is applied last, in order.
pub fn resolve(
    file: Option<&Path>,
    env: Vec<(String, toml::Value)>,
    cli: Vec<(String, toml::Value)>,
) -> Result<Settings, CliError> {
    let mut table = toml::Table::try_from(Settings::default()).expect("defaults serialize");
    let mut layers: Vec<(String, Vec<(String, toml::Value)>)> = Vec::new();
    if let Some(path) = file {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
        let parsed: toml::Table = text
            .parse()
            .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
        layers.push((path.display().to_string(), parsed.into_iter().collect()));
    }
    layers.push(("environment".into(), env));
    layers.push(("command line".into(), cli));
    let known: BTreeMap<String, ()> = toml::Table::try_from(Settings::default())
        .expect("defaults serialize")
        .keys()
        .map(|k| (k.clone(), ()))
        .chain(["tree", "data", "sft", "model", "out", "log", "kappa"].map(|k| (k.to_string(), ())))
        .collect();
    for (source, entries) in layers {
        for (k, v) in entries {
            if !known.contains_key(&k) {
                return Err(CliError::validation(format!(
                    "{source}: unknown setting `{k}`"
                )));
            }
            if let toml::Value::Table(_) = v {
                return Err(CliError::validation(format!(
                    "{source}: `{k}` must be a plain value, the config is flat"
                )));
            }
            table.insert(k, v);
        }
    }
    table.try_into().map_err(|e: toml::de::Error| {
        CliError::validation(format!("configuration: {}", e.message()))
    })
}

/// `<dir>/<stem>.resolved.toml` for an output path.
pub fn snapshot_path(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    out.with_file_name(format!("{stem}.resolved.toml"))
}

pub fn write_snapshot(settings: &Settings, out: &Path) -> Result<PathBuf, CliError> {
    let path = snapshot_path(out);
    fs::write(&path, settings.to_toml())
        .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
    Ok(path)
}
