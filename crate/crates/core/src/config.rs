//! `key = value` run configuration files.
//!
//! Files are UTF-8 text, one `section.key = value` per line, `#` comments.
//! Unknown keys are rejected with the offending name; parsing a serialized
//! config reproduces it exactly.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::degrade::{DegradationConfig, DownsampleMode, KernelSpec};
use crate::error::{Error, Result};
use crate::fusion::{Branch, FusionMode};
use crate::model::{EncoderVariant, ModelConfig};
use crate::train::TrainConfig;

/// Parse `key = value` lines into a map. Later duplicates win.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected 'key = value', got '{raw}'", ln + 1))
        })?;
        out.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(out)
}

/// Canonical serialization: sorted `key = value` lines.
pub fn serialize_kv(kv: &BTreeMap<String, String>) -> String {
    let mut out = String::new();
    for (k, v) in kv {
        out.push_str(&format!("{k} = {v}\n"));
    }
    out
}

fn parse_typed<T: FromStr>(key: &str, v: &str, what: &str) -> Result<T> {
    v.parse::<T>()
        .map_err(|_| Error::Config(format!("{key}: invalid {what} '{v}'")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true/false, got '{v}'"))),
    }
}

fn fusion_mode_name(m: FusionMode) -> &'static str {
    match m {
        FusionMode::Sum => "sum",
        FusionMode::ConcatAll => "concat_all",
        FusionMode::ConcatAllSkip => "concat_all_skip",
        FusionMode::Concat35 => "concat_3_5",
    }
}

fn parse_fusion_mode(key: &str, v: &str) -> Result<FusionMode> {
    match v {
        "sum" => Ok(FusionMode::Sum),
        "concat_all" => Ok(FusionMode::ConcatAll),
        "concat_all_skip" => Ok(FusionMode::ConcatAllSkip),
        "concat_3_5" => Ok(FusionMode::Concat35),
        _ => Err(Error::Config(format!("{key}: unknown fusion mode '{v}'"))),
    }
}

fn branch_name(b: Branch) -> &'static str {
    match b {
        Branch::Conv3 => "3x3",
        Branch::Conv5 => "5x5",
        Branch::Shift => "shift",
    }
}

fn parse_branches(key: &str, v: &str) -> Result<Vec<Branch>> {
    let mut out = Vec::new();
    for part in v.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        out.push(match part {
            "3x3" => Branch::Conv3,
            "5x5" => Branch::Conv5,
            "shift" => Branch::Shift,
            _ => return Err(Error::Config(format!("{key}: unknown branch '{part}'"))),
        });
    }
    Ok(out)
}

/// Model section to canonical key/value pairs.
pub fn model_to_kv(cfg: &ModelConfig) -> BTreeMap<String, String> {
    let mut kv = BTreeMap::new();
    kv.insert("model.scale".into(), cfg.scale.to_string());
    kv.insert("model.channels".into(), cfg.channels.to_string());
    kv.insert("model.encoder".into(), cfg.encoder.name().to_string());
    kv.insert(
        "model.fusion_mode".into(),
        fusion_mode_name(cfg.fusion_mode).to_string(),
    );
    kv.insert(
        "model.fusion_branches".into(),
        cfg.fusion_branches
            .iter()
            .map(|b| branch_name(*b))
            .collect::<Vec<_>>()
            .join(","),
    );
    kv.insert("model.fusion_blocks".into(), cfg.fusion_blocks.to_string());
    kv.insert("model.decoder_blocks".into(), cfg.decoder_blocks.to_string());
    kv.insert("model.heads".into(), cfg.heads.to_string());
    kv.insert("model.window_size".into(), cfg.window_size.to_string());
    kv.insert("model.mlp_ratio".into(), cfg.mlp_ratio.to_string());
    kv.insert("model.skip_enabled".into(), cfg.skip_enabled.to_string());
    kv.insert("model.rel_pos_bias".into(), cfg.rel_pos_bias.to_string());
    kv.insert("model.seed".into(), cfg.seed.to_string());
    kv
}

/// Apply `model.*` keys from `kv` onto defaults; other sections are ignored.
pub fn model_from_kv(kv: &BTreeMap<String, String>) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::default();
    for (key, v) in kv {
        if !key.starts_with("model.") {
            continue;
        }
        apply_model_key(&mut cfg, key, v)?;
    }
    Ok(cfg)
}

fn apply_model_key(cfg: &mut ModelConfig, key: &str, v: &str) -> Result<()> {
    match key {
        "model.scale" => cfg.scale = parse_typed(key, v, "integer")?,
        "model.channels" => cfg.channels = parse_typed(key, v, "integer")?,
        "model.encoder" => cfg.encoder = EncoderVariant::parse(v)?,
        "model.fusion_mode" => cfg.fusion_mode = parse_fusion_mode(key, v)?,
        "model.fusion_branches" => cfg.fusion_branches = parse_branches(key, v)?,
        "model.fusion_blocks" => cfg.fusion_blocks = parse_typed(key, v, "integer")?,
        "model.decoder_blocks" => cfg.decoder_blocks = parse_typed(key, v, "integer")?,
        "model.heads" => cfg.heads = parse_typed(key, v, "integer")?,
        "model.window_size" => cfg.window_size = parse_typed(key, v, "integer")?,
        "model.mlp_ratio" => cfg.mlp_ratio = parse_typed(key, v, "number")?,
        "model.skip_enabled" => cfg.skip_enabled = parse_bool(key, v)?,
        "model.rel_pos_bias" => cfg.rel_pos_bias = parse_bool(key, v)?,
        "model.seed" => cfg.seed = parse_typed(key, v, "integer")?,
        _ => return Err(Error::Config(format!("unknown key '{key}'"))),
    }
    Ok(())
}

fn train_to_kv(cfg: &TrainConfig) -> BTreeMap<String, String> {
    let mut kv = BTreeMap::new();
    kv.insert("train.alpha".into(), cfg.alpha.to_string());
    kv.insert("train.beta".into(), cfg.beta.to_string());
    kv.insert("train.learning_rate".into(), cfg.learning_rate.to_string());
    kv.insert("train.batch_size".into(), cfg.batch_size.to_string());
    kv.insert("train.hr_patch".into(), cfg.hr_patch.to_string());
    if let Some(s) = cfg.max_steps {
        kv.insert("train.max_steps".into(), s.to_string());
    }
    if let Some(e) = cfg.epochs {
        kv.insert("train.epochs".into(), e.to_string());
    }
    kv.insert("train.seed".into(), cfg.seed.to_string());
    kv.insert("train.adam_beta1".into(), cfg.adam_beta1.to_string());
    kv.insert("train.adam_beta2".into(), cfg.adam_beta2.to_string());
    kv.insert("train.adam_eps".into(), cfg.adam_eps.to_string());
    kv.insert("train.val_cadence".into(), cfg.val_cadence.to_string());
    kv.insert(
        "train.checkpoint_every".into(),
        cfg.checkpoint_every.to_string(),
    );
    kv
}

fn apply_train_key(cfg: &mut TrainConfig, key: &str, v: &str) -> Result<()> {
    match key {
        "train.alpha" => cfg.alpha = parse_typed(key, v, "number")?,
        "train.beta" => cfg.beta = parse_typed(key, v, "number")?,
        "train.learning_rate" => cfg.learning_rate = parse_typed(key, v, "number")?,
        "train.batch_size" => cfg.batch_size = parse_typed(key, v, "integer")?,
        "train.hr_patch" => cfg.hr_patch = parse_typed(key, v, "integer")?,
        "train.max_steps" => cfg.max_steps = Some(parse_typed(key, v, "integer")?),
        "train.epochs" => {
            cfg.epochs = Some(parse_typed(key, v, "integer")?);
            cfg.max_steps = None;
        }
        "train.seed" => cfg.seed = parse_typed(key, v, "integer")?,
        "train.adam_beta1" => cfg.adam_beta1 = parse_typed(key, v, "number")?,
        "train.adam_beta2" => cfg.adam_beta2 = parse_typed(key, v, "number")?,
        "train.adam_eps" => cfg.adam_eps = parse_typed(key, v, "number")?,
        "train.val_cadence" => cfg.val_cadence = parse_typed(key, v, "integer")?,
        "train.checkpoint_every" => cfg.checkpoint_every = parse_typed(key, v, "integer")?,
        _ => return Err(Error::Config(format!("unknown key '{key}'"))),
    }
    Ok(())
}

/// Degradation section in primitive-field form.
#[derive(Debug, Clone, PartialEq)]
pub struct DegradeSettings {
    pub kernel: String,
    pub sigma: f64,
    pub kernel_size: usize,
    pub motion_length: f64,
    pub motion_angle: f64,
    pub motion_size: usize,
    pub scale: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub downsample: DownsampleMode,
}

impl Default for DegradeSettings {
    fn default() -> Self {
        DegradeSettings::preset_mini()
    }
}

impl DegradeSettings {
    pub fn preset_mini() -> Self {
        DegradeSettings {
            kernel: "gaussian".into(),
            sigma: 1.2,
            kernel_size: 9,
            motion_length: 3.0,
            motion_angle: std::f64::consts::FRAC_PI_4,
            motion_size: 5,
            scale: 4,
            noise_sigma: 0.01,
            seed: 0,
            downsample: DownsampleMode::Bicubic,
        }
    }

    pub fn preset_plus() -> Self {
        DegradeSettings {
            kernel: "gaussian+motion".into(),
            sigma: 2.0,
            kernel_size: 13,
            noise_sigma: 0.03,
            ..DegradeSettings::preset_mini()
        }
    }

    pub fn to_config(&self) -> Result<DegradationConfig> {
        let kernel = match self.kernel.as_str() {
            "delta" => KernelSpec::Delta,
            "gaussian" => KernelSpec::Gaussian {
                sigma: self.sigma,
                size: self.kernel_size,
            },
            "motion" => KernelSpec::Motion {
                length: self.motion_length,
                orientation: self.motion_angle,
                size: self.motion_size,
            },
            "gaussian+motion" => KernelSpec::GaussianThenMotion {
                sigma: self.sigma,
                size: self.kernel_size,
                length: self.motion_length,
                orientation: self.motion_angle,
                motion_size: self.motion_size,
            },
            other => {
                return Err(Error::Config(format!(
                    "degrade.kernel: unknown kernel '{other}'"
                )))
            }
        };
        Ok(DegradationConfig {
            kernel,
            scale: self.scale,
            noise_sigma: self.noise_sigma,
            seed: self.seed,
            downsample_mode: self.downsample,
        })
    }
}

fn degrade_to_kv(cfg: &DegradeSettings) -> BTreeMap<String, String> {
    let mut kv = BTreeMap::new();
    kv.insert("degrade.kernel".into(), cfg.kernel.clone());
    kv.insert("degrade.sigma".into(), cfg.sigma.to_string());
    kv.insert("degrade.kernel_size".into(), cfg.kernel_size.to_string());
    kv.insert("degrade.motion_length".into(), cfg.motion_length.to_string());
    kv.insert("degrade.motion_angle".into(), cfg.motion_angle.to_string());
    kv.insert("degrade.motion_size".into(), cfg.motion_size.to_string());
    kv.insert("degrade.scale".into(), cfg.scale.to_string());
    kv.insert("degrade.noise_sigma".into(), cfg.noise_sigma.to_string());
    kv.insert("degrade.seed".into(), cfg.seed.to_string());
    kv.insert(
        "degrade.downsample".into(),
        match cfg.downsample {
            DownsampleMode::Bicubic => "bicubic".to_string(),
            DownsampleMode::Stride => "stride".to_string(),
        },
    );
    kv
}

fn apply_degrade_key(cfg: &mut DegradeSettings, key: &str, v: &str) -> Result<()> {
    match key {
        "degrade.kernel" => {
            if !matches!(v, "delta" | "gaussian" | "motion" | "gaussian+motion") {
                return Err(Error::Config(format!("{key}: unknown kernel '{v}'")));
            }
            cfg.kernel = v.to_string();
        }
        "degrade.sigma" => cfg.sigma = parse_typed(key, v, "number")?,
        "degrade.kernel_size" => cfg.kernel_size = parse_typed(key, v, "integer")?,
        "degrade.motion_length" => cfg.motion_length = parse_typed(key, v, "number")?,
        "degrade.motion_angle" => cfg.motion_angle = parse_typed(key, v, "number")?,
        "degrade.motion_size" => cfg.motion_size = parse_typed(key, v, "integer")?,
        "degrade.scale" => cfg.scale = parse_typed(key, v, "integer")?,
        "degrade.noise_sigma" => cfg.noise_sigma = parse_typed(key, v, "number")?,
        "degrade.seed" => cfg.seed = parse_typed(key, v, "integer")?,
        "degrade.downsample" => {
            cfg.downsample = match v {
                "bicubic" => DownsampleMode::Bicubic,
                "stride" => DownsampleMode::Stride,
                _ => {
                    return Err(Error::Config(format!(
                        "{key}: expected bicubic/stride, got '{v}'"
                    )))
                }
            }
        }
        _ => return Err(Error::Config(format!("unknown key '{key}'"))),
    }
    Ok(())
}

/// A full run configuration: model, training, degradation, evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub degrade: DegradeSettings,
    /// Metric border crop; defaults to the scale when unset.
    pub eval_border_crop: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            degrade: DegradeSettings::default(),
            eval_border_crop: None,
        }
    }
}

impl RunConfig {
    /// Small model and short schedule for desk-scale runs.
    pub fn preset_tiny() -> Self {
        RunConfig {
            model: ModelConfig {
                scale: 4,
                channels: 16,
                decoder_blocks: 2,
                heads: 2,
                window_size: 4,
                ..ModelConfig::default()
            },
            train: TrainConfig::preset_tiny(),
            degrade: DegradeSettings::preset_mini(),
            eval_border_crop: None,
        }
    }

    /// The published hyperparameter schema (defaults otherwise).
    pub fn preset_paper() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::preset_paper(),
            degrade: DegradeSettings::preset_mini(),
            eval_border_crop: None,
        }
    }

    /// Overlay `key = value` text onto this configuration. Every key is
    /// validated against the schema; unknown keys are rejected by name.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let kv = parse_kv(text)?;
        for (key, v) in &kv {
            if key.starts_with("model.") {
                apply_model_key(&mut self.model, key, v)?;
            } else if key.starts_with("train.") {
                apply_train_key(&mut self.train, key, v)?;
            } else if key.starts_with("degrade.") {
                apply_degrade_key(&mut self.degrade, key, v)?;
            } else if key == "eval.border_crop" {
                self.eval_border_crop = Some(parse_typed(key, v, "integer")?);
            } else {
                return Err(Error::Config(format!("unknown key '{key}'")));
            }
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>, base: RunConfig) -> Result<RunConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = base;
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Canonical full serialization; parsing it back reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut kv = model_to_kv(&self.model);
        kv.extend(train_to_kv(&self.train));
        kv.extend(degrade_to_kv(&self.degrade));
        if let Some(b) = self.eval_border_crop {
            kv.insert("eval.border_crop".into(), b.to_string());
        }
        serialize_kv(&kv)
    }
}
