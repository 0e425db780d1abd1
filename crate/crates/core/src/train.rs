//! Deterministic training loop: weighted L1 + MSE objective, aligned patch
//! sampling, Adam, periodic checkpoints, and a plain-text loss log.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::dataset::PairedDataset;
use crate::error::{Error, Result};
use crate::image::{to_luminance, Image};
use crate::metrics;
use crate::model::{
    backward_map, build_model, forward_map, load_checkpoint, save_checkpoint_full, ModelConfig,
    ModelParams,
};
use crate::tensor::FeatureMap;
use crate::util;

/// Optimization hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// L1 weight.
    pub alpha: f64,
    /// MSE weight.
    pub beta: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// HR-side patch edge; must be divisible by the model scale.
    pub hr_patch: usize,
    /// Step budget; wins over `epochs` when both are set.
    pub max_steps: Option<u64>,
    /// Epoch budget; one epoch is `ceil(pairs / batch_size)` steps.
    pub epochs: Option<u64>,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Validate (full-image luminance PSNR) every this many steps; 0 = off.
    pub val_cadence: u64,
    /// Write a checkpoint every this many steps; 0 = initial and final only.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1.0,
            beta: 0.1,
            learning_rate: 1e-3,
            batch_size: 16,
            hr_patch: 48,
            max_steps: Some(200),
            epochs: None,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            val_cadence: 50,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Desk-scale defaults sized to finish in minutes on a CPU.
    pub fn preset_tiny() -> Self {
        TrainConfig::default()
    }

    /// The published schedule: lr 1e-5, batch 32, HR patch 96, 1000 epochs.
    pub fn preset_paper() -> Self {
        TrainConfig {
            alpha: 1.0,
            beta: 0.1,
            learning_rate: 1e-5,
            batch_size: 32,
            hr_patch: 96,
            max_steps: None,
            epochs: Some(1000),
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            val_cadence: 0,
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || (self.alpha == 0.0 && self.beta == 0.0) {
            return Err(Error::Config(
                "loss weights must be nonnegative and not both zero".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "learning rate {} must be >= 0",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.hr_patch == 0 {
            return Err(Error::Config("hr_patch must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Weighted L1 + MSE over the pixel difference.
pub fn loss(sr: &Image, hr: &Image, alpha: f64, beta: f64) -> Result<f64> {
    if sr.height() != hr.height() || sr.width() != hr.width() || sr.channels() != hr.channels() {
        return Err(Error::Shape(format!(
            "loss expects matching dims, got {}x{} vs {}x{}",
            sr.height(),
            sr.width(),
            hr.height(),
            hr.width()
        )));
    }
    Ok(loss_slices(sr.data(), hr.data(), alpha, beta))
}

fn loss_slices(sr: &[f64], hr: &[f64], alpha: f64, beta: f64) -> f64 {
    let n = sr.len() as f64;
    let mut l1 = 0.0;
    let mut l2 = 0.0;
    for (s, h) in sr.iter().zip(hr) {
        let r = s - h;
        l1 += r.abs();
        l2 += r * r;
    }
    alpha * l1 / n + beta * l2 / n
}

/// Gradient of [`loss`] with respect to `sr`, scaled by `weight`.
fn loss_grad(sr: &FeatureMap, hr: &FeatureMap, alpha: f64, beta: f64, weight: f64) -> FeatureMap {
    let n = sr.data().len() as f64;
    let mut grad = FeatureMap::zeros(sr.channels(), sr.height(), sr.width());
    for ((g, s), h) in grad.data_mut().iter_mut().zip(sr.data()).zip(hr.data()) {
        let r = s - h;
        *g = weight * (alpha * r.signum() + 2.0 * beta * r) / n;
    }
    grad
}

/// One aligned LR/HR patch pair.
pub type PatchPair = (Image, Image);

/// Draw `batch` aligned random crops; fully determined by `(seed, step)`.
/// The HR crop starts at `(r*d, c*d)` where `(r, c)` is the LR offset.
pub fn sample_patches(
    ds: &PairedDataset,
    hr_patch: usize,
    batch: usize,
    seed: u64,
    step: u64,
) -> Result<Vec<PatchPair>> {
    use rand::Rng;
    if ds.is_empty() {
        return Err(Error::Config("cannot sample from an empty dataset".into()));
    }
    let d = ds.scale;
    if hr_patch % d != 0 {
        return Err(Error::Config(format!(
            "hr_patch {hr_patch} not divisible by scale {d}"
        )));
    }
    let lr_patch = hr_patch / d;
    let mut rng = util::rng_for_step(seed, step);
    let mut out = Vec::with_capacity(batch);
    for _ in 0..batch {
        let pair = &ds.pairs[rng.random_range(0..ds.pairs.len())];
        let (lh, lw) = (pair.lr.height(), pair.lr.width());
        if lh < lr_patch || lw < lr_patch {
            return Err(Error::Parameter(format!(
                "image '{}' ({}x{} LR) is smaller than the {lr_patch}x{lr_patch} LR patch",
                pair.stem, lh, lw
            )));
        }
        let r = rng.random_range(0..=lh - lr_patch);
        let c = rng.random_range(0..=lw - lr_patch);
        let lr_crop = crop_image(&pair.lr, r, c, lr_patch, &pair.stem);
        let hr_crop = crop_image(&pair.hr, r * d, c * d, hr_patch, &pair.stem);
        out.push((lr_crop, hr_crop));
    }
    Ok(out)
}

fn crop_image(img: &Image, y0: usize, x0: usize, size: usize, stem: &str) -> Image {
    Image::from_fn(size, size, format!("{stem}@{y0},{x0}"), |y, x| {
        img.at(y0 + y, x0 + x, 0)
    })
}

/// Optimizer state: step counter and Adam moments keyed by tensor name.
#[derive(Debug, Clone, Default)]
pub struct TrainState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
    pub last_loss: Option<f64>,
}

impl TrainState {
    pub fn new(params: &ModelParams) -> Self {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        params.visit(|name, _, data| {
            m.insert(name.to_string(), vec![0.0; data.len()]);
            v.insert(name.to_string(), vec![0.0; data.len()]);
        });
        TrainState {
            step: 0,
            m,
            v,
            last_loss: None,
        }
    }

    /// Flatten moments into checkpoint extra tensors.
    pub fn to_opt_state(&self) -> BTreeMap<String, Vec<f64>> {
        let mut out = BTreeMap::new();
        for (k, v) in &self.m {
            out.insert(format!("adam.m.{k}"), v.clone());
        }
        for (k, v) in &self.v {
            out.insert(format!("adam.v.{k}"), v.clone());
        }
        out
    }

    pub fn from_opt_state(
        params: &ModelParams,
        step: u64,
        opt: &BTreeMap<String, Vec<f64>>,
    ) -> Result<Self> {
        let mut state = TrainState::new(params);
        state.step = step;
        for (name, slot) in state.m.iter_mut() {
            let key = format!("adam.m.{name}");
            let src = opt
                .get(&key)
                .ok_or_else(|| Error::Integrity(format!("checkpoint missing '{key}'")))?;
            if src.len() != slot.len() {
                return Err(Error::Integrity(format!("'{key}' has wrong length")));
            }
            slot.copy_from_slice(src);
        }
        for (name, slot) in state.v.iter_mut() {
            let key = format!("adam.v.{name}");
            let src = opt
                .get(&key)
                .ok_or_else(|| Error::Integrity(format!("checkpoint missing '{key}'")))?;
            if src.len() != slot.len() {
                return Err(Error::Integrity(format!("'{key}' has wrong length")));
            }
            slot.copy_from_slice(src);
        }
        Ok(state)
    }
}

/// One Adam update over the batch-averaged gradient of the training
/// objective. Returns the batch loss.
pub fn train_step(
    params: &mut ModelParams,
    state: &mut TrainState,
    batch: &[PatchPair],
    tcfg: &TrainConfig,
    mcfg: &ModelConfig,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let mut grads = params.zeroed();
    let mut total_loss = 0.0;
    let weight = 1.0 / batch.len() as f64;
    for (lr_img, hr_img) in batch {
        let lr = lr_img.to_feature_map()?;
        let hr = hr_img.to_feature_map()?;
        let (sr, cache) = forward_map(&lr, params, mcfg)?;
        if sr.shape() != hr.shape() {
            return Err(Error::Shape(format!(
                "model output {:?} vs hr {:?}",
                sr.shape(),
                hr.shape()
            )));
        }
        total_loss += loss_slices(sr.data(), hr.data(), tcfg.alpha, tcfg.beta) * weight;
        let grad_out = loss_grad(&sr, &hr, tcfg.alpha, tcfg.beta, weight);
        backward_map(params, mcfg, &cache, &grad_out, &mut grads);
    }
    if !total_loss.is_finite() {
        return Err(Error::Divergence(format!(
            "non-finite loss {total_loss} at step {}",
            state.step
        )));
    }
    if !grads.is_finite() {
        return Err(Error::Divergence(format!(
            "non-finite gradient at step {}",
            state.step
        )));
    }

    let t = (state.step + 1) as i32;
    let b1 = tcfg.adam_beta1;
    let b2 = tcfg.adam_beta2;
    let bias1 = 1.0 - b1.powi(t);
    let bias2 = 1.0 - b2.powi(t);
    let lr = tcfg.learning_rate;
    let eps = tcfg.adam_eps;
    let mut grad_map: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    grads.visit(|name, _, data| {
        grad_map.insert(name.to_string(), data.clone());
    });
    params.visit_mut(|name, _, theta| {
        let g = &grad_map[name];
        let m = state.m.get_mut(name).expect("moment tensor");
        let v = state.v.get_mut(name).expect("moment tensor");
        for i in 0..theta.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    });
    state.step += 1;
    state.last_loss = Some(total_loss);
    Ok(total_loss)
}

/// Mean full-image luminance PSNR of the current model over the dataset.
fn validation_psnr(ds: &PairedDataset, params: &ModelParams, mcfg: &ModelConfig) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for pair in &ds.pairs {
        let sr = crate::model::forward(&pair.lr, params, mcfg)?;
        let sr_y = to_luminance(&sr)?;
        let hr_y = to_luminance(&pair.hr)?;
        let (sr_c, hr_c) = (
            sr_y.crop_border(mcfg.scale)?,
            hr_y.crop_border(mcfg.scale)?,
        );
        let p = metrics::psnr(&sr_c, &hr_c, 1.0)?;
        if p.is_finite() {
            total += p;
            count += 1;
        }
    }
    if count == 0 {
        return Ok(f64::INFINITY);
    }
    Ok(total / count as f64)
}

/// Outcome of a [`fit`] run.
#[derive(Debug, Clone)]
pub struct FitReport {
    pub final_checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub steps_run: u64,
    pub final_loss: Option<f64>,
}

fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt_step_{step:08}.o2ck"))
}

/// Latest `ckpt_step_*.o2ck` in `dir`, by step.
pub fn latest_checkpoint(dir: &Path) -> Option<PathBuf> {
    let entries = std::fs::read_dir(dir).ok()?;
    let mut best: Option<(u64, PathBuf)> = None;
    for e in entries.flatten() {
        let name = e.file_name().to_string_lossy().into_owned();
        if let Some(step) = name
            .strip_prefix("ckpt_step_")
            .and_then(|s| s.strip_suffix(".o2ck"))
            .and_then(|s| s.parse::<u64>().ok())
        {
            if best.as_ref().map(|(b, _)| step > *b).unwrap_or(true) {
                best = Some((step, e.path()));
            }
        }
    }
    best.map(|(_, p)| p)
}

/// Run the optimization loop, writing checkpoints and a `loss.log` with one
/// `step<TAB>loss[<TAB>val_psnr]` line per step. With `resume`, the run
/// continues from the latest checkpoint in `out_dir` and the loss sequence
/// continues bit-exactly.
pub fn fit(
    ds: &PairedDataset,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    out_dir: impl AsRef<Path>,
    resume: bool,
) -> Result<FitReport> {
    mcfg.validate()?;
    tcfg.validate()?;
    if tcfg.hr_patch % mcfg.scale != 0 {
        return Err(Error::Config(format!(
            "hr_patch {} not divisible by model scale {}",
            tcfg.hr_patch, mcfg.scale
        )));
    }
    if ds.scale != mcfg.scale {
        return Err(Error::Config(format!(
            "dataset scale {} does not match model scale {}",
            ds.scale, mcfg.scale
        )));
    }
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let steps_per_epoch = (ds.len() as u64).div_ceil(tcfg.batch_size as u64);
    let total_steps = match (tcfg.max_steps, tcfg.epochs) {
        (Some(s), _) => s,
        (None, Some(e)) => e * steps_per_epoch,
        (None, None) => {
            return Err(Error::Config("neither max_steps nor epochs set".into()));
        }
    };

    let (mut params, mut state) = if resume {
        let path = latest_checkpoint(out_dir).ok_or_else(|| {
            Error::Incompatible(format!("no checkpoint to resume in {}", out_dir.display()))
        })?;
        let ck = load_checkpoint(&path)?;
        ck.ensure_compatible(mcfg)?;
        if let Some(seed) = ck.train_seed {
            if seed != tcfg.seed {
                return Err(Error::Incompatible(format!(
                    "train.seed: checkpoint has {seed}, run configured {}",
                    tcfg.seed
                )));
            }
        }
        let state = TrainState::from_opt_state(&ck.params, ck.step, &ck.opt_state)?;
        (ck.params, state)
    } else {
        let params = build_model(mcfg)?;
        let state = TrainState::new(&params);
        // Initial checkpoint so a zero-step run still leaves an artifact.
        save_checkpoint_full(
            &params,
            mcfg,
            0,
            &state.to_opt_state(),
            Some(tcfg.seed),
            checkpoint_path(out_dir, 0),
        )?;
        (params, state)
    };

    let log_path = out_dir.join("loss.log");
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;

    let mut final_loss = state.last_loss;
    while state.step < total_steps {
        let step = state.step;
        let batch = sample_patches(ds, tcfg.hr_patch, tcfg.batch_size, tcfg.seed, step)?;
        let loss_value = train_step(&mut params, &mut state, &batch, tcfg, mcfg)?;
        final_loss = Some(loss_value);
        let mut line = format!("{}\t{:.17e}", state.step, loss_value);
        if tcfg.val_cadence > 0 && state.step % tcfg.val_cadence == 0 {
            let vp = validation_psnr(ds, &params, mcfg)?;
            line.push_str(&format!("\t{vp:.6}"));
        }
        line.push('\n');
        log.write_all(line.as_bytes())
            .map_err(|e| Error::io(&log_path, e))?;
        if tcfg.checkpoint_every > 0 && state.step % tcfg.checkpoint_every == 0 {
            save_checkpoint_full(
                &params,
                mcfg,
                state.step,
                &state.to_opt_state(),
                Some(tcfg.seed),
                checkpoint_path(out_dir, state.step),
            )?;
        }
    }
    let final_path = checkpoint_path(out_dir, state.step);
    save_checkpoint_full(
        &params,
        mcfg,
        state.step,
        &state.to_opt_state(),
        Some(tcfg.seed),
        &final_path,
    )?;
    Ok(FitReport {
        final_checkpoint: final_path,
        log_path,
        steps_run: state.step,
        final_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Pair;
    use crate::fusion::{FusionMode, BRANCH_ORDER};
    use crate::model::EncoderVariant;
    use rand::Rng;

    fn tiny_mcfg() -> ModelConfig {
        ModelConfig {
            scale: 2,
            channels: 4,
            encoder: EncoderVariant::Ours,
            fusion_mode: FusionMode::Sum,
            fusion_branches: BRANCH_ORDER.to_vec(),
            fusion_blocks: 1,
            decoder_blocks: 1,
            heads: 2,
            window_size: 4,
            mlp_ratio: 2.0,
            skip_enabled: true,
            rel_pos_bias: false,
            seed: 5,
        }
    }

    fn synthetic_dataset(n: usize, hr_size: usize, scale: usize) -> PairedDataset {
        let pairs = (0..n)
            .map(|i| {
                let hr = crate::synth::synthetic_radiograph(hr_size, hr_size, i as u64);
                let cfg = crate::degrade::DegradationConfig {
                    kernel: crate::degrade::KernelSpec::Gaussian {
                        sigma: 1.0,
                        size: 5,
                    },
                    scale,
                    noise_sigma: 0.005,
                    seed: i as u64,
                    downsample_mode: crate::degrade::DownsampleMode::Bicubic,
                };
                let lr = crate::degrade::degrade(&hr, &cfg).unwrap();
                Pair {
                    stem: format!("img{i:02}"),
                    lr,
                    hr,
                }
            })
            .collect();
        PairedDataset {
            pairs,
            scale,
            lr_dir: PathBuf::new(),
            hr_dir: PathBuf::new(),
        }
    }

    #[test]
    fn loss_examples() {
        let a = Image::constant(4, 4, 0.5, "a");
        assert_eq!(loss(&a, &a, 1.0, 0.1).unwrap(), 0.0);

        let b = Image::constant(4, 4, 0.6, "b");
        // Uniform diff 0.1: 1*0.1 + 0.1*0.01 = 0.101.
        let l = loss(&b, &a, 1.0, 0.1).unwrap();
        assert!((l - 0.101).abs() < 1e-12, "{l}");

        // Homogeneity: L1 scales by s, MSE by s^2.
        let c = Image::constant(4, 4, 0.8, "c");
        let l1 = loss(&c, &a, 1.0, 0.0).unwrap();
        let l2 = loss(&c, &a, 0.0, 1.0).unwrap();
        let half = Image::constant(4, 4, 0.65, "h");
        assert!((loss(&half, &a, 1.0, 0.0).unwrap() - l1 / 2.0).abs() < 1e-12);
        assert!((loss(&half, &a, 0.0, 1.0).unwrap() - l2 / 4.0).abs() < 1e-12);

        assert!(loss(&a, &Image::constant(3, 3, 0.1, "x"), 1.0, 0.1).is_err());
    }

    #[test]
    fn patch_sampling_contract() {
        let ds = synthetic_dataset(3, 32, 2);
        // Full-size patch equals the whole pair.
        let b = sample_patches(&ds, 32, 2, 9, 0).unwrap();
        for (lr, hr) in &b {
            assert_eq!((lr.height(), lr.width()), (16, 16));
            assert_eq!((hr.height(), hr.width()), (32, 32));
        }

        // Determinism in (seed, step).
        let a1 = sample_patches(&ds, 16, 4, 7, 3).unwrap();
        let a2 = sample_patches(&ds, 16, 4, 7, 3).unwrap();
        for ((l1, h1), (l2, h2)) in a1.iter().zip(&a2) {
            assert_eq!(l1.data(), l2.data());
            assert_eq!(h1.data(), h2.data());
        }
        let a3 = sample_patches(&ds, 16, 4, 7, 4).unwrap();
        assert!(a1
            .iter()
            .zip(&a3)
            .any(|((l1, _), (l3, _))| l1.data() != l3.data()));

        // Offset alignment: every patch id records its crop origin.
        for step in 0..100 {
            let batch = sample_patches(&ds, 16, 2, 11, step).unwrap();
            for (lr, hr) in batch {
                let parse = |id: &str| -> (usize, usize) {
                    let t = id.split('@').nth(1).unwrap();
                    let (a, b) = t.split_once(',').unwrap();
                    (a.parse().unwrap(), b.parse().unwrap())
                };
                let (lr_r, lr_c) = parse(lr.id());
                let (hr_r, hr_c) = parse(hr.id());
                assert_eq!(hr_r, 2 * lr_r);
                assert_eq!(hr_c, 2 * lr_c);
            }
        }

        // Patch larger than images names the offender.
        match sample_patches(&ds, 64, 1, 0, 0) {
            Err(Error::Parameter(msg)) => assert!(msg.contains("img"), "{msg}"),
            other => panic!("expected parameter error, got {other:?}"),
        }
    }

    #[test]
    fn zero_learning_rate_is_identity_on_params() {
        let mcfg = tiny_mcfg();
        let ds = synthetic_dataset(2, 16, 2);
        let mut params = build_model(&mcfg).unwrap();
        let before = params.clone();
        let mut state = TrainState::new(&params);
        let tcfg = TrainConfig {
            learning_rate: 0.0,
            hr_patch: 8,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let batch = sample_patches(&ds, 8, 2, 0, 0).unwrap();
        let l = train_step(&mut params, &mut state, &batch, &tcfg, &mcfg).unwrap();
        assert!(l.is_finite());
        assert_eq!(params, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn identical_seeds_give_identical_loss_sequences() {
        let mcfg = tiny_mcfg();
        let ds = synthetic_dataset(2, 16, 2);
        let tcfg = TrainConfig {
            hr_patch: 8,
            batch_size: 2,
            max_steps: Some(5),
            val_cadence: 0,
            ..TrainConfig::default()
        };
        let run = || -> Vec<f64> {
            let mut params = build_model(&mcfg).unwrap();
            let mut state = TrainState::new(&params);
            (0..5)
                .map(|step| {
                    let batch = sample_patches(&ds, 8, 2, tcfg.seed, step).unwrap();
                    train_step(&mut params, &mut state, &batch, &tcfg, &mcfg).unwrap()
                })
                .collect()
        };
        let a = run();
        let b = run();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        // Module-level gradient invariant: tiny model, every tensor, 1e-4
        // relative, double precision central differences.
        let mcfg = tiny_mcfg();
        assert!(
            build_model(&mcfg).unwrap().n_params() <= 2000,
            "gradient-check model must stay small"
        );
        let ds = synthetic_dataset(1, 16, 2);
        let (lr_img, hr_img) = sample_patches(&ds, 8, 1, 3, 0).unwrap().pop().unwrap();
        let lr = lr_img.to_feature_map().unwrap();
        let hr = hr_img.to_feature_map().unwrap();
        let (alpha, beta) = (1.0, 0.1);
        let params = build_model(&mcfg).unwrap();

        let objective = |p: &ModelParams| -> f64 {
            let (sr, _) = forward_map(&lr, p, &mcfg).unwrap();
            loss_slices(sr.data(), hr.data(), alpha, beta)
        };
        let (sr, cache) = forward_map(&lr, &params, &mcfg).unwrap();
        let grad_out = loss_grad(&sr, &hr, alpha, beta, 1.0);
        let mut grads = params.zeroed();
        backward_map(&params, &mcfg, &cache, &grad_out, &mut grads);

        let mut analytic = BTreeMap::new();
        grads.visit(|n, _, d| {
            analytic.insert(n.to_string(), d.clone());
        });
        let mut entries = Vec::new();
        params.visit(|n, _, d| entries.push((n.to_string(), d.len())));
        let h = 1e-5;
        let mut rng = util::rng_for(123, "gradcheck");
        for (name, len) in entries {
            for _ in 0..len.min(4) {
                let idx = (rng.random::<u64>() as usize) % len;
                let mut pp = params.clone();
                pp.visit_mut(|n, _, d| {
                    if n == name {
                        d[idx] += h;
                    }
                });
                let mut pm = params.clone();
                pm.visit_mut(|n, _, d| {
                    if n == name {
                        d[idx] -= h;
                    }
                });
                let fd = (objective(&pp) - objective(&pm)) / (2.0 * h);
                let an = analytic[&name][idx];
                let denom = an.abs().max(fd.abs()).max(1e-6);
                assert!(
                    (an - fd).abs() / denom < 1e-4,
                    "{name}[{idx}]: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn fit_zero_steps_writes_initial_checkpoint_only() {
        let ds = synthetic_dataset(2, 16, 2);
        let mcfg = tiny_mcfg();
        let tcfg = TrainConfig {
            hr_patch: 8,
            batch_size: 2,
            max_steps: None,
            epochs: Some(0),
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let report = fit(&ds, &mcfg, &tcfg, dir.path(), false).unwrap();
        assert_eq!(report.steps_run, 0);
        let ck = load_checkpoint(&report.final_checkpoint).unwrap();
        assert_eq!(ck.step, 0);
        let log = std::fs::read_to_string(&report.log_path).unwrap();
        assert!(log.is_empty());
    }

    #[test]
    fn fit_resume_continues_bitwise() {
        let ds = synthetic_dataset(2, 16, 2);
        let mcfg = tiny_mcfg();
        let base = TrainConfig {
            hr_patch: 8,
            batch_size: 2,
            val_cadence: 0,
            checkpoint_every: 0,
            ..TrainConfig::default()
        };

        // Uninterrupted 6-step run.
        let full_dir = tempfile::tempdir().unwrap();
        let full = fit(extend(&base, 6), &ds, &mcfg, full_dir.path());
        // Interrupted at 3, then resumed to 6.
        let part_dir = tempfile::tempdir().unwrap();
        fit_steps(extend(&base, 3), &ds, &mcfg, part_dir.path(), false);
        let resumed = fit_steps(extend(&base, 6), &ds, &mcfg, part_dir.path(), true);

        let parse = |log: &str| -> Vec<(u64, f64)> {
            log.lines()
                .map(|l| {
                    let mut it = l.split('\t');
                    (
                        it.next().unwrap().parse().unwrap(),
                        it.next().unwrap().parse().unwrap(),
                    )
                })
                .collect()
        };
        let a = parse(&full);
        let b = parse(&resumed);
        assert_eq!(a.len(), 6);
        assert_eq!(b.len(), 6);
        for ((sa, la), (sb, lb)) in a.iter().zip(&b) {
            assert_eq!(sa, sb);
            assert!((la - lb).abs() < 1e-12, "step {sa}: {la} vs {lb}");
        }

        fn extend(base: &TrainConfig, steps: u64) -> TrainConfig {
            TrainConfig {
                max_steps: Some(steps),
                ..base.clone()
            }
        }
        fn fit(tcfg: TrainConfig, ds: &PairedDataset, mcfg: &ModelConfig, dir: &Path) -> String {
            fit_steps(tcfg, ds, mcfg, dir, false)
        }
        fn fit_steps(
            tcfg: TrainConfig,
            ds: &PairedDataset,
            mcfg: &ModelConfig,
            dir: &Path,
            resume: bool,
        ) -> String {
            let report = super::fit(ds, mcfg, &tcfg, dir, resume).unwrap();
            std::fs::read_to_string(report.log_path).unwrap()
        }
    }

    #[test]
    fn fit_log_val_cadence_contract() {
        let ds = synthetic_dataset(2, 16, 2);
        let mcfg = tiny_mcfg();
        let tcfg = TrainConfig {
            hr_patch: 8,
            batch_size: 2,
            max_steps: Some(6),
            val_cadence: 2,
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let report = fit(&ds, &mcfg, &tcfg, dir.path(), false).unwrap();
        let log = std::fs::read_to_string(report.log_path).unwrap();
        let lines: Vec<&str> = log.lines().collect();
        assert_eq!(lines.len(), 6);
        let with_val = lines
            .iter()
            .filter(|l| l.split('\t').count() == 3)
            .count();
        assert_eq!(with_val, 3); // steps 2, 4, 6
    }

    #[test]
    fn resume_with_mismatched_config_is_incompatible() {
        let ds = synthetic_dataset(2, 16, 2);
        let mcfg = tiny_mcfg();
        let tcfg = TrainConfig {
            hr_patch: 8,
            batch_size: 2,
            max_steps: Some(1),
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        fit(&ds, &mcfg, &tcfg, dir.path(), false).unwrap();
        let other = ModelConfig {
            channels: 8,
            heads: 2,
            ..tiny_mcfg()
        };
        assert!(matches!(
            fit(&ds, &other, &tcfg, dir.path(), true),
            Err(Error::Incompatible(_))
        ));
    }
}
