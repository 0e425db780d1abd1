//! Command-line surface: dataset synthesis, training, inference, metric
//! evaluation, and gradient-domain visualization.
//!
//! Exit codes are a stable contract: 0 success, 2 configuration, 3 I/O,
//! 4 numerical divergence, 5 checkpoint incompatibility.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::config::{DegradeSettings, RunConfig};
use crate::dataset::{build_paired_dataset, png_stems};
use crate::degrade::degrade;
use crate::error::{Error, Result};
use crate::image::{load_image, save_image, to_luminance, Image};
use crate::metrics::evaluate_pairs;
use crate::model::{forward, load_checkpoint};
use crate::train::fit;
use crate::util;
use crate::viz::visualize_gradients;

#[derive(Parser)]
#[command(
    name = "o2sr",
    version,
    about = "Orientation-operator super-resolution toolkit for grayscale radiograph-like images"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Degrade HR images into a paired LR/HR dataset
    MakeDataset(MakeDatasetArgs),
    /// Train a model on a paired dataset
    Train(TrainArgs),
    /// Super-resolve images with a trained checkpoint
    Infer(InferArgs),
    /// Compute PSNR/SSIM between SR and HR directories
    Eval(EvalArgs),
    /// Write gradient-magnitude and dominant-orientation maps
    VizGrad(VizGradArgs),
}

#[derive(Args)]
struct MakeDatasetArgs {
    /// Directory of HR PNG images
    hr_dir: PathBuf,
    /// Output dataset root (gets hr/ and lr_x<d>/)
    #[arg(long)]
    out: PathBuf,
    /// Degradation preset
    #[arg(long, value_parser = ["mini", "plus"])]
    preset: Option<String>,
    /// Run-config file with degrade.* overrides
    #[arg(long)]
    config: Option<PathBuf>,
    /// Downsampling factor override
    #[arg(long, value_parser = ["2", "4"])]
    scale: Option<String>,
    /// Base noise seed override
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset root containing hr/ and lr_x<d>/
    data_dir: PathBuf,
    /// Output directory for checkpoints and the loss log
    #[arg(long)]
    out: PathBuf,
    /// Model/training preset
    #[arg(long, value_parser = ["tiny", "paper"])]
    preset: Option<String>,
    /// Run-config file overlaying the preset
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed override (applies to both initialization and sampling)
    #[arg(long)]
    seed: Option<u64>,
    /// Model scale override
    #[arg(long, value_parser = ["2", "4"])]
    scale: Option<String>,
    /// Step budget override
    #[arg(long)]
    max_steps: Option<u64>,
    /// Resume from the latest checkpoint in --out
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct InferArgs {
    /// Trained checkpoint file
    checkpoint: PathBuf,
    /// LR PNG file or directory of PNGs
    input: PathBuf,
    /// Output directory for SR PNGs
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of SR outputs
    sr_dir: PathBuf,
    /// Directory of HR references
    hr_dir: PathBuf,
    /// Scale factor (echoed in the report; default border crop)
    #[arg(long, default_value = "4", value_parser = ["2", "4"])]
    scale: String,
    /// Output CSV path
    #[arg(long)]
    out: PathBuf,
    /// Border pixels to crop before metrics (default: scale)
    #[arg(long)]
    border_crop: Option<usize>,
}

#[derive(Args)]
struct VizGradArgs {
    /// Input images
    images: Vec<PathBuf>,
    /// Output directory for the generated maps
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Parameter(_) => 2,
        Error::Io { .. } | Error::Format(_) | Error::Shape(_) | Error::Pairing(_)
        | Error::Contract(_) => 3,
        Error::Divergence(_) => 4,
        Error::Incompatible(_) | Error::Integrity(_) => 5,
    }
}

/// Parse and dispatch; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.exit_code() == 0 { 0 } else { 2 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.cmd {
        Cmd::MakeDataset(a) => cmd_make_dataset(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Infer(a) => cmd_infer(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::VizGrad(a) => cmd_viz_grad(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn cmd_make_dataset(a: MakeDatasetArgs) -> Result<i32> {
    let mut settings = match a.preset.as_deref() {
        Some("plus") => DegradeSettings::preset_plus(),
        _ => DegradeSettings::preset_mini(),
    };
    if let Some(cfg_path) = &a.config {
        let mut rc = RunConfig {
            degrade: settings,
            ..RunConfig::default()
        };
        rc = RunConfig::from_file(cfg_path, rc)?;
        settings = rc.degrade;
    }
    if let Some(scale) = &a.scale {
        settings.scale = scale.parse().expect("validated by clap");
    }
    if let Some(seed) = a.seed {
        settings.seed = seed;
    }
    let cfg = settings.to_config()?;
    let kernel = cfg.kernel.build()?; // surface kernel parameter errors before any I/O

    let stems = png_stems(&a.hr_dir)?;
    if stems.is_empty() {
        return Err(Error::Io {
            path: a.hr_dir.clone(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no PNG files"),
        });
    }
    let hr_out = a.out.join("hr");
    let lr_out = a.out.join(format!("lr_x{}", cfg.scale));
    ensure_dir(&hr_out)?;
    ensure_dir(&lr_out)?;
    drop(kernel);

    let results = util::par_map(stems, |stem| -> (String, Result<()>) {
        let work = || -> Result<()> {
            let img = load_image(a.hr_dir.join(format!("{stem}.png")))?;
            let hr = to_luminance(&img)?;
            if hr.height() % cfg.scale != 0 || hr.width() % cfg.scale != 0 {
                return Err(Error::Shape(format!(
                    "'{stem}': {}x{} not divisible by scale {}",
                    hr.height(),
                    hr.width(),
                    cfg.scale
                )));
            }
            // Per-image seed derived from the base seed and the stem, so
            // file order and thread count never change the output.
            let mut per_image = cfg.clone();
            per_image.seed = cfg.seed ^ util::fnv1a(stem.as_bytes());
            let lr = degrade(&hr, &per_image)?;
            save_image(&hr, hr_out.join(format!("{stem}.png")))?;
            save_image(&lr, lr_out.join(format!("{stem}.png")))?;
            Ok(())
        };
        (stem.clone(), work())
    });
    let mut failures = 0;
    let mut written = 0;
    for (stem, r) in results {
        match r {
            Ok(()) => written += 1,
            Err(e) => {
                failures += 1;
                eprintln!("FAIL {stem}: {e}");
            }
        }
    }
    let manifest = a.out.join("manifest.txt");
    let full = RunConfig {
        degrade: settings.clone(),
        ..RunConfig::default()
    }
    .to_text();
    let degrade_lines: String = full
        .lines()
        .filter(|l| l.starts_with("degrade."))
        .map(|l| format!("{l}\n"))
        .collect();
    let text = format!("# per-image noise seed = degrade.seed xor fnv1a(stem)\n{degrade_lines}");
    std::fs::write(&manifest, text).map_err(|e| Error::io(&manifest, e))?;
    println!(
        "wrote {written} pairs to {} ({} failures)",
        a.out.display(),
        failures
    );
    Ok(if failures > 0 { 3 } else { 0 })
}

fn cmd_train(a: TrainArgs) -> Result<i32> {
    let mut rc = match a.preset.as_deref() {
        Some("paper") => RunConfig::preset_paper(),
        _ => RunConfig::preset_tiny(),
    };
    if let Some(cfg_path) = &a.config {
        rc = RunConfig::from_file(cfg_path, rc)?;
    }
    if let Some(seed) = a.seed {
        rc.model.seed = seed;
        rc.train.seed = seed;
    }
    if let Some(scale) = &a.scale {
        rc.model.scale = scale.parse().expect("validated by clap");
    }
    if let Some(steps) = a.max_steps {
        rc.train.max_steps = Some(steps);
        rc.train.epochs = None;
    }
    rc.model.validate()?;
    rc.train.validate()?;

    let lr_dir = a.data_dir.join(format!("lr_x{}", rc.model.scale));
    let hr_dir = a.data_dir.join("hr");
    let ds = build_paired_dataset(&lr_dir, &hr_dir, rc.model.scale)?;
    ensure_dir(&a.out)?;
    // Resolved-config manifest next to the artifacts.
    let manifest = a.out.join("train_config.txt");
    std::fs::write(&manifest, rc.to_text()).map_err(|e| Error::io(&manifest, e))?;

    let start = Instant::now();
    let report = fit(&ds, &rc.model, &rc.train, &a.out, a.resume)?;
    let elapsed = start.elapsed().as_secs_f64();
    match report.final_loss {
        Some(l) => println!(
            "trained {} steps, final loss {l:.6}, elapsed {elapsed:.1}s",
            report.steps_run
        ),
        None => println!(
            "wrote initial checkpoint only ({} steps), elapsed {elapsed:.1}s",
            report.steps_run
        ),
    }
    println!("final checkpoint: {}", report.final_checkpoint.display());
    Ok(0)
}

fn cmd_infer(a: InferArgs) -> Result<i32> {
    let ck = load_checkpoint(&a.checkpoint)?;
    ensure_dir(&a.out)?;
    let inputs: Vec<PathBuf> = if a.input.is_dir() {
        png_stems(&a.input)?
            .into_iter()
            .map(|s| a.input.join(format!("{s}.png")))
            .collect()
    } else {
        vec![a.input.clone()]
    };
    if inputs.is_empty() {
        return Err(Error::Io {
            path: a.input.clone(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no PNG files"),
        });
    }
    let results = util::par_map(inputs, |path| -> (PathBuf, Result<()>) {
        let work = || -> Result<()> {
            let lr = load_image(path)?;
            if lr.channels() != 1 {
                return Err(Error::Shape(format!(
                    "{}: expected single-channel input, got {} channels",
                    path.display(),
                    lr.channels()
                )));
            }
            let mut sr = forward(&lr, &ck.params, &ck.config)?;
            sr.set_id(lr.id().to_string());
            save_image(&sr, a.out.join(format!("{}.png", lr.id())))
        };
        (path.clone(), work())
    });
    let mut failures = 0;
    let mut written = 0;
    for (path, r) in results {
        match r {
            Ok(()) => written += 1,
            Err(e) => {
                failures += 1;
                eprintln!("FAIL {}: {e}", path.display());
            }
        }
    }
    println!("wrote {written} SR images to {} ({failures} failures)", a.out.display());
    Ok(if failures > 0 { 3 } else { 0 })
}

fn cmd_eval(a: EvalArgs) -> Result<i32> {
    let scale: usize = a.scale.parse().expect("validated by clap");
    let border = a.border_crop.unwrap_or(scale);
    let report = evaluate_pairs(&a.sr_dir, &a.hr_dir, scale, border)?;
    for (stem, reason) in &report.failures {
        eprintln!("FAIL {stem}: {reason}");
    }
    if report.records.is_empty() {
        eprintln!("error: no evaluable pairs");
        return Ok(3);
    }
    if let Some(parent) = a.out.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    std::fs::write(&a.out, report.to_csv()).map_err(|e| Error::io(&a.out, e))?;
    let psnr = if report.mean_psnr.is_infinite() {
        "inf".to_string()
    } else {
        format!("{:.4}", report.mean_psnr)
    };
    println!(
        "AGGREGATE psnr_db={psnr} ssim={:.6} ({} images, border_crop={border})",
        report.mean_ssim,
        report.records.len()
    );
    Ok(0)
}

fn cmd_viz_grad(a: VizGradArgs) -> Result<i32> {
    if a.images.is_empty() {
        return Err(Error::Config("viz-grad needs at least one image".into()));
    }
    ensure_dir(&a.out)?;
    let results = util::par_map(a.images.clone(), |path| -> (PathBuf, Result<()>) {
        let work = || -> Result<()> {
            let img = load_image(path)?;
            let viz = visualize_gradients(&img)?;
            save_image(&viz.magnitude, a.out.join(format!("{}_gradmag.png", img.id())))?;
            save_image(&viz.orientation, a.out.join(format!("{}_orient.png", img.id())))?;
            Ok(())
        };
        (path.clone(), work())
    });
    let mut failures = 0;
    let mut written = 0;
    for (path, r) in results {
        match r {
            Ok(()) => written += 2,
            Err(e) => {
                failures += 1;
                eprintln!("FAIL {}: {e}", path.display());
            }
        }
    }
    println!("wrote {written} maps to {} ({failures} failures)", a.out.display());
    Ok(if failures > 0 { 3 } else { 0 })
}

/// Convenience used by tests and the Python bindings: generate `n` synthetic
/// HR images into a directory.
pub fn write_synthetic_hr(dir: &Path, n: usize, size: usize, seed: u64) -> Result<Vec<String>> {
    ensure_dir(dir)?;
    let mut stems = Vec::with_capacity(n);
    for i in 0..n {
        let img: Image = crate::synth::synthetic_radiograph(size, size, seed + i as u64);
        let stem = format!("synth{i:03}");
        save_image(&img, dir.join(format!("{stem}.png")))?;
        stems.push(stem);
    }
    Ok(stems)
}
