//! Full-reference quality metrics on the luminance channel.

use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{load_image, to_luminance, Image};

/// `10·log10(peak² / MSE)`; `+inf` when the images are identical.
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    if a.height() != b.height() || a.width() != b.width() || a.channels() != b.channels() {
        return Err(Error::Shape(format!(
            "psnr expects matching dims, got {}x{}x{} vs {}x{}x{}",
            a.height(),
            a.width(),
            a.channels(),
            b.height(),
            b.width(),
            b.channels()
        )));
    }
    if !(peak.is_finite() && peak > 0.0) {
        return Err(Error::Parameter(format!("peak {peak} must be positive")));
    }
    let n = a.data().len() as f64;
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// 11x11 Gaussian window with sigma 1.5, normalized.
fn ssim_window() -> [f64; 121] {
    let mut w = [0.0; 121];
    let sigma = 1.5;
    let mut sum = 0.0;
    for y in 0..11 {
        for x in 0..11 {
            let dy = y as f64 - 5.0;
            let dx = x as f64 - 5.0;
            let v = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
            w[y * 11 + x] = v;
            sum += v;
        }
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Mean local SSIM over all positions where the full 11x11 window fits.
/// Inputs are single-channel unit-range images of identical size, at least
/// 11 pixels on each side. Constants are K1 = 0.01, K2 = 0.03, peak 1.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if a.channels() != 1 || b.channels() != 1 {
        return Err(Error::Shape("ssim expects single-channel images".into()));
    }
    let (h, w) = (a.height(), a.width());
    if b.height() != h || b.width() != w {
        return Err(Error::Shape(format!(
            "ssim expects matching dims, got {h}x{w} vs {}x{}",
            b.height(),
            b.width()
        )));
    }
    if h < 11 || w < 11 {
        return Err(Error::Shape(format!("ssim needs dims >= 11, got {h}x{w}")));
    }
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let win = ssim_window();
    let mut total = 0.0;
    let mut count = 0usize;
    for cy in 0..=(h - 11) {
        for cx in 0..=(w - 11) {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            let mut aa = 0.0;
            let mut bb = 0.0;
            let mut ab = 0.0;
            for y in 0..11 {
                for x in 0..11 {
                    let wv = win[y * 11 + x];
                    let va = a.at(cy + y, cx + x, 0);
                    let vb = b.at(cy + y, cx + x, 0);
                    mu_a += wv * va;
                    mu_b += wv * vb;
                    aa += wv * va * va;
                    bb += wv * vb * vb;
                    ab += wv * va * vb;
                }
            }
            let var_a = aa - mu_a * mu_a;
            let var_b = bb - mu_b * mu_b;
            let cov = ab - mu_a * mu_b;
            let s = ((2.0 * mu_a * mu_b + C1) * (2.0 * cov + C2))
                / ((mu_a * mu_a + mu_b * mu_b + C1) * (var_a + var_b + C2));
            total += s;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// One evaluated image.
#[derive(Debug, Clone)]
pub struct MetricRecord {
    pub image_id: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Per-image records plus aggregates and the evaluation protocol echo.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub records: Vec<MetricRecord>,
    /// Mean PSNR over records with finite PSNR; `+inf` if none are finite.
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub scale: usize,
    pub border_crop: usize,
    /// Stems that failed, with the reason; evaluation continues past them.
    pub failures: Vec<(String, String)>,
}

impl MetricReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image_id,psnr_db,ssim\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{:.6}\n",
                r.image_id,
                fmt_psnr(r.psnr_db),
                r.ssim
            ));
        }
        out.push_str(&format!(
            "AGGREGATE,{},{:.6}\n",
            fmt_psnr(self.mean_psnr),
            self.mean_ssim
        ));
        out
    }
}

fn fmt_psnr(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.4}")
    }
}

/// Compare a single pair on the luminance channel after cropping
/// `border_crop` pixels from every edge.
pub fn evaluate_pair(sr: &Image, hr: &Image, border_crop: usize) -> Result<MetricRecord> {
    let sr_y = to_luminance(sr)?;
    let hr_y = to_luminance(hr)?;
    if sr_y.height() != hr_y.height() || sr_y.width() != hr_y.width() {
        return Err(Error::Shape(format!(
            "'{}': sr {}x{} vs hr {}x{}",
            hr.id(),
            sr_y.height(),
            sr_y.width(),
            hr_y.height(),
            hr_y.width()
        )));
    }
    let (sr_y, hr_y) = if border_crop > 0 {
        (
            sr_y.crop_border(border_crop)?,
            hr_y.crop_border(border_crop)?,
        )
    } else {
        (sr_y, hr_y)
    };
    Ok(MetricRecord {
        image_id: hr.id().to_string(),
        psnr_db: psnr(&sr_y, &hr_y, 1.0)?,
        ssim: ssim(&sr_y, &hr_y)?,
    })
}

fn aggregate(records: &[MetricRecord]) -> (f64, f64) {
    let finite: Vec<f64> = records
        .iter()
        .map(|r| r.psnr_db)
        .filter(|v| v.is_finite())
        .collect();
    let mean_psnr = if finite.is_empty() {
        f64::INFINITY
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    };
    let mean_ssim = if records.is_empty() {
        0.0
    } else {
        records.iter().map(|r| r.ssim).sum::<f64>() / records.len() as f64
    };
    (mean_psnr, mean_ssim)
}

/// Evaluate every stem common to both directories; failures are recorded and
/// skipped. Records come back sorted by stem so aggregation is
/// order-independent.
pub fn evaluate_pairs(
    sr_dir: impl AsRef<Path>,
    hr_dir: impl AsRef<Path>,
    scale: usize,
    border_crop: usize,
) -> Result<MetricReport> {
    let sr_dir = sr_dir.as_ref();
    let hr_dir = hr_dir.as_ref();
    let sr_stems = crate::dataset::png_stems(sr_dir)?;
    let hr_stems = crate::dataset::png_stems(hr_dir)?;
    let mut failures = Vec::new();
    for stem in &hr_stems {
        if !sr_stems.contains(stem) {
            failures.push((stem.clone(), "missing SR counterpart".to_string()));
        }
    }
    let mut evaluable = Vec::new();
    for stem in &sr_stems {
        if !hr_stems.contains(stem) {
            failures.push((stem.clone(), "missing HR counterpart".to_string()));
        } else {
            evaluable.push(stem.clone());
        }
    }
    let results = crate::util::par_map(evaluable, |stem| {
        let result = (|| -> Result<MetricRecord> {
            let sr = load_image(sr_dir.join(format!("{stem}.png")))?;
            let hr = load_image(hr_dir.join(format!("{stem}.png")))?;
            evaluate_pair(&sr, &hr, border_crop)
        })();
        (stem.clone(), result)
    });
    let mut records = Vec::new();
    for (stem, result) in results {
        match result {
            Ok(r) => records.push(r),
            Err(e) => failures.push((stem, e.to_string())),
        }
    }
    records.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    let (mean_psnr, mean_ssim) = aggregate(&records);
    Ok(MetricReport {
        records,
        mean_psnr,
        mean_ssim,
        scale,
        border_crop,
        failures,
    })
}
