//! Gradient-domain visualization: magnitude heatmaps and per-cell dominant
//! orientation maps for side-by-side comparison of reconstructions.

use crate::error::{Error, Result};
use crate::image::{to_luminance, Image};
use crate::tensor::reflect_index;

pub const ORIENTATION_BINS: usize = 8;
pub const CELL_SIZE: usize = 8;

/// Central-difference gradients with reflect boundary; `(gx, gy)` row-major.
pub fn finite_difference_gradients(img: &Image) -> Result<(Vec<f64>, Vec<f64>)> {
    if img.channels() != 1 {
        return Err(Error::Shape("gradients expect a single-channel image".into()));
    }
    let (h, w) = (img.height(), img.width());
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let xm = reflect_index(x as isize - 1, w);
            let xp = reflect_index(x as isize + 1, w);
            let ym = reflect_index(y as isize - 1, h);
            let yp = reflect_index(y as isize + 1, h);
            gx[y * w + x] = (img.at(y, xp, 0) - img.at(y, xm, 0)) / 2.0;
            gy[y * w + x] = (img.at(yp, x, 0) - img.at(ym, x, 0)) / 2.0;
        }
    }
    Ok((gx, gy))
}

/// Orientation bin of a gradient vector: `atan2` folded into `[0, pi)`,
/// split into [`ORIENTATION_BINS`] equal sectors. Bin 0 holds horizontal
/// gradients (vertical edges).
pub fn orientation_bin(gx: f64, gy: f64) -> usize {
    let mut theta = gy.atan2(gx);
    if theta < 0.0 {
        theta += std::f64::consts::PI;
    }
    if theta >= std::f64::consts::PI {
        theta = 0.0;
    }
    ((theta / std::f64::consts::PI * ORIENTATION_BINS as f64) as usize).min(ORIENTATION_BINS - 1)
}

/// Magnitude heatmap plus dominant-orientation cell map.
pub struct GradientViz {
    /// |∇| normalized by its maximum (all zeros for constant images).
    pub magnitude: Image,
    /// Per 8x8 cell: the magnitude-weighted dominant orientation bin,
    /// encoded as the gray level `bin / (bins - 1)`.
    pub orientation: Image,
    /// Dominant bin index per cell, row-major over cells.
    pub dominant_bins: Vec<usize>,
}

pub fn visualize_gradients(img: &Image) -> Result<GradientViz> {
    let y = to_luminance(img)?;
    let (h, w) = (y.height(), y.width());
    let (gx, gy) = finite_difference_gradients(&y)?;
    let mag: Vec<f64> = gx
        .iter()
        .zip(&gy)
        .map(|(a, b)| (a * a + b * b).sqrt())
        .collect();
    let max = mag.iter().fold(0.0_f64, |a, &b| a.max(b));
    let magnitude = Image::from_fn(h, w, format!("{}_gradmag", img.id()), |yy, xx| {
        if max == 0.0 {
            0.0
        } else {
            mag[yy * w + xx] / max
        }
    });

    let cells_y = h.div_ceil(CELL_SIZE);
    let cells_x = w.div_ceil(CELL_SIZE);
    let mut dominant_bins = Vec::with_capacity(cells_y * cells_x);
    for cy in 0..cells_y {
        for cx in 0..cells_x {
            let mut hist = [0.0; ORIENTATION_BINS];
            for y in cy * CELL_SIZE..((cy + 1) * CELL_SIZE).min(h) {
                for x in cx * CELL_SIZE..((cx + 1) * CELL_SIZE).min(w) {
                    let m = mag[y * w + x];
                    if m > 0.0 {
                        hist[orientation_bin(gx[y * w + x], gy[y * w + x])] += m;
                    }
                }
            }
            let mut best = 0;
            for (b, &v) in hist.iter().enumerate() {
                if v > hist[best] {
                    best = b;
                }
            }
            dominant_bins.push(best);
        }
    }
    let orientation = Image::from_fn(h, w, format!("{}_orient", img.id()), |yy, xx| {
        let bin = dominant_bins[(yy / CELL_SIZE) * cells_x + xx / CELL_SIZE];
        bin as f64 / (ORIENTATION_BINS - 1) as f64
    });
    Ok(GradientViz {
        magnitude,
        orientation,
        dominant_bins,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_has_zero_magnitude() {
        let img = Image::constant(16, 16, 0.4, "c");
        let viz = visualize_gradients(&img).unwrap();
        assert!(viz.magnitude.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vertical_stripes_dominated_by_horizontal_gradient_bin() {
        // Columns alternate 0/1; gradient is purely horizontal, so every
        // cell's dominant bin is bin 0.
        let img = Image::from_fn(16, 16, "stripes", |_, x| (x % 2) as f64);
        let viz = visualize_gradients(&img).unwrap();
        assert!(viz.dominant_bins.iter().all(|&b| b == 0), "{:?}", viz.dominant_bins);
        assert!(viz.orientation.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn orientation_bin_folding() {
        assert_eq!(orientation_bin(1.0, 0.0), 0);
        assert_eq!(orientation_bin(-1.0, 0.0), 0); // pi folds to 0
        assert_eq!(orientation_bin(0.0, 1.0), 4); // pi/2 is the middle bin
        assert_eq!(orientation_bin(0.0, -1.0), 4);
        assert_eq!(orientation_bin(1.0, 1.0), 2); // pi/4
    }
}
