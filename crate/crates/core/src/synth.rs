//! Deterministic synthetic radiograph-like test images.
//!
//! Smooth dark background, a few bright capsule-shaped "bones" with soft
//! falloff, mild illumination gradient, and faint directional texture. Not
//! meant to fool anyone; meant to give the pipeline structured, reproducible
//! inputs at desk scale.

use rand::Rng;

use crate::image::Image;
use crate::util;

/// Distance from a point to a segment.
fn segment_distance(px: f64, py: f64, ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    ((px - cx) * (px - cx) + (py - cy) * (py - cy)).sqrt()
}

struct Capsule {
    ax: f64,
    ay: f64,
    bx: f64,
    by: f64,
    width: f64,
    brightness: f64,
}

/// Generate an `h`x`w` synthetic radiograph, fully determined by `seed`.
pub fn synthetic_radiograph(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = util::rng_for(seed, "synth.radiograph");
    let hf = h as f64;
    let wf = w as f64;
    let n_bones = 2 + (rng.random::<u64>() % 3) as usize;
    let capsules: Vec<Capsule> = (0..n_bones)
        .map(|_| {
            let ax = rng.random::<f64>() * wf;
            let ay = rng.random::<f64>() * hf;
            let angle = rng.random::<f64>() * std::f64::consts::PI;
            let len = (0.3 + 0.5 * rng.random::<f64>()) * hf.min(wf);
            Capsule {
                ax,
                ay,
                bx: ax + len * angle.cos(),
                by: ay + len * angle.sin(),
                width: (0.04 + 0.08 * rng.random::<f64>()) * hf.min(wf),
                brightness: 0.35 + 0.4 * rng.random::<f64>(),
            }
        })
        .collect();
    let grad_angle = rng.random::<f64>() * std::f64::consts::TAU;
    let (gx, gy) = (grad_angle.cos(), grad_angle.sin());
    let texture_freq = 0.15 + 0.2 * rng.random::<f64>();
    let texture_phase = rng.random::<f64>() * std::f64::consts::TAU;

    Image::from_fn(h, w, format!("synth{seed:04}"), |y, x| {
        let (xf, yf) = (x as f64, y as f64);
        let mut v = 0.06 + 0.05 * ((xf / wf) * gx + (yf / hf) * gy + 1.0) / 2.0;
        for c in &capsules {
            let d = segment_distance(xf, yf, c.ax, c.ay, c.bx, c.by);
            v += c.brightness * (-(d * d) / (2.0 * c.width * c.width)).exp();
            // Cortical rim: slightly brighter shell at the capsule edge.
            let shell = (d - c.width).abs() / (0.35 * c.width);
            v += 0.12 * c.brightness * (-(shell * shell)).exp();
        }
        v += 0.015 * (texture_freq * (xf + 2.0 * yf) + texture_phase).sin();
        v.clamp(0.0, 1.0)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_structured() {
        let a = synthetic_radiograph(48, 48, 7);
        let b = synthetic_radiograph(48, 48, 7);
        assert_eq!(a.data(), b.data());
        let c = synthetic_radiograph(48, 48, 8);
        assert_ne!(a.data(), c.data());

        // Not flat: needs real structure for SR to be meaningful.
        let mean = a.data().iter().sum::<f64>() / a.data().len() as f64;
        let var = a
            .data()
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / a.data().len() as f64;
        assert!(var > 0.005, "variance {var}");
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
