//! Directional strip statistics and channel-wise modulation.
//!
//! For a channel plane, the width-pooled strip means are reduced to one
//! population variance per channel (vertical statistic) and likewise along
//! the other axis (horizontal statistic). The pair gates feature maps via a
//! per-channel broadcast multiply.

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

/// Per-channel directional variance statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct OrientationDescriptor {
    pub v_stats: Vec<f64>,
    pub h_stats: Vec<f64>,
}

impl OrientationDescriptor {
    pub fn channels(&self) -> usize {
        self.v_stats.len()
    }

    /// Channel gate: the sum of both directional statistics.
    pub fn gate(&self, c: usize) -> f64 {
        self.v_stats[c] + self.h_stats[c]
    }
}

/// Mean over the width axis for every row: a length-H profile per channel.
pub fn strip_mean_width(z: &FeatureMap) -> Vec<Vec<f64>> {
    let (c, h, w) = z.shape();
    let inv_w = 1.0 / w as f64;
    (0..c)
        .map(|ch| {
            let plane = z.channel(ch);
            (0..h)
                .map(|y| plane[y * w..(y + 1) * w].iter().sum::<f64>() * inv_w)
                .collect()
        })
        .collect()
}

/// Mean over the height axis for every column: a length-W profile per channel.
pub fn strip_mean_height(z: &FeatureMap) -> Vec<Vec<f64>> {
    let (c, h, w) = z.shape();
    let inv_h = 1.0 / h as f64;
    (0..c)
        .map(|ch| {
            let plane = z.channel(ch);
            (0..w)
                .map(|x| (0..h).map(|y| plane[y * w + x]).sum::<f64>() * inv_h)
                .collect()
        })
        .collect()
}

fn population_variance(profile: &[f64]) -> f64 {
    let n = profile.len() as f64;
    let mean = profile.iter().sum::<f64>() / n;
    profile.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// Vertical statistic: population variance of the width-pooled strip means.
pub fn orientation_v(z: &FeatureMap) -> Vec<f64> {
    strip_mean_width(z)
        .iter()
        .map(|profile| population_variance(profile))
        .collect()
}

/// Horizontal statistic: population variance of the height-pooled strip means.
pub fn orientation_h(z: &FeatureMap) -> Vec<f64> {
    strip_mean_height(z)
        .iter()
        .map(|profile| population_variance(profile))
        .collect()
}

/// Bundle both directional statistics.
pub fn orientation_operator(z: &FeatureMap) -> OrientationDescriptor {
    OrientationDescriptor {
        v_stats: orientation_v(z),
        h_stats: orientation_h(z),
    }
}

/// Gate `m` channel-wise by `v_stats + h_stats`.
pub fn modulate(m: &FeatureMap, desc: &OrientationDescriptor) -> Result<FeatureMap> {
    let (c, h, w) = m.shape();
    if desc.v_stats.len() != c || desc.h_stats.len() != c {
        return Err(Error::Shape(format!(
            "descriptor has {} channels, map has {c}",
            desc.v_stats.len()
        )));
    }
    let mut out = FeatureMap::zeros(c, h, w);
    for ch in 0..c {
        let g = desc.gate(ch);
        let src = m.channel(ch);
        let dst = out.channel_mut(ch);
        for (d, s) in dst.iter_mut().zip(src) {
            *d = s * g;
        }
    }
    Ok(out)
}

/// Cached intermediates for [`modulate_self_backward`].
pub struct SelfModulationCache {
    pub gate: Vec<f64>,
    row_means: Vec<Vec<f64>>,
    col_means: Vec<Vec<f64>>,
    row_avg: Vec<f64>,
    col_avg: Vec<f64>,
}

/// `m ⊙ O(m)`: modulate a map by its own orientation descriptor, keeping what
/// the backward pass needs.
pub fn modulate_self_forward(m: &FeatureMap) -> (FeatureMap, SelfModulationCache) {
    let (c, _, _) = m.shape();
    let row_means = strip_mean_width(m);
    let col_means = strip_mean_height(m);
    let row_avg: Vec<f64> = row_means
        .iter()
        .map(|p| p.iter().sum::<f64>() / p.len() as f64)
        .collect();
    let col_avg: Vec<f64> = col_means
        .iter()
        .map(|p| p.iter().sum::<f64>() / p.len() as f64)
        .collect();
    let gate: Vec<f64> = (0..c)
        .map(|ch| {
            let v = row_means[ch]
                .iter()
                .map(|a| (a - row_avg[ch]) * (a - row_avg[ch]))
                .sum::<f64>()
                / row_means[ch].len() as f64;
            let h = col_means[ch]
                .iter()
                .map(|b| (b - col_avg[ch]) * (b - col_avg[ch]))
                .sum::<f64>()
                / col_means[ch].len() as f64;
            v + h
        })
        .collect();
    let desc = OrientationDescriptor {
        v_stats: vec![0.0; c],
        h_stats: gate.clone(),
    };
    let out = modulate(m, &desc).expect("shape-matched by construction");
    (
        out,
        SelfModulationCache {
            gate,
            row_means,
            col_means,
            row_avg,
            col_avg,
        },
    )
}

/// Gradient of `m ⊙ O(m)` with respect to `m`.
///
/// The gate itself depends on `m`, so beyond the broadcast product term the
/// variance statistics contribute `(2/(H·W)) * (strip_mean - strip_avg)`.
pub fn modulate_self_backward(
    m: &FeatureMap,
    cache: &SelfModulationCache,
    grad_out: &FeatureMap,
) -> FeatureMap {
    let (c, h, w) = m.shape();
    debug_assert_eq!(grad_out.shape(), m.shape());
    let hw = (h * w) as f64;
    let mut grad = FeatureMap::zeros(c, h, w);
    for ch in 0..c {
        let g = cache.gate[ch];
        let m_plane = m.channel(ch);
        let go_plane = grad_out.channel(ch);
        // dL/d(gate_c) accumulated over the broadcast product.
        let dgate: f64 = go_plane
            .iter()
            .zip(m_plane)
            .map(|(go, mv)| go * mv)
            .sum();
        let grad_plane = grad.channel_mut(ch);
        for y in 0..h {
            let dv = 2.0 / hw * (cache.row_means[ch][y] - cache.row_avg[ch]);
            for x in 0..w {
                let dh = 2.0 / hw * (cache.col_means[ch][x] - cache.col_avg[ch]);
                grad_plane[y * w + x] = go_plane[y * w + x] * g + dgate * (dv + dh);
            }
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util;
    use rand::Rng;

    fn random_map(c: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
        let mut rng = util::rng_for(seed, "orient-test");
        FeatureMap::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random::<f64>()).collect())
            .unwrap()
    }

    #[test]
    fn strip_means_forced_cases() {
        let constant = FeatureMap::from_vec(1, 3, 4, vec![0.7; 12]).unwrap();
        assert!(strip_mean_width(&constant)[0].iter().all(|&v| (v - 0.7).abs() < 1e-15));
        assert!(strip_mean_height(&constant)[0].iter().all(|&v| (v - 0.7).abs() < 1e-15));

        // Rows [0,0] and [2,2].
        let z = FeatureMap::from_vec(1, 2, 2, vec![0.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(strip_mean_width(&z)[0], vec![0.0, 2.0]);
        assert_eq!(strip_mean_height(&z)[0], vec![1.0, 1.0]);
        assert!((orientation_v(&z)[0] - 1.0).abs() < 1e-15);
        assert!(orientation_h(&z)[0].abs() < 1e-15);
    }

    #[test]
    fn strip_means_match_bruteforce() {
        let z = random_map(3, 4, 5, 1);
        let rows = strip_mean_width(&z);
        let cols = strip_mean_height(&z);
        for c in 0..3 {
            for y in 0..4 {
                let expect: f64 = (0..5).map(|x| z.at(c, y, x)).sum::<f64>() / 5.0;
                assert!((rows[c][y] - expect).abs() < 1e-12);
            }
            for x in 0..5 {
                let expect: f64 = (0..4).map(|y| z.at(c, y, x)).sum::<f64>() / 4.0;
                assert!((cols[c][x] - expect).abs() < 1e-12);
            }
        }
        // Height pooling is width pooling of the transpose.
        let t = z.transposed();
        let rows_of_t = strip_mean_width(&t);
        for c in 0..3 {
            for (a, b) in cols[c].iter().zip(&rows_of_t[c]) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn descriptor_laws() {
        let z = random_map(2, 5, 6, 3);
        let desc = orientation_operator(&z);
        assert!(desc.v_stats.iter().all(|&v| v >= 0.0));
        assert!(desc.h_stats.iter().all(|&v| v >= 0.0));

        // Transpose symmetry.
        let t = z.transposed();
        for c in 0..2 {
            assert!((orientation_v(&t)[c] - orientation_h(&z)[c]).abs() < 1e-12);
        }

        // Shift invariance and the square scale law.
        let shifted = z.map(|v| v + 3.21);
        let scaled = z.map(|v| v * 2.5);
        for c in 0..2 {
            assert!((orientation_v(&shifted)[c] - desc.v_stats[c]).abs() < 1e-9);
            assert!(
                (orientation_v(&scaled)[c] - 2.5 * 2.5 * desc.v_stats[c]).abs()
                    < 1e-9 * desc.v_stats[c].max(1.0)
            );
        }

        // Vertical stripes: rows identical so v-stat is 0, columns alternate
        // so the h-stat is positive.
        let stripes = FeatureMap::from_vec(
            1,
            4,
            4,
            (0..16).map(|i| ((i % 4) % 2) as f64).collect(),
        )
        .unwrap();
        let d = orientation_operator(&stripes);
        assert!(d.v_stats[0].abs() < 1e-15);
        assert!(d.h_stats[0] > 0.1);
    }

    #[test]
    fn modulate_cases() {
        let m = random_map(2, 3, 3, 9);
        let zero = OrientationDescriptor {
            v_stats: vec![0.0; 2],
            h_stats: vec![0.0; 2],
        };
        assert!(modulate(&m, &zero).unwrap().data().iter().all(|&v| v == 0.0));

        let unit = OrientationDescriptor {
            v_stats: vec![1.0; 2],
            h_stats: vec![0.0; 2],
        };
        assert_eq!(modulate(&m, &unit).unwrap(), m);

        let desc = orientation_operator(&m);
        let out = modulate(&m, &desc).unwrap();
        for c in 0..2 {
            let g = desc.v_stats[c] + desc.h_stats[c];
            for y in 0..3 {
                for x in 0..3 {
                    assert!((out.at(c, y, x) - m.at(c, y, x) * g).abs() < 1e-12);
                }
            }
        }

        let bad = OrientationDescriptor {
            v_stats: vec![0.0; 3],
            h_stats: vec![0.0; 3],
        };
        assert!(modulate(&m, &bad).is_err());
    }

    #[test]
    fn self_modulation_gradient_matches_finite_differences() {
        let m = random_map(2, 4, 5, 17);
        let (_, cache) = modulate_self_forward(&m);
        // Scalar objective: weighted sum of the output.
        let weights = random_map(2, 4, 5, 18);
        let objective = |map: &FeatureMap| -> f64 {
            let (out, _) = modulate_self_forward(map);
            out.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
        };
        let grad = modulate_self_backward(&m, &cache, &weights);
        let step = 1e-6;
        for idx in 0..m.data().len() {
            let mut plus = m.clone();
            plus.data_mut()[idx] += step;
            let mut minus = m.clone();
            minus.data_mut()[idx] -= step;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * step);
            let an = grad.data()[idx];
            assert!(
                (an - fd).abs() <= 1e-6 * an.abs().max(fd.abs()).max(1.0),
                "idx {idx}: analytic {an} vs fd {fd}"
            );
        }
    }
}
