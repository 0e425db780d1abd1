//! Multi-scale feature fusion: parallel 3x3 / 5x5 / shift convolutions,
//! orientation modulation per branch, 1x1 projections, sigmoid
//! normalization, and residual summation with the shallow features.
//!
//! Forward functions are paired with explicit backward passes; the model and
//! trainer reuse these rather than maintaining a second implementation.

use crate::error::{Error, Result};
use crate::orientation::{modulate_self_backward, modulate_self_forward, SelfModulationCache};
use crate::tensor::{reflect_index, FeatureMap};

/// Weights and bias of one convolution, `out_c x in_c x k x k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvParams {
    pub fn new(in_c: usize, out_c: usize, k: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if !matches!(k, 1 | 3 | 5) {
            return Err(Error::Parameter(format!("kernel size {k} not in {{1, 3, 5}}")));
        }
        if weights.len() != out_c * in_c * k * k || bias.len() != out_c {
            return Err(Error::Shape(format!(
                "conv {out_c}x{in_c}x{k}x{k} expects {} weights and {out_c} biases",
                out_c * in_c * k * k
            )));
        }
        if weights.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Parameter("non-finite convolution parameter".into()));
        }
        Ok(ConvParams {
            in_c,
            out_c,
            k,
            weights,
            bias,
        })
    }

    pub fn zeros(in_c: usize, out_c: usize, k: usize) -> Self {
        ConvParams {
            in_c,
            out_c,
            k,
            weights: vec![0.0; out_c * in_c * k * k],
            bias: vec![0.0; out_c],
        }
    }

    pub fn n_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

fn reflect_table(n: usize, k: usize) -> Vec<usize> {
    let r = (k / 2) as isize;
    (0..n as isize)
        .flat_map(|i| (-r..=r).map(move |d| (i, d)))
        .map(|(i, d)| reflect_index(i + d, n))
        .collect()
}

/// Fixed-width correlation of one channel pair; `K` is the kernel size so
/// the inner taps unroll.
fn correlate_plane<const K: usize>(
    in_plane: &[f64],
    out_plane: &mut [f64],
    weights: &[f64],
    h: usize,
    w: usize,
    ys: &[usize],
    xs: &[usize],
) {
    let r = K / 2;
    for y in 0..h {
        let out_row = &mut out_plane[y * w..(y + 1) * w];
        for dy in 0..K {
            let row = {
                let yy = ys[y * K + dy];
                &in_plane[yy * w..(yy + 1) * w]
            };
            let wrow = &weights[dy * K..dy * K + K];
            // Interior: all horizontal taps in range.
            if w > 2 * r {
                for x in r..w - r {
                    let mut acc = 0.0;
                    let src = &row[x - r..x - r + K];
                    for dx in 0..K {
                        acc += wrow[dx] * src[dx];
                    }
                    out_row[x] += acc;
                }
            }
            // Borders via the reflect table.
            for x in (0..r.min(w)).chain(w.saturating_sub(r).max(r)..w) {
                let mut acc = 0.0;
                for dx in 0..K {
                    acc += wrow[dx] * row[xs[x * K + dx]];
                }
                out_row[x] += acc;
            }
        }
    }
}

/// Cross-correlation with reflect padding; spatial dims are preserved.
pub fn conv2d_feature(m: &FeatureMap, p: &ConvParams) -> Result<FeatureMap> {
    if m.channels() != p.in_c {
        return Err(Error::Shape(format!(
            "conv expects {} input channels, map has {}",
            p.in_c,
            m.channels()
        )));
    }
    let (_, h, w) = m.shape();
    let k = p.k;
    let mut out = FeatureMap::zeros(p.out_c, h, w);
    if k == 1 {
        // Pointwise: per-pixel matvec, no padding involved.
        for oc in 0..p.out_c {
            let out_plane = out.channel_mut(oc);
            out_plane.iter_mut().for_each(|v| *v = p.bias[oc]);
            for ic in 0..p.in_c {
                let wv = p.weights[oc * p.in_c + ic];
                for (o, i) in out_plane.iter_mut().zip(m.channel(ic)) {
                    *o += wv * i;
                }
            }
        }
        return Ok(out);
    }
    let ys = reflect_table(h, k);
    let xs = reflect_table(w, k);
    for oc in 0..p.out_c {
        out.channel_mut(oc).iter_mut().for_each(|v| *v = p.bias[oc]);
        for ic in 0..p.in_c {
            let w_base = ((oc * p.in_c) + ic) * k * k;
            let weights = &p.weights[w_base..w_base + k * k];
            let in_plane = m.channel(ic);
            let out_plane = out.channel_mut(oc);
            match k {
                3 => correlate_plane::<3>(in_plane, out_plane, weights, h, w, &ys, &xs),
                5 => correlate_plane::<5>(in_plane, out_plane, weights, h, w, &ys, &xs),
                _ => unreachable!("kernel sizes validated to 1, 3, 5"),
            }
        }
    }
    Ok(out)
}

/// Fixed-width backward of one channel pair: accumulate kernel gradients and
/// scatter input gradients.
#[allow(clippy::too_many_arguments)]
fn correlate_plane_backward<const K: usize>(
    in_plane: &[f64],
    gi_plane: &mut [f64],
    go_plane: &[f64],
    weights: &[f64],
    grad_w: &mut [f64],
    h: usize,
    w: usize,
    ys: &[usize],
    xs: &[usize],
) {
    let r = K / 2;
    for y in 0..h {
        let go_row = &go_plane[y * w..(y + 1) * w];
        for dy in 0..K {
            let yy = ys[y * K + dy];
            let in_row = &in_plane[yy * w..(yy + 1) * w];
            let wrow = &weights[dy * K..dy * K + K];
            let gw_row = &mut grad_w[dy * K..dy * K + K];
            let gi_row = &mut gi_plane[yy * w..(yy + 1) * w];
            if w > 2 * r {
                for x in r..w - r {
                    let go = go_row[x];
                    if go == 0.0 {
                        continue;
                    }
                    let src = &in_row[x - r..x - r + K];
                    let dst = &mut gi_row[x - r..x - r + K];
                    for dx in 0..K {
                        gw_row[dx] += go * src[dx];
                        dst[dx] += go * wrow[dx];
                    }
                }
            }
            for x in (0..r.min(w)).chain(w.saturating_sub(r).max(r)..w) {
                let go = go_row[x];
                if go == 0.0 {
                    continue;
                }
                for dx in 0..K {
                    let xx = xs[x * K + dx];
                    gw_row[dx] += go * in_row[xx];
                    gi_row[xx] += go * wrow[dx];
                }
            }
        }
    }
}

/// Backward pass of [`conv2d_feature`]. Accumulates into `grad_w`/`grad_b`
/// and returns the gradient with respect to the input map.
pub fn conv2d_feature_backward(
    m: &FeatureMap,
    p: &ConvParams,
    grad_out: &FeatureMap,
    grad_w: &mut [f64],
    grad_b: &mut [f64],
) -> FeatureMap {
    let (_, h, w) = m.shape();
    debug_assert_eq!(grad_out.shape(), (p.out_c, h, w));
    debug_assert_eq!(grad_w.len(), p.weights.len());
    debug_assert_eq!(grad_b.len(), p.bias.len());
    let k = p.k;
    let mut grad_in = FeatureMap::zeros(p.in_c, h, w);
    if k == 1 {
        for oc in 0..p.out_c {
            let go_plane = grad_out.channel(oc);
            grad_b[oc] += go_plane.iter().sum::<f64>();
            for ic in 0..p.in_c {
                let wv = p.weights[oc * p.in_c + ic];
                let in_plane = m.channel(ic);
                let gi_plane = grad_in.channel_mut(ic);
                let mut gw = 0.0;
                for i in 0..go_plane.len() {
                    let go = go_plane[i];
                    gw += go * in_plane[i];
                    gi_plane[i] += go * wv;
                }
                grad_w[oc * p.in_c + ic] += gw;
            }
        }
        return grad_in;
    }
    let ys = reflect_table(h, k);
    let xs = reflect_table(w, k);
    for oc in 0..p.out_c {
        let go_plane = grad_out.channel(oc);
        grad_b[oc] += go_plane.iter().sum::<f64>();
        for ic in 0..p.in_c {
            let in_plane = m.channel(ic);
            let gi_plane = grad_in.channel_mut(ic);
            let w_base = ((oc * p.in_c) + ic) * k * k;
            let weights = &p.weights[w_base..w_base + k * k];
            let gw = &mut grad_w[w_base..w_base + k * k];
            match k {
                3 => correlate_plane_backward::<3>(
                    in_plane, gi_plane, go_plane, weights, gw, h, w, &ys, &xs,
                ),
                5 => correlate_plane_backward::<5>(
                    in_plane, gi_plane, go_plane, weights, gw, h, w, &ys, &xs,
                ),
                _ => unreachable!("kernel sizes validated to 1, 3, 5"),
            }
        }
    }
    grad_in
}

/// The five fixed shift directions, in group order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShiftDir {
    Left,
    Right,
    Up,
    Down,
    Identity,
}

pub const SHIFT_ORDER: [ShiftDir; 5] = [
    ShiftDir::Left,
    ShiftDir::Right,
    ShiftDir::Up,
    ShiftDir::Down,
    ShiftDir::Identity,
];

/// Channel ranges `[start, end)` per shift group, split as evenly as
/// possible in the fixed order. Groups may be empty for small C.
pub fn shift_group_ranges(c: usize) -> [(usize, usize); 5] {
    let mut ranges = [(0, 0); 5];
    for (g, range) in ranges.iter_mut().enumerate() {
        *range = (g * c / 5, (g + 1) * c / 5);
    }
    ranges
}

fn shift_plane(src: &[f64], dst: &mut [f64], h: usize, w: usize, dir: ShiftDir) {
    match dir {
        ShiftDir::Identity => dst.copy_from_slice(src),
        ShiftDir::Left => {
            for y in 0..h {
                for x in 0..w {
                    dst[y * w + x] = if x + 1 < w { src[y * w + x + 1] } else { 0.0 };
                }
            }
        }
        ShiftDir::Right => {
            for y in 0..h {
                for x in 0..w {
                    dst[y * w + x] = if x > 0 { src[y * w + x - 1] } else { 0.0 };
                }
            }
        }
        ShiftDir::Up => {
            for y in 0..h {
                for x in 0..w {
                    dst[y * w + x] = if y + 1 < h { src[(y + 1) * w + x] } else { 0.0 };
                }
            }
        }
        ShiftDir::Down => {
            for y in 0..h {
                for x in 0..w {
                    dst[y * w + x] = if y > 0 { src[(y - 1) * w + x] } else { 0.0 };
                }
            }
        }
    }
}

fn opposite(dir: ShiftDir) -> ShiftDir {
    match dir {
        ShiftDir::Left => ShiftDir::Right,
        ShiftDir::Right => ShiftDir::Left,
        ShiftDir::Up => ShiftDir::Down,
        ShiftDir::Down => ShiftDir::Up,
        ShiftDir::Identity => ShiftDir::Identity,
    }
}

/// Apply the fixed per-group 1-pixel shifts with zero fill.
pub fn shift_channels(m: &FeatureMap) -> FeatureMap {
    let (c, h, w) = m.shape();
    let mut out = FeatureMap::zeros(c, h, w);
    for (g, &dir) in SHIFT_ORDER.iter().enumerate() {
        let (start, end) = shift_group_ranges(c)[g];
        for ch in start..end {
            // Split borrow: источник and destination are different maps.
            shift_plane(m.channel(ch), out.channel_mut(ch), h, w, dir);
        }
    }
    out
}

/// Adjoint of [`shift_channels`]: each group shifts the opposite way.
pub fn shift_channels_backward(grad: &FeatureMap) -> FeatureMap {
    let (c, h, w) = grad.shape();
    let mut out = FeatureMap::zeros(c, h, w);
    for (g, &dir) in SHIFT_ORDER.iter().enumerate() {
        let (start, end) = shift_group_ranges(c)[g];
        for ch in start..end {
            shift_plane(grad.channel(ch), out.channel_mut(ch), h, w, opposite(dir));
        }
    }
    out
}

/// Parameter-free channel-group shifts followed by a learned pointwise
/// convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftConvParams {
    pub pointwise: ConvParams,
}

impl ShiftConvParams {
    pub fn new(pointwise: ConvParams) -> Result<Self> {
        if pointwise.k != 1 {
            return Err(Error::Parameter(
                "shift convolution requires a pointwise (k = 1) kernel".into(),
            ));
        }
        Ok(ShiftConvParams { pointwise })
    }

    pub fn zeros(in_c: usize, out_c: usize) -> Self {
        ShiftConvParams {
            pointwise: ConvParams::zeros(in_c, out_c, 1),
        }
    }
}

/// Shift channel groups by their fixed offsets, then apply the pointwise
/// convolution.
pub fn shift_conv(m: &FeatureMap, p: &ShiftConvParams) -> Result<FeatureMap> {
    conv2d_feature(&shift_channels(m), &p.pointwise)
}

pub fn shift_conv_backward(
    m: &FeatureMap,
    p: &ShiftConvParams,
    grad_out: &FeatureMap,
    grad_w: &mut [f64],
    grad_b: &mut [f64],
) -> FeatureMap {
    let shifted = shift_channels(m);
    let grad_shifted = conv2d_feature_backward(&shifted, &p.pointwise, grad_out, grad_w, grad_b);
    shift_channels_backward(&grad_shifted)
}

/// Fusion branch selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Conv3,
    Conv5,
    Shift,
}

pub const BRANCH_ORDER: [Branch; 3] = [Branch::Conv3, Branch::Conv5, Branch::Shift];

/// How branch outputs are combined with the shallow features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    /// Per-branch 1x1 projection, sigmoid, summed together with `x`.
    Sum,
    /// Concatenate branches, single 1x1 projection, sigmoid; no residual.
    ConcatAll,
    /// Like `ConcatAll` plus the residual `x`.
    ConcatAllSkip,
    /// Concatenate only the 3x3 and 5x5 branches, single projection, sigmoid.
    Concat35,
}

/// Parameters of one fusion block.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub channels: usize,
    pub mode: FusionMode,
    pub branches: Vec<Branch>,
    pub conv3: Option<ConvParams>,
    pub conv5: Option<ConvParams>,
    pub shift: Option<ShiftConvParams>,
    /// Per-branch projections, used in `Sum` mode (same order as `branches`).
    pub projections: Vec<ConvParams>,
    /// Single projection over the concatenated branches, used in the
    /// `Concat*` modes.
    pub concat_projection: Option<ConvParams>,
}

impl FusionParams {
    /// All-zero parameters for the given configuration; branch list is
    /// normalized to the fixed order.
    pub fn zeros(channels: usize, mode: FusionMode, branches: &[Branch]) -> Result<Self> {
        let branches: Vec<Branch> = BRANCH_ORDER
            .iter()
            .copied()
            .filter(|b| branches.contains(b))
            .collect();
        if branches.is_empty() {
            return Err(Error::Config("fusion block with no branches enabled".into()));
        }
        if mode == FusionMode::Concat35
            && !(branches.contains(&Branch::Conv3) && branches.contains(&Branch::Conv5))
        {
            return Err(Error::Config(
                "concat_3_5 fusion requires the 3x3 and 5x5 branches".into(),
            ));
        }
        let c = channels;
        let conv3 = branches
            .contains(&Branch::Conv3)
            .then(|| ConvParams::zeros(c, c, 3));
        let conv5 = branches
            .contains(&Branch::Conv5)
            .then(|| ConvParams::zeros(c, c, 5));
        let shift = branches
            .contains(&Branch::Shift)
            .then(|| ShiftConvParams::zeros(c, c));
        let (projections, concat_projection) = match mode {
            FusionMode::Sum => (
                branches.iter().map(|_| ConvParams::zeros(c, c, 1)).collect(),
                None,
            ),
            FusionMode::ConcatAll | FusionMode::ConcatAllSkip => (
                Vec::new(),
                Some(ConvParams::zeros(c * branches.len(), c, 1)),
            ),
            FusionMode::Concat35 => (Vec::new(), Some(ConvParams::zeros(c * 2, c, 1))),
        };
        Ok(FusionParams {
            channels,
            mode,
            branches,
            conv3,
            conv5,
            shift,
            projections,
            concat_projection,
        })
    }

    /// Branches that feed the combination stage in this mode.
    pub fn combined_branches(&self) -> Vec<Branch> {
        match self.mode {
            FusionMode::Concat35 => self
                .branches
                .iter()
                .copied()
                .filter(|b| *b != Branch::Shift)
                .collect(),
            _ => self.branches.clone(),
        }
    }
}

fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

fn grad_slices(p: &mut ConvParams) -> (&mut [f64], &mut [f64]) {
    (&mut p.weights, &mut p.bias)
}

/// Cached intermediates of one fusion forward pass.
pub struct FuseCache {
    /// Per combined branch: raw branch output, modulation cache, modulated
    /// map, and the post-sigmoid map of its projection (Sum mode).
    branch_m: Vec<FeatureMap>,
    branch_selfmod: Vec<SelfModulationCache>,
    branch_zbar: Vec<FeatureMap>,
    branch_sig: Vec<FeatureMap>,
    concat_input: Option<FeatureMap>,
    concat_sig: Option<FeatureMap>,
}

fn concat_channels(maps: &[&FeatureMap]) -> FeatureMap {
    let (_, h, w) = maps[0].shape();
    let total: usize = maps.iter().map(|m| m.channels()).sum();
    let mut out = FeatureMap::zeros(total, h, w);
    let mut offset = 0;
    for m in maps {
        for c in 0..m.channels() {
            out.channel_mut(offset + c).copy_from_slice(m.channel(c));
        }
        offset += m.channels();
    }
    out
}

fn branch_forward(z: &FeatureMap, p: &FusionParams, b: Branch) -> Result<FeatureMap> {
    match b {
        Branch::Conv3 => conv2d_feature(z, p.conv3.as_ref().expect("conv3 params")),
        Branch::Conv5 => conv2d_feature(z, p.conv5.as_ref().expect("conv5 params")),
        Branch::Shift => shift_conv(z, p.shift.as_ref().expect("shift params")),
    }
}

/// Fuse features `z` with shallow features `x`.
pub fn fuse(z: &FeatureMap, x: &FeatureMap, p: &FusionParams) -> Result<FeatureMap> {
    fuse_forward(z, x, p).map(|(out, _)| out)
}

/// Forward pass keeping every intermediate needed by [`fuse_backward`].
pub fn fuse_forward(z: &FeatureMap, x: &FeatureMap, p: &FusionParams) -> Result<(FeatureMap, FuseCache)> {
    if z.shape() != x.shape() {
        return Err(Error::Shape(format!(
            "fuse expects matching shapes, got {:?} and {:?}",
            z.shape(),
            x.shape()
        )));
    }
    if z.channels() != p.channels {
        return Err(Error::Shape(format!(
            "fuse configured for {} channels, input has {}",
            p.channels,
            z.channels()
        )));
    }
    if p.branches.is_empty() {
        return Err(Error::Config("fusion block with no branches enabled".into()));
    }
    let combined = p.combined_branches();
    let mut cache = FuseCache {
        branch_m: Vec::with_capacity(combined.len()),
        branch_selfmod: Vec::with_capacity(combined.len()),
        branch_zbar: Vec::with_capacity(combined.len()),
        branch_sig: Vec::new(),
        concat_input: None,
        concat_sig: None,
    };
    for &b in &combined {
        let m = branch_forward(z, p, b)?;
        let (zbar, selfmod) = modulate_self_forward(&m);
        cache.branch_m.push(m);
        cache.branch_selfmod.push(selfmod);
        cache.branch_zbar.push(zbar);
    }
    let out = match p.mode {
        FusionMode::Sum => {
            let mut out = x.clone();
            for (i, zbar) in cache.branch_zbar.iter().enumerate() {
                let s = conv2d_feature(zbar, &p.projections[i])?;
                let sig = s.map(sigmoid);
                out = out.add(&sig);
                cache.branch_sig.push(sig);
            }
            out
        }
        FusionMode::ConcatAll | FusionMode::ConcatAllSkip | FusionMode::Concat35 => {
            let cat = concat_channels(&cache.branch_zbar.iter().collect::<Vec<_>>());
            let proj = p.concat_projection.as_ref().expect("concat projection");
            let s = conv2d_feature(&cat, proj)?;
            let sig = s.map(sigmoid);
            cache.concat_input = Some(cat);
            cache.concat_sig = Some(sig.clone());
            if p.mode == FusionMode::ConcatAllSkip {
                x.add(&sig)
            } else {
                sig
            }
        }
    };
    Ok((out, cache))
}

/// Backward pass of [`fuse_forward`]. Parameter gradients accumulate into
/// `grads` (same layout as `p`, zero-initialized by the caller); returns
/// `(grad_z, grad_x)`.
pub fn fuse_backward(
    z: &FeatureMap,
    p: &FusionParams,
    cache: &FuseCache,
    grad_out: &FeatureMap,
    grads: &mut FusionParams,
) -> (FeatureMap, FeatureMap) {
    let (c, h, w) = z.shape();
    let combined = p.combined_branches();
    let mut grad_z = FeatureMap::zeros(c, h, w);
    let grad_x = match p.mode {
        FusionMode::Sum | FusionMode::ConcatAllSkip => grad_out.clone(),
        FusionMode::ConcatAll | FusionMode::Concat35 => FeatureMap::zeros(c, h, w),
    };

    // Gradient arriving at each branch's modulated map.
    let mut zbar_grads: Vec<FeatureMap> = Vec::with_capacity(combined.len());
    match p.mode {
        FusionMode::Sum => {
            for (i, _) in combined.iter().enumerate() {
                let sig = &cache.branch_sig[i];
                let mut ds = grad_out.clone();
                for (d, s) in ds.data_mut().iter_mut().zip(sig.data()) {
                    *d *= s * (1.0 - s);
                }
                let (gw, gb) = grad_slices(&mut grads.projections[i]);
                let gz = conv2d_feature_backward(&cache.branch_zbar[i], &p.projections[i], &ds, gw, gb);
                zbar_grads.push(gz);
            }
        }
        FusionMode::ConcatAll | FusionMode::ConcatAllSkip | FusionMode::Concat35 => {
            let sig = cache.concat_sig.as_ref().expect("concat cache");
            let mut ds = grad_out.clone();
            for (d, s) in ds.data_mut().iter_mut().zip(sig.data()) {
                *d *= s * (1.0 - s);
            }
            let proj = p.concat_projection.as_ref().expect("concat projection");
            let (gw, gb) = grad_slices(grads.concat_projection.as_mut().expect("concat grads"));
            let gcat = conv2d_feature_backward(
                cache.concat_input.as_ref().expect("concat cache"),
                proj,
                &ds,
                gw,
                gb,
            );
            for i in 0..combined.len() {
                let mut slice = FeatureMap::zeros(c, h, w);
                for ch in 0..c {
                    slice
                        .channel_mut(ch)
                        .copy_from_slice(gcat.channel(i * c + ch));
                }
                zbar_grads.push(slice);
            }
        }
    }

    for (i, &b) in combined.iter().enumerate() {
        let grad_m = modulate_self_backward(&cache.branch_m[i], &cache.branch_selfmod[i], &zbar_grads[i]);
        let gz = match b {
            Branch::Conv3 => {
                let (gw, gb) = grad_slices(grads.conv3.as_mut().expect("conv3 grads"));
                conv2d_feature_backward(z, p.conv3.as_ref().expect("conv3 params"), &grad_m, gw, gb)
            }
            Branch::Conv5 => {
                let (gw, gb) = grad_slices(grads.conv5.as_mut().expect("conv5 grads"));
                conv2d_feature_backward(z, p.conv5.as_ref().expect("conv5 params"), &grad_m, gw, gb)
            }
            Branch::Shift => {
                let (gw, gb) =
                    grad_slices(&mut grads.shift.as_mut().expect("shift grads").pointwise);
                shift_conv_backward(z, p.shift.as_ref().expect("shift params"), &grad_m, gw, gb)
            }
        };
        grad_z = grad_z.add(&gz);
    }
    (grad_z, grad_x)
}
