//! The full super-resolution model: shallow conv stem, orientation-fusion
//! encoder, window-attention transformer decoder, optional long skip, and a
//! pixel-shuffle upsampler.
//!
//! Parameters are plain `f64` tensors owned by typed structs; [`ModelParams`]
//! enumerates them in a stable named order for the optimizer and the
//! checkpoint format. Every forward stage has an explicit backward.

pub mod checkpoint;
pub mod layers;

use crate::error::{Error, Result};
use crate::fusion::{
    conv2d_feature, conv2d_feature_backward, fuse_backward, fuse_forward, Branch, ConvParams,
    FuseCache, FusionMode, FusionParams, BRANCH_ORDER,
};
use crate::image::Image;
use crate::tensor::FeatureMap;
use crate::util;
use layers::{
    crop, crop_backward, gelu_map, gelu_map_backward, global_avg_pool, layer_norm_backward,
    layer_norm_forward, pad_reflect_backward, pad_reflect_to_multiple, pixel_shuffle,
    pixel_unshuffle, window_attention_core, window_attention_core_backward, AttnCoreCache,
    LayerNormCache, LayerNormParams,
};

pub use checkpoint::{load_checkpoint, save_checkpoint, save_checkpoint_full, Checkpoint};

/// Shallow feature encoder selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderVariant {
    /// Stem only.
    None,
    /// Two 3x3 convolutions with an activation between.
    PlainCnn,
    /// Squeeze-style channel attention gate.
    Attention,
    /// Orientation-operator fusion block(s).
    Ours,
}

impl EncoderVariant {
    pub fn name(self) -> &'static str {
        match self {
            EncoderVariant::None => "none",
            EncoderVariant::PlainCnn => "plain_cnn",
            EncoderVariant::Attention => "attention",
            EncoderVariant::Ours => "ours",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(EncoderVariant::None),
            "plain_cnn" => Ok(EncoderVariant::PlainCnn),
            "attention" => Ok(EncoderVariant::Attention),
            "ours" => Ok(EncoderVariant::Ours),
            other => Err(Error::Config(format!("unknown encoder variant '{other}'"))),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub scale: usize,
    pub channels: usize,
    pub encoder: EncoderVariant,
    pub fusion_mode: FusionMode,
    pub fusion_branches: Vec<Branch>,
    pub fusion_blocks: usize,
    pub decoder_blocks: usize,
    pub heads: usize,
    pub window_size: usize,
    pub mlp_ratio: f64,
    pub skip_enabled: bool,
    pub rel_pos_bias: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            scale: 4,
            channels: 32,
            encoder: EncoderVariant::Ours,
            fusion_mode: FusionMode::Sum,
            fusion_branches: BRANCH_ORDER.to_vec(),
            fusion_blocks: 1,
            decoder_blocks: 4,
            heads: 4,
            window_size: 8,
            mlp_ratio: 2.0,
            skip_enabled: true,
            rel_pos_bias: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.scale, 2 | 4) {
            return Err(Error::Config(format!("scale {} not in {{2, 4}}", self.scale)));
        }
        if self.channels == 0 {
            return Err(Error::Config("channels must be >= 1".into()));
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.heads
            )));
        }
        if self.window_size == 0 {
            return Err(Error::Config("window size must be >= 1".into()));
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_ratio > 0.0) {
            return Err(Error::Config(format!(
                "mlp ratio {} must be positive",
                self.mlp_ratio
            )));
        }
        if self.encoder == EncoderVariant::Ours {
            if self.fusion_blocks == 0 {
                return Err(Error::Config("fusion encoder needs at least one block".into()));
            }
            if self.fusion_branches.is_empty() {
                return Err(Error::Config("fusion encoder needs at least one branch".into()));
            }
        }
        Ok(())
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.channels as f64 * self.mlp_ratio).round() as usize).max(1)
    }

    /// Hidden width of the channel-attention encoder.
    pub fn attention_hidden(&self) -> usize {
        (self.channels / 4).max(1)
    }

    pub fn rel_bias_len(&self) -> usize {
        let side = 2 * self.window_size - 1;
        side * side * self.heads
    }
}

/// Window-attention projections (all pointwise) plus the optional learned
/// relative position bias table.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub wq: ConvParams,
    pub wk: ConvParams,
    pub wv: ConvParams,
    pub wo: ConvParams,
    pub rel_bias: Option<Vec<f64>>,
}

/// Token-wise two-layer MLP, stored as pointwise convolutions.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub fc1: ConvParams,
    pub fc2: ConvParams,
}

/// One pre-norm decoder block.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderBlockParams {
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub mlp: MlpParams,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EncoderParams {
    None,
    PlainCnn { conv1: ConvParams, conv2: ConvParams },
    Attention { fc1: ConvParams, fc2: ConvParams },
    Ours { blocks: Vec<FusionParams> },
}

/// The complete ordered collection of learnable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub stem: ConvParams,
    pub encoder: EncoderParams,
    pub decoder: Vec<DecoderBlockParams>,
    pub tail_up: ConvParams,
    pub tail_out: ConvParams,
}

/// Named view of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

fn conv_shape(p: &ConvParams) -> Vec<usize> {
    vec![p.out_c, p.in_c, p.k, p.k]
}

fn branch_proj_tag(b: Branch) -> &'static str {
    match b {
        Branch::Conv3 => "proj3",
        Branch::Conv5 => "proj5",
        Branch::Shift => "projs",
    }
}

impl ModelParams {
    /// Stable (name, shape) chart in serialization order.
    pub fn tensor_entries(&self) -> Vec<TensorEntry> {
        let mut out = Vec::new();
        self.visit(|name, shape, _| {
            out.push(TensorEntry {
                name: name.to_string(),
                shape: shape.clone(),
            })
        });
        out
    }

    pub fn n_params(&self) -> usize {
        let mut n = 0;
        self.visit(|_, _, data| n += data.len());
        n
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit(|_, _, data| ok &= data.iter().all(|v| v.is_finite()));
        ok
    }

    /// Copy with every tensor zeroed; used as a gradient accumulator.
    pub fn zeroed(&self) -> ModelParams {
        let mut g = self.clone();
        g.visit_mut(|_, _, data| data.iter_mut().for_each(|v| *v = 0.0));
        g
    }

    /// Visit every tensor as `(name, shape, data)` in stable order.
    pub fn visit<F: FnMut(&str, &Vec<usize>, &Vec<f64>)>(&self, mut f: F) {
        let conv = |f: &mut F, name: &str, p: &ConvParams| {
            f(&format!("{name}.w"), &conv_shape(p), &p.weights);
            f(&format!("{name}.b"), &vec![p.out_c], &p.bias);
        };
        conv(&mut f, "stem", &self.stem);
        match &self.encoder {
            EncoderParams::None => {}
            EncoderParams::PlainCnn { conv1, conv2 } => {
                conv(&mut f, "enc.conv1", conv1);
                conv(&mut f, "enc.conv2", conv2);
            }
            EncoderParams::Attention { fc1, fc2 } => {
                conv(&mut f, "enc.att.fc1", fc1);
                conv(&mut f, "enc.att.fc2", fc2);
            }
            EncoderParams::Ours { blocks } => {
                for (i, b) in blocks.iter().enumerate() {
                    let pre = format!("enc.fuse{i}");
                    if let Some(c3) = &b.conv3 {
                        conv(&mut f, &format!("{pre}.conv3"), c3);
                    }
                    if let Some(c5) = &b.conv5 {
                        conv(&mut f, &format!("{pre}.conv5"), c5);
                    }
                    if let Some(sh) = &b.shift {
                        conv(&mut f, &format!("{pre}.shift"), &sh.pointwise);
                    }
                    for (bi, proj) in b.projections.iter().enumerate() {
                        conv(&mut f, &format!("{pre}.{}", branch_proj_tag(b.branches[bi])), proj);
                    }
                    if let Some(cat) = &b.concat_projection {
                        conv(&mut f, &format!("{pre}.cat"), cat);
                    }
                }
            }
        }
        for (j, b) in self.decoder.iter().enumerate() {
            let pre = format!("dec{j}");
            let c = b.ln1.gamma.len();
            f(&format!("{pre}.ln1.g"), &vec![c], &b.ln1.gamma);
            f(&format!("{pre}.ln1.b"), &vec![c], &b.ln1.beta);
            conv(&mut f, &format!("{pre}.attn.q"), &b.attn.wq);
            conv(&mut f, &format!("{pre}.attn.k"), &b.attn.wk);
            conv(&mut f, &format!("{pre}.attn.v"), &b.attn.wv);
            conv(&mut f, &format!("{pre}.attn.o"), &b.attn.wo);
            if let Some(bias) = &b.attn.rel_bias {
                f(&format!("{pre}.attn.relbias"), &vec![bias.len()], bias);
            }
            f(&format!("{pre}.ln2.g"), &vec![c], &b.ln2.gamma);
            f(&format!("{pre}.ln2.b"), &vec![c], &b.ln2.beta);
            conv(&mut f, &format!("{pre}.mlp.fc1"), &b.mlp.fc1);
            conv(&mut f, &format!("{pre}.mlp.fc2"), &b.mlp.fc2);
        }
        conv(&mut f, "tail.up", &self.tail_up);
        conv(&mut f, "tail.out", &self.tail_out);
    }

    /// Mutable variant of [`ModelParams::visit`]; identical order.
    pub fn visit_mut<F: FnMut(&str, &Vec<usize>, &mut Vec<f64>)>(&mut self, mut f: F) {
        let conv = |f: &mut F, name: &str, p: &mut ConvParams| {
            let shape = conv_shape(p);
            let out_c = vec![p.out_c];
            f(&format!("{name}.w"), &shape, &mut p.weights);
            f(&format!("{name}.b"), &out_c, &mut p.bias);
        };
        conv(&mut f, "stem", &mut self.stem);
        match &mut self.encoder {
            EncoderParams::None => {}
            EncoderParams::PlainCnn { conv1, conv2 } => {
                conv(&mut f, "enc.conv1", conv1);
                conv(&mut f, "enc.conv2", conv2);
            }
            EncoderParams::Attention { fc1, fc2 } => {
                conv(&mut f, "enc.att.fc1", fc1);
                conv(&mut f, "enc.att.fc2", fc2);
            }
            EncoderParams::Ours { blocks } => {
                for (i, b) in blocks.iter_mut().enumerate() {
                    let pre = format!("enc.fuse{i}");
                    let branches = b.branches.clone();
                    if let Some(c3) = &mut b.conv3 {
                        conv(&mut f, &format!("{pre}.conv3"), c3);
                    }
                    if let Some(c5) = &mut b.conv5 {
                        conv(&mut f, &format!("{pre}.conv5"), c5);
                    }
                    if let Some(sh) = &mut b.shift {
                        conv(&mut f, &format!("{pre}.shift"), &mut sh.pointwise);
                    }
                    for (bi, proj) in b.projections.iter_mut().enumerate() {
                        conv(&mut f, &format!("{pre}.{}", branch_proj_tag(branches[bi])), proj);
                    }
                    if let Some(cat) = &mut b.concat_projection {
                        conv(&mut f, &format!("{pre}.cat"), cat);
                    }
                }
            }
        }
        for (j, b) in self.decoder.iter_mut().enumerate() {
            let pre = format!("dec{j}");
            let c = vec![b.ln1.gamma.len()];
            f(&format!("{pre}.ln1.g"), &c, &mut b.ln1.gamma);
            f(&format!("{pre}.ln1.b"), &c, &mut b.ln1.beta);
            conv(&mut f, &format!("{pre}.attn.q"), &mut b.attn.wq);
            conv(&mut f, &format!("{pre}.attn.k"), &mut b.attn.wk);
            conv(&mut f, &format!("{pre}.attn.v"), &mut b.attn.wv);
            conv(&mut f, &format!("{pre}.attn.o"), &mut b.attn.wo);
            if let Some(bias) = &mut b.attn.rel_bias {
                let len = vec![bias.len()];
                f(&format!("{pre}.attn.relbias"), &len, bias);
            }
            f(&format!("{pre}.ln2.g"), &c, &mut b.ln2.gamma);
            f(&format!("{pre}.ln2.b"), &c, &mut b.ln2.beta);
            conv(&mut f, &format!("{pre}.mlp.fc1"), &mut b.mlp.fc1);
            conv(&mut f, &format!("{pre}.mlp.fc2"), &mut b.mlp.fc2);
        }
        conv(&mut f, "tail.up", &mut self.tail_up);
        conv(&mut f, "tail.out", &mut self.tail_out);
    }
}

fn init_conv(in_c: usize, out_c: usize, k: usize, seed: u64, name: &str) -> ConvParams {
    use rand::Rng;
    let mut rng = util::rng_for(seed, name);
    let s = 1.0 / ((in_c * k * k) as f64).sqrt();
    let weights = (0..out_c * in_c * k * k)
        .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * s)
        .collect();
    ConvParams {
        in_c,
        out_c,
        k,
        weights,
        bias: vec![0.0; out_c],
    }
}

/// Build a freshly initialized parameter set. Initialization is
/// deterministic in `cfg.seed` and independent per tensor, so two variants
/// sharing a tensor name get bitwise-identical values for it.
pub fn build_model(cfg: &ModelConfig) -> Result<ModelParams> {
    cfg.validate()?;
    let c = cfg.channels;
    let seed = cfg.seed;
    let stem = init_conv(1, c, 3, seed, "stem.w");
    let encoder = match cfg.encoder {
        EncoderVariant::None => EncoderParams::None,
        EncoderVariant::PlainCnn => EncoderParams::PlainCnn {
            conv1: init_conv(c, c, 3, seed, "enc.conv1.w"),
            conv2: init_conv(c, c, 3, seed, "enc.conv2.w"),
        },
        EncoderVariant::Attention => EncoderParams::Attention {
            fc1: init_conv(c, cfg.attention_hidden(), 1, seed, "enc.att.fc1.w"),
            fc2: init_conv(cfg.attention_hidden(), c, 1, seed, "enc.att.fc2.w"),
        },
        EncoderVariant::Ours => {
            let mut blocks = Vec::with_capacity(cfg.fusion_blocks);
            for i in 0..cfg.fusion_blocks {
                let mut b = FusionParams::zeros(c, cfg.fusion_mode, &cfg.fusion_branches)?;
                let pre = format!("enc.fuse{i}");
                if b.conv3.is_some() {
                    b.conv3 = Some(init_conv(c, c, 3, seed, &format!("{pre}.conv3.w")));
                }
                if b.conv5.is_some() {
                    b.conv5 = Some(init_conv(c, c, 5, seed, &format!("{pre}.conv5.w")));
                }
                if let Some(sh) = &mut b.shift {
                    sh.pointwise = init_conv(c, c, 1, seed, &format!("{pre}.shift.w"));
                }
                let branches = b.branches.clone();
                for (bi, proj) in b.projections.iter_mut().enumerate() {
                    let tag = branch_proj_tag(branches[bi]);
                    *proj = init_conv(c, c, 1, seed, &format!("{pre}.{tag}.w"));
                }
                if let Some(cat) = &b.concat_projection {
                    let in_c = cat.in_c;
                    b.concat_projection =
                        Some(init_conv(in_c, c, 1, seed, &format!("{pre}.cat.w")));
                }
                blocks.push(b);
            }
            EncoderParams::Ours { blocks }
        }
    };
    let decoder = (0..cfg.decoder_blocks)
        .map(|j| {
            let pre = format!("dec{j}");
            DecoderBlockParams {
                ln1: LayerNormParams::identity(c),
                attn: AttentionParams {
                    wq: init_conv(c, c, 1, seed, &format!("{pre}.attn.q.w")),
                    wk: init_conv(c, c, 1, seed, &format!("{pre}.attn.k.w")),
                    wv: init_conv(c, c, 1, seed, &format!("{pre}.attn.v.w")),
                    wo: init_conv(c, c, 1, seed, &format!("{pre}.attn.o.w")),
                    rel_bias: cfg.rel_pos_bias.then(|| vec![0.0; cfg.rel_bias_len()]),
                },
                ln2: LayerNormParams::identity(c),
                mlp: MlpParams {
                    fc1: init_conv(c, cfg.mlp_hidden(), 1, seed, &format!("{pre}.mlp.fc1.w")),
                    fc2: init_conv(cfg.mlp_hidden(), c, 1, seed, &format!("{pre}.mlp.fc2.w")),
                },
            }
        })
        .collect();
    let d2 = cfg.scale * cfg.scale;
    Ok(ModelParams {
        stem,
        encoder,
        decoder,
        tail_up: init_conv(c, c * d2, 3, seed, "tail.up.w"),
        tail_out: init_conv(c, 1, 3, seed, "tail.out.w"),
    })
}

/// Standalone windowed multi-head self-attention over a feature map whose
/// dims are already window multiples.
pub fn window_attention(
    m: &FeatureMap,
    p: &AttentionParams,
    window_size: usize,
    heads: usize,
) -> Result<FeatureMap> {
    let (_, h, w) = m.shape();
    if h % window_size != 0 || w % window_size != 0 {
        return Err(Error::Shape(format!(
            "feature dims {h}x{w} not divisible by window size {window_size}"
        )));
    }
    let q = conv2d_feature(m, &p.wq)?;
    let k = conv2d_feature(m, &p.wk)?;
    let v = conv2d_feature(m, &p.wv)?;
    let (a, _) = window_attention_core(&q, &k, &v, window_size, heads, p.rel_bias.as_deref())?;
    conv2d_feature(&a, &p.wo)
}

pub enum EncoderCache {
    None,
    PlainCnn {
        pre_act: FeatureMap,
        act: FeatureMap,
    },
    Attention {
        gap: FeatureMap,
        pre1: FeatureMap,
        act1: FeatureMap,
        gate: FeatureMap,
    },
    Ours {
        inputs: Vec<FeatureMap>,
        caches: Vec<FuseCache>,
    },
}

pub struct BlockCache {
    ln1: LayerNormCache,
    ln1_out: FeatureMap,
    q: FeatureMap,
    k: FeatureMap,
    v: FeatureMap,
    attn: AttnCoreCache,
    attn_concat: FeatureMap,
    ln2: LayerNormCache,
    ln2_out: FeatureMap,
    fc1_out: FeatureMap,
    act: FeatureMap,
}

/// Every intermediate of one forward pass, consumed by [`backward_map`].
pub struct ForwardCache {
    pub input: FeatureMap,
    h: usize,
    w: usize,
    hp: usize,
    wp: usize,
    padded: FeatureMap,
    enc: EncoderCache,
    blocks: Vec<BlockCache>,
    skip_out: FeatureMap,
    shuf_out: FeatureMap,
}

/// Run the model on a 1×H×W map, returning the raw (unclamped) 1×dH×dW
/// output and the cache.
pub fn forward_map(
    lr: &FeatureMap,
    p: &ModelParams,
    cfg: &ModelConfig,
) -> Result<(FeatureMap, ForwardCache)> {
    if lr.channels() != 1 {
        return Err(Error::Shape(format!(
            "model input must be single-channel, got {}",
            lr.channels()
        )));
    }
    let (_, h, w) = lr.shape();
    let stem_out = conv2d_feature(lr, &p.stem)?;
    let padded = pad_reflect_to_multiple(&stem_out, cfg.window_size);
    let (_, hp, wp) = padded.shape();

    // Encoder.
    let (enc_out, enc_cache) = match &p.encoder {
        EncoderParams::None => (padded.clone(), EncoderCache::None),
        EncoderParams::PlainCnn { conv1, conv2 } => {
            let pre_act = conv2d_feature(&padded, conv1)?;
            let act = gelu_map(&pre_act);
            let out = conv2d_feature(&act, conv2)?;
            (out, EncoderCache::PlainCnn { pre_act, act })
        }
        EncoderParams::Attention { fc1, fc2 } => {
            let gap = global_avg_pool(&padded);
            let pre1 = conv2d_feature(&gap, fc1)?;
            let act1 = gelu_map(&pre1);
            let pre2 = conv2d_feature(&act1, fc2)?;
            let gate = pre2.map(|t| 1.0 / (1.0 + (-t).exp()));
            let mut out = padded.clone();
            for c in 0..out.channels() {
                let g = gate.channel(c)[0];
                for v in out.channel_mut(c) {
                    *v *= g;
                }
            }
            (
                out,
                EncoderCache::Attention {
                    gap,
                    pre1,
                    act1,
                    gate,
                },
            )
        }
        EncoderParams::Ours { blocks } => {
            let mut cur = padded.clone();
            let mut inputs = Vec::with_capacity(blocks.len());
            let mut caches = Vec::with_capacity(blocks.len());
            for b in blocks {
                let (next, cache) = fuse_forward(&cur, &cur, b)?;
                inputs.push(cur);
                caches.push(cache);
                cur = next;
            }
            (cur, EncoderCache::Ours { inputs, caches })
        }
    };

    // Decoder blocks.
    let mut cur = enc_out;
    let mut blocks = Vec::with_capacity(p.decoder.len());
    for b in &p.decoder {
        let input = cur;
        let (ln1_out, ln1) = layer_norm_forward(&input, &b.ln1);
        let q = conv2d_feature(&ln1_out, &b.attn.wq)?;
        let k = conv2d_feature(&ln1_out, &b.attn.wk)?;
        let v = conv2d_feature(&ln1_out, &b.attn.wv)?;
        let (attn_concat, attn) = window_attention_core(
            &q,
            &k,
            &v,
            cfg.window_size,
            cfg.heads,
            b.attn.rel_bias.as_deref(),
        )?;
        let attn_out = conv2d_feature(&attn_concat, &b.attn.wo)?;
        let mid = input.add(&attn_out);
        let (ln2_out, ln2) = layer_norm_forward(&mid, &b.ln2);
        let fc1_out = conv2d_feature(&ln2_out, &b.mlp.fc1)?;
        let act = gelu_map(&fc1_out);
        let mlp_out = conv2d_feature(&act, &b.mlp.fc2)?;
        cur = mid.add(&mlp_out);
        blocks.push(BlockCache {
            ln1,
            ln1_out,
            q,
            k,
            v,
            attn,
            attn_concat,
            ln2,
            ln2_out,
            fc1_out,
            act,
        });
    }

    // Long skip, upsample, reconstruct.
    let skip_out = if cfg.skip_enabled {
        cur.add(&padded)
    } else {
        cur
    };
    let up_out = conv2d_feature(&skip_out, &p.tail_up)?;
    let shuf_out = pixel_shuffle(&up_out, cfg.scale)?;
    let full = conv2d_feature(&shuf_out, &p.tail_out)?;
    let out = crop(&full, cfg.scale * h, cfg.scale * w);
    Ok((
        out,
        ForwardCache {
            input: lr.clone(),
            h,
            w,
            hp,
            wp,
            padded,
            enc: enc_cache,
            blocks,
            skip_out,
            shuf_out,
        },
    ))
}

/// Accumulate parameter gradients for one forward pass into `grads`.
pub fn backward_map(
    p: &ModelParams,
    cfg: &ModelConfig,
    cache: &ForwardCache,
    grad_out: &FeatureMap,
    grads: &mut ModelParams,
) {
    let d = cfg.scale;
    // Tail, reversed.
    let grad_full = crop_backward(grad_out, d * cache.hp, d * cache.wp);
    let grad_shuf = conv2d_feature_backward(
        &cache.shuf_out,
        &p.tail_out,
        &grad_full,
        &mut grads.tail_out.weights,
        &mut grads.tail_out.bias,
    );
    let grad_up = pixel_unshuffle(&grad_shuf, d).expect("shuffle adjoint");
    let grad_skip = conv2d_feature_backward(
        &cache.skip_out,
        &p.tail_up,
        &grad_up,
        &mut grads.tail_up.weights,
        &mut grads.tail_up.bias,
    );
    let mut grad_padded_extra = FeatureMap::zeros(cfg.channels, cache.hp, cache.wp);
    if cfg.skip_enabled {
        grad_padded_extra = grad_padded_extra.add(&grad_skip);
    }

    // Decoder blocks, reversed.
    let mut grad_cur = grad_skip;
    for ((b, gb), bc) in p
        .decoder
        .iter()
        .zip(grads.decoder.iter_mut())
        .zip(cache.blocks.iter())
        .rev()
    {
        // MLP half: out = mid + fc2(gelu(fc1(ln2(mid)))).
        let g_act = conv2d_feature_backward(
            &bc.act,
            &b.mlp.fc2,
            &grad_cur,
            &mut gb.mlp.fc2.weights,
            &mut gb.mlp.fc2.bias,
        );
        let g_fc1 = gelu_map_backward(&bc.fc1_out, &g_act);
        let g_ln2_out = conv2d_feature_backward(
            &bc.ln2_out,
            &b.mlp.fc1,
            &g_fc1,
            &mut gb.mlp.fc1.weights,
            &mut gb.mlp.fc1.bias,
        );
        let g_mid_from_ln2 = layer_norm_backward(
            &b.ln2,
            &bc.ln2,
            &g_ln2_out,
            &mut gb.ln2.gamma,
            &mut gb.ln2.beta,
        );
        let grad_mid = grad_cur.add(&g_mid_from_ln2);

        // Attention half: mid = input + wo(core(q, k, v)).
        let g_concat = conv2d_feature_backward(
            &bc.attn_concat,
            &b.attn.wo,
            &grad_mid,
            &mut gb.attn.wo.weights,
            &mut gb.attn.wo.bias,
        );
        let (dq, dk, dv) = window_attention_core_backward(
            &bc.q,
            &bc.k,
            &bc.v,
            &bc.attn,
            &g_concat,
            cfg.window_size,
            cfg.heads,
            gb.attn.rel_bias.as_deref_mut(),
        );
        let mut g_ln1_out = conv2d_feature_backward(
            &bc.ln1_out,
            &b.attn.wq,
            &dq,
            &mut gb.attn.wq.weights,
            &mut gb.attn.wq.bias,
        );
        g_ln1_out = g_ln1_out.add(&conv2d_feature_backward(
            &bc.ln1_out,
            &b.attn.wk,
            &dk,
            &mut gb.attn.wk.weights,
            &mut gb.attn.wk.bias,
        ));
        g_ln1_out = g_ln1_out.add(&conv2d_feature_backward(
            &bc.ln1_out,
            &b.attn.wv,
            &dv,
            &mut gb.attn.wv.weights,
            &mut gb.attn.wv.bias,
        ));
        let g_input_from_ln1 = layer_norm_backward(
            &b.ln1,
            &bc.ln1,
            &g_ln1_out,
            &mut gb.ln1.gamma,
            &mut gb.ln1.beta,
        );
        grad_cur = grad_mid.add(&g_input_from_ln1);
    }

    // Encoder, reversed.
    let grad_padded = match (&p.encoder, &mut grads.encoder, &cache.enc) {
        (EncoderParams::None, EncoderParams::None, EncoderCache::None) => grad_cur,
        (
            EncoderParams::PlainCnn { conv1, conv2 },
            EncoderParams::PlainCnn {
                conv1: g1,
                conv2: g2,
            },
            EncoderCache::PlainCnn { pre_act, act },
        ) => {
            let g_act =
                conv2d_feature_backward(act, conv2, &grad_cur, &mut g2.weights, &mut g2.bias);
            let g_pre = gelu_map_backward(pre_act, &g_act);
            conv2d_feature_backward(&cache.padded, conv1, &g_pre, &mut g1.weights, &mut g1.bias)
        }
        (
            EncoderParams::Attention { fc1, fc2 },
            EncoderParams::Attention { fc1: gf1, fc2: gf2 },
            EncoderCache::Attention {
                gap,
                pre1,
                act1,
                gate,
            },
        ) => {
            let c = cfg.channels;
            let mut g_x = FeatureMap::zeros(c, cache.hp, cache.wp);
            let mut g_gate = FeatureMap::zeros(c, 1, 1);
            for ch in 0..c {
                let g = gate.channel(ch)[0];
                let x_plane = cache.padded.channel(ch);
                let go_plane = grad_cur.channel(ch);
                let gx_plane = g_x.channel_mut(ch);
                let mut acc = 0.0;
                for i in 0..x_plane.len() {
                    gx_plane[i] = go_plane[i] * g;
                    acc += go_plane[i] * x_plane[i];
                }
                g_gate.channel_mut(ch)[0] = acc;
            }
            let mut g_pre2 = g_gate;
            for ch in 0..c {
                let g = gate.channel(ch)[0];
                g_pre2.channel_mut(ch)[0] *= g * (1.0 - g);
            }
            let g_act1 =
                conv2d_feature_backward(act1, fc2, &g_pre2, &mut gf2.weights, &mut gf2.bias);
            let g_pre1 = gelu_map_backward(pre1, &g_act1);
            let g_gap =
                conv2d_feature_backward(gap, fc1, &g_pre1, &mut gf1.weights, &mut gf1.bias);
            let inv = 1.0 / (cache.hp * cache.wp) as f64;
            for ch in 0..c {
                let spread = g_gap.channel(ch)[0] * inv;
                for v in g_x.channel_mut(ch) {
                    *v += spread;
                }
            }
            g_x
        }
        (
            EncoderParams::Ours { blocks },
            EncoderParams::Ours { blocks: gblocks },
            EncoderCache::Ours { inputs, caches },
        ) => {
            let mut g = grad_cur;
            for i in (0..blocks.len()).rev() {
                let (gz, gx) =
                    fuse_backward(&inputs[i], &blocks[i], &caches[i], &g, &mut gblocks[i]);
                g = gz.add(&gx);
            }
            g
        }
        _ => unreachable!("gradient and cache layouts mirror the parameters"),
    };

    let grad_padded = grad_padded.add(&grad_padded_extra);
    let grad_stem_out = pad_reflect_backward(&grad_padded, cache.h, cache.w);
    conv2d_feature_backward(
        &cache.input,
        &p.stem,
        &grad_stem_out,
        &mut grads.stem.weights,
        &mut grads.stem.bias,
    );
}

/// Inference entry point: single-channel image in, `scale`-times larger
/// image out, clamped to unit range.
pub fn forward(lr: &Image, p: &ModelParams, cfg: &ModelConfig) -> Result<Image> {
    let map = lr.to_feature_map()?;
    let (out, _) = forward_map(&map, p, cfg)?;
    if !out.is_finite() {
        return Err(Error::Divergence("non-finite model output".into()));
    }
    Image::from_feature_map(&out, format!("{}_sr", lr.id()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    pub(crate) fn tiny_cfg() -> ModelConfig {
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
            seed: 11,
        }
    }

    fn random_map(c: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
        let mut rng = util::rng_for(seed, "model-test");
        FeatureMap::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random::<f64>()).collect())
            .unwrap()
    }

    #[test]
    fn build_is_deterministic_and_names_stable() {
        let cfg = tiny_cfg();
        let a = build_model(&cfg).unwrap();
        let b = build_model(&cfg).unwrap();
        assert_eq!(a, b);

        let mut names = Vec::new();
        a.visit(|n, s, d| names.push((n.to_string(), s.clone(), d.len())));
        let mut names_mut = Vec::new();
        let mut c = a.clone();
        c.visit_mut(|n, s, d| names_mut.push((n.to_string(), s.clone(), d.len())));
        assert_eq!(names, names_mut);
        for (n, s, len) in &names {
            assert_eq!(s.iter().product::<usize>(), *len, "{n}");
        }
    }

    #[test]
    fn variants_differ_only_in_encoder_entries() {
        let mut cfg = tiny_cfg();
        let ours = build_model(&cfg).unwrap();
        cfg.encoder = EncoderVariant::None;
        let none = build_model(&cfg).unwrap();

        let chart = |m: &ModelParams| {
            let mut v = Vec::new();
            m.visit(|n, s, _| v.push((n.to_string(), s.clone())));
            v
        };
        let ours_chart = chart(&ours);
        let none_chart = chart(&none);
        let non_enc = |c: &[(String, Vec<usize>)]| {
            c.iter()
                .filter(|(n, _)| !n.starts_with("enc."))
                .cloned()
                .collect::<Vec<_>>()
        };
        assert_eq!(non_enc(&ours_chart), non_enc(&none_chart));
        assert!(ours_chart.iter().any(|(n, _)| n.starts_with("enc.fuse0")));
        assert!(!none_chart.iter().any(|(n, _)| n.starts_with("enc.")));

        // Shared tensors also share values (per-tensor seeding).
        let collect = |m: &ModelParams| {
            let mut v = std::collections::HashMap::new();
            m.visit(|n, _, d| {
                v.insert(n.to_string(), d.clone());
            });
            v
        };
        let a = collect(&ours);
        let b = collect(&none);
        for (n, d) in &b {
            assert_eq!(a[n], *d, "{n}");
        }
    }

    #[test]
    fn forward_shape_contract() {
        let cfg = tiny_cfg();
        let p = build_model(&cfg).unwrap();
        let lr = random_map(1, 8, 8, 1);
        let (out, _) = forward_map(&lr, &p, &cfg).unwrap();
        assert_eq!(out.shape(), (1, 16, 16));

        // Non-multiple dims are padded internally and cropped after.
        let lr = random_map(1, 7, 10, 2);
        let (out, _) = forward_map(&lr, &p, &cfg).unwrap();
        assert_eq!(out.shape(), (1, 14, 20));
        assert!(out.is_finite());

        let (again, _) = forward_map(&lr, &p, &cfg).unwrap();
        assert_eq!(out, again);

        let bad = random_map(3, 8, 8, 3);
        assert!(forward_map(&bad, &p, &cfg).is_err());
    }

    #[test]
    fn all_encoder_variants_run() {
        for variant in [
            EncoderVariant::None,
            EncoderVariant::PlainCnn,
            EncoderVariant::Attention,
            EncoderVariant::Ours,
        ] {
            let cfg = ModelConfig {
                encoder: variant,
                ..tiny_cfg()
            };
            let p = build_model(&cfg).unwrap();
            let lr = random_map(1, 8, 8, 7);
            let (out, _) = forward_map(&lr, &p, &cfg).unwrap();
            assert_eq!(out.shape(), (1, 16, 16), "{}", variant.name());
            assert!(out.is_finite(), "{}", variant.name());
        }
    }

    #[test]
    fn zero_tail_out_conv_gives_bias_constant() {
        let cfg = tiny_cfg();
        let mut p = build_model(&cfg).unwrap();
        p.tail_out.weights.iter_mut().for_each(|v| *v = 0.0);
        p.tail_out.bias[0] = 0.125;
        let lr = random_map(1, 8, 8, 4);
        let (out, _) = forward_map(&lr, &p, &cfg).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.125));
    }

    #[test]
    fn standalone_window_attention_examples() {
        let c = 4;
        let mut id = ConvParams::zeros(c, c, 1);
        for i in 0..c {
            id.weights[i * c + i] = 1.0;
        }
        let p = AttentionParams {
            wq: id.clone(),
            wk: id.clone(),
            wv: id.clone(),
            wo: id.clone(),
            rel_bias: None,
        };
        let constant = FeatureMap::from_vec(c, 4, 4, vec![0.7; 64]).unwrap();
        let out = window_attention(&constant, &p, 2, 2).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.7).abs() < 1e-12));

        let odd = random_map(c, 5, 4, 9);
        assert!(window_attention(&odd, &p, 2, 2).is_err());
        // Head-dim mismatch.
        let m = random_map(c, 4, 4, 10);
        assert!(window_attention(&m, &p, 2, 3).is_err());
    }

    #[test]
    fn backward_matches_finite_differences_weighted_sum() {
        // Objective: <weights, forward(lr)> so d(objective)/d(output) = weights.
        for variant in [
            EncoderVariant::None,
            EncoderVariant::PlainCnn,
            EncoderVariant::Attention,
            EncoderVariant::Ours,
        ] {
            let cfg = ModelConfig {
                encoder: variant,
                rel_pos_bias: true,
                ..tiny_cfg()
            };
            let p = build_model(&cfg).unwrap();
            // Odd size exercises the pad/crop path.
            let lr = random_map(1, 5, 6, 40);
            let weights = random_map(1, 10, 12, 41);
            let objective = |p: &ModelParams| -> f64 {
                forward_map(&lr, p, &cfg)
                    .unwrap()
                    .0
                    .data()
                    .iter()
                    .zip(weights.data())
                    .map(|(a, b)| a * b)
                    .sum()
            };
            let (_, cache) = forward_map(&lr, &p, &cfg).unwrap();
            let mut grads = p.zeroed();
            backward_map(&p, &cfg, &cache, &weights, &mut grads);

            let mut analytic = std::collections::HashMap::new();
            grads.visit(|n, _, d| {
                analytic.insert(n.to_string(), d.clone());
            });
            let mut entries = Vec::new();
            p.visit(|n, _, d| entries.push((n.to_string(), d.len())));
            let h = 1e-5;
            let mut rng = util::rng_for(77, "select");
            for (name, len) in entries {
                for _ in 0..len.min(3) {
                    let idx = (rng.random::<u64>() as usize) % len;
                    let mut pp = p.clone();
                    pp.visit_mut(|n, _, d| {
                        if n == name {
                            d[idx] += h;
                        }
                    });
                    let mut pm = p.clone();
                    pm.visit_mut(|n, _, d| {
                        if n == name {
                            d[idx] -= h;
                        }
                    });
                    let fd = (objective(&pp) - objective(&pm)) / (2.0 * h);
                    let an = analytic[&name][idx];
                    assert!(
                        (an - fd).abs() <= 1e-5 * an.abs().max(fd.abs()).max(1.0),
                        "{}[{idx}] ({}): analytic {an} vs fd {fd}",
                        name,
                        variant.name()
                    );
                }
            }
        }
    }
}
