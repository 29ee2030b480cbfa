//! The denoising network.
//!
//! 1×1 embedding → optional input mask → `depth` windowed-attention blocks
//! (every second one cyclically shifted) → layer norm → 3×3 head. Each block
//! is pre-norm attention plus a pre-norm two-layer GELU MLP, both residual.
//! There is no image-level skip connection.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::{MaskPolicy, ModelConfig, TokenMode};
use super::mask::{sample_mask, sample_ratio};
use super::window::{merge_index, partition_index};
use crate::error::{Error, Result};
use crate::image::{ImageBatch, ImageTensor, CHANNELS};
use crate::noise::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::{AttentionGeometry, Conv3x3Dims, Graph, Tensor, Var};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
struct BlockLayout {
    ln1_g: usize,
    ln1_b: usize,
    qkv_w: usize,
    qkv_b: usize,
    rel_table: usize,
    proj_w: usize,
    proj_b: usize,
    ln2_g: usize,
    ln2_b: usize,
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    embed_w: usize,
    embed_b: usize,
    input_token: usize,
    attention_token: usize,
    blocks: Vec<BlockLayout>,
    norm_g: usize,
    norm_b: usize,
    head_w: usize,
    head_b: usize,
}

/// Masking state for one training forward pass.
pub struct TrainMasks<'a, R: ?Sized> {
    /// Input mask ratio for each sample of the batch.
    pub input_ratios: &'a [f64],
    pub attention_ratio: f64,
    pub token_mode: TokenMode,
    pub rng: &'a mut R,
}

/// Handles produced by [`MaskedSwin::forward`].
pub struct Forward {
    /// `[batch * H * W, 3]` reconstruction.
    pub output: Var,
    /// Graph leaves for every parameter, in [`MaskedSwin::params`] order.
    pub params: Vec<Var>,
    /// Residual stream after every attention and every MLP sub-block,
    /// on the padded grid. Empty unless requested.
    pub taps: Vec<Var>,
    /// Input mask map over the padded grid, when an input mask was applied.
    pub input_mask: Option<Vec<bool>>,
    /// Rows of the padded grid that belong to the original image, when padding was needed.
    pub crop: Option<Arc<Vec<usize>>>,
}

/// Windowed-attention denoiser with input and attention masking.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSwin<T> {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    layout: Layout,
}

struct Builder<'r, T> {
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    rng: &'r mut SeededRng,
}

impl<T: Scalar> Builder<'_, T> {
    fn add(&mut self, name: String, value: Tensor<T>) -> usize {
        self.names.push(name);
        self.params.push(value);
        self.params.len() - 1
    }

    fn zeros(&mut self, name: String, shape: &[usize]) -> usize {
        self.add(name, Tensor::zeros(shape))
    }

    fn ones(&mut self, name: String, shape: &[usize]) -> usize {
        self.add(name, Tensor::ones(shape))
    }

    /// Normal(0, std) truncated to two standard deviations.
    fn trunc_normal(&mut self, name: String, shape: &[usize]) -> usize {
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let rng = &mut *self.rng;
        let value = Tensor::from_fn(shape, |_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * INIT_STD {
                break T::of(v);
            }
        });
        self.add(name, value)
    }
}

impl<T: Scalar> MaskedSwin<T> {
    pub fn new(config: ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let hidden = config.hidden();
        let span = 2 * config.window - 1;
        let mut b = Builder { names: Vec::new(), params: Vec::new(), rng };
        let embed_w = b.trunc_normal("embed.weight".into(), &[CHANNELS, c]);
        let embed_b = b.zeros("embed.bias".into(), &[c]);
        let input_token = b.zeros("mask_token.input".into(), &[c]);
        let attention_token = b.zeros("mask_token.attention".into(), &[c]);
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let p = |s: &str| format!("blocks.{i}.{s}");
            blocks.push(BlockLayout {
                ln1_g: b.ones(p("norm1.weight"), &[c]),
                ln1_b: b.zeros(p("norm1.bias"), &[c]),
                qkv_w: b.trunc_normal(p("attn.qkv.weight"), &[c, 3 * c]),
                qkv_b: b.zeros(p("attn.qkv.bias"), &[3 * c]),
                rel_table: b.zeros(p("attn.relative_position_bias"), &[span * span, config.heads]),
                proj_w: b.trunc_normal(p("attn.proj.weight"), &[c, c]),
                proj_b: b.zeros(p("attn.proj.bias"), &[c]),
                ln2_g: b.ones(p("norm2.weight"), &[c]),
                ln2_b: b.zeros(p("norm2.bias"), &[c]),
                fc1_w: b.trunc_normal(p("mlp.fc1.weight"), &[c, hidden]),
                fc1_b: b.zeros(p("mlp.fc1.bias"), &[hidden]),
                fc2_w: b.trunc_normal(p("mlp.fc2.weight"), &[hidden, c]),
                fc2_b: b.zeros(p("mlp.fc2.bias"), &[c]),
            });
        }
        let norm_g = b.ones("norm.weight".into(), &[c]);
        let norm_b = b.zeros("norm.bias".into(), &[c]);
        let head_w = b.trunc_normal("head.weight".into(), &[9 * c, CHANNELS]);
        let head_b = b.zeros("head.bias".into(), &[CHANNELS]);
        let layout = Layout {
            embed_w,
            embed_b,
            input_token,
            attention_token,
            blocks,
            norm_g,
            norm_b,
            head_w,
            head_b,
        };
        Ok(MaskedSwin { config, names: b.names, params: b.params, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn input_token(&self) -> &Tensor<T> {
        &self.params[self.layout.input_token]
    }

    pub fn attention_token(&self) -> &Tensor<T> {
        &self.params[self.layout.attention_token]
    }

    /// Processing grid: the input size rounded up to a multiple of the window.
    pub fn padded_dims(&self, height: usize, width: usize) -> (usize, usize) {
        let m = self.config.window;
        (height.div_ceil(m) * m, width.div_ceil(m) * m)
    }

    /// Record one forward pass into `g`.
    ///
    /// With `masks == None` the pass is deterministic and mask-free. Otherwise
    /// the input mask is drawn once per sample at that sample's ratio and the
    /// attention mask is drawn independently in every block.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        batch: &ImageBatch<T>,
        mut masks: Option<TrainMasks<'_, R>>,
        keep_taps: bool,
    ) -> Result<Forward> {
        let cfg = self.config;
        let (n, h, w) = (batch.len(), batch.height(), batch.width());
        if let Some(mk) = &masks {
            if mk.input_ratios.len() != n {
                return Err(Error::Dimension(format!("{} input ratios for a batch of {n}", mk.input_ratios.len())));
            }
        }
        let (hp, wp) = self.padded_dims(h, w);
        let plane = hp * wp;
        let rows = n * plane;

        let learnable = masks.as_ref().is_some_and(|m| m.token_mode == TokenMode::Learnable);
        let lay = &self.layout;
        let params: Vec<Var> = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let is_token = i == lay.input_token || i == lay.attention_token;
                if is_token && !learnable {
                    g.constant(p.clone())
                } else {
                    g.param(p.clone())
                }
            })
            .collect();
        let p = |i: usize| params[i];

        let input = g.constant(batch.pad_replicate(hp, wp).pixels().clone());
        let mut x = g.linear(input, p(lay.embed_w), p(lay.embed_b))?;

        let mut input_mask = None;
        if let Some(mk) = masks.as_mut() {
            if mk.input_ratios.iter().any(|&r| r > 0.0) {
                let mut mask = Vec::with_capacity(rows);
                for &ratio in mk.input_ratios {
                    mask.extend(sample_mask(plane, ratio, &mut *mk.rng));
                }
                x = g.mask_rows(x, p(lay.input_token), mask.clone())?;
                input_mask = Some(mask);
            }
        }

        let mut taps = Vec::new();
        for (i, blk) in lay.blocks.iter().enumerate() {
            let start = g.len();
            let shift = cfg.shift_for(i, hp, wp);
            let part = Arc::new(partition_index(n, hp, wp, cfg.window, shift)?);
            let merge = Arc::new(merge_index(n, hp, wp, cfg.window, shift)?);
            let geom = Arc::new(AttentionGeometry::new(cfg.window, cfg.heads, n, hp, wp, shift));

            let normed = g.layer_norm(x, p(blk.ln1_g), p(blk.ln1_b), T::of(LN_EPS))?;
            let mut win = g.gather_rows(normed, part)?;
            if let Some(mk) = masks.as_mut() {
                if mk.attention_ratio > 0.0 {
                    let mask = sample_mask(rows, mk.attention_ratio, &mut *mk.rng);
                    win = g.mask_rows(win, p(lay.attention_token), mask)?;
                }
            }
            let qkv = g.linear(win, p(blk.qkv_w), p(blk.qkv_b))?;
            let att = g.window_attention(qkv, p(blk.rel_table), geom)?;
            let att = g.linear(att, p(blk.proj_w), p(blk.proj_b))?;
            let att = g.gather_rows(att, merge)?;
            x = g.add(x, att)?;
            let after_attention = x;

            let normed = g.layer_norm(x, p(blk.ln2_g), p(blk.ln2_b), T::of(LN_EPS))?;
            let hid = g.linear(normed, p(blk.fc1_w), p(blk.fc1_b))?;
            let hid = g.gelu(hid)?;
            let mlp = g.linear(hid, p(blk.fc2_w), p(blk.fc2_b))?;
            x = g.add(x, mlp)?;

            if keep_taps {
                taps.push(after_attention);
                taps.push(x);
            }
            if !g.is_recording() {
                let mut keep = vec![x];
                if keep_taps {
                    keep.push(after_attention);
                }
                g.release_since(start, &keep);
            }
        }

        let x = g.layer_norm(x, p(lay.norm_g), p(lay.norm_b), T::of(LN_EPS))?;
        let dims = Conv3x3Dims { batch: n, height: hp, width: wp, c_in: cfg.channels, c_out: CHANNELS };
        let mut output = g.conv3x3(x, p(lay.head_w), p(lay.head_b), dims)?;
        let mut crop = None;
        if (hp, wp) != (h, w) {
            let mut index = Vec::with_capacity(n * h * w);
            for b in 0..n {
                for y in 0..h {
                    for xx in 0..w {
                        index.push(b * plane + y * wp + xx);
                    }
                }
            }
            let index = Arc::new(index);
            output = g.gather_rows(output, index.clone())?;
            crop = Some(index);
        }
        Ok(Forward { output, params, taps, input_mask, crop })
    }

    /// Deterministic mask-free pass over a batch; returns clipped images.
    pub fn denoise_batch(&self, batch: &ImageBatch<T>) -> Result<Vec<ImageTensor<T>>> {
        let mut g = Graph::inference();
        let fwd = self.forward::<SeededRng>(&mut g, batch, None, false)?;
        let out = g.value(fwd.output);
        let per = batch.height() * batch.width() * CHANNELS;
        out.data()
            .chunks_exact(per)
            .map(|chunk| Ok(ImageTensor::new(batch.height(), batch.width(), chunk.to_vec())?.clamp01()))
            .collect()
    }

    pub fn denoise(&self, img: &ImageTensor<T>) -> Result<ImageTensor<T>> {
        let batch = ImageBatch::from_images(std::slice::from_ref(img))?;
        Ok(self.denoise_batch(&batch)?.remove(0))
    }

    /// Residual-stream features `[H * W, C]` after every sub-block, mask-free.
    pub fn features(&self, img: &ImageTensor<T>) -> Result<Vec<Tensor<T>>> {
        let batch = ImageBatch::from_images(std::slice::from_ref(img))?;
        let mut g = Graph::inference();
        let fwd = self.forward::<SeededRng>(&mut g, &batch, None, true)?;
        fwd.taps
            .iter()
            .map(|&t| {
                let full = g.value(t);
                let c = full.last_dim();
                Ok(match &fwd.crop {
                    None => full.clone(),
                    Some(index) => {
                        let mut data = Vec::with_capacity(index.len() * c);
                        for &r in index.iter() {
                            data.extend_from_slice(&full.data()[r * c..(r + 1) * c]);
                        }
                        Tensor::new(vec![index.len(), c], data)?
                    }
                })
            })
            .collect()
    }

    /// Single-image forward under `policy`. In train mode an input ratio is
    /// drawn from the policy range and both masks are applied; in inference
    /// mode no randomness is used. Returns the clipped reconstruction and,
    /// when requested, the per-sub-block features.
    pub fn forward_image<R: Rng + ?Sized>(
        &self,
        img: &ImageTensor<T>,
        policy: &MaskPolicy,
        rng: &mut R,
        with_features: bool,
    ) -> Result<(ImageTensor<T>, Option<Vec<Tensor<T>>>)> {
        policy.validate()?;
        if policy.is_inference() {
            let features = if with_features { Some(self.features(img)?) } else { None };
            return Ok((self.denoise(img)?, features));
        }
        let batch = ImageBatch::from_images(std::slice::from_ref(img))?;
        let ratio = [sample_ratio(policy.input_ratio_range, rng)];
        let masks = TrainMasks {
            input_ratios: &ratio,
            attention_ratio: policy.attention_ratio,
            token_mode: policy.token_mode,
            rng,
        };
        let mut g = Graph::inference();
        let fwd = self.forward(&mut g, &batch, Some(masks), with_features)?;
        let out = ImageTensor::new(img.height(), img.width(), g.value(fwd.output).data().to_vec())?.clamp01();
        let features = with_features.then(|| fwd.taps.iter().map(|&t| g.value(t).clone()).collect());
        Ok((out, features))
    }

    /// Named tensors for serialisation, including a `meta.model_config` record.
    pub fn to_named(&self) -> Vec<(String, Tensor<T>)> {
        let c = &self.config;
        let meta = [c.channels as f64, c.window as f64, c.heads as f64, c.depth as f64, c.mlp_ratio];
        let mut out = vec![(MODEL_META.to_string(), Tensor::from_f64(vec![meta.len()], &meta).expect("5 values"))];
        out.extend(self.names.iter().cloned().zip(self.params.iter().cloned()));
        out
    }

    /// Rebuild from [`MaskedSwin::to_named`] output. Extra entries are ignored.
    pub fn from_named(entries: &[(String, Tensor<T>)]) -> Result<Self> {
        let find = |name: &str| entries.iter().find(|(n, _)| n == name).map(|(_, t)| t);
        let meta = find(MODEL_META).ok_or_else(|| Error::Config(format!("missing {MODEL_META}")))?;
        let m: Vec<f64> = meta.data().iter().map(|v| v.as_f64()).collect();
        if m.len() != 5 {
            return Err(Error::Config(format!("{MODEL_META} must hold 5 values")));
        }
        let config = ModelConfig {
            channels: m[0] as usize,
            window: m[1] as usize,
            heads: m[2] as usize,
            depth: m[3] as usize,
            mlp_ratio: m[4],
        };
        let mut model = MaskedSwin::new(config, &mut crate::noise::seeded_rng(0))?;
        for (name, slot) in model.names.iter().zip(model.params.iter_mut()) {
            let t = find(name).ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Config(format!(
                    "parameter {name}: expected shape {:?}, found {:?}",
                    slot.shape(),
                    t.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(model)
    }
}

pub const MODEL_META: &str = "meta.model_config";
