//! Shared transformer machinery: sinusoidal encodings, linear and norm
//! layers, masked multi-head attention, and the pre-norm decoder stack that
//! the node denoiser, edge classifier, and topology encoder all build on.
//!
//! Every block records the indices of its parameters inside a [`ParamSet`] at
//! construction time. A forward pass receives the tape plus the slice
//! returned by [`ParamSet::bind`], so the same block definition serves
//! training (gradients absorbed back into the set) and inference.

use std::collections::HashMap;
use std::rc::Rc;

use gsdiff_graph::denormalize_coord;
use gsdiff_tensor::rng::fill_normal;
use gsdiff_tensor::{ParamSet, Real, Tape, Tensor, Tx};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, ModelResult};

/// Sinusoidal features of one scalar: `dim/2` values alternating
/// sin(w_j t), cos(w_j t) with w_j = 10000^(-4j/dim).
pub fn positional_encoding(value: Real, dim: usize) -> ModelResult<Vec<Real>> {
    if dim == 0 || dim % 4 != 0 {
        return Err(ModelError::Config(format!(
            "positional encoding dimension must be a positive multiple of 4, got {}",
            dim
        )));
    }
    let pairs = dim / 4;
    let mut out = Vec::with_capacity(dim / 2);
    for j in 0..pairs {
        let omega = (10000.0 as Real).powf(-4.0 * j as Real / dim as Real);
        out.push((value * omega).sin());
        out.push((value * omega).cos());
    }
    Ok(out)
}

/// `[gamma(x), gamma(y)]` of a node's pixel position, length `dim`.
/// Input is a normalized coordinate pair; encoding happens on the
/// denormalized [0,255] scale.
pub fn coord_encoding(c: [Real; 2], dim: usize) -> ModelResult<Vec<Real>> {
    let px = denormalize_coord(c);
    let mut out = positional_encoding(px[0], dim)?;
    out.extend(positional_encoding(px[1], dim)?);
    Ok(out)
}

fn param_index(params: &mut ParamSet, name: String, value: Tensor) -> ModelResult<usize> {
    let idx = params.len();
    params.add(name, value)?;
    Ok(idx)
}

/// Dense layer `y = x W + b`; parameters live in the shared set.
#[derive(Clone, Debug)]
pub struct Linear {
    weight: usize,
    bias: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn init<R: Rng>(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> ModelResult<Linear> {
        let std = 1.0 / (in_dim as Real).sqrt();
        let w = fill_normal(rng, &[in_dim, out_dim], 0.0, std);
        Linear::with_weight(params, name, w, in_dim, out_dim)
    }

    /// Zero weights and bias; used for output projections so freshly built
    /// residual blocks start as identities.
    pub fn init_zero(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> ModelResult<Linear> {
        let w = Tensor::zeros(&[in_dim, out_dim]);
        Linear::with_weight(params, name, w, in_dim, out_dim)
    }

    fn with_weight(
        params: &mut ParamSet,
        name: &str,
        w: Tensor,
        in_dim: usize,
        out_dim: usize,
    ) -> ModelResult<Linear> {
        let weight = param_index(params, format!("{name}.w"), w)?;
        let bias = param_index(params, format!("{name}.b"), Tensor::zeros(&[out_dim]))?;
        Ok(Linear { weight, bias, in_dim, out_dim })
    }

    pub fn forward(&self, tape: &mut Tape, bound: &[Tx], x: Tx) -> ModelResult<Tx> {
        let y = tape.matmul(x, bound[self.weight])?;
        Ok(tape.add(y, bound[self.bias])?)
    }
}

/// Square 2-D convolution over `[B, C, H, W]`; parameters live in the shared
/// set like `Linear`'s.
#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: usize,
    bias: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng>(
        params: &mut ParamSet,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> ModelResult<Conv2d> {
        let std = 1.0 / ((in_channels * kernel * kernel) as Real).sqrt();
        let w = fill_normal(rng, &[out_channels, in_channels, kernel, kernel], 0.0, std);
        Conv2d::with_weight(params, name, w, out_channels, stride, pad)
    }

    /// Zero weights and bias, for output layers that should start inert.
    pub fn init_zero(
        params: &mut ParamSet,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> ModelResult<Conv2d> {
        let w = Tensor::zeros(&[out_channels, in_channels, kernel, kernel]);
        Conv2d::with_weight(params, name, w, out_channels, stride, pad)
    }

    fn with_weight(
        params: &mut ParamSet,
        name: &str,
        w: Tensor,
        out_channels: usize,
        stride: usize,
        pad: usize,
    ) -> ModelResult<Conv2d> {
        let weight = param_index(params, format!("{name}.w"), w)?;
        let bias = param_index(params, format!("{name}.b"), Tensor::zeros(&[out_channels]))?;
        Ok(Conv2d { weight, bias, stride, pad })
    }

    pub fn forward(&self, tape: &mut Tape, bound: &[Tx], x: Tx) -> ModelResult<Tx> {
        Ok(tape.conv2d(x, bound[self.weight], Some(bound[self.bias]), self.stride, self.pad)?)
    }
}

/// Layer norm with learned gain and bias.
#[derive(Clone, Debug)]
pub struct Norm {
    gain: usize,
    bias: usize,
}

pub const NORM_EPS: Real = 1e-5;

impl Norm {
    pub fn init(params: &mut ParamSet, name: &str, dim: usize) -> ModelResult<Norm> {
        let gain = param_index(params, format!("{name}.g"), Tensor::full(&[dim], 1.0))?;
        let bias = param_index(params, format!("{name}.b"), Tensor::zeros(&[dim]))?;
        Ok(Norm { gain, bias })
    }

    pub fn forward(&self, tape: &mut Tape, bound: &[Tx], x: Tx) -> ModelResult<Tx> {
        Ok(tape.layer_norm(x, bound[self.gain], bound[self.bias], NORM_EPS)?)
    }
}

/// Two-layer GELU feed-forward block; the output projection starts at zero.
#[derive(Clone, Debug)]
pub struct FeedForward {
    expand: Linear,
    contract: Linear,
}

impl FeedForward {
    pub fn init<R: Rng>(
        params: &mut ParamSet,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> ModelResult<FeedForward> {
        Ok(FeedForward {
            expand: Linear::init(params, &format!("{name}.up"), dim, hidden, rng)?,
            contract: Linear::init_zero(params, &format!("{name}.down"), hidden, dim)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, bound: &[Tx], x: Tx) -> ModelResult<Tx> {
        let h = self.expand.forward(tape, bound, x)?;
        let h = tape.gelu(h);
        self.contract.forward(tape, bound, h)
    }
}

/// Multi-head scaled-dot attention over batched token rows.
///
/// Token tensors are `[batch*tokens, dim]`, row-major by sample. Key
/// visibility is per (sample, key); invisible keys get exactly zero weight.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn init<R: Rng>(
        params: &mut ParamSet,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> ModelResult<MultiHeadAttention> {
        if heads == 0 || dim % heads != 0 {
            return Err(ModelError::Config(format!(
                "attention dim {} not divisible by {} heads",
                dim, heads
            )));
        }
        Ok(MultiHeadAttention {
            query: Linear::init(params, &format!("{name}.q"), dim, dim, rng)?,
            key: Linear::init(params, &format!("{name}.k"), dim, dim, rng)?,
            value: Linear::init(params, &format!("{name}.v"), dim, dim, rng)?,
            output: Linear::init_zero(params, &format!("{name}.o"), dim, dim)?,
            heads,
            dim,
        })
    }

    /// `queries`: `[batch*q_tokens, dim]`; `keys_values`: `[batch*kv_tokens, dim]`.
    /// `kv_visible`, when present, has one flag per (sample, key).
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &[Tx],
        queries: Tx,
        keys_values: Tx,
        batch: usize,
        q_tokens: usize,
        kv_tokens: usize,
        kv_visible: Option<&[bool]>,
    ) -> ModelResult<Tx> {
        if let Some(m) = kv_visible {
            if m.len() != batch * kv_tokens {
                return Err(ModelError::Config(format!(
                    "key visibility has {} flags for {} keys",
                    m.len(),
                    batch * kv_tokens
                )));
            }
        }
        // softmax_rows wants one flag per (query row, key); replicate the
        // per-sample key mask across that sample's query rows.
        let full_mask: Option<Rc<Vec<bool>>> = kv_visible.map(|keys| {
            let mut m = Vec::with_capacity(batch * q_tokens * kv_tokens);
            for b in 0..batch {
                let sample = &keys[b * kv_tokens..(b + 1) * kv_tokens];
                for _ in 0..q_tokens {
                    m.extend_from_slice(sample);
                }
            }
            Rc::new(m)
        });
        self.forward_masked(tape, bound, queries, keys_values, batch, q_tokens, kv_tokens, full_mask)
    }

    /// Like `forward` but with full per-(sample, query, key) visibility, for
    /// attention restricted along graph edges rather than by padding alone.
    /// Every query row must keep at least one visible key.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_masked(
        &self,
        tape: &mut Tape,
        bound: &[Tx],
        queries: Tx,
        keys_values: Tx,
        batch: usize,
        q_tokens: usize,
        kv_tokens: usize,
        full_mask: Option<Rc<Vec<bool>>>,
    ) -> ModelResult<Tx> {
        if let Some(m) = &full_mask {
            if m.len() != batch * q_tokens * kv_tokens {
                return Err(ModelError::Config(format!(
                    "attention mask has {} flags for {} query-key slots",
                    m.len(),
                    batch * q_tokens * kv_tokens
                )));
            }
        }
        let q = self.query.forward(tape, bound, queries)?;
        let k = self.key.forward(tape, bound, keys_values)?;
        let v = self.value.forward(tape, bound, keys_values)?;

        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as Real).sqrt();
        let mut head_outputs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice(q, 1, h * dh, dh)?;
            let qh = tape.reshape(qh, &[batch, q_tokens, dh])?;
            let kh = tape.slice(k, 1, h * dh, dh)?;
            let kh = tape.reshape(kh, &[batch, kv_tokens, dh])?;
            let kh_t = tape.transpose_last(kh)?;
            let vh = tape.slice(v, 1, h * dh, dh)?;
            let vh = tape.reshape(vh, &[batch, kv_tokens, dh])?;

            let scores = tape.bmm(qh, kh_t)?;
            let scores = tape.mul_scalar(scores, scale);
            let scores = tape.reshape(scores, &[batch * q_tokens, kv_tokens])?;
            let weights = tape.softmax_rows(scores, full_mask.clone())?;
            let weights = tape.reshape(weights, &[batch, q_tokens, kv_tokens])?;
            let mixed = tape.bmm(weights, vh)?;
            head_outputs.push(tape.reshape(mixed, &[batch * q_tokens, dh])?);
        }
        let merged = tape.concat(&head_outputs, 1)?;
        self.output.forward(tape, bound, merged)
    }
}

/// Shape and width of a decoder stack. `cond_dim` is the width of incoming
/// conditioning tokens; `None` builds the unconditioned architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_multiplier: usize,
    pub dropout: Real,
    pub cond_dim: Option<usize>,
}

impl StackConfig {
    pub fn desk() -> StackConfig {
        StackConfig {
            dim: 64,
            heads: 4,
            layers: 4,
            ffn_multiplier: 4,
            dropout: 0.0,
            cond_dim: None,
        }
    }

    /// Full-size configuration matching the published architecture.
    pub fn paper() -> StackConfig {
        StackConfig {
            dim: 256,
            heads: 8,
            layers: 24,
            ffn_multiplier: 4,
            dropout: 0.0,
            cond_dim: None,
        }
    }

    pub fn with_conditioning(mut self, cond_dim: usize) -> StackConfig {
        self.cond_dim = Some(cond_dim);
        self
    }

    pub fn validate(&self) -> ModelResult<()> {
        if self.dim == 0 || self.dim % 4 != 0 {
            return Err(ModelError::Config(format!(
                "dim must be a positive multiple of 4, got {}",
                self.dim
            )));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.layers == 0 || self.ffn_multiplier == 0 {
            return Err(ModelError::Config("layers and ffn_multiplier must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        if self.cond_dim == Some(0) {
            return Err(ModelError::Config("cond_dim must be >= 1 when present".into()));
        }
        Ok(())
    }
}

/// Constraint tokens handed to a generator, `[S, d_cond]` with `S = 0`
/// meaning unconstrained. The consuming stack owns the projection into its
/// own width.
#[derive(Clone, Debug)]
pub struct ConditioningContext {
    pub tokens: Tensor,
}

impl ConditioningContext {
    pub fn new(tokens: Tensor) -> ModelResult<ConditioningContext> {
        if tokens.shape().len() != 2 {
            return Err(ModelError::Config(format!(
                "conditioning tokens must be [S, d], got {:?}",
                tokens.shape()
            )));
        }
        Ok(ConditioningContext { tokens })
    }

    pub fn empty(cond_dim: usize) -> ConditioningContext {
        ConditioningContext { tokens: Tensor::zeros(&[0, cond_dim]) }
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.shape()[0] == 0
    }

    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.tokens.shape()[1]
    }
}

/// Per-sample conditioning stacked for one batched forward pass.
pub struct ConditioningBatch {
    /// `[batch * per_sample, cond_dim]`, zero-padded per sample.
    pub tokens: Tensor,
    pub per_sample: usize,
    /// One flag per (sample, context token); padding tokens are invisible.
    pub visible: Vec<bool>,
}

impl ConditioningBatch {
    /// Stack one context per batch sample. All empty yields `None`; a mix of
    /// empty and non-empty is rejected because cross-attention cannot be
    /// skipped for only part of a batch.
    pub fn stack(samples: &[&ConditioningContext]) -> ModelResult<Option<ConditioningBatch>> {
        if samples.is_empty() {
            return Ok(None);
        }
        let empties = samples.iter().filter(|c| c.is_empty()).count();
        if empties == samples.len() {
            return Ok(None);
        }
        if empties > 0 {
            return Err(ModelError::Config(
                "conditioning must be all-or-none within a batch".into(),
            ));
        }
        let width = samples[0].width();
        if samples.iter().any(|c| c.width() != width) {
            return Err(ModelError::Config("conditioning token widths differ".into()));
        }
        let per_sample = samples.iter().map(|c| c.len()).max().expect("non-empty");
        let mut data = vec![0.0; samples.len() * per_sample * width];
        let mut visible = vec![false; samples.len() * per_sample];
        for (b, ctx) in samples.iter().enumerate() {
            let n = ctx.len();
            let dst = &mut data[b * per_sample * width..][..n * width];
            dst.copy_from_slice(ctx.tokens.data());
            visible[b * per_sample..b * per_sample + n].fill(true);
        }
        Ok(Some(ConditioningBatch {
            tokens: Tensor::from_vec(&[samples.len() * per_sample, width], data)?,
            per_sample,
            visible,
        }))
    }
}

struct StackedContext {
    tokens: Tx,
    per_sample: usize,
    visible: Option<Vec<bool>>,
}

/// One pre-norm decoder layer: self-attention, optional cross-attention,
/// feed-forward, each behind a residual connection.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    self_norm: Norm,
    self_attn: MultiHeadAttention,
    cross: Option<(Norm, MultiHeadAttention)>,
    ffn_norm: Norm,
    ffn: FeedForward,
}

impl DecoderLayer {
    fn init<R: Rng>(
        params: &mut ParamSet,
        name: &str,
        cfg: &StackConfig,
        rng: &mut R,
    ) -> ModelResult<DecoderLayer> {
        let cross = match cfg.cond_dim {
            Some(_) => Some((
                Norm::init(params, &format!("{name}.xnorm"), cfg.dim)?,
                MultiHeadAttention::init(params, &format!("{name}.xattn"), cfg.dim, cfg.heads, rng)?,
            )),
            None => None,
        };
        Ok(DecoderLayer {
            self_norm: Norm::init(params, &format!("{name}.snorm"), cfg.dim)?,
            self_attn: MultiHeadAttention::init(params, &format!("{name}.sattn"), cfg.dim, cfg.heads, rng)?,
            cross,
            ffn_norm: Norm::init(params, &format!("{name}.fnorm"), cfg.dim)?,
            ffn: FeedForward::init(params, &format!("{name}.ffn"), cfg.dim, cfg.dim * cfg.ffn_multiplier, rng)?,
        })
    }

    /// Residual update, with the delta silenced on padded rows so their
    /// output is the residual identity.
    fn residual(tape: &mut Tape, x: Tx, delta: Tx, gate: Option<Tx>) -> ModelResult<Tx> {
        let delta = match gate {
            Some(g) => tape.mul(delta, g)?,
            None => delta,
        };
        Ok(tape.add(x, delta)?)
    }

    fn forward(
        &self,
        tape: &mut Tape,
        bound: &[Tx],
        x: Tx,
        batch: usize,
        tokens: usize,
        ctx: Option<&StackedContext>,
        token_visible: Option<&[bool]>,
        gate: Option<Tx>,
    ) -> ModelResult<Tx> {
        let normed = self.self_norm.forward(tape, bound, x)?;
        let attended = self.self_attn.forward(
            tape, bound, normed, normed, batch, tokens, tokens, token_visible,
        )?;
        let mut x = Self::residual(tape, x, attended, gate)?;

        if let (Some((norm, attn)), Some(ctx)) = (&self.cross, ctx) {
            let normed = norm.forward(tape, bound, x)?;
            let attended = attn.forward(
                tape,
                bound,
                normed,
                ctx.tokens,
                batch,
                tokens,
                ctx.per_sample,
                ctx.visible.as_deref(),
            )?;
            x = Self::residual(tape, x, attended, gate)?;
        }

        let normed = self.ffn_norm.forward(tape, bound, x)?;
        let transformed = self.ffn.forward(tape, bound, normed)?;
        Self::residual(tape, x, transformed, gate)
    }
}

/// The full decoder: conditioning projection plus `layers` decoder layers.
#[derive(Clone, Debug)]
pub struct DecoderStack {
    pub cfg: StackConfig,
    cond_proj: Option<Linear>,
    layers: Vec<DecoderLayer>,
}

impl DecoderStack {
    pub fn init<R: Rng>(
        params: &mut ParamSet,
        name: &str,
        cfg: &StackConfig,
        rng: &mut R,
    ) -> ModelResult<DecoderStack> {
        cfg.validate()?;
        let cond_proj = match cfg.cond_dim {
            Some(d_cond) => Some(Linear::init(params, &format!("{name}.cproj"), d_cond, cfg.dim, rng)?),
            None => None,
        };
        let layers = (0..cfg.layers)
            .map(|i| DecoderLayer::init(params, &format!("{name}.l{i}"), cfg, rng))
            .collect::<ModelResult<Vec<_>>>()?;
        Ok(DecoderStack { cfg: cfg.clone(), cond_proj, layers })
    }

    /// Run the stack over `[batch*tokens, dim]` rows.
    ///
    /// `token_visible` marks real tokens (padding rows neither attend out nor
    /// are attended to, and leave the stack unchanged). `ctx` attaches
    /// cross-attention conditioning; `None` or all-empty contexts leave the
    /// cross sublayers inert.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &[Tx],
        x: Tx,
        batch: usize,
        tokens: usize,
        ctx: Option<&ConditioningBatch>,
        token_visible: Option<&[bool]>,
    ) -> ModelResult<Tx> {
        if let Some(vis) = token_visible {
            if vis.len() != batch * tokens {
                return Err(ModelError::Config(format!(
                    "token visibility has {} flags for {} rows",
                    vis.len(),
                    batch * tokens
                )));
            }
        }
        let stacked = match ctx {
            Some(c) => {
                let proj = self.cond_proj.as_ref().ok_or_else(|| {
                    ModelError::Config("conditioning passed to an unconditioned stack".into())
                })?;
                let raw = tape.constant(c.tokens.clone());
                let projected = proj.forward(tape, bound, raw)?;
                let all_visible = c.visible.iter().all(|&v| v);
                Some(StackedContext {
                    tokens: projected,
                    per_sample: c.per_sample,
                    visible: if all_visible { None } else { Some(c.visible.clone()) },
                })
            }
            None => None,
        };
        let gate = match token_visible {
            Some(vis) => {
                let mut data = Vec::with_capacity(vis.len() * self.cfg.dim);
                for &v in vis {
                    let g = if v { 1.0 } else { 0.0 };
                    data.extend(std::iter::repeat(g).take(self.cfg.dim));
                }
                Some(tape.constant(Tensor::from_vec(&[vis.len(), self.cfg.dim], data)?))
            }
            None => None,
        };
        let mut x = x;
        for layer in &self.layers {
            x = layer.forward(tape, bound, x, batch, tokens, stacked.as_ref(), token_visible, gate)?;
        }
        Ok(x)
    }
}

/// Junction-token embedding for the denoiser: coordinate encoding plus a
/// linear map of the semantic byte plus a feed-forward timestep embedding,
/// summed.
#[derive(Clone, Debug)]
pub struct NodeEmbedding {
    pub dim: usize,
    pub horizon: usize,
    semantic_map: Linear,
    time_expand: Linear,
    time_contract: Linear,
}

pub const NODE_STATE_DIM: usize = 10;

impl NodeEmbedding {
    pub fn init<R: Rng>(
        params: &mut ParamSet,
        name: &str,
        dim: usize,
        horizon: usize,
        rng: &mut R,
    ) -> ModelResult<NodeEmbedding> {
        if dim % 4 != 0 {
            return Err(ModelError::Config(format!(
                "embedding dim must be a multiple of 4, got {}",
                dim
            )));
        }
        if horizon == 0 {
            return Err(ModelError::Config("diffusion horizon must be >= 1".into()));
        }
        Ok(NodeEmbedding {
            dim,
            horizon,
            semantic_map: Linear::init(params, &format!("{name}.sem"), 8, dim, rng)?,
            time_expand: Linear::init(params, &format!("{name}.t1"), dim / 2, dim, rng)?,
            time_contract: Linear::init(params, &format!("{name}.t2"), dim, dim, rng)?,
        })
    }

    /// Embed `states` (`[batch*slots, 10]` diffusion-unit rows, constants)
    /// at one timestep per sample.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &[Tx],
        states: &Tensor,
        slots: usize,
        timesteps: &[usize],
    ) -> ModelResult<Tx> {
        let shape = states.shape();
        if shape.len() != 2 || shape[1] != NODE_STATE_DIM || shape[0] != slots * timesteps.len() {
            return Err(ModelError::Config(format!(
                "node states must be [{}*{}, {}], got {:?}",
                timesteps.len(),
                slots,
                NODE_STATE_DIM,
                shape
            )));
        }
        let rows = shape[0];
        let mut coord_feat = Vec::with_capacity(rows * self.dim);
        let mut semantic_feat = Vec::with_capacity(rows * 8);
        for row in 0..rows {
            let d = &states.data()[row * NODE_STATE_DIM..(row + 1) * NODE_STATE_DIM];
            coord_feat.extend(coord_encoding([d[0], d[1]], self.dim)?);
            semantic_feat.extend_from_slice(&d[2..NODE_STATE_DIM]);
        }
        let coords = tape.constant(Tensor::from_vec(&[rows, self.dim], coord_feat)?);
        let semantics = tape.constant(Tensor::from_vec(&[rows, 8], semantic_feat)?);
        let semantic = self.semantic_map.forward(tape, bound, semantics)?;

        // Timestep features reuse the positional family, with the horizon
        // rescaled onto the pixel range the frequencies were chosen for.
        let t_scale = 255.0 / self.horizon as Real;
        let mut time_feat = Vec::with_capacity(rows * self.dim / 2);
        for &t in timesteps {
            if t > self.horizon {
                return Err(ModelError::Config(format!(
                    "timestep {} beyond horizon {}",
                    t, self.horizon
                )));
            }
            let row = positional_encoding(t as Real * t_scale, self.dim)?;
            for _ in 0..slots {
                time_feat.extend_from_slice(&row);
            }
        }
        let time_in = tape.constant(Tensor::from_vec(&[rows, self.dim / 2], time_feat)?);
        let t = self.time_expand.forward(tape, bound, time_in)?;
        let t = tape.gelu(t);
        let time = self.time_contract.forward(tape, bound, t)?;

        let fused = tape.add(coords, semantic)?;
        Ok(tape.add(fused, time)?)
    }
}

/// Copy parameter values by name where both sides agree; parameters missing
/// from `values` keep their initialization. Returns how many were loaded.
pub fn import_partial(
    params: &mut ParamSet,
    values: &HashMap<String, Tensor>,
) -> ModelResult<usize> {
    let names: Vec<String> = params.export().iter().map(|(n, _)| n.to_string()).collect();
    let mut loaded = 0;
    for name in names {
        let Some(t) = values.get(&name) else { continue };
        let dst = params.value_mut(&name).expect("name from export");
        if t.shape() != dst.shape() {
            return Err(ModelError::Config(format!(
                "parameter {:?} has shape {:?} in checkpoint, expected {:?}",
                name,
                t.shape(),
                dst.shape()
            )));
        }
        *dst = t.clone();
        loaded += 1;
    }
    Ok(loaded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use gsdiff_tensor::rng::rng_for;

    #[test]
    fn sinusoid_matches_hand_values() {
        let enc = positional_encoding(1.0, 8).unwrap();
        let expected = [(1.0 as Real).sin(), (1.0 as Real).cos(), (0.01 as Real).sin(), (0.01 as Real).cos()];
        assert_eq!(enc.len(), 4);
        for (a, b) in enc.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
        }
        assert!((enc[2] - 0.0099998).abs() < 1e-6);

        let zero = positional_encoding(0.0, 8).unwrap();
        assert_eq!(zero, vec![0.0, 1.0, 0.0, 1.0]);

        for d in [8, 64, 256] {
            assert_eq!(positional_encoding(3.7, d).unwrap().len(), d / 2);
        }
        assert!(positional_encoding(1.0, 6).is_err());
        assert!(positional_encoding(1.0, 0).is_err());
    }

    #[test]
    fn corner_node_coordinate_features_are_pure_cosine_bits() {
        // normalized (-1,-1) denormalizes to pixel (0,0): sin terms vanish.
        let enc = coord_encoding([-1.0, -1.0], 8).unwrap();
        assert_eq!(enc, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn zeroed_side_maps_leave_only_coordinate_features() {
        let mut params = ParamSet::new();
        let mut rng = rng_for(1, 0);
        let emb = NodeEmbedding::init(&mut params, "emb", 8, 100, &mut rng).unwrap();
        for name in ["emb.sem.w", "emb.sem.b", "emb.t2.w", "emb.t2.b"] {
            let t = params.value_mut(name).unwrap();
            *t = Tensor::zeros(t.shape());
        }
        let mut state = vec![0.0; NODE_STATE_DIM];
        state[0] = -1.0;
        state[1] = -1.0;
        let mut rows = Vec::new();
        for _ in 0..3 {
            rows.extend_from_slice(&state);
        }
        let states = Tensor::from_vec(&[3, NODE_STATE_DIM], rows).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let out = emb.forward(&mut tape, &bound, &states, 3, &[17]).unwrap();
        let row = &tape.value(out).data()[0..8];
        assert_eq!(row, &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn embedding_rejects_shape_and_horizon_violations() {
        let mut params = ParamSet::new();
        let mut rng = rng_for(1, 1);
        let emb = NodeEmbedding::init(&mut params, "e", 8, 10, &mut rng).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let bad = Tensor::zeros(&[4, NODE_STATE_DIM]);
        assert!(emb.forward(&mut tape, &bound, &bad, 3, &[1]).is_err());
        let ok_shape = Tensor::zeros(&[3, NODE_STATE_DIM]);
        assert!(emb.forward(&mut tape, &bound, &ok_shape, 3, &[11]).is_err());
    }

    #[test]
    fn attention_rows_are_uniform_over_visible_keys() {
        let mut params = ParamSet::new();
        let mut rng = rng_for(2, 0);
        let attn = MultiHeadAttention::init(&mut params, "a", 4, 1, &mut rng).unwrap();
        // Zero q/k -> flat scores; identity v/o exposes the weight rows.
        for name in ["a.q.w", "a.k.w"] {
            let t = params.value_mut(name).unwrap();
            *t = Tensor::zeros(t.shape());
        }
        let mut eye = Tensor::zeros(&[4, 4]);
        for i in 0..4 {
            *eye.at_mut(&[i, i]) = 1.0;
        }
        *params.value_mut("a.v.w").unwrap() = eye.clone();
        *params.value_mut("a.o.w").unwrap() = eye.clone();

        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = tape.constant(eye);
        let visible = [true, false, true, true];
        let out = attn
            .forward(&mut tape, &bound, x, x, 1, 4, 4, Some(&visible))
            .unwrap();
        let v = tape.value(out);
        for i in 0..4 {
            let row: Vec<Real> = (0..4).map(|j| v.at(&[i, j])).collect();
            let sum: Real = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "row {} sums {}", i, sum);
            assert_eq!(row[1], 0.0, "masked key leaked into row {}", i);
            for j in [0, 2, 3] {
                assert!((row[j] - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pairwise_mask_restricts_each_query_row_on_its_own() {
        let mut params = ParamSet::new();
        let mut rng = rng_for(2, 1);
        let attn = MultiHeadAttention::init(&mut params, "a", 4, 1, &mut rng).unwrap();
        for name in ["a.q.w", "a.k.w"] {
            let t = params.value_mut(name).unwrap();
            *t = Tensor::zeros(t.shape());
        }
        let mut eye = Tensor::zeros(&[4, 4]);
        for i in 0..4 {
            *eye.at_mut(&[i, i]) = 1.0;
        }
        *params.value_mut("a.v.w").unwrap() = eye.clone();
        *params.value_mut("a.o.w").unwrap() = eye.clone();

        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = tape.constant(eye);
        // Row 0 sees only itself; row 1 sees {1, 2}; rows 2 and 3 see all.
        let mut mask = vec![true; 16];
        mask[0..4].copy_from_slice(&[true, false, false, false]);
        mask[4..8].copy_from_slice(&[false, true, true, false]);
        let out = attn
            .forward_masked(&mut tape, &bound, x, x, 1, 4, 4, Some(Rc::new(mask)))
            .unwrap();
        let v = tape.value(out);
        let row = |i: usize| (0..4).map(|j| v.at(&[i, j])).collect::<Vec<Real>>();
        assert_eq!(row(0), vec![1.0, 0.0, 0.0, 0.0]);
        let r1 = row(1);
        assert_eq!(r1[0], 0.0);
        assert_eq!(r1[3], 0.0);
        assert!((r1[1] - 0.5).abs() < 1e-12 && (r1[2] - 0.5).abs() < 1e-12);
        for i in [2, 3] {
            for j in 0..4 {
                assert!((row(i)[j] - 0.25).abs() < 1e-12);
            }
        }

        // Replicating a per-key mask per row reproduces plain `forward`.
        let keys = [true, false, true, true];
        let replicated: Vec<bool> = (0..4).flat_map(|_| keys).collect();
        let a = attn
            .forward(&mut tape, &bound, x, x, 1, 4, 4, Some(&keys))
            .unwrap();
        let b = attn
            .forward_masked(&mut tape, &bound, x, x, 1, 4, 4, Some(Rc::new(replicated)))
            .unwrap();
        assert_eq!(tape.value(a).data(), tape.value(b).data());

        let short = attn.forward_masked(&mut tape, &bound, x, x, 1, 4, 4, Some(Rc::new(vec![true; 8])));
        assert!(short.is_err());
    }

    #[test]
    fn conv_block_registers_params_and_respects_stride() {
        let mut params = ParamSet::new();
        let mut rng = rng_for(2, 2);
        let conv = Conv2d::init(&mut params, "c", 3, 5, 3, 2, 1, &mut rng).unwrap();
        let zero = Conv2d::init_zero(&mut params, "cz", 3, 5, 1, 2, 0).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = tape.constant(fill_normal(&mut rng, &[2, 3, 8, 8], 0.0, 1.0));
        let y = conv.forward(&mut tape, &bound, x).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 5, 4, 4]);
        let z = zero.forward(&mut tape, &bound, x).unwrap();
        assert_eq!(tape.value(z).shape(), &[2, 5, 4, 4]);
        assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
    }

    fn randomize(params: &mut ParamSet, seed: u64) {
        let names: Vec<String> = params.export().iter().map(|(n, _)| n.to_string()).collect();
        let mut rng = rng_for(seed, 99);
        for name in names {
            let t = params.value_mut(&name).unwrap();
            *t = fill_normal(&mut rng, t.shape(), 0.0, 0.5);
        }
    }

    #[test]
    fn fresh_stack_is_the_identity() {
        let cfg = StackConfig { dim: 8, heads: 2, layers: 3, ffn_multiplier: 2, dropout: 0.0, cond_dim: None };
        let mut params = ParamSet::new();
        let mut rng = rng_for(3, 0);
        let stack = DecoderStack::init(&mut params, "s", &cfg, &mut rng).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x_val = fill_normal(&mut rng, &[5, 8], 0.0, 1.0);
        let x = tape.constant(x_val.clone());
        let y = stack.forward(&mut tape, &bound, x, 1, 5, None, None).unwrap();
        assert_eq!(tape.value(y).data(), x_val.data());
    }

    #[test]
    fn permuting_tokens_permutes_outputs() {
        let cfg = StackConfig { dim: 8, heads: 2, layers: 2, ffn_multiplier: 2, dropout: 0.0, cond_dim: None };
        let mut params = ParamSet::new();
        let mut rng = rng_for(4, 0);
        let stack = DecoderStack::init(&mut params, "s", &cfg, &mut rng).unwrap();
        randomize(&mut params, 4);

        let n = 6;
        let x_val = fill_normal(&mut rng, &[n, 8], 0.0, 1.0);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let mut permuted = Tensor::zeros(&[n, 8]);
        for (dst, &src) in perm.iter().enumerate() {
            for j in 0..8 {
                *permuted.at_mut(&[dst, j]) = x_val.at(&[src, j]);
            }
        }

        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = tape.constant(x_val);
        let y = stack.forward(&mut tape, &bound, x, 1, n, None, None).unwrap();
        let xp = tape.constant(permuted);
        let yp = stack.forward(&mut tape, &bound, xp, 1, n, None, None).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            for j in 0..8 {
                let a = tape.value(y).at(&[src, j]);
                let b = tape.value(yp).at(&[dst, j]);
                assert!((a - b).abs() < 1e-12, "token {} dim {}: {} vs {}", src, j, a, b);
            }
        }
    }

    #[test]
    fn masked_token_is_equivalent_to_removed_token() {
        let cfg = StackConfig { dim: 8, heads: 2, layers: 2, ffn_multiplier: 2, dropout: 0.0, cond_dim: None };
        let mut params = ParamSet::new();
        let mut rng = rng_for(5, 0);
        let stack = DecoderStack::init(&mut params, "s", &cfg, &mut rng).unwrap();
        randomize(&mut params, 5);

        let n = 5;
        let masked_row = 2;
        let x_val = fill_normal(&mut rng, &[n, 8], 0.0, 1.0);
        let mut small = Tensor::zeros(&[n - 1, 8]);
        let mut dst = 0;
        for i in 0..n {
            if i == masked_row {
                continue;
            }
            for j in 0..8 {
                *small.at_mut(&[dst, j]) = x_val.at(&[i, j]);
            }
            dst += 1;
        }

        let mut visible = vec![true; n];
        visible[masked_row] = false;

        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = tape.constant(x_val.clone());
        let y = stack
            .forward(&mut tape, &bound, x, 1, n, None, Some(&visible))
            .unwrap();
        let xs = tape.constant(small);
        let ys = stack.forward(&mut tape, &bound, xs, 1, n - 1, None, None).unwrap();

        let mut dst = 0;
        for i in 0..n {
            if i == masked_row {
                // padded row passes through untouched
                for j in 0..8 {
                    assert_eq!(tape.value(y).at(&[i, j]), x_val.at(&[i, j]));
                }
                continue;
            }
            for j in 0..8 {
                let a = tape.value(y).at(&[i, j]);
                let b = tape.value(ys).at(&[dst, j]);
                assert!((a - b).abs() < 1e-12, "row {} dim {}", i, j);
            }
            dst += 1;
        }
    }

    #[test]
    fn all_padded_input_is_a_degenerate_mask_error() {
        let cfg = StackConfig { dim: 8, heads: 2, layers: 1, ffn_multiplier: 2, dropout: 0.0, cond_dim: None };
        let mut params = ParamSet::new();
        let mut rng = rng_for(6, 0);
        let stack = DecoderStack::init(&mut params, "s", &cfg, &mut rng).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(&[3, 8]));
        let err = stack
            .forward(&mut tape, &bound, x, 1, 3, None, Some(&[false, false, false]))
            .unwrap_err();
        assert!(matches!(
            err,
            ModelError::Tensor(gsdiff_tensor::TensorError::DegenerateMask { .. })
        ));
    }

    #[test]
    fn empty_context_reproduces_the_unconditioned_stack_bit_for_bit() {
        let base = StackConfig { dim: 8, heads: 2, layers: 2, ffn_multiplier: 2, dropout: 0.0, cond_dim: None };
        let cond_cfg = base.clone().with_conditioning(6);

        let mut cond_params = ParamSet::new();
        let mut rng = rng_for(7, 0);
        let cond_stack = DecoderStack::init(&mut cond_params, "s", &cond_cfg, &mut rng).unwrap();
        randomize(&mut cond_params, 7);

        let mut plain_params = ParamSet::new();
        let mut rng2 = rng_for(8, 0);
        let plain_stack = DecoderStack::init(&mut plain_params, "s", &base, &mut rng2).unwrap();
        let export: std::collections::HashMap<String, Tensor> = cond_params
            .export()
            .into_iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        let loaded = import_partial(&mut plain_params, &export).unwrap();
        assert_eq!(loaded, plain_params.len());

        let mut rng3 = rng_for(9, 0);
        let x_val = fill_normal(&mut rng3, &[4, 8], 0.0, 1.0);

        let mut tape = Tape::new();
        let bound = cond_params.bind(&mut tape);
        let x = tape.constant(x_val.clone());
        let y_cond = cond_stack.forward(&mut tape, &bound, x, 1, 4, None, None).unwrap();

        let mut tape2 = Tape::new();
        let bound2 = plain_params.bind(&mut tape2);
        let x2 = tape2.constant(x_val);
        let y_plain = plain_stack.forward(&mut tape2, &bound2, x2, 1, 4, None, None).unwrap();

        assert_eq!(tape.value(y_cond).data(), tape2.value(y_plain).data());
    }

    #[test]
    fn batched_forward_matches_independent_samples() {
        let cfg = StackConfig { dim: 8, heads: 2, layers: 2, ffn_multiplier: 2, dropout: 0.0, cond_dim: None };
        let mut params = ParamSet::new();
        let mut rng = rng_for(10, 0);
        let stack = DecoderStack::init(&mut params, "s", &cfg, &mut rng).unwrap();
        randomize(&mut params, 10);

        let n = 3;
        let a = fill_normal(&mut rng, &[n, 8], 0.0, 1.0);
        let b = fill_normal(&mut rng, &[n, 8], 0.0, 1.0);
        let mut both = a.data().to_vec();
        both.extend_from_slice(b.data());
        let both = Tensor::from_vec(&[2 * n, 8], both).unwrap();

        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let xab = tape.constant(both);
        let yab = stack.forward(&mut tape, &bound, xab, 2, n, None, None).unwrap();
        let xa = tape.constant(a);
        let ya = stack.forward(&mut tape, &bound, xa, 1, n, None, None).unwrap();
        let xb = tape.constant(b);
        let yb = stack.forward(&mut tape, &bound, xb, 1, n, None, None).unwrap();

        for i in 0..n {
            for j in 0..8 {
                assert!((tape.value(yab).at(&[i, j]) - tape.value(ya).at(&[i, j])).abs() < 1e-12);
                assert!(
                    (tape.value(yab).at(&[n + i, j]) - tape.value(yb).at(&[i, j])).abs() < 1e-12
                );
            }
        }
    }

    #[test]
    fn conditioning_batches_stack_with_padding_flags() {
        let a = ConditioningContext::new(Tensor::full(&[2, 3], 1.0)).unwrap();
        let b = ConditioningContext::new(Tensor::full(&[4, 3], 2.0)).unwrap();
        let stacked = ConditioningBatch::stack(&[&a, &b]).unwrap().unwrap();
        assert_eq!(stacked.per_sample, 4);
        assert_eq!(stacked.tokens.shape(), [8, 3]);
        assert_eq!(
            stacked.visible,
            vec![true, true, false, false, true, true, true, true]
        );
        // sample a's padding rows are zero
        assert_eq!(stacked.tokens.at(&[2, 0]), 0.0);

        let empty = ConditioningContext::empty(3);
        assert!(ConditioningBatch::stack(&[&empty, &empty]).unwrap().is_none());
        assert!(ConditioningBatch::stack(&[&a, &empty]).is_err());
        assert!(ConditioningBatch::stack(&[]).unwrap().is_none());
    }

    #[test]
    fn partial_import_rejects_shape_mismatches() {
        let mut params = ParamSet::new();
        params.add("w", Tensor::zeros(&[2, 2])).unwrap();
        let mut values = HashMap::new();
        values.insert("w".to_string(), Tensor::zeros(&[3, 2]));
        assert!(import_partial(&mut params, &values).is_err());
        let mut ok = HashMap::new();
        ok.insert("w".to_string(), Tensor::full(&[2, 2], 5.0));
        ok.insert("unrelated".to_string(), Tensor::zeros(&[1]));
        assert_eq!(import_partial(&mut params, &ok).unwrap(), 1);
        assert_eq!(params.get("w").unwrap().value.data(), &[5.0; 4]);
    }
}
