//! Constraint encoders for conditioned generation.
//!
//! Two encoders produce the conditioning tokens the generators cross-attend
//! to: a convolutional autoencoder over rasterized outer-wall images, and a
//! transformer over room sets whose attention is restricted to the given
//! room-adjacency relation. Both pretrain on procedurally sampled
//! constraints, fine-tune on dataset constraints, and are checkpointed with
//! their full training config so a saved encoder rebuilds bit-identically.

use std::collections::HashMap;
use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use gsdiff_graph::{RoomCategory, TopologyGraph, CATEGORY_COUNT};
use gsdiff_tensor::checkpoint::{self, CheckpointHeader};
use gsdiff_tensor::optim::Adam;
use gsdiff_tensor::rng::rng_for;
use gsdiff_tensor::{ParamSet, Real, Tape, Tensor, Tx};

use rand::Rng;

use crate::blocks::{
    ConditioningContext, Conv2d, FeedForward, Linear, MultiHeadAttention, Norm, StackConfig,
};
use crate::error::{ModelError, ModelResult};

pub const BOUNDARY_CHECKPOINT_KIND: &str = "boundary-autoencoder";
pub const TOPOLOGY_CHECKPOINT_KIND: &str = "topology-encoder";

/// Room slots per encoded topology; shorter graphs are padded and masked.
pub const MAX_ROOMS: usize = 8;

/// Vertex coordinates live on the reference canvas regardless of raster size.
pub const COORD_MAX: Real = 255.0;
const REFERENCE_CANVAS: Real = 256.0;

// ── Boundary rasterization ──────────────────────────────────────────────

/// Pretraining strokes, widest first, so each narrower stroke overdraws the
/// previous one and the color encodes distance to the true outline.
const PRETRAIN_STROKES: [(usize, [Real; 3]); 4] = [
    (7, [0.0, 1.0, 0.0]),
    (5, [0.0, 0.0, 1.0]),
    (3, [1.0, 0.0, 0.0]),
    (1, [0.0, 0.0, 0.0]),
];
const FINETUNE_STROKES: [(usize, [Real; 3]); 1] = [(7, [0.0, 0.0, 0.0])];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RasterMode {
    Pretrain,
    Finetune,
}

/// A three-channel raster in `[0,1]`, `[3, size, size]`.
#[derive(Clone, Debug)]
pub struct BoundaryImage {
    pub pixels: Tensor,
}

impl BoundaryImage {
    pub fn new(pixels: Tensor) -> ModelResult<BoundaryImage> {
        let shape = pixels.shape().to_vec();
        if shape.len() != 3 || shape[0] != 3 || shape[1] != shape[2] || shape[1] == 0 {
            return Err(ModelError::Config(format!(
                "boundary image must be [3, s, s], got {:?}",
                shape
            )));
        }
        if pixels.data().iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(ModelError::Config("boundary image values outside [0,1]".into()));
        }
        Ok(BoundaryImage { pixels })
    }

    pub fn size(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn pixel(&self, channel: usize, row: usize, col: usize) -> Real {
        self.pixels.at(&[channel, row, col])
    }
}

fn point_segment_distance(p: [Real; 2], a: [Real; 2], b: [Real; 2]) -> Real {
    let d = [b[0] - a[0], b[1] - a[1]];
    let len2 = d[0] * d[0] + d[1] * d[1];
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0)
    };
    let q = [a[0] + t * d[0], a[1] + t * d[1]];
    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
}

/// Draw the closed polygon's outline onto a white canvas.
///
/// A vertex (x, y) addresses the center of reference pixel (x, y);
/// positions and stroke widths scale with `size`, widths rounding up so no
/// stroke vanishes. A pixel takes a stroke's color when its center lies
/// strictly within half the stroke width of an edge segment; later strokes
/// overwrite earlier ones.
pub fn rasterize_boundary(
    vertices: &[[Real; 2]],
    mode: RasterMode,
    size: usize,
) -> ModelResult<BoundaryImage> {
    if size == 0 {
        return Err(ModelError::Config("raster size must be >= 1".into()));
    }
    if vertices.len() < 3 {
        return Err(ModelError::DegenerateInput(format!(
            "polygon has {} vertices, need at least 3",
            vertices.len()
        )));
    }
    for v in vertices {
        if !v[0].is_finite() || !v[1].is_finite() || v[0] < 0.0 || v[0] > COORD_MAX || v[1] < 0.0 || v[1] > COORD_MAX
        {
            return Err(ModelError::Config(format!(
                "vertex ({}, {}) outside [0, {}]",
                v[0], v[1], COORD_MAX
            )));
        }
    }

    let scale = size as Real / REFERENCE_CANVAS;
    let canvas: Vec<[Real; 2]> = vertices
        .iter()
        .map(|v| [(v[0] + 0.5) * scale, (v[1] + 0.5) * scale])
        .collect();

    let mut data = vec![1.0; 3 * size * size];
    let strokes: &[(usize, [Real; 3])] = match mode {
        RasterMode::Pretrain => &PRETRAIN_STROKES,
        RasterMode::Finetune => &FINETUNE_STROKES,
    };
    for &(ref_width, color) in strokes {
        let width = (ref_width as Real * scale).ceil();
        let half = width / 2.0;
        for k in 0..canvas.len() {
            let a = canvas[k];
            let b = canvas[(k + 1) % canvas.len()];
            let lo = |m: Real| ((m - half - 1.0).floor().max(0.0)) as usize;
            let hi = |m: Real| ((m + half + 1.0).ceil().min(size as Real - 1.0)) as usize;
            let (c0, c1) = (lo(a[0].min(b[0])), hi(a[0].max(b[0])));
            let (r0, r1) = (lo(a[1].min(b[1])), hi(a[1].max(b[1])));
            for row in r0..=r1 {
                for col in c0..=c1 {
                    let center = [col as Real + 0.5, row as Real + 0.5];
                    if point_segment_distance(center, a, b) < half {
                        for (ch, &c) in color.iter().enumerate() {
                            data[ch * size * size + row * size + col] = c;
                        }
                    }
                }
            }
        }
    }
    BoundaryImage::new(Tensor::from_vec(&[3, size, size], data)?)
}

/// Vertex-count mix observed in the synthetic corpus: rectangular outlines
/// plus the one-cut slanted variant.
pub const DEFAULT_VERTEX_COUNT_WEIGHTS: [(usize, Real); 2] = [(4, 0.85), (5, 0.15)];

/// A closed random polygon on the reference canvas: vertex count drawn from
/// the weighted distribution, vertices uniform. No simplicity guarantee;
/// self-intersecting outlines are acceptable pretraining fodder.
pub fn random_boundary_polygon<R: Rng>(
    rng: &mut R,
    count_weights: &[(usize, Real)],
) -> ModelResult<Vec<[Real; 2]>> {
    if count_weights.is_empty() {
        return Err(ModelError::Config("vertex count distribution is empty".into()));
    }
    let mut total = 0.0;
    for &(count, w) in count_weights {
        if count < 3 {
            return Err(ModelError::Config(format!("vertex count {} below 3", count)));
        }
        if !w.is_finite() || w < 0.0 {
            return Err(ModelError::Config(format!("weight {} for count {} invalid", w, count)));
        }
        total += w;
    }
    if total <= 0.0 {
        return Err(ModelError::Config("vertex count weights sum to zero".into()));
    }

    let mut pick = rng.random::<Real>() * total;
    let mut count = count_weights[count_weights.len() - 1].0;
    for &(c, w) in count_weights {
        if pick < w {
            count = c;
            break;
        }
        pick -= w;
    }
    Ok((0..count)
        .map(|_| [rng.random::<Real>() * COORD_MAX, rng.random::<Real>() * COORD_MAX])
        .collect())
}

// ── Boundary autoencoder ────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundaryModelConfig {
    /// Raster edge length; four stride-2 stages leave a size/16 feature grid.
    pub size: usize,
    pub channels: [usize; 4],
}

impl BoundaryModelConfig {
    pub fn desk() -> BoundaryModelConfig {
        BoundaryModelConfig { size: 64, channels: [32, 64, 128, 256] }
    }

    /// Full-size configuration matching the published architecture.
    pub fn paper() -> BoundaryModelConfig {
        BoundaryModelConfig { size: 256, channels: [128, 256, 512, 1024] }
    }

    pub fn validate(&self) -> ModelResult<()> {
        if self.size < 16 || self.size % 16 != 0 {
            return Err(ModelError::Config(format!(
                "raster size {} not a multiple of 16",
                self.size
            )));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(ModelError::Config("encoder channels must be >= 1".into()));
        }
        Ok(())
    }

    pub fn feature_grid(&self) -> usize {
        self.size / 16
    }

    pub fn token_count(&self) -> usize {
        self.feature_grid() * self.feature_grid()
    }

    pub fn token_dim(&self) -> usize {
        self.channels[3]
    }
}

/// Strided residual stage: 3x3 conv plus a 1x1 shortcut so channel and
/// resolution changes keep an identity-like path.
#[derive(Clone, Debug)]
struct ResStage {
    main: Conv2d,
    skip: Conv2d,
}

/// Convolutional autoencoder over boundary rasters, no skip connections
/// between encoder and decoder. The flattened encoder feature map is the
/// conditioning payload; the decoder exists to force it to stay faithful.
pub struct BoundaryModel {
    pub cfg: BoundaryModelConfig,
    pub params: ParamSet,
    enc: Vec<ResStage>,
    dec: Vec<ResStage>,
}

impl BoundaryModel {
    pub fn new(cfg: BoundaryModelConfig, seed: u64) -> ModelResult<BoundaryModel> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let mut rng = rng_for(seed, 0);
        let mut enc = Vec::with_capacity(4);
        for i in 0..4 {
            let cin = if i == 0 { 3 } else { cfg.channels[i - 1] };
            let cout = cfg.channels[i];
            enc.push(ResStage {
                main: Conv2d::init(&mut params, &format!("enc{i}.main"), cin, cout, 3, 2, 1, &mut rng)?,
                skip: Conv2d::init(&mut params, &format!("enc{i}.skip"), cin, cout, 1, 2, 0, &mut rng)?,
            });
        }
        let mut dec = Vec::with_capacity(4);
        for i in 0..4 {
            let cin = cfg.channels[3 - i];
            let cout = if i < 3 { cfg.channels[2 - i] } else { 3 };
            let name_main = format!("dec{i}.main");
            let name_skip = format!("dec{i}.skip");
            // Zero-init output stage: a fresh autoencoder reconstructs flat
            // mid-gray no matter what the encoder half emits.
            let stage = if i == 3 {
                ResStage {
                    main: Conv2d::init_zero(&mut params, &name_main, cin, cout, 3, 1, 1)?,
                    skip: Conv2d::init_zero(&mut params, &name_skip, cin, cout, 1, 1, 0)?,
                }
            } else {
                ResStage {
                    main: Conv2d::init(&mut params, &name_main, cin, cout, 3, 1, 1, &mut rng)?,
                    skip: Conv2d::init(&mut params, &name_skip, cin, cout, 1, 1, 0, &mut rng)?,
                }
            };
            dec.push(stage);
        }
        Ok(BoundaryModel { cfg, params, enc, dec })
    }

    fn encode_features(&self, tape: &mut Tape, bound: &[Tx], x: Tx) -> ModelResult<Tx> {
        let mut x = x;
        for stage in &self.enc {
            let main = stage.main.forward(tape, bound, x)?;
            let main = tape.relu(main);
            let skip = stage.skip.forward(tape, bound, x)?;
            x = tape.add(main, skip)?;
        }
        Ok(x)
    }

    fn decode_recon(&self, tape: &mut Tape, bound: &[Tx], features: Tx) -> ModelResult<Tx> {
        let mut x = features;
        for (i, stage) in self.dec.iter().enumerate() {
            x = tape.upsample2_nearest(x)?;
            let main = stage.main.forward(tape, bound, x)?;
            // The output stage stays linear so reconstructions can reach
            // both ends of [0,1] through the sigmoid.
            let main = if i < 3 { tape.relu(main) } else { main };
            let skip = stage.skip.forward(tape, bound, x)?;
            x = tape.add(main, skip)?;
        }
        Ok(sigmoid(tape, x))
    }

    fn forward_recon(&self, tape: &mut Tape, bound: &[Tx], x: Tx) -> ModelResult<Tx> {
        let features = self.encode_features(tape, bound, x)?;
        self.decode_recon(tape, bound, features)
    }

    /// Encoder feature map flattened to `[grid*grid, channels]` tokens,
    /// row-major over spatial positions.
    pub fn encode(&self, image: &BoundaryImage) -> ModelResult<ConditioningContext> {
        if image.size() != self.cfg.size {
            return Err(ModelError::Config(format!(
                "image size {} does not match encoder size {}",
                image.size(),
                self.cfg.size
            )));
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let s = self.cfg.size;
        let x = tape.constant(Tensor::from_vec(&[1, 3, s, s], image.pixels.data().to_vec())?);
        let features = self.encode_features(&mut tape, &bound, x)?;
        let value = tape.value(features);
        let grid = self.cfg.feature_grid();
        let dim = self.cfg.token_dim();
        let mut tokens = vec![0.0; grid * grid * dim];
        let src = value.data();
        for p in 0..grid * grid {
            for c in 0..dim {
                tokens[p * dim + c] = src[c * grid * grid + p];
            }
        }
        ConditioningContext::new(Tensor::from_vec(&[grid * grid, dim], tokens)?)
    }

    pub fn save(
        &self,
        path: &Path,
        phase: &str,
        step: u64,
        seed: u64,
        lineage: Vec<String>,
        config: serde_json::Value,
    ) -> ModelResult<CheckpointHeader> {
        check_finetune_lineage(phase, &lineage)?;
        let header = CheckpointHeader {
            format_version: 0,
            kind: BOUNDARY_CHECKPOINT_KIND.to_string(),
            phase: phase.to_string(),
            lineage,
            step,
            seed,
            config,
            params: Vec::new(),
        };
        checkpoint::save(path, header.clone(), &self.params)?;
        Ok(header)
    }

    pub fn load(path: &Path) -> ModelResult<(BoundaryModel, CheckpointHeader)> {
        let (header, values) = checkpoint::load(path)?;
        let model = BoundaryModel::from_checkpoint(&header, &values)?;
        Ok((model, header))
    }

    fn from_checkpoint(
        header: &CheckpointHeader,
        values: &HashMap<String, Tensor>,
    ) -> ModelResult<BoundaryModel> {
        if header.kind != BOUNDARY_CHECKPOINT_KIND {
            return Err(ModelError::Config(format!(
                "expected a {} checkpoint, found {}",
                BOUNDARY_CHECKPOINT_KIND, header.kind
            )));
        }
        check_finetune_lineage(&header.phase, &header.lineage)?;
        let train_cfg: BoundaryTrainConfig = serde_json::from_value(header.config.clone())?;
        let mut model = BoundaryModel::new(train_cfg.model, 0)?;
        model.params.import(values)?;
        Ok(model)
    }
}

fn sigmoid(tape: &mut Tape, x: Tx) -> Tx {
    let half = tape.mul_scalar(x, 0.5);
    let t = tape.tanh(half);
    let shifted = tape.add_scalar(t, 1.0);
    tape.mul_scalar(shifted, 0.5)
}

/// Fine-tune checkpoints must say what they were tuned from.
fn check_finetune_lineage(phase: &str, lineage: &[String]) -> ModelResult<()> {
    if phase == "finetune" && lineage.is_empty() {
        return Err(ModelError::Config(
            "fine-tune checkpoint carries no lineage back to a pretrained encoder".into(),
        ));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryTrainConfig {
    pub model: BoundaryModelConfig,
    pub batch_size: usize,
    pub learning_rate: Real,
    pub decay_steps: Vec<u64>,
    pub decay_factor: Real,
    pub total_steps: u64,
    pub seed: u64,
}

impl BoundaryTrainConfig {
    pub fn desk() -> BoundaryTrainConfig {
        BoundaryTrainConfig {
            model: BoundaryModelConfig::desk(),
            batch_size: 8,
            learning_rate: 1e-3,
            decay_steps: vec![2500],
            decay_factor: 0.1,
            total_steps: 3000,
            seed: 0,
        }
    }

    pub fn paper() -> BoundaryTrainConfig {
        BoundaryTrainConfig {
            model: BoundaryModelConfig::paper(),
            batch_size: 64,
            learning_rate: 1e-4,
            decay_steps: vec![20_000],
            decay_factor: 0.1,
            total_steps: 30_000,
            seed: 0,
        }
    }

    pub fn validate(&self) -> ModelResult<()> {
        self.model.validate()?;
        validate_train_knobs(self.batch_size, self.learning_rate, self.decay_factor, self.total_steps)
    }
}

fn validate_train_knobs(
    batch_size: usize,
    learning_rate: Real,
    decay_factor: Real,
    total_steps: u64,
) -> ModelResult<()> {
    if batch_size == 0 {
        return Err(ModelError::Config("batch size must be >= 1".into()));
    }
    if !learning_rate.is_finite() || learning_rate <= 0.0 {
        return Err(ModelError::Config(format!("learning rate {} invalid", learning_rate)));
    }
    if !decay_factor.is_finite() || decay_factor <= 0.0 || decay_factor > 1.0 {
        return Err(ModelError::Config(format!("decay factor {} outside (0,1]", decay_factor)));
    }
    if total_steps == 0 {
        return Err(ModelError::Config("total steps must be >= 1".into()));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub struct BoundaryStepStats {
    pub step: u64,
    /// Mean absolute reconstruction error per channel value.
    pub loss: Real,
}

pub struct BoundaryTrainer {
    pub model: BoundaryModel,
    pub cfg: BoundaryTrainConfig,
    opt: Adam,
    step: u64,
    lineage: Vec<String>,
}

impl BoundaryTrainer {
    pub fn new(cfg: BoundaryTrainConfig) -> ModelResult<BoundaryTrainer> {
        cfg.validate()?;
        let model = BoundaryModel::new(cfg.model.clone(), cfg.seed)?;
        let opt = Adam::new(cfg.learning_rate).with_decay(cfg.decay_steps.clone(), cfg.decay_factor);
        Ok(BoundaryTrainer { model, cfg, opt, step: 0, lineage: Vec::new() })
    }

    /// Continue from a pretrained autoencoder with the same architecture.
    pub fn finetune_from(cfg: BoundaryTrainConfig, base: &Path) -> ModelResult<BoundaryTrainer> {
        cfg.validate()?;
        let (model, header) = BoundaryModel::load(base)?;
        if model.cfg != cfg.model {
            return Err(ModelError::Config(format!(
                "fine-tune config {:?} does not match checkpoint architecture {:?}",
                cfg.model, model.cfg
            )));
        }
        let mut lineage = header.lineage.clone();
        lineage.push(header.identity());
        let opt = Adam::new(cfg.learning_rate).with_decay(cfg.decay_steps.clone(), cfg.decay_factor);
        Ok(BoundaryTrainer { model, cfg, opt, step: 0, lineage })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn lineage(&self) -> &[String] {
        &self.lineage
    }

    pub fn train_step(&mut self, images: &[BoundaryImage]) -> ModelResult<BoundaryStepStats> {
        if images.is_empty() {
            return Err(ModelError::DegenerateInput("empty image batch".into()));
        }
        let s = self.cfg.model.size;
        let mut data = Vec::with_capacity(images.len() * 3 * s * s);
        for image in images {
            if image.size() != s {
                return Err(ModelError::Config(format!(
                    "batch image size {} does not match encoder size {}",
                    image.size(),
                    s
                )));
            }
            data.extend_from_slice(image.pixels.data());
        }
        let batch = Tensor::from_vec(&[images.len(), 3, s, s], data)?;

        let mut tape = Tape::new();
        let bound = self.model.params.bind(&mut tape);
        let x = tape.constant(batch);
        let recon = self.model.forward_recon(&mut tape, &bound, x)?;
        let loss = tape.l1(recon, x)?;
        let loss_value = tape.value(loss).item()?;
        if !loss_value.is_finite() {
            return Err(ModelError::Train(format!(
                "non-finite reconstruction loss {} at step {}",
                loss_value, self.step
            )));
        }
        tape.backward(loss)?;
        self.model.params.absorb_grads(&mut tape, &bound)?;
        let grad_norm = self.model.params.grad_norm();
        if !grad_norm.is_finite() {
            return Err(ModelError::Train(format!(
                "non-finite gradient norm at step {}",
                self.step
            )));
        }
        self.opt.step(&mut self.model.params);
        self.step += 1;
        Ok(BoundaryStepStats { step: self.step, loss: loss_value })
    }

    pub fn save(&self, path: &Path, phase: &str) -> ModelResult<CheckpointHeader> {
        self.model.save(
            path,
            phase,
            self.step,
            self.cfg.seed,
            self.lineage.clone(),
            serde_json::to_value(&self.cfg)?,
        )
    }
}

// ── Random topologies ───────────────────────────────────────────────────

/// Category mix for the non-living rooms, matching the synthetic corpus.
const ROOM_CATEGORY_WEIGHTS: [(RoomCategory, Real); 5] = [
    (RoomCategory::Bedroom, 0.42),
    (RoomCategory::Bathroom, 0.18),
    (RoomCategory::Kitchen, 0.14),
    (RoomCategory::Balcony, 0.14),
    (RoomCategory::Storage, 0.12),
];

/// Wall-sharing rates: the living room is the hub of a floorplan and touches
/// almost every other room; other pairs meet far less often.
const ADJACENCY_RATE_LIVING: Real = 0.8;
const ADJACENCY_RATE_OTHER: Real = 0.3;

/// Sample a plausible room graph: 4 to 8 rooms, exactly one living room at a
/// random slot, remaining categories and pairwise adjacencies drawn from the
/// corpus rates above.
pub fn random_topology<R: Rng>(rng: &mut R) -> TopologyGraph {
    let count = rng.random_range(4..=MAX_ROOMS);
    let living_slot = rng.random_range(0..count);
    let mut rooms = Vec::with_capacity(count);
    for slot in 0..count {
        if slot == living_slot {
            rooms.push(RoomCategory::LivingRoom);
            continue;
        }
        let mut pick = rng.random::<Real>();
        let mut category = ROOM_CATEGORY_WEIGHTS[ROOM_CATEGORY_WEIGHTS.len() - 1].0;
        for &(cat, w) in &ROOM_CATEGORY_WEIGHTS {
            if pick < w {
                category = cat;
                break;
            }
            pick -= w;
        }
        rooms.push(category);
    }
    let mut adjacency = Vec::new();
    for i in 0..count {
        for j in i + 1..count {
            let rate = if i == living_slot || j == living_slot {
                ADJACENCY_RATE_LIVING
            } else {
                ADJACENCY_RATE_OTHER
            };
            if rng.random::<Real>() < rate {
                adjacency.push((i, j));
            }
        }
    }
    TopologyGraph::new(rooms, adjacency).expect("indices are in range by construction")
}

// ── Topology encoder ────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopologyModelConfig {
    pub stack: StackConfig,
}

impl TopologyModelConfig {
    pub fn desk() -> TopologyModelConfig {
        TopologyModelConfig { stack: StackConfig::desk() }
    }

    /// Full-size configuration matching the published architecture.
    pub fn paper() -> TopologyModelConfig {
        TopologyModelConfig { stack: StackConfig::paper() }
    }

    pub fn validate(&self) -> ModelResult<()> {
        self.stack.validate()?;
        if self.stack.cond_dim.is_some() {
            return Err(ModelError::Config(
                "the room encoder takes no cross-attention conditioning".into(),
            ));
        }
        Ok(())
    }
}

/// Pre-norm self-attention layer whose attention is restricted by an
/// explicit per-pair mask.
#[derive(Clone, Debug)]
struct RoomLayer {
    attn_norm: Norm,
    attn: MultiHeadAttention,
    ffn_norm: Norm,
    ffn: FeedForward,
}

impl RoomLayer {
    fn init<R: Rng>(
        params: &mut ParamSet,
        name: &str,
        cfg: &StackConfig,
        rng: &mut R,
    ) -> ModelResult<RoomLayer> {
        Ok(RoomLayer {
            attn_norm: Norm::init(params, &format!("{name}.norm_a"), cfg.dim)?,
            attn: MultiHeadAttention::init(params, &format!("{name}.attn"), cfg.dim, cfg.heads, rng)?,
            ffn_norm: Norm::init(params, &format!("{name}.norm_f"), cfg.dim)?,
            ffn: FeedForward::init(params, &format!("{name}.ffn"), cfg.dim, cfg.dim * cfg.ffn_multiplier, rng)?,
        })
    }

    fn forward(
        &self,
        tape: &mut Tape,
        bound: &[Tx],
        x: Tx,
        batch: usize,
        mask: &Rc<Vec<bool>>,
    ) -> ModelResult<Tx> {
        let normed = self.attn_norm.forward(tape, bound, x)?;
        let attended = self.attn.forward_masked(
            tape,
            bound,
            normed,
            normed,
            batch,
            MAX_ROOMS,
            MAX_ROOMS,
            Some(mask.clone()),
        )?;
        let x = tape.add(x, attended)?;
        let normed = self.ffn_norm.forward(tape, bound, x)?;
        let ff = self.ffn.forward(tape, bound, normed)?;
        Ok(tape.add(x, ff)?)
    }
}

/// Transformer over the room set. Each room attends to itself and its
/// adjacent rooms only, so the adjacency relation enters through the mask
/// and room order carries no information. Two heads reconstruct the graph
/// from the embeddings: a 7-way category classifier and a 2-way adjacency
/// classifier on symmetrized pair embeddings.
pub struct TopologyModel {
    pub cfg: TopologyModelConfig,
    pub params: ParamSet,
    embed: Linear,
    layers: Vec<RoomLayer>,
    room_head: Linear,
    adj_in: Linear,
    adj_out: Linear,
}

struct TopologyHeads {
    room_logits: Tx,
    room_labels: Vec<usize>,
    adj_logits: Option<Tx>,
    adj_labels: Vec<usize>,
}

impl TopologyModel {
    pub fn new(cfg: TopologyModelConfig, seed: u64) -> ModelResult<TopologyModel> {
        cfg.validate()?;
        let dim = cfg.stack.dim;
        let mut params = ParamSet::new();
        let mut rng = rng_for(seed, 0);
        let embed = Linear::init(&mut params, "embed", CATEGORY_COUNT, dim, &mut rng)?;
        let mut layers = Vec::with_capacity(cfg.stack.layers);
        for i in 0..cfg.stack.layers {
            layers.push(RoomLayer::init(&mut params, &format!("enc.l{i}"), &cfg.stack, &mut rng)?);
        }
        let room_head = Linear::init_zero(&mut params, "room_head", dim, CATEGORY_COUNT)?;
        let adj_in = Linear::init(&mut params, "adj.in", 2 * dim, dim, &mut rng)?;
        let adj_out = Linear::init_zero(&mut params, "adj.out", dim, 2)?;
        Ok(TopologyModel { cfg, params, embed, layers, room_head, adj_in, adj_out })
    }

    fn check_graph(graph: &TopologyGraph) -> ModelResult<()> {
        if graph.rooms.is_empty() {
            return Err(ModelError::DegenerateInput("topology with no rooms".into()));
        }
        if graph.rooms.len() > MAX_ROOMS {
            return Err(ModelError::Config(format!(
                "{} rooms exceed the {}-slot encoder",
                graph.rooms.len(),
                MAX_ROOMS
            )));
        }
        Ok(())
    }

    /// One-hot category rows, `[batch * MAX_ROOMS, CATEGORY_COUNT]`, padding
    /// slots all-zero.
    fn room_inputs(graphs: &[&TopologyGraph]) -> ModelResult<Tensor> {
        let mut data = vec![0.0; graphs.len() * MAX_ROOMS * CATEGORY_COUNT];
        for (b, graph) in graphs.iter().enumerate() {
            for (i, room) in graph.rooms.iter().enumerate() {
                data[(b * MAX_ROOMS + i) * CATEGORY_COUNT + room.index()] = 1.0;
            }
        }
        Ok(Tensor::from_vec(&[graphs.len() * MAX_ROOMS, CATEGORY_COUNT], data)?)
    }

    /// Every room sees itself and its adjacent rooms; padding slots see only
    /// themselves so their values can never reach a real row.
    fn attention_mask(graphs: &[&TopologyGraph]) -> Rc<Vec<bool>> {
        let mut mask = vec![false; graphs.len() * MAX_ROOMS * MAX_ROOMS];
        for (b, graph) in graphs.iter().enumerate() {
            let n = graph.rooms.len();
            for q in 0..MAX_ROOMS {
                let row = (b * MAX_ROOMS + q) * MAX_ROOMS;
                mask[row + q] = true;
                if q < n {
                    for k in 0..n {
                        if k != q && graph.are_adjacent(q, k) {
                            mask[row + k] = true;
                        }
                    }
                }
            }
        }
        Rc::new(mask)
    }

    fn stack_from_inputs(
        &self,
        tape: &mut Tape,
        bound: &[Tx],
        inputs: &Tensor,
        mask: &Rc<Vec<bool>>,
        batch: usize,
    ) -> ModelResult<Tx> {
        let x = tape.constant(inputs.clone());
        let mut x = self.embed.forward(tape, bound, x)?;
        for layer in &self.layers {
            x = layer.forward(tape, bound, x, batch, mask)?;
        }
        Ok(x)
    }

    /// Room embeddings `[batch * MAX_ROOMS, dim]` for the given graphs.
    fn forward_embeddings(
        &self,
        tape: &mut Tape,
        bound: &[Tx],
        graphs: &[&TopologyGraph],
    ) -> ModelResult<Tx> {
        if graphs.is_empty() {
            return Err(ModelError::DegenerateInput("empty topology batch".into()));
        }
        for graph in graphs {
            TopologyModel::check_graph(graph)?;
        }
        let inputs = TopologyModel::room_inputs(graphs)?;
        let mask = TopologyModel::attention_mask(graphs);
        self.stack_from_inputs(tape, bound, &inputs, &mask, graphs.len())
    }

    /// Adjacency logits for explicit embedding-row pairs, averaged over both
    /// concatenation orders so the score cannot depend on pair order.
    fn adjacency_scores(
        &self,
        tape: &mut Tape,
        bound: &[Tx],
        embeddings: Tx,
        rows_a: Rc<Vec<usize>>,
        rows_b: Rc<Vec<usize>>,
    ) -> ModelResult<Tx> {
        let ea = tape.gather_rows(embeddings, rows_a)?;
        let eb = tape.gather_rows(embeddings, rows_b)?;
        let ab = tape.concat(&[ea, eb], 1)?;
        let ba = tape.concat(&[eb, ea], 1)?;
        let mut logits = Vec::with_capacity(2);
        for pair in [ab, ba] {
            let hidden = self.adj_in.forward(tape, bound, pair)?;
            let hidden = tape.gelu(hidden);
            logits.push(self.adj_out.forward(tape, bound, hidden)?);
        }
        let sum = tape.add(logits[0], logits[1])?;
        Ok(tape.mul_scalar(sum, 0.5))
    }

    fn forward_heads(
        &self,
        tape: &mut Tape,
        bound: &[Tx],
        graphs: &[&TopologyGraph],
    ) -> ModelResult<TopologyHeads> {
        let embeddings = self.forward_embeddings(tape, bound, graphs)?;
        let mut room_rows = Vec::new();
        let mut room_labels = Vec::new();
        let mut rows_a = Vec::new();
        let mut rows_b = Vec::new();
        let mut adj_labels = Vec::new();
        for (b, graph) in graphs.iter().enumerate() {
            for (i, room) in graph.rooms.iter().enumerate() {
                room_rows.push(b * MAX_ROOMS + i);
                room_labels.push(room.index());
            }
            for i in 0..graph.rooms.len() {
                for j in i + 1..graph.rooms.len() {
                    rows_a.push(b * MAX_ROOMS + i);
                    rows_b.push(b * MAX_ROOMS + j);
                    adj_labels.push(usize::from(graph.are_adjacent(i, j)));
                }
            }
        }
        let gathered = tape.gather_rows(embeddings, Rc::new(room_rows))?;
        let room_logits = self.room_head.forward(tape, bound, gathered)?;
        let adj_logits = if rows_a.is_empty() {
            None
        } else {
            Some(self.adjacency_scores(tape, bound, embeddings, Rc::new(rows_a), Rc::new(rows_b))?)
        };
        Ok(TopologyHeads { room_logits, room_labels, adj_logits, adj_labels })
    }

    /// Room-embedding tokens for conditioning; padding slots are dropped.
    pub fn encode(&self, graph: &TopologyGraph) -> ModelResult<ConditioningContext> {
        let dim = self.cfg.stack.dim;
        if graph.rooms.is_empty() {
            return Ok(ConditioningContext::empty(dim));
        }
        TopologyModel::check_graph(graph)?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let embeddings = self.forward_embeddings(&mut tape, &bound, &[graph])?;
        let value = tape.value(embeddings);
        let n = graph.rooms.len();
        let mut tokens = Vec::with_capacity(n * dim);
        tokens.extend_from_slice(&value.data()[..n * dim]);
        ConditioningContext::new(Tensor::from_vec(&[n, dim], tokens)?)
    }

    /// Argmax accuracy of both reconstruction heads.
    pub fn evaluate(&self, graphs: &[&TopologyGraph]) -> ModelResult<TopologyEval> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let heads = self.forward_heads(&mut tape, &bound, graphs)?;
        let rooms = heads.room_labels.len();
        let room_values = tape.value(heads.room_logits);
        let mut room_correct = 0usize;
        for (row, &label) in heads.room_labels.iter().enumerate() {
            let mut best = 0;
            for c in 1..CATEGORY_COUNT {
                if room_values.at(&[row, c]) > room_values.at(&[row, best]) {
                    best = c;
                }
            }
            room_correct += usize::from(best == label);
        }
        let pairs = heads.adj_labels.len();
        let mut adj_correct = 0usize;
        if let Some(adj) = heads.adj_logits {
            let adj_values = tape.value(adj);
            for (row, &label) in heads.adj_labels.iter().enumerate() {
                let predicted = usize::from(adj_values.at(&[row, 1]) > adj_values.at(&[row, 0]));
                adj_correct += usize::from(predicted == label);
            }
        }
        Ok(TopologyEval {
            room_accuracy: room_correct as Real / rooms.max(1) as Real,
            adjacency_accuracy: if pairs == 0 { 1.0 } else { adj_correct as Real / pairs as Real },
            rooms,
            pairs,
        })
    }

    pub fn save(
        &self,
        path: &Path,
        phase: &str,
        step: u64,
        seed: u64,
        lineage: Vec<String>,
        config: serde_json::Value,
    ) -> ModelResult<CheckpointHeader> {
        check_finetune_lineage(phase, &lineage)?;
        let header = CheckpointHeader {
            format_version: 0,
            kind: TOPOLOGY_CHECKPOINT_KIND.to_string(),
            phase: phase.to_string(),
            lineage,
            step,
            seed,
            config,
            params: Vec::new(),
        };
        checkpoint::save(path, header.clone(), &self.params)?;
        Ok(header)
    }

    pub fn load(path: &Path) -> ModelResult<(TopologyModel, CheckpointHeader)> {
        let (header, values) = checkpoint::load(path)?;
        let model = TopologyModel::from_checkpoint(&header, &values)?;
        Ok((model, header))
    }

    fn from_checkpoint(
        header: &CheckpointHeader,
        values: &HashMap<String, Tensor>,
    ) -> ModelResult<TopologyModel> {
        if header.kind != TOPOLOGY_CHECKPOINT_KIND {
            return Err(ModelError::Config(format!(
                "expected a {} checkpoint, found {}",
                TOPOLOGY_CHECKPOINT_KIND, header.kind
            )));
        }
        check_finetune_lineage(&header.phase, &header.lineage)?;
        let train_cfg: TopologyTrainConfig = serde_json::from_value(header.config.clone())?;
        let mut model = TopologyModel::new(train_cfg.model, 0)?;
        model.params.import(values)?;
        Ok(model)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TopologyEval {
    pub room_accuracy: Real,
    pub adjacency_accuracy: Real,
    pub rooms: usize,
    pub pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopologyTrainConfig {
    pub model: TopologyModelConfig,
    pub batch_size: usize,
    pub learning_rate: Real,
    pub decay_steps: Vec<u64>,
    pub decay_factor: Real,
    pub total_steps: u64,
    pub seed: u64,
}

impl TopologyTrainConfig {
    pub fn desk() -> TopologyTrainConfig {
        TopologyTrainConfig {
            model: TopologyModelConfig::desk(),
            batch_size: 32,
            learning_rate: 1e-3,
            decay_steps: vec![4000],
            decay_factor: 0.1,
            total_steps: 5000,
            seed: 0,
        }
    }

    pub fn paper() -> TopologyTrainConfig {
        TopologyTrainConfig {
            model: TopologyModelConfig::paper(),
            batch_size: 2048,
            learning_rate: 1e-4,
            decay_steps: vec![500_000],
            decay_factor: 0.1,
            total_steps: 11_000,
            seed: 0,
        }
    }

    pub fn validate(&self) -> ModelResult<()> {
        self.model.validate()?;
        validate_train_knobs(self.batch_size, self.learning_rate, self.decay_factor, self.total_steps)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TopologyStepStats {
    pub step: u64,
    pub room_loss: Real,
    pub adjacency_loss: Real,
    pub total: Real,
    pub room_correct: usize,
    pub rooms: usize,
    pub adjacency_correct: usize,
    pub pairs: usize,
}

pub struct TopologyTrainer {
    pub model: TopologyModel,
    pub cfg: TopologyTrainConfig,
    opt: Adam,
    step: u64,
    lineage: Vec<String>,
}

impl TopologyTrainer {
    pub fn new(cfg: TopologyTrainConfig) -> ModelResult<TopologyTrainer> {
        cfg.validate()?;
        let model = TopologyModel::new(cfg.model.clone(), cfg.seed)?;
        let opt = Adam::new(cfg.learning_rate).with_decay(cfg.decay_steps.clone(), cfg.decay_factor);
        Ok(TopologyTrainer { model, cfg, opt, step: 0, lineage: Vec::new() })
    }

    pub fn finetune_from(cfg: TopologyTrainConfig, base: &Path) -> ModelResult<TopologyTrainer> {
        cfg.validate()?;
        let (model, header) = TopologyModel::load(base)?;
        if model.cfg != cfg.model {
            return Err(ModelError::Config(format!(
                "fine-tune config {:?} does not match checkpoint architecture {:?}",
                cfg.model, model.cfg
            )));
        }
        let mut lineage = header.lineage.clone();
        lineage.push(header.identity());
        let opt = Adam::new(cfg.learning_rate).with_decay(cfg.decay_steps.clone(), cfg.decay_factor);
        Ok(TopologyTrainer { model, cfg, opt, step: 0, lineage })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn lineage(&self) -> &[String] {
        &self.lineage
    }

    pub fn train_step(&mut self, graphs: &[&TopologyGraph]) -> ModelResult<TopologyStepStats> {
        let mut tape = Tape::new();
        let bound = self.model.params.bind(&mut tape);
        let heads = self.model.forward_heads(&mut tape, &bound, graphs)?;

        let room_ce =
            tape.cross_entropy_logits(heads.room_logits, Rc::new(heads.room_labels.clone()), None)?;
        let (total, adj_value) = match heads.adj_logits {
            Some(adj) => {
                let adj_ce =
                    tape.cross_entropy_logits(adj, Rc::new(heads.adj_labels.clone()), None)?;
                (tape.add(room_ce, adj_ce)?, tape.value(adj_ce).item()?)
            }
            None => (room_ce, 0.0),
        };
        let room_value = tape.value(room_ce).item()?;
        let total_value = tape.value(total).item()?;
        if !total_value.is_finite() {
            return Err(ModelError::Train(format!(
                "non-finite loss {} (rooms {}, adjacency {}) at step {}",
                total_value, room_value, adj_value, self.step
            )));
        }

        let room_values = tape.value(heads.room_logits).clone();
        let mut room_correct = 0usize;
        for (row, &label) in heads.room_labels.iter().enumerate() {
            let mut best = 0;
            for c in 1..CATEGORY_COUNT {
                if room_values.at(&[row, c]) > room_values.at(&[row, best]) {
                    best = c;
                }
            }
            room_correct += usize::from(best == label);
        }
        let mut adj_correct = 0usize;
        if let Some(adj) = heads.adj_logits {
            let adj_values = tape.value(adj).clone();
            for (row, &label) in heads.adj_labels.iter().enumerate() {
                let predicted = usize::from(adj_values.at(&[row, 1]) > adj_values.at(&[row, 0]));
                adj_correct += usize::from(predicted == label);
            }
        }

        tape.backward(total)?;
        self.model.params.absorb_grads(&mut tape, &bound)?;
        let grad_norm = self.model.params.grad_norm();
        if !grad_norm.is_finite() {
            return Err(ModelError::Train(format!(
                "non-finite gradient norm at step {}",
                self.step
            )));
        }
        self.opt.step(&mut self.model.params);
        self.step += 1;
        Ok(TopologyStepStats {
            step: self.step,
            room_loss: room_value,
            adjacency_loss: adj_value,
            total: total_value,
            room_correct,
            rooms: heads.room_labels.len(),
            adjacency_correct: adj_correct,
            pairs: heads.adj_labels.len(),
        })
    }

    pub fn save(&self, path: &Path, phase: &str) -> ModelResult<CheckpointHeader> {
        self.model.save(
            path,
            phase,
            self.step,
            self.cfg.seed,
            self.lineage.clone(),
            serde_json::to_value(&self.cfg)?,
        )
    }
}

// ── Payload dispatch ────────────────────────────────────────────────────

/// A constraint as it arrives from outside: an outer-wall polygon on the
/// reference canvas, or a room graph. Empty payloads mean unconstrained.
#[derive(Clone, Debug)]
pub enum ConstraintPayload {
    Boundary(Vec<[Real; 2]>),
    Topology(TopologyGraph),
}

impl ConstraintPayload {
    pub fn is_empty(&self) -> bool {
        match self {
            ConstraintPayload::Boundary(vertices) => vertices.is_empty(),
            ConstraintPayload::Topology(graph) => graph.rooms.is_empty(),
        }
    }
}

/// A trained encoder of either kind, loadable from a checkpoint without the
/// caller knowing which kind the file holds.
pub enum ConstraintEncoder {
    Boundary(BoundaryModel),
    Topology(TopologyModel),
}

impl ConstraintEncoder {
    pub fn token_dim(&self) -> usize {
        match self {
            ConstraintEncoder::Boundary(model) => model.cfg.token_dim(),
            ConstraintEncoder::Topology(model) => model.cfg.stack.dim,
        }
    }

    pub fn load(path: &Path) -> ModelResult<ConstraintEncoder> {
        let (header, values) = checkpoint::load(path)?;
        match header.kind.as_str() {
            BOUNDARY_CHECKPOINT_KIND => Ok(ConstraintEncoder::Boundary(
                BoundaryModel::from_checkpoint(&header, &values)?,
            )),
            TOPOLOGY_CHECKPOINT_KIND => Ok(ConstraintEncoder::Topology(
                TopologyModel::from_checkpoint(&header, &values)?,
            )),
            other => Err(ModelError::Config(format!(
                "checkpoint kind {} is not a constraint encoder",
                other
            ))),
        }
    }

    /// Encode a payload into conditioning tokens. Boundary polygons are
    /// rasterized the way inference inputs are drawn: plain strokes, no
    /// distance rings. An empty payload encodes to an empty context so
    /// generation degrades to unconstrained.
    pub fn encode(&self, payload: &ConstraintPayload) -> ModelResult<ConditioningContext> {
        match (self, payload) {
            (ConstraintEncoder::Boundary(model), ConstraintPayload::Boundary(vertices)) => {
                if vertices.is_empty() {
                    return Ok(ConditioningContext::empty(model.cfg.token_dim()));
                }
                let image = rasterize_boundary(vertices, RasterMode::Finetune, model.cfg.size)?;
                model.encode(&image)
            }
            (ConstraintEncoder::Topology(model), ConstraintPayload::Topology(graph)) => {
                model.encode(graph)
            }
            (ConstraintEncoder::Boundary(_), ConstraintPayload::Topology(_)) => Err(
                ModelError::Config("topology payload handed to a boundary encoder".into()),
            ),
            (ConstraintEncoder::Topology(_), ConstraintPayload::Boundary(_)) => Err(
                ModelError::Config("boundary payload handed to a topology encoder".into()),
            ),
        }
    }
}
