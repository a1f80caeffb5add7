//! Edge classifier: scores every unordered pair of junction slots as wall /
//! not-wall, with an auxiliary interpolation-coefficient regression that
//! forces the features to encode positions along candidate segments.
//!
//! The token set is the 1378 candidate pairs. Padded candidates (any pair
//! touching a background slot) carry no information and are skipped outright:
//! attention over the remaining tokens plus the row-masked loss is exactly
//! equivalent, entry for entry, to running all 1378 tokens with a visibility
//! mask, and roughly thirty times cheaper at typical occupancy.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use gsdiff_graph::{Node, StructuralGraph, N_MAX};
use gsdiff_tensor::checkpoint::{self, CheckpointHeader};
use gsdiff_tensor::optim::Adam;
use gsdiff_tensor::rng::{rng_for, sample_truncated_normal, ChaCha8Rng};
use gsdiff_tensor::tape::{Tape, Tx};
use gsdiff_tensor::{ParamSet, Real, Tensor};

use crate::blocks::{
    coord_encoding, ConditioningBatch, ConditioningContext, DecoderStack, Linear, StackConfig,
};
use crate::diffusion::COORD_CLIP_MAX;
use crate::error::{ModelError, ModelResult};
use crate::node_gen::ConditioningMode;

pub const EDGE_CHECKPOINT_KIND: &str = "edge-classifier";

/// All unordered slot pairs.
pub const CANDIDATE_COUNT: usize = N_MAX * (N_MAX - 1) / 2;

/// Coordinate noise scale used during training, in pixels. A literal reading
/// in normalized units would throw nodes across the whole plan.
pub const PERTURB_SIGMA_PIXELS: Real = 1.0;
pub const PERTURB_FLIP_PROB: Real = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CandidateEdge {
    pub i: usize,
    pub j: usize,
    /// True when either endpoint is a background slot; such candidates are
    /// excluded from attention and loss alike.
    pub padding: bool,
}

/// The 1378 candidates in lexicographic (i, j) order, i < j.
pub fn candidate_edges(nodes: &[Node]) -> ModelResult<Vec<CandidateEdge>> {
    if nodes.len() != N_MAX {
        return Err(ModelError::Config(format!(
            "candidate enumeration needs {} slots, got {}",
            N_MAX,
            nodes.len()
        )));
    }
    let mut out = Vec::with_capacity(CANDIDATE_COUNT);
    for i in 0..N_MAX {
        for j in (i + 1)..N_MAX {
            out.push(CandidateEdge {
                i,
                j,
                padding: nodes[i].is_background() || nodes[j].is_background(),
            });
        }
    }
    Ok(out)
}

/// c_lambda = lambda c_i + (1 - lambda) c_j.
pub fn interpolate_point(
    c_i: [Real; 2],
    c_j: [Real; 2],
    lambda: Real,
) -> ModelResult<[Real; 2]> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(ModelError::Config(format!(
            "interpolation coefficient {} outside [0,1]",
            lambda
        )));
    }
    Ok([
        lambda * c_i[0] + (1.0 - lambda) * c_j[0],
        lambda * c_i[1] + (1.0 - lambda) * c_j[1],
    ])
}

/// Undirected edges cannot distinguish lambda from 1 - lambda, so the
/// regression target folds to the nearer endpoint distance.
pub fn lambda_target(lambda: Real) -> Real {
    lambda.min(1.0 - lambda)
}

/// Train-time input corruption: truncated Gaussian jitter on real-node
/// coordinates (sigma in pixels, cut at three sigma, re-clipped to the valid
/// range) and independent semantic bit flips. Background slots and the
/// background bit itself are never touched.
pub fn perturb_nodes<R: Rng>(
    nodes: &[Node],
    rng: &mut R,
    sigma_pixels: Real,
    flip_prob: Real,
) -> ModelResult<Vec<Node>> {
    if !(0.0..=1.0).contains(&flip_prob) {
        return Err(ModelError::Config(format!(
            "flip probability {} outside [0,1]",
            flip_prob
        )));
    }
    if !(sigma_pixels >= 0.0 && sigma_pixels.is_finite()) {
        return Err(ModelError::Config(format!("bad sigma {}", sigma_pixels)));
    }
    let sigma_units = sigma_pixels / 128.0;
    let mut out = nodes.to_vec();
    for node in out.iter_mut() {
        if node.is_background() {
            continue;
        }
        for axis in 0..2 {
            if sigma_units > 0.0 {
                let noise = sample_truncated_normal(rng, sigma_units, 3.0 * sigma_units);
                node.c[axis] = (node.c[axis] + noise).clamp(-1.0, COORD_CLIP_MAX);
            }
        }
        for bit in node.r.iter_mut() {
            if rng.random::<Real>() < flip_prob {
                *bit = 1.0 - *bit;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EdgeModelConfig {
    pub stack: StackConfig,
    pub conditioning: ConditioningMode,
}

impl EdgeModelConfig {
    pub fn desk() -> EdgeModelConfig {
        EdgeModelConfig {
            stack: StackConfig::desk(),
            conditioning: ConditioningMode::None,
        }
    }

    pub fn paper() -> EdgeModelConfig {
        let mut stack = StackConfig::paper();
        stack.layers = 12;
        EdgeModelConfig { stack, conditioning: ConditioningMode::None }
    }

    pub fn conditioned(mut self, mode: ConditioningMode, width: usize) -> EdgeModelConfig {
        self.stack = self.stack.with_conditioning(width);
        self.conditioning = mode;
        self
    }

    fn validate(&self) -> ModelResult<()> {
        self.stack.validate()?;
        if self.stack.dim % 8 != 0 {
            // Each half of the pair feature is a coordinate encoding of
            // width dim/2, which itself must split into sin/cos quartets.
            return Err(ModelError::Config(format!(
                "edge feature dim must be a multiple of 8, got {}",
                self.stack.dim
            )));
        }
        match (self.conditioning, self.stack.cond_dim) {
            (ConditioningMode::None, Some(_)) => Err(ModelError::Config(
                "stack has cross-attention but no conditioning mode".into(),
            )),
            (ConditioningMode::Boundary | ConditioningMode::Topology, None) => {
                Err(ModelError::Config(
                    "conditioning mode set but stack has no cross-attention width".into(),
                ))
            }
            _ => Ok(()),
        }
    }
}

pub struct EdgeModel {
    pub cfg: EdgeModelConfig,
    pub params: ParamSet,
    semantic_map: Linear,
    stack: DecoderStack,
    cls_head: Linear,
    lam_head: Linear,
}

/// Result of a clean-input probe over one graph's candidate set.
#[derive(Clone, Copy, Debug)]
pub struct EdgeEval {
    pub accuracy: Real,
    pub lambda_mae: Real,
    pub candidates: usize,
}

impl EdgeModel {
    /// Fresh model. Both heads start at zero: classification logits are
    /// uniform (cross-entropy ln 2) and the interpolation output sits at the
    /// center of its range.
    pub fn new(cfg: EdgeModelConfig, seed: u64) -> ModelResult<EdgeModel> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let mut rng = rng_for(seed, 0);
        let half = cfg.stack.dim / 2;
        let semantic_map = Linear::init(&mut params, "sem", 8, half, &mut rng)?;
        let stack = DecoderStack::init(&mut params, "stack", &cfg.stack, &mut rng)?;
        let cls_head = Linear::init_zero(&mut params, "cls", cfg.stack.dim, 2)?;
        let lam_head = Linear::init_zero(&mut params, "lam", cfg.stack.dim, 1)?;
        Ok(EdgeModel { cfg, params, semantic_map, stack, cls_head, lam_head })
    }

    /// Half-width feature of one node: coordinate encoding next to the
    /// semantic map input (r, b). The semantic half is returned as the raw
    /// 8-vector; the linear map is applied on-tape so it can train.
    fn node_semantic_input(node: &Node) -> [Real; 8] {
        let mut s = [0.0; 8];
        s[..7].copy_from_slice(&node.r);
        s[7] = node.b;
        s
    }

    /// Token features for the given candidates: f_ij = f_i + f_j + f_lambda,
    /// where each f is (coordinate encoding | semantic map) at width dim.
    /// `points` carries one interpolation coordinate per candidate.
    fn candidate_tokens(
        &self,
        tape: &mut Tape,
        bound: &[Tx],
        nodes: &[Node],
        picks: &[(CandidateEdge, [Real; 2])],
    ) -> ModelResult<Tx> {
        let half = self.cfg.stack.dim / 2;
        let rows = picks.len();
        let mut coord_part = Vec::with_capacity(rows * half);
        let mut sem_part = Vec::with_capacity(rows * 8);
        for (cand, point) in picks {
            let ci = coord_encoding(nodes[cand.i].c, half)?;
            let cj = coord_encoding(nodes[cand.j].c, half)?;
            let cl = coord_encoding(*point, half)?;
            for k in 0..half {
                coord_part.push(ci[k] + cj[k] + cl[k]);
            }
            let si = Self::node_semantic_input(&nodes[cand.i]);
            let sj = Self::node_semantic_input(&nodes[cand.j]);
            // The interpolation point's semantic input is all zero, so its
            // mapped feature is the map's bias; feeding one extra unit row
            // through the same linear map keeps that consistent.
            for k in 0..8 {
                sem_part.push(si[k] + sj[k]);
            }
        }
        let coord = tape.constant(Tensor::from_vec(&[rows, half], coord_part)?);
        let sem_in = tape.constant(Tensor::from_vec(&[rows, 8], sem_part)?);
        let sem_mapped = self.semantic_map.forward(tape, bound, sem_in)?;
        // f_lambda's semantic half = bias alone; the two endpoint biases are
        // already counted twice inside sem_mapped's affine output, so add
        // one more bias copy rather than a third full map application.
        let bias = tape.constant(Tensor::zeros(&[rows, 8]));
        let bias_only = self.semantic_map.forward(tape, bound, bias)?;
        let sem = tape.add(sem_mapped, bias_only)?;
        let tokens = tape.concat(&[coord, sem], 1)?;
        Ok(tokens)
    }

    /// Decoder pass over prepared candidate tokens. Returns (logits [M,2],
    /// lambda predictions [M,1] bounded to (0, 0.5)).
    fn forward_tokens(
        &self,
        tape: &mut Tape,
        bound: &[Tx],
        tokens: Tx,
        count: usize,
        ctx: Option<&ConditioningBatch>,
    ) -> ModelResult<(Tx, Tx)> {
        let h = self.stack.forward(tape, bound, tokens, 1, count, ctx, None)?;
        let logits = self.cls_head.forward(tape, bound, h)?;
        let raw = self.lam_head.forward(tape, bound, h)?;
        // 0.5 * sigmoid(x) = 0.25 (tanh(x/2) + 1).
        let half_arg = tape.mul_scalar(raw, 0.5);
        let t = tape.tanh(half_arg);
        let scaled = tape.mul_scalar(t, 0.25);
        let lam = tape.add_scalar(scaled, 0.25);
        Ok((logits, lam))
    }

    /// Deterministic edge inference. Interpolation features sit at the
    /// segment midpoint; a candidate becomes an edge when the softmax
    /// probability of the positive class reaches `threshold`.
    pub fn predict_edges(
        &self,
        nodes: &[Node],
        ctx: Option<&ConditioningContext>,
        threshold: Real,
    ) -> ModelResult<Vec<(usize, usize)>> {
        let picks: Vec<(CandidateEdge, [Real; 2])> = candidate_edges(nodes)?
            .into_iter()
            .filter(|c| !c.padding)
            .map(|c| {
                interpolate_point(nodes[c.i].c, nodes[c.j].c, 0.5).map(|p| (c, p))
            })
            .collect::<ModelResult<_>>()?;
        if picks.is_empty() {
            return Ok(Vec::new());
        }
        let batch = match ctx {
            Some(c) => ConditioningBatch::stack(&[c])?,
            None => None,
        };
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let tokens = self.candidate_tokens(&mut tape, &bound, nodes, &picks)?;
        let (logits, _) = self.forward_tokens(&mut tape, &bound, tokens, picks.len(), batch.as_ref())?;
        let logits = tape.value(logits);
        let mut edges = Vec::new();
        for (row, (cand, _)) in picks.iter().enumerate() {
            let l_false = logits.at(&[row, 0]);
            let l_true = logits.at(&[row, 1]);
            // softmax(true) without exponent overflow.
            let m = l_false.max(l_true);
            let p_true = (l_true - m).exp() / ((l_false - m).exp() + (l_true - m).exp());
            if p_true >= threshold {
                edges.push((cand.i, cand.j));
            }
        }
        Ok(edges)
    }

    /// Clean-input quality probe: no jitter, no flips. Classification
    /// accuracy counts argmax hits over non-padding candidates; the
    /// regression error is |predicted - folded target| with the
    /// interpolation coefficient drawn fresh per candidate from `rng`.
    pub fn evaluate<R: Rng>(
        &self,
        graph: &StructuralGraph,
        ctx: Option<&ConditioningContext>,
        rng: &mut R,
    ) -> ModelResult<EdgeEval> {
        let mut picks = Vec::new();
        let mut targets = Vec::new();
        let mut labels = Vec::new();
        for cand in candidate_edges(&graph.nodes)? {
            if cand.padding {
                continue;
            }
            let lambda: Real = rng.random();
            let point = interpolate_point(graph.nodes[cand.i].c, graph.nodes[cand.j].c, lambda)?;
            picks.push((cand, point));
            targets.push(lambda_target(lambda));
            labels.push(graph.edges.binary_search(&(cand.i, cand.j)).is_ok());
        }
        if picks.is_empty() {
            return Err(ModelError::DegenerateInput(
                "graph has fewer than two real nodes; nothing to evaluate".into(),
            ));
        }
        let batch = match ctx {
            Some(c) => ConditioningBatch::stack(&[c])?,
            None => None,
        };
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let tokens = self.candidate_tokens(&mut tape, &bound, &graph.nodes, &picks)?;
        let (logits, lam) =
            self.forward_tokens(&mut tape, &bound, tokens, picks.len(), batch.as_ref())?;
        let logits_v = tape.value(logits);
        let lam_v = tape.value(lam);
        let mut correct = 0usize;
        let mut abs_err = 0.0;
        for (row, &label) in labels.iter().enumerate() {
            let predicted = logits_v.at(&[row, 1]) > logits_v.at(&[row, 0]);
            correct += (predicted == label) as usize;
            abs_err += (lam_v.at(&[row, 0]) - targets[row]).abs();
        }
        Ok(EdgeEval {
            accuracy: correct as Real / picks.len() as Real,
            lambda_mae: abs_err / picks.len() as Real,
            candidates: picks.len(),
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
        let header = CheckpointHeader {
            format_version: 0,
            kind: EDGE_CHECKPOINT_KIND.to_string(),
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

    pub fn load(path: &Path) -> ModelResult<(EdgeModel, CheckpointHeader)> {
        let (header, values) = checkpoint::load(path)?;
        if header.kind != EDGE_CHECKPOINT_KIND {
            return Err(ModelError::Config(format!(
                "expected a {} checkpoint, found {}",
                EDGE_CHECKPOINT_KIND, header.kind
            )));
        }
        let train_cfg: EdgeTrainConfig = serde_json::from_value(header.config.clone())?;
        let mut model = EdgeModel::new(train_cfg.model, 0)?;
        model.params.import(&values)?;
        Ok((model, header))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EdgeTrainConfig {
    pub model: EdgeModelConfig,
    pub learning_rate: Real,
    pub decay_steps: Vec<u64>,
    pub decay_factor: Real,
    /// Optimizer steps; each step consumes one graph.
    pub total_steps: u64,
    pub seed: u64,
    pub sigma_pixels: Real,
    pub flip_prob: Real,
}

impl EdgeTrainConfig {
    pub fn desk() -> EdgeTrainConfig {
        EdgeTrainConfig {
            model: EdgeModelConfig::desk(),
            // The interpolation head's gradient is symmetry-suppressed at
            // initialization, so the small desk model needs a hotter rate
            // than the paper-scale preset to clear the plateau quickly.
            learning_rate: 1e-3,
            decay_steps: Vec::new(),
            decay_factor: 0.1,
            total_steps: 4000,
            seed: 0,
            sigma_pixels: PERTURB_SIGMA_PIXELS,
            flip_prob: PERTURB_FLIP_PROB,
        }
    }

    pub fn paper() -> EdgeTrainConfig {
        EdgeTrainConfig {
            model: EdgeModelConfig::paper(),
            learning_rate: 1e-4,
            decay_steps: vec![500_000],
            decay_factor: 0.1,
            total_steps: 1_000_000,
            seed: 0,
            sigma_pixels: PERTURB_SIGMA_PIXELS,
            flip_prob: PERTURB_FLIP_PROB,
        }
    }

    fn validate(&self) -> ModelResult<()> {
        self.model.validate()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ModelError::Config(format!(
                "bad learning rate {}",
                self.learning_rate
            )));
        }
        if self.total_steps == 0 {
            return Err(ModelError::Config("total steps must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EdgeStepStats {
    pub step: u64,
    pub cls_loss: Real,
    pub lambda_loss: Real,
    pub total: Real,
    /// Candidates classified correctly this step, out of `candidates`.
    pub correct: usize,
    pub candidates: usize,
}

pub struct EdgeTrainer {
    pub model: EdgeModel,
    pub cfg: EdgeTrainConfig,
    opt: Adam,
    rng: ChaCha8Rng,
    step: u64,
    lineage: Vec<String>,
}

impl EdgeTrainer {
    pub fn new(cfg: EdgeTrainConfig) -> ModelResult<EdgeTrainer> {
        cfg.validate()?;
        let model = EdgeModel::new(cfg.model.clone(), cfg.seed)?;
        let opt = Adam::new(cfg.learning_rate)
            .with_decay(cfg.decay_steps.clone(), cfg.decay_factor);
        let rng = rng_for(cfg.seed, 1);
        Ok(EdgeTrainer { model, cfg, opt, rng, step: 0, lineage: Vec::new() })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update on one labeled graph: jitter the nodes, attach a fresh
    /// random interpolation point to every live candidate, then apply
    /// cross-entropy on the edge labels plus L1 on the folded coefficient.
    pub fn train_step(
        &mut self,
        graph: &StructuralGraph,
        ctx: Option<&ConditioningContext>,
    ) -> ModelResult<EdgeStepStats> {
        let perturbed = perturb_nodes(
            &graph.nodes,
            &mut self.rng,
            self.cfg.sigma_pixels,
            self.cfg.flip_prob,
        )?;
        let mut picks = Vec::new();
        let mut targets = Vec::new();
        let mut labels = Vec::new();
        for cand in candidate_edges(&perturbed)? {
            if cand.padding {
                continue;
            }
            let lambda: Real = self.rng.random();
            let point = interpolate_point(perturbed[cand.i].c, perturbed[cand.j].c, lambda)?;
            picks.push((cand, point));
            targets.push(lambda_target(lambda));
            labels.push(graph.edges.binary_search(&(cand.i, cand.j)).is_ok() as usize);
        }
        if picks.is_empty() {
            return Err(ModelError::DegenerateInput(
                "graph has fewer than two real nodes; no candidates to train on".into(),
            ));
        }
        let count = picks.len();

        let batch = match ctx {
            Some(c) => ConditioningBatch::stack(&[c])?,
            None => None,
        };
        let mut tape = Tape::new();
        let bound = self.model.params.bind(&mut tape);
        let tokens = self
            .model
            .candidate_tokens(&mut tape, &bound, &perturbed, &picks)?;
        let (logits, lam) =
            self.model
                .forward_tokens(&mut tape, &bound, tokens, count, batch.as_ref())?;

        let cls = tape.cross_entropy_logits(logits, std::rc::Rc::new(labels.clone()), None)?;
        let target_t = tape.constant(Tensor::from_vec(&[count, 1], targets)?);
        let lam_l1 = tape.l1(lam, target_t)?;
        let total = tape.add(cls, lam_l1)?;

        let total_v = tape.value(total).item()?;
        if !total_v.is_finite() {
            return Err(ModelError::Train(format!(
                "non-finite edge loss at step {}: cls={} lambda={} candidates={}",
                self.step,
                tape.value(cls).item()?,
                tape.value(lam_l1).item()?,
                count
            )));
        }

        let logits_v = tape.value(logits).clone();
        let mut correct = 0;
        for (row, &label) in labels.iter().enumerate() {
            let predicted = (logits_v.at(&[row, 1]) > logits_v.at(&[row, 0])) as usize;
            correct += (predicted == label) as usize;
        }

        let stats = EdgeStepStats {
            step: self.step + 1,
            cls_loss: tape.value(cls).item()?,
            lambda_loss: tape.value(lam_l1).item()?,
            total: total_v,
            correct,
            candidates: count,
        };

        tape.backward(total)?;
        self.model.params.absorb_grads(&mut tape, &bound)?;
        self.opt.step(&mut self.model.params);
        self.step += 1;
        Ok(stats)
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
