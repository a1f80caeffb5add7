//! Node denoiser: a decoder-only transformer over the 53 junction slots that
//! predicts per-entry noise, plus its trainer and the ancestral sampler.
//!
//! Background slots stay in the token set during both training and sampling;
//! at sampling time nothing is known a priori, so the model must decide for
//! itself which slots to leave as background.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use gsdiff_graph::{Node, StructuralGraph};
use gsdiff_tensor::checkpoint::{self, CheckpointHeader};
use gsdiff_tensor::optim::Adam;
use gsdiff_tensor::rng::{fill_normal, rng_for, ChaCha8Rng};
use gsdiff_tensor::tape::{Tape, Tx};
use gsdiff_tensor::{ParamSet, Real, Tensor};

use crate::align::{node_loss_tape, real_indices, AlignBase};
use crate::blocks::{
    import_partial, ConditioningBatch, ConditioningContext, DecoderStack, Linear, NodeEmbedding,
    StackConfig,
};
use crate::diffusion::{
    clamp_x0, forward_sample, make_schedule, nodes_to_state, reverse_step, state_to_nodes,
    NoiseSchedule, SLOTS, STATE_DIM,
};
use crate::error::{ModelError, ModelResult};

pub const NODE_CHECKPOINT_KIND: &str = "node-denoiser";

/// Which constraint encoder feeds the cross-attention sublayers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningMode {
    None,
    Boundary,
    Topology,
}

impl ConditioningMode {
    pub fn is_none(&self) -> bool {
        matches!(self, ConditioningMode::None)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NodeModelConfig {
    pub stack: StackConfig,
    /// Diffusion step count T.
    pub horizon: usize,
    pub beta_min: Real,
    pub beta_max: Real,
    pub conditioning: ConditioningMode,
}

impl NodeModelConfig {
    pub fn desk() -> NodeModelConfig {
        NodeModelConfig {
            stack: StackConfig::desk(),
            horizon: 100,
            beta_min: 1e-4,
            beta_max: 0.06,
            conditioning: ConditioningMode::None,
        }
    }

    pub fn paper() -> NodeModelConfig {
        NodeModelConfig {
            stack: StackConfig::paper(),
            horizon: 100,
            beta_min: 1e-4,
            beta_max: 0.06,
            conditioning: ConditioningMode::None,
        }
    }

    /// Attach a constraint encoder of the given output width.
    pub fn conditioned(mut self, mode: ConditioningMode, width: usize) -> NodeModelConfig {
        self.stack = self.stack.with_conditioning(width);
        self.conditioning = mode;
        self
    }

    fn validate(&self) -> ModelResult<()> {
        self.stack.validate()?;
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

pub struct NodeModel {
    pub cfg: NodeModelConfig,
    pub params: ParamSet,
    embedding: NodeEmbedding,
    stack: DecoderStack,
    head: Linear,
    sched: NoiseSchedule,
}

impl NodeModel {
    /// Fresh model. The noise-prediction head starts at zero, so an untrained
    /// model predicts exactly zero noise everywhere.
    pub fn new(cfg: NodeModelConfig, seed: u64) -> ModelResult<NodeModel> {
        cfg.validate()?;
        let sched = make_schedule(cfg.horizon, cfg.beta_min, cfg.beta_max)?;
        let mut params = ParamSet::new();
        let mut rng = rng_for(seed, 0);
        let embedding =
            NodeEmbedding::init(&mut params, "embed", cfg.stack.dim, cfg.horizon, &mut rng)?;
        let stack = DecoderStack::init(&mut params, "stack", &cfg.stack, &mut rng)?;
        let head = Linear::init_zero(&mut params, "head", cfg.stack.dim, STATE_DIM)?;
        Ok(NodeModel { cfg, params, embedding, stack, head, sched })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    /// Predict the noise in `v_t` (`[batch*53, 10]`, one timestep per
    /// sample). Returns a `[batch*53, 10]` tape node.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &[Tx],
        v_t: &Tensor,
        timesteps: &[usize],
        ctx: Option<&ConditioningBatch>,
    ) -> ModelResult<Tx> {
        if timesteps.is_empty() {
            return Err(ModelError::Config("empty batch".into()));
        }
        let x = self.embedding.forward(tape, bound, v_t, SLOTS, timesteps)?;
        let h = self
            .stack
            .forward(tape, bound, x, timesteps.len(), SLOTS, ctx, None)?;
        self.head.forward(tape, bound, h)
    }

    /// Single-state inference without gradient bookkeeping.
    pub fn predict_noise(
        &self,
        v_t: &Tensor,
        timesteps: &[usize],
        ctx: Option<&ConditioningBatch>,
    ) -> ModelResult<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let out = self.forward(&mut tape, &bound, v_t, timesteps, ctx)?;
        Ok(tape.value(out).clone())
    }

    /// Draw `count` node sets by running the reverse chain from pure noise.
    /// `ctxs`, when present, provides one conditioning context per sample.
    pub fn sample<R: Rng>(
        &self,
        count: usize,
        ctxs: Option<&[&ConditioningContext]>,
        rng: &mut R,
        clamp: bool,
    ) -> ModelResult<Vec<StructuralGraph>> {
        self.sample_with_steps(count, ctxs, rng, clamp, self.sched.steps)
    }

    /// As [`sample`](Self::sample) with a shorter chain: rebuilds the beta
    /// ramp over `steps` steps. The timestep embedding was trained on indices
    /// up to the configured horizon, so `steps` may not exceed it.
    pub fn sample_with_steps<R: Rng>(
        &self,
        count: usize,
        ctxs: Option<&[&ConditioningContext]>,
        rng: &mut R,
        clamp: bool,
        steps: usize,
    ) -> ModelResult<Vec<StructuralGraph>> {
        if count == 0 {
            return Ok(Vec::new());
        }
        if steps > self.cfg.horizon {
            return Err(ModelError::Config(format!(
                "sampler asked for {} steps but the model was trained with horizon {}",
                steps, self.cfg.horizon
            )));
        }
        let sched = if steps == self.sched.steps {
            self.sched.clone()
        } else {
            make_schedule(steps, self.cfg.beta_min, self.cfg.beta_max)?
        };
        let batch = match ctxs {
            Some(cs) => {
                if cs.len() != count {
                    return Err(ModelError::Config(format!(
                        "{} conditioning contexts for {} samples",
                        cs.len(),
                        count
                    )));
                }
                ConditioningBatch::stack(cs)?
            }
            None => None,
        };

        let mut state = fill_normal(rng, &[count * SLOTS, STATE_DIM], 0.0, 1.0);
        for t in (1..=sched.steps).rev() {
            let eps = self.predict_noise(&state, &vec![t; count], batch.as_ref())?;
            state = reverse_step(&state, t, &eps, &sched, rng, clamp, 1.0)?;
        }
        states_to_graphs(&state, count)
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
            kind: NODE_CHECKPOINT_KIND.to_string(),
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

    /// Rebuild a model from a checkpoint; every parameter must be present.
    pub fn load(path: &Path) -> ModelResult<(NodeModel, CheckpointHeader)> {
        let (header, values) = checkpoint::load(path)?;
        if header.kind != NODE_CHECKPOINT_KIND {
            return Err(ModelError::Config(format!(
                "expected a {} checkpoint, found {}",
                NODE_CHECKPOINT_KIND, header.kind
            )));
        }
        let train_cfg: NodeTrainConfig = serde_json::from_value(header.config.clone())?;
        let mut model = NodeModel::new(train_cfg.model, 0)?;
        model.params.import(&values)?;
        Ok((model, header))
    }

    /// Build a model under `cfg` and copy in every parameter the checkpoint
    /// shares with it. New parameters (for example fresh cross-attention
    /// sublayers) keep their initial values, so a conditioned model warmed
    /// from an unconditioned run starts out computing the same function.
    pub fn warm_start(
        path: &Path,
        cfg: NodeModelConfig,
        seed: u64,
    ) -> ModelResult<(NodeModel, CheckpointHeader, usize)> {
        let (header, values) = checkpoint::load(path)?;
        if header.kind != NODE_CHECKPOINT_KIND {
            return Err(ModelError::Config(format!(
                "expected a {} checkpoint, found {}",
                NODE_CHECKPOINT_KIND, header.kind
            )));
        }
        let mut model = NodeModel::new(cfg, seed)?;
        let loaded = import_partial(&mut model.params, &values)?;
        if loaded == 0 {
            return Err(ModelError::Config(
                "checkpoint shares no parameters with the requested architecture".into(),
            ));
        }
        Ok((model, header, loaded))
    }
}

/// Threshold final states into graphs, one per sample. Real nodes keep their
/// slot order; background slots are dropped entirely, so no half-noised
/// background attributes survive into the output.
fn states_to_graphs(state: &Tensor, count: usize) -> ModelResult<Vec<StructuralGraph>> {
    let clamped = clamp_x0(state)?;
    let mut graphs = Vec::with_capacity(count);
    for b in 0..count {
        let mut sample = Vec::with_capacity(SLOTS * STATE_DIM);
        let base = b * SLOTS * STATE_DIM;
        sample.extend_from_slice(&clamped.data()[base..base + SLOTS * STATE_DIM]);
        let nodes = state_to_nodes(&Tensor::from_vec(&[SLOTS, STATE_DIM], sample)?)?;
        let real: Vec<Node> = nodes.into_iter().filter(|n| !n.is_background()).collect();
        graphs.push(StructuralGraph::new(&real, Vec::new())?);
    }
    Ok(graphs)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NodeTrainConfig {
    pub model: NodeModelConfig,
    pub batch_size: usize,
    pub learning_rate: Real,
    /// Optimizer steps at which the learning rate is multiplied by
    /// `decay_factor`.
    pub decay_steps: Vec<u64>,
    pub decay_factor: Real,
    pub total_steps: u64,
    pub seed: u64,
    /// Numeral bases mixed into the alignment term; empty disables it and
    /// the loss reduces to the plain noise MSE.
    pub alignment_bases: Vec<AlignBase>,
    /// Whether background slots contribute to the MSE term. They carry no
    /// geometry, but predicting their noise keeps the slot-count decision
    /// inside the model, so they stay in by default.
    pub background_in_mse: bool,
}

impl NodeTrainConfig {
    pub fn desk() -> NodeTrainConfig {
        NodeTrainConfig {
            model: NodeModelConfig::desk(),
            batch_size: 32,
            learning_rate: 1e-4,
            decay_steps: vec![15_000],
            decay_factor: 0.1,
            total_steps: 20_000,
            seed: 0,
            alignment_bases: AlignBase::default_mix(),
            background_in_mse: true,
        }
    }

    pub fn paper() -> NodeTrainConfig {
        NodeTrainConfig {
            model: NodeModelConfig::paper(),
            batch_size: 256,
            learning_rate: 1e-4,
            decay_steps: vec![500_000],
            decay_factor: 0.1,
            total_steps: 1_000_000,
            seed: 0,
            alignment_bases: AlignBase::default_mix(),
            background_in_mse: true,
        }
    }

    fn validate(&self) -> ModelResult<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(ModelError::Config("batch size must be >= 1".into()));
        }
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

/// Per-step loss record; the training curve is the sequence of these.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct NodeStepStats {
    pub step: u64,
    pub mse: Real,
    pub align: Real,
    pub total: Real,
}

pub struct NodeTrainer {
    pub model: NodeModel,
    pub cfg: NodeTrainConfig,
    opt: Adam,
    rng: ChaCha8Rng,
    step: u64,
    lineage: Vec<String>,
}

impl NodeTrainer {
    pub fn new(cfg: NodeTrainConfig) -> ModelResult<NodeTrainer> {
        cfg.validate()?;
        let model = NodeModel::new(cfg.model.clone(), cfg.seed)?;
        let opt = Adam::new(cfg.learning_rate)
            .with_decay(cfg.decay_steps.clone(), cfg.decay_factor);
        let rng = rng_for(cfg.seed, 1);
        Ok(NodeTrainer { model, cfg, opt, rng, step: 0, lineage: Vec::new() })
    }

    /// Start a fine-tuning run from a pretrained checkpoint; `cfg.model` may
    /// add conditioning that the base run lacked. The new run's lineage
    /// extends the base checkpoint's.
    pub fn finetune_from(cfg: NodeTrainConfig, base: &Path) -> ModelResult<NodeTrainer> {
        cfg.validate()?;
        let (model, header, _) = NodeModel::warm_start(base, cfg.model.clone(), cfg.seed)?;
        let mut lineage = header.lineage.clone();
        lineage.push(header.identity());
        let opt = Adam::new(cfg.learning_rate)
            .with_decay(cfg.decay_steps.clone(), cfg.decay_factor);
        let rng = rng_for(cfg.seed, 1);
        Ok(NodeTrainer { model, cfg, opt, rng, step: 0, lineage })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One optimizer update on a batch of clean graphs. Timesteps and noise
    /// are drawn from the trainer's own stream, so runs with equal seeds and
    /// equal data are bit-identical.
    pub fn train_step(
        &mut self,
        batch: &[&StructuralGraph],
        ctxs: Option<&[&ConditioningContext]>,
    ) -> ModelResult<NodeStepStats> {
        if batch.is_empty() {
            return Err(ModelError::Config("empty training batch".into()));
        }
        let n = batch.len();
        let horizon = self.model.sched.steps;

        let mut timesteps = Vec::with_capacity(n);
        for _ in 0..n {
            timesteps.push(self.rng.random_range(1..=horizon));
        }
        let eps = fill_normal(&mut self.rng, &[n * SLOTS, STATE_DIM], 0.0, 1.0);

        let mut v_t_data = Vec::with_capacity(n * SLOTS * STATE_DIM);
        let mut real_rows: Vec<Vec<usize>> = Vec::with_capacity(n);
        for (b, g) in batch.iter().enumerate() {
            let v0 = nodes_to_state(&g.nodes)?;
            let span = SLOTS * STATE_DIM;
            let eps_b = Tensor::from_vec(
                &[SLOTS, STATE_DIM],
                eps.data()[b * span..(b + 1) * span].to_vec(),
            )?;
            let noised = forward_sample(&v0, timesteps[b], &eps_b, &self.model.sched)?;
            v_t_data.extend_from_slice(noised.data());
            real_rows.push(
                real_indices(&g.nodes)
                    .into_iter()
                    .map(|i| b * SLOTS + i)
                    .collect(),
            );
        }
        let v_t = Tensor::from_vec(&[n * SLOTS, STATE_DIM], v_t_data)?;

        let mask_storage;
        let mse_rows = if self.cfg.background_in_mse {
            None
        } else {
            let mut flags = vec![false; n * SLOTS];
            for rows in &real_rows {
                for &r in rows {
                    flags[r] = true;
                }
            }
            mask_storage = flags;
            Some(mask_storage.as_slice())
        };

        let ctx_batch = match ctxs {
            Some(cs) => {
                if cs.len() != n {
                    return Err(ModelError::Config(format!(
                        "{} conditioning contexts for a batch of {}",
                        cs.len(),
                        n
                    )));
                }
                ConditioningBatch::stack(cs)?
            }
            None => None,
        };

        let mut tape = Tape::new();
        let bound = self.model.params.bind(&mut tape);
        let eps_hat = self
            .model
            .forward(&mut tape, &bound, &v_t, &timesteps, ctx_batch.as_ref())?;
        let parts = node_loss_tape(
            &mut tape,
            eps_hat,
            &eps,
            &v_t,
            &real_rows,
            &timesteps,
            &self.model.sched,
            &self.cfg.alignment_bases,
            mse_rows,
        )?;
        let total = tape.value(parts.total).item()?;
        if !total.is_finite() {
            return Err(ModelError::Train(format!(
                "non-finite loss at step {}: total={} mse={} align={} timesteps={:?} lr={}",
                self.step, total, parts.mse, parts.align, timesteps, self.opt.current_lr()
            )));
        }

        tape.backward(parts.total)?;
        self.model.params.absorb_grads(&mut tape, &bound)?;
        let grad_norm = self.model.params.grad_norm();
        if !grad_norm.is_finite() {
            return Err(ModelError::Train(format!(
                "non-finite gradient at step {}: |g|={} mse={} align={} timesteps={:?}",
                self.step, grad_norm, parts.mse, parts.align, timesteps
            )));
        }
        self.opt.step(&mut self.model.params);
        self.step += 1;

        Ok(NodeStepStats {
            step: self.step,
            mse: parts.mse,
            align: parts.align,
            total,
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
