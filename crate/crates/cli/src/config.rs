//! Run configuration: preset defaults, optional JSON config file, dotted-key
//! overrides from the command line, and the hash that stamps every artifact.
//!
//! Resolution order (later wins): preset defaults, config file, `--set`
//! overrides and dedicated flags. Dedicated flags are sugar for the dotted
//! key of the same name, so `--seed 7` and `--set seed=7` are equivalent.
//!
//! Randomness: every stage derives its own seed as
//! `derive_seed(root_seed, lane)` (splitmix64 of the root xored with the
//! hashed lane index), and tasks within a stage split further by task index
//! through the same function. Per-sample work is therefore independent of
//! worker count and batch order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use gsdiff_model::constraints::{BoundaryTrainConfig, TopologyTrainConfig};
use gsdiff_model::edge_pred::EdgeTrainConfig;
use gsdiff_model::node_gen::{ConditioningMode, NodeTrainConfig};
use gsdiff_tensor::rng::derive_seed;

use crate::error::{CliError, CliResult, PathContext};

/// Seed lanes, one per stage family. Lane 0 is never used directly so that a
/// raw root seed and a derived stage seed can never collide.
pub mod lanes {
    pub const DATASET: u64 = 1;
    pub const BOUNDARY_PRETRAIN: u64 = 2;
    pub const BOUNDARY_FINETUNE: u64 = 3;
    pub const TOPOLOGY_PRETRAIN: u64 = 4;
    pub const TOPOLOGY_FINETUNE: u64 = 5;
    pub const NODE_TRAIN: u64 = 6;
    pub const EDGE_TRAIN: u64 = 7;
    pub const SAMPLE: u64 = 8;
}

/// Within a stage, trainers reserve task indices 0 (parameter init) and
/// 1 (training stream); harness-side data streams start here.
pub const DATA_STREAM_INDEX: u64 = 2;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub dataset: String,
    pub checkpoints: String,
    pub output: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetCfg {
    pub count: usize,
    pub slant_prob: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderCfg {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub decay_steps: Vec<u64>,
    pub decay_factor: f64,
    pub pretrain_steps: u64,
    pub finetune_steps: u64,
    pub log_every: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeCfg {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub decay_steps: Vec<u64>,
    pub decay_factor: f64,
    pub total_steps: u64,
    pub log_every: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeCfg {
    pub learning_rate: f64,
    pub decay_steps: Vec<u64>,
    pub decay_factor: f64,
    pub total_steps: u64,
    pub sigma_pixels: f64,
    pub flip_prob: f64,
    pub log_every: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleCfg {
    pub count: usize,
    /// Reverse-chain length; 0 means the full trained horizon.
    pub steps: usize,
    pub clamp: bool,
    /// Edge probability threshold used by predict-edges.
    pub threshold: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    /// Conditioning mode for generation: "none", "boundary" or "topology".
    pub constraint: String,
    pub paths: Paths,
    pub dataset: DatasetCfg,
    pub boundary: EncoderCfg,
    pub topology: EncoderCfg,
    pub node: NodeCfg,
    pub edge: EdgeCfg,
    pub sample: SampleCfg,
}

fn desk_defaults() -> RunConfig {
    let node = NodeTrainConfig::desk();
    let edge = EdgeTrainConfig::desk();
    let boundary = BoundaryTrainConfig::desk();
    let topology = TopologyTrainConfig::desk();
    RunConfig {
        preset: "desk".into(),
        seed: 0,
        constraint: "none".into(),
        paths: Paths {
            dataset: "out/dataset".into(),
            checkpoints: "out/checkpoints".into(),
            output: "out/run".into(),
        },
        dataset: DatasetCfg {
            count: 2000,
            slant_prob: 0.15,
        },
        boundary: EncoderCfg {
            batch_size: boundary.batch_size,
            learning_rate: boundary.learning_rate,
            decay_steps: boundary.decay_steps,
            decay_factor: boundary.decay_factor,
            pretrain_steps: boundary.total_steps,
            finetune_steps: 500,
            log_every: 100,
        },
        topology: EncoderCfg {
            batch_size: topology.batch_size,
            learning_rate: topology.learning_rate,
            decay_steps: topology.decay_steps,
            decay_factor: topology.decay_factor,
            pretrain_steps: topology.total_steps,
            finetune_steps: 500,
            log_every: 100,
        },
        node: NodeCfg {
            batch_size: node.batch_size,
            learning_rate: node.learning_rate,
            decay_steps: node.decay_steps,
            decay_factor: node.decay_factor,
            total_steps: node.total_steps,
            log_every: 100,
        },
        edge: EdgeCfg {
            learning_rate: edge.learning_rate,
            decay_steps: edge.decay_steps,
            decay_factor: edge.decay_factor,
            total_steps: edge.total_steps,
            sigma_pixels: edge.sigma_pixels,
            flip_prob: edge.flip_prob,
            log_every: 100,
        },
        sample: SampleCfg {
            count: 100,
            steps: 0,
            clamp: true,
            threshold: 0.5,
        },
    }
}

fn paper_defaults() -> RunConfig {
    let node = NodeTrainConfig::paper();
    let edge = EdgeTrainConfig::paper();
    let boundary = BoundaryTrainConfig::paper();
    let topology = TopologyTrainConfig::paper();
    let mut cfg = desk_defaults();
    cfg.preset = "paper".into();
    cfg.boundary = EncoderCfg {
        batch_size: boundary.batch_size,
        learning_rate: boundary.learning_rate,
        decay_steps: boundary.decay_steps,
        decay_factor: boundary.decay_factor,
        pretrain_steps: boundary.total_steps,
        finetune_steps: 3000,
        log_every: 100,
    };
    cfg.topology = EncoderCfg {
        batch_size: topology.batch_size,
        learning_rate: topology.learning_rate,
        decay_steps: topology.decay_steps,
        decay_factor: topology.decay_factor,
        pretrain_steps: topology.total_steps,
        finetune_steps: 3000,
        log_every: 100,
    };
    cfg.node = NodeCfg {
        batch_size: node.batch_size,
        learning_rate: node.learning_rate,
        decay_steps: node.decay_steps,
        decay_factor: node.decay_factor,
        total_steps: node.total_steps,
        log_every: 100,
    };
    cfg.edge = EdgeCfg {
        learning_rate: edge.learning_rate,
        decay_steps: edge.decay_steps,
        decay_factor: edge.decay_factor,
        total_steps: edge.total_steps,
        sigma_pixels: edge.sigma_pixels,
        flip_prob: edge.flip_prob,
        log_every: 100,
    };
    cfg
}

pub fn preset_defaults(preset: &str) -> CliResult<RunConfig> {
    match preset {
        "desk" => Ok(desk_defaults()),
        "paper" => Ok(paper_defaults()),
        other => Err(CliError::Config(format!(
            "unknown preset {:?}; available: desk, paper",
            other
        ))),
    }
}

/// One `--set key=value` pair with the value parsed as JSON when possible
/// and kept as a string otherwise, so `--set node.total_steps=50` and
/// `--set preset=desk` both do the obvious thing.
#[derive(Clone, Debug)]
pub struct Override {
    pub key: String,
    pub value: serde_json::Value,
}

pub fn parse_override(spec: &str) -> CliResult<Override> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| {
        CliError::Config(format!("override {:?} is not of the form key=value", spec))
    })?;
    if key.is_empty() {
        return Err(CliError::Config(format!("override {:?} has an empty key", spec)));
    }
    let value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    Ok(Override {
        key: key.to_string(),
        value,
    })
}

fn merge_values(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge_values(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn apply_dotted(root: &mut serde_json::Value, key: &str, value: serde_json::Value) -> CliResult<()> {
    let mut slot = root;
    let mut parts = key.split('.').peekable();
    while let Some(part) = parts.next() {
        let obj = slot.as_object_mut().ok_or_else(|| {
            CliError::Config(format!("config key {:?} descends into a non-object", key))
        })?;
        if parts.peek().is_none() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        slot = obj
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    unreachable!("split yields at least one part")
}

/// Build the effective config. `preset_flag` wins over the file's "preset"
/// key; overrides are applied last, in order.
pub fn resolve(
    config_file: Option<&Path>,
    preset_flag: Option<&str>,
    overrides: &[Override],
) -> CliResult<RunConfig> {
    let file_value: Option<serde_json::Value> = match config_file {
        Some(path) => {
            let text = std::fs::read_to_string(path).at_path(path)?;
            Some(serde_json::from_str(&text).at_path(path)?)
        }
        None => None,
    };

    let mut preset = preset_flag.map(str::to_string);
    if preset.is_none() {
        if let Some(v) = &file_value {
            if let Some(p) = v.get("preset").and_then(|p| p.as_str()) {
                preset = Some(p.to_string());
            }
        }
    }
    for o in overrides {
        if o.key == "preset" {
            if let Some(p) = o.value.as_str() {
                preset = Some(p.to_string());
            }
        }
    }
    let preset = preset.unwrap_or_else(|| "desk".into());

    let defaults = preset_defaults(&preset)?;
    let mut merged = serde_json::to_value(&defaults).expect("config serializes");
    if let Some(v) = file_value {
        merge_values(&mut merged, v);
    }
    for o in overrides {
        apply_dotted(&mut merged, &o.key, o.value.clone())?;
    }

    let cfg: RunConfig = serde_json::from_value(merged)
        .map_err(|e| CliError::Config(format!("invalid configuration: {}", e)))?;
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn validate(&self) -> CliResult<()> {
        preset_defaults(&self.preset)?;
        self.conditioning_mode()?;
        if !(0.0..=1.0).contains(&self.dataset.slant_prob) {
            return Err(CliError::Config(format!(
                "dataset.slant_prob {} outside [0, 1]",
                self.dataset.slant_prob
            )));
        }
        if !(0.0..=1.0).contains(&self.sample.threshold) {
            return Err(CliError::Config(format!(
                "sample.threshold {} outside [0, 1]",
                self.sample.threshold
            )));
        }
        if self.dataset.count == 0 {
            return Err(CliError::Config("dataset.count must be >= 1".into()));
        }
        Ok(())
    }

    pub fn conditioning_mode(&self) -> CliResult<ConditioningMode> {
        match self.constraint.as_str() {
            "none" => Ok(ConditioningMode::None),
            "boundary" => Ok(ConditioningMode::Boundary),
            "topology" => Ok(ConditioningMode::Topology),
            other => Err(CliError::Config(format!(
                "unknown constraint {:?}; available: none, boundary, topology",
                other
            ))),
        }
    }

    /// Hex SHA-256 of the canonical JSON form. serde_json maps are sorted,
    /// so the hash is stable across field order in the source file.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        let mut out = String::with_capacity(64);
        for byte in digest {
            out.push_str(&format!("{:02x}", byte));
        }
        out
    }

    pub fn stage_seed(&self, lane: u64) -> u64 {
        derive_seed(self.seed, lane)
    }

    pub fn dataset_dir(&self) -> PathBuf {
        PathBuf::from(&self.paths.dataset)
    }

    pub fn checkpoints_dir(&self) -> PathBuf {
        PathBuf::from(&self.paths.checkpoints)
    }

    pub fn output_dir(&self) -> PathBuf {
        PathBuf::from(&self.paths.output)
    }

    fn encoder_knobs(
        &self,
        src: &EncoderCfg,
        base: BoundaryTrainConfig,
        lane: u64,
        finetune: bool,
    ) -> BoundaryTrainConfig {
        let mut cfg = base;
        cfg.batch_size = src.batch_size;
        cfg.learning_rate = src.learning_rate;
        cfg.decay_steps = src.decay_steps.clone();
        cfg.decay_factor = src.decay_factor;
        cfg.total_steps = if finetune { src.finetune_steps } else { src.pretrain_steps };
        cfg.seed = self.stage_seed(lane);
        cfg
    }

    pub fn boundary_train_config(&self, finetune: bool) -> CliResult<BoundaryTrainConfig> {
        let base = match self.preset.as_str() {
            "paper" => BoundaryTrainConfig::paper(),
            _ => BoundaryTrainConfig::desk(),
        };
        let lane = if finetune { lanes::BOUNDARY_FINETUNE } else { lanes::BOUNDARY_PRETRAIN };
        Ok(self.encoder_knobs(&self.boundary, base, lane, finetune))
    }

    pub fn topology_train_config(&self, finetune: bool) -> CliResult<TopologyTrainConfig> {
        let mut cfg = match self.preset.as_str() {
            "paper" => TopologyTrainConfig::paper(),
            _ => TopologyTrainConfig::desk(),
        };
        let src = &self.topology;
        cfg.batch_size = src.batch_size;
        cfg.learning_rate = src.learning_rate;
        cfg.decay_steps = src.decay_steps.clone();
        cfg.decay_factor = src.decay_factor;
        cfg.total_steps = if finetune { src.finetune_steps } else { src.pretrain_steps };
        cfg.seed = self.stage_seed(if finetune {
            lanes::TOPOLOGY_FINETUNE
        } else {
            lanes::TOPOLOGY_PRETRAIN
        });
        Ok(cfg)
    }

    /// Node training config; `cond_width` is the token width of the
    /// constraint encoder when conditioning is on.
    pub fn node_train_config(&self, cond_width: Option<usize>) -> CliResult<NodeTrainConfig> {
        let mut cfg = match self.preset.as_str() {
            "paper" => NodeTrainConfig::paper(),
            _ => NodeTrainConfig::desk(),
        };
        let mode = self.conditioning_mode()?;
        match (mode, cond_width) {
            (ConditioningMode::None, _) => {}
            (m, Some(w)) => cfg.model = cfg.model.conditioned(m, w),
            (_, None) => {
                return Err(CliError::Config(
                    "conditioned node training needs the encoder token width".into(),
                ))
            }
        }
        cfg.batch_size = self.node.batch_size;
        cfg.learning_rate = self.node.learning_rate;
        cfg.decay_steps = self.node.decay_steps.clone();
        cfg.decay_factor = self.node.decay_factor;
        cfg.total_steps = self.node.total_steps;
        cfg.seed = self.stage_seed(lanes::NODE_TRAIN);
        Ok(cfg)
    }

    pub fn edge_train_config(&self, cond_width: Option<usize>) -> CliResult<EdgeTrainConfig> {
        let mut cfg = match self.preset.as_str() {
            "paper" => EdgeTrainConfig::paper(),
            _ => EdgeTrainConfig::desk(),
        };
        let mode = self.conditioning_mode()?;
        match (mode, cond_width) {
            (ConditioningMode::None, _) => {}
            (m, Some(w)) => cfg.model = cfg.model.conditioned(m, w),
            (_, None) => {
                return Err(CliError::Config(
                    "conditioned edge training needs the encoder token width".into(),
                ))
            }
        }
        cfg.learning_rate = self.edge.learning_rate;
        cfg.decay_steps = self.edge.decay_steps.clone();
        cfg.decay_factor = self.edge.decay_factor;
        cfg.total_steps = self.edge.total_steps;
        cfg.sigma_pixels = self.edge.sigma_pixels;
        cfg.flip_prob = self.edge.flip_prob;
        cfg.seed = self.stage_seed(lanes::EDGE_TRAIN);
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_and_validate() {
        for preset in ["desk", "paper"] {
            let cfg = preset_defaults(preset).unwrap();
            cfg.validate().unwrap();
            let v = serde_json::to_value(&cfg).unwrap();
            let back: RunConfig = serde_json::from_value(v).unwrap();
            assert_eq!(back.preset, preset);
        }
        assert!(preset_defaults("gpu").is_err());
    }

    #[test]
    fn dotted_overrides_reach_nested_keys() {
        let o = [
            parse_override("node.total_steps=7").unwrap(),
            parse_override("paths.output=elsewhere").unwrap(),
            parse_override("sample.clamp=false").unwrap(),
        ];
        let cfg = resolve(None, None, &o).unwrap();
        assert_eq!(cfg.node.total_steps, 7);
        assert_eq!(cfg.paths.output, "elsewhere");
        assert!(!cfg.sample.clamp);
    }

    #[test]
    fn bad_overrides_are_config_errors() {
        assert!(parse_override("no-equals-sign").is_err());
        let o = [parse_override("node.no_such_knob=1").unwrap()];
        let err = resolve(None, None, &o).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let o = [parse_override("dataset.slant_prob=1.5").unwrap()];
        assert_eq!(resolve(None, None, &o).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn hash_tracks_content_not_formatting() {
        let a = preset_defaults("desk").unwrap();
        let mut b = preset_defaults("desk").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn preset_flag_beats_file_key() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"preset": "paper", "seed": 9}"#).unwrap();
        let cfg = resolve(Some(&path), Some("desk"), &[]).unwrap();
        assert_eq!(cfg.preset, "desk");
        assert_eq!(cfg.seed, 9);
        let cfg = resolve(Some(&path), None, &[]).unwrap();
        assert_eq!(cfg.preset, "paper");
        assert_eq!(cfg.node.total_steps, 1_000_000);
    }

    #[test]
    fn stage_seeds_are_distinct() {
        let cfg = preset_defaults("desk").unwrap();
        let mut seen = std::collections::HashSet::new();
        for lane in [
            lanes::DATASET,
            lanes::BOUNDARY_PRETRAIN,
            lanes::BOUNDARY_FINETUNE,
            lanes::TOPOLOGY_PRETRAIN,
            lanes::TOPOLOGY_FINETUNE,
            lanes::NODE_TRAIN,
            lanes::EDGE_TRAIN,
            lanes::SAMPLE,
        ] {
            assert!(seen.insert(cfg.stage_seed(lane)));
        }
    }
}
