//! Training commands: the two constraint encoders (pretrain on random
//! constraints, fine-tune on dataset-derived ones), the node denoiser, and
//! the edge classifier. Every run logs a loss CSV next to its checkpoint so
//! curves survive the process.

use std::path::{Path, PathBuf};

use rand::Rng;

use gsdiff_graph::types::{StructuralGraph, TopologyGraph};
use gsdiff_model::constraints::{
    random_boundary_polygon, random_topology, rasterize_boundary, BoundaryImage, BoundaryTrainer,
    ConstraintEncoder, ConstraintPayload, RasterMode, DEFAULT_VERTEX_COUNT_WEIGHTS,
};
use gsdiff_model::edge_pred::EdgeTrainer;
use gsdiff_model::node_gen::{ConditioningMode, NodeTrainer};
use gsdiff_model::blocks::ConditioningContext;
use gsdiff_tensor::rng::{rng_for, ChaCha8Rng};

use crate::artifacts::{
    dataset_split, ensure_dir, load_boundary, load_graph, load_topology, require_checkpoint,
    require_dir, write_text, Manifest,
};
use crate::config::{lanes, RunConfig, DATA_STREAM_INDEX};
use crate::error::{CliError, CliResult};

pub fn boundary_pretrain_path(dir: &Path) -> PathBuf {
    dir.join("boundary-pretrain.ckpt")
}
pub fn boundary_finetune_path(dir: &Path) -> PathBuf {
    dir.join("boundary-finetune.ckpt")
}
pub fn topology_pretrain_path(dir: &Path) -> PathBuf {
    dir.join("topology-pretrain.ckpt")
}
pub fn topology_finetune_path(dir: &Path) -> PathBuf {
    dir.join("topology-finetune.ckpt")
}
pub fn node_checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("node.ckpt")
}
pub fn edge_checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("edge.ckpt")
}

/// The finetuned encoder checkpoint a conditioned stage depends on.
pub fn encoder_checkpoint(cfg: &RunConfig, dir: &Path) -> CliResult<Option<(PathBuf, String)>> {
    Ok(match cfg.conditioning_mode()? {
        ConditioningMode::None => None,
        ConditioningMode::Boundary => {
            Some((boundary_finetune_path(dir), "finetune-boundary".to_string()))
        }
        ConditioningMode::Topology => {
            Some((topology_finetune_path(dir), "finetune-topology".to_string()))
        }
    })
}

fn write_csv(path: &Path, header: &str, rows: &[String]) -> CliResult<()> {
    let mut text = String::with_capacity(rows.len() * 32 + header.len() + 1);
    text.push_str(header);
    text.push('\n');
    for row in rows {
        text.push_str(row);
        text.push('\n');
    }
    write_text(path, &text)
}

pub fn pretrain_boundary(cfg: &RunConfig) -> CliResult<()> {
    let dir = cfg.checkpoints_dir();
    ensure_dir(&dir)?;
    let train_cfg = cfg.boundary_train_config(false)?;
    let size = train_cfg.model.size;
    let batch = train_cfg.batch_size;
    let total = train_cfg.total_steps;
    let mut data_rng = rng_for(train_cfg.seed, DATA_STREAM_INDEX);
    let mut trainer = BoundaryTrainer::new(train_cfg)?;
    let mut rows = Vec::new();
    for _ in 0..total {
        let mut images = Vec::with_capacity(batch);
        for _ in 0..batch {
            let polygon = random_boundary_polygon(&mut data_rng, DEFAULT_VERTEX_COUNT_WEIGHTS)?;
            images.push(rasterize_boundary(&polygon, RasterMode::Pretrain, size)?);
        }
        let stats = trainer.train_step(&images)?;
        rows.push(format!("{},{}", stats.step, stats.loss));
        if stats.step % cfg.boundary.log_every == 0 || stats.step == total {
            println!("boundary pretrain step {}/{} loss {:.6}", stats.step, total, stats.loss);
        }
    }
    trainer.save(&boundary_pretrain_path(&dir), "pretrain")?;
    write_csv(&dir.join("boundary-pretrain-loss.csv"), "step,loss", &rows)?;
    Manifest::new(
        "pretrain-boundary",
        cfg,
        vec!["boundary-pretrain.ckpt".into(), "boundary-pretrain-loss.csv".into()],
    )
    .write(&dir)?;
    Ok(())
}

pub fn finetune_boundary(cfg: &RunConfig) -> CliResult<()> {
    let dir = cfg.checkpoints_dir();
    ensure_dir(&dir)?;
    let base = boundary_pretrain_path(&dir);
    require_checkpoint(&base, "pretrain-boundary")?;
    let dataset = cfg.dataset_dir();
    require_dir(&dataset, "dataset generate")?;

    let stems = dataset_split(&dataset, "train")?;
    let mut polygons = Vec::with_capacity(stems.len());
    for s in &stems {
        let b = load_boundary(&dataset.join(format!("{}.boundary.json", s)))?;
        polygons.push(b.vertices);
    }
    if polygons.is_empty() {
        return Err(CliError::dependency("dataset train split is empty"));
    }

    let train_cfg = cfg.boundary_train_config(true)?;
    let size = train_cfg.model.size;
    let batch = train_cfg.batch_size;
    let total = train_cfg.total_steps;
    let mut data_rng = rng_for(train_cfg.seed, DATA_STREAM_INDEX);
    let mut trainer = BoundaryTrainer::finetune_from(train_cfg, &base)?;
    let mut rows = Vec::new();
    for _ in 0..total {
        let mut images = Vec::with_capacity(batch);
        for _ in 0..batch {
            let pick = data_rng.random_range(0..polygons.len());
            images.push(rasterize_boundary(&polygons[pick], RasterMode::Finetune, size)?);
        }
        let stats = trainer.train_step(&images)?;
        rows.push(format!("{},{}", stats.step, stats.loss));
        if stats.step % cfg.boundary.log_every == 0 || stats.step == total {
            println!("boundary finetune step {}/{} loss {:.6}", stats.step, total, stats.loss);
        }
    }
    trainer.save(&boundary_finetune_path(&dir), "finetune")?;
    write_csv(&dir.join("boundary-finetune-loss.csv"), "step,loss", &rows)?;
    Manifest::new(
        "finetune-boundary",
        cfg,
        vec!["boundary-finetune.ckpt".into(), "boundary-finetune-loss.csv".into()],
    )
    .write(&dir)?;
    Ok(())
}

pub fn pretrain_topology(cfg: &RunConfig) -> CliResult<()> {
    let dir = cfg.checkpoints_dir();
    ensure_dir(&dir)?;
    let train_cfg = cfg.topology_train_config(false)?;
    let batch = train_cfg.batch_size;
    let total = train_cfg.total_steps;
    let mut data_rng = rng_for(train_cfg.seed, DATA_STREAM_INDEX);
    let mut trainer = gsdiff_model::constraints::TopologyTrainer::new(train_cfg)?;
    let mut rows = Vec::new();
    for _ in 0..total {
        let graphs: Vec<TopologyGraph> = (0..batch).map(|_| random_topology(&mut data_rng)).collect();
        let refs: Vec<&TopologyGraph> = graphs.iter().collect();
        let stats = trainer.train_step(&refs)?;
        rows.push(format!(
            "{},{},{},{}",
            stats.step, stats.room_loss, stats.adjacency_loss, stats.total
        ));
        if stats.step % cfg.topology.log_every == 0 || stats.step == total {
            println!(
                "topology pretrain step {}/{} room {:.4} adj {:.4}",
                stats.step, total, stats.room_loss, stats.adjacency_loss
            );
        }
    }
    trainer.save(&topology_pretrain_path(&dir), "pretrain")?;
    write_csv(
        &dir.join("topology-pretrain-loss.csv"),
        "step,room_loss,adjacency_loss,total",
        &rows,
    )?;
    Manifest::new(
        "pretrain-topology",
        cfg,
        vec!["topology-pretrain.ckpt".into(), "topology-pretrain-loss.csv".into()],
    )
    .write(&dir)?;
    Ok(())
}

pub fn finetune_topology(cfg: &RunConfig) -> CliResult<()> {
    let dir = cfg.checkpoints_dir();
    ensure_dir(&dir)?;
    let base = topology_pretrain_path(&dir);
    require_checkpoint(&base, "pretrain-topology")?;
    let dataset = cfg.dataset_dir();
    require_dir(&dataset, "dataset generate")?;

    let stems = dataset_split(&dataset, "train")?;
    let mut graphs = Vec::with_capacity(stems.len());
    for s in &stems {
        graphs.push(load_topology(&dataset.join(format!("{}.topo.json", s)))?);
    }
    if graphs.is_empty() {
        return Err(CliError::dependency("dataset train split is empty"));
    }

    let train_cfg = cfg.topology_train_config(true)?;
    let batch = train_cfg.batch_size;
    let total = train_cfg.total_steps;
    let mut data_rng = rng_for(train_cfg.seed, DATA_STREAM_INDEX);
    let mut trainer = gsdiff_model::constraints::TopologyTrainer::finetune_from(train_cfg, &base)?;
    let mut rows = Vec::new();
    for _ in 0..total {
        let refs: Vec<&TopologyGraph> = (0..batch)
            .map(|_| &graphs[data_rng.random_range(0..graphs.len())])
            .collect();
        let stats = trainer.train_step(&refs)?;
        rows.push(format!(
            "{},{},{},{}",
            stats.step, stats.room_loss, stats.adjacency_loss, stats.total
        ));
        if stats.step % cfg.topology.log_every == 0 || stats.step == total {
            println!(
                "topology finetune step {}/{} room {:.4} adj {:.4}",
                stats.step, total, stats.room_loss, stats.adjacency_loss
            );
        }
    }
    trainer.save(&topology_finetune_path(&dir), "finetune")?;
    write_csv(
        &dir.join("topology-finetune-loss.csv"),
        "step,room_loss,adjacency_loss,total",
        &rows,
    )?;
    Manifest::new(
        "finetune-topology",
        cfg,
        vec!["topology-finetune.ckpt".into(), "topology-finetune-loss.csv".into()],
    )
    .write(&dir)?;
    Ok(())
}

/// Training corpus: graphs from the dataset's train split, each with its
/// conditioning context when a constraint mode is active.
pub struct TrainCorpus {
    pub graphs: Vec<StructuralGraph>,
    pub contexts: Option<Vec<ConditioningContext>>,
    pub token_width: Option<usize>,
}

pub fn load_train_corpus(cfg: &RunConfig) -> CliResult<TrainCorpus> {
    let dataset = cfg.dataset_dir();
    require_dir(&dataset, "dataset generate")?;
    let stems = dataset_split(&dataset, "train")?;
    if stems.is_empty() {
        return Err(CliError::dependency("dataset train split is empty"));
    }

    let mut graphs = Vec::with_capacity(stems.len());
    for s in &stems {
        graphs.push(load_graph(&dataset.join(format!("{}.sgraph.json", s)))?);
    }

    let encoder_ref = encoder_checkpoint(cfg, &cfg.checkpoints_dir())?;
    let (contexts, token_width) = match encoder_ref {
        None => (None, None),
        Some((path, producer)) => {
            require_checkpoint(&path, &producer)?;
            let encoder = ConstraintEncoder::load(&path)?;
            let mode = cfg.conditioning_mode()?;
            let mut ctxs = Vec::with_capacity(stems.len());
            for s in &stems {
                let payload = match mode {
                    ConditioningMode::Boundary => {
                        let b = load_boundary(&dataset.join(format!("{}.boundary.json", s)))?;
                        ConstraintPayload::Boundary(b.vertices)
                    }
                    ConditioningMode::Topology => {
                        let t = load_topology(&dataset.join(format!("{}.topo.json", s)))?;
                        ConstraintPayload::Topology(t)
                    }
                    ConditioningMode::None => unreachable!("handled above"),
                };
                ctxs.push(encoder.encode(&payload)?);
            }
            (Some(ctxs), Some(encoder.token_dim()))
        }
    };

    Ok(TrainCorpus {
        graphs,
        contexts,
        token_width,
    })
}

fn batch_refs<'a>(
    corpus: &'a TrainCorpus,
    rng: &mut ChaCha8Rng,
    batch: usize,
) -> (Vec<&'a StructuralGraph>, Option<Vec<&'a ConditioningContext>>) {
    let picks: Vec<usize> = (0..batch)
        .map(|_| rng.random_range(0..corpus.graphs.len()))
        .collect();
    let graphs: Vec<&StructuralGraph> = picks.iter().map(|&i| &corpus.graphs[i]).collect();
    let ctxs = corpus
        .contexts
        .as_ref()
        .map(|all| picks.iter().map(|&i| &all[i]).collect());
    (graphs, ctxs)
}

pub fn train_node(cfg: &RunConfig) -> CliResult<()> {
    let dir = cfg.checkpoints_dir();
    ensure_dir(&dir)?;
    let corpus = load_train_corpus(cfg)?;
    let train_cfg = cfg.node_train_config(corpus.token_width)?;
    let batch = train_cfg.batch_size;
    let total = train_cfg.total_steps;
    let mut data_rng = rng_for(train_cfg.seed, DATA_STREAM_INDEX);
    let mut trainer = NodeTrainer::new(train_cfg)?;
    let mut rows = Vec::with_capacity(total as usize);
    for _ in 0..total {
        let (graphs, ctxs) = batch_refs(&corpus, &mut data_rng, batch);
        let stats = trainer.train_step(&graphs, ctxs.as_deref())?;
        rows.push(format!("{},{},{},{}", stats.step, stats.mse, stats.align, stats.total));
        if stats.step % cfg.node.log_every == 0 || stats.step == total {
            println!(
                "node step {}/{} mse {:.5} align {:.5} total {:.5}",
                stats.step, total, stats.mse, stats.align, stats.total
            );
        }
    }
    trainer.save(&node_checkpoint_path(&dir), "train")?;
    write_csv(&dir.join("node-loss.csv"), "step,mse,align,total", &rows)?;
    Manifest::new("train-node", cfg, vec!["node.ckpt".into(), "node-loss.csv".into()])
        .write(&dir)?;
    Ok(())
}

pub fn train_edge(cfg: &RunConfig) -> CliResult<()> {
    let dir = cfg.checkpoints_dir();
    ensure_dir(&dir)?;
    let corpus = load_train_corpus(cfg)?;
    let train_cfg = cfg.edge_train_config(corpus.token_width)?;
    let total = train_cfg.total_steps;
    let mut data_rng = rng_for(train_cfg.seed, DATA_STREAM_INDEX);
    let mut trainer = EdgeTrainer::new(train_cfg)?;
    let mut rows = Vec::with_capacity(total as usize);
    for _ in 0..total {
        let pick = data_rng.random_range(0..corpus.graphs.len());
        let ctx = corpus.contexts.as_ref().map(|all| &all[pick]);
        let stats = trainer.train_step(&corpus.graphs[pick], ctx)?;
        rows.push(format!(
            "{},{},{},{},{},{}",
            stats.step, stats.cls_loss, stats.lambda_loss, stats.total, stats.correct, stats.candidates
        ));
        if stats.step % cfg.edge.log_every == 0 || stats.step == total {
            println!(
                "edge step {}/{} cls {:.5} lambda {:.5} acc {:.3}",
                stats.step,
                total,
                stats.cls_loss,
                stats.lambda_loss,
                stats.correct as f64 / stats.candidates as f64
            );
        }
    }
    trainer.save(&edge_checkpoint_path(&dir), "train")?;
    write_csv(
        &dir.join("edge-loss.csv"),
        "step,cls_loss,lambda_loss,total,correct,candidates",
        &rows,
    )?;
    Manifest::new("train-edge", cfg, vec!["edge.ckpt".into(), "edge-loss.csv".into()])
        .write(&dir)?;
    Ok(())
}
