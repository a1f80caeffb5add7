//! Inference commands: draw node sets from the trained denoiser, connect
//! them with the edge classifier, and extract room polygons.

use std::path::{Path, PathBuf};

use gsdiff_graph::codec::{
    serialize_boundary, serialize_floorplan, serialize_graph, serialize_topology, BOUNDARY_EXT,
    GRAPH_EXT, TOPOLOGY_EXT,
};
use gsdiff_graph::extract::extract_rooms;
use gsdiff_graph::types::{Node, StructuralGraph};
use gsdiff_model::blocks::ConditioningContext;
use gsdiff_model::constraints::{ConstraintEncoder, ConstraintPayload};
use gsdiff_model::edge_pred::EdgeModel;
use gsdiff_model::node_gen::{ConditioningMode, NodeModel};
use gsdiff_tensor::rng::rng_for;

use crate::artifacts::{
    ensure_dir, load_boundaries, load_graphs, load_topologies, require_checkpoint, require_dir,
    stem, write_text, Manifest,
};
use crate::config::{lanes, RunConfig, DATA_STREAM_INDEX};
use crate::error::{CliError, CliResult};
use crate::train::{edge_checkpoint_path, encoder_checkpoint, node_checkpoint_path};

pub fn samples_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir().join("samples")
}
pub fn graphs_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir().join("graphs")
}
pub fn floorplans_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir().join("floorplans")
}

/// Constraint payloads for sampling, cycled from the dataset's test split so
/// generation is conditioned on inputs no model stage trained on.
fn sampling_payloads(cfg: &RunConfig, count: usize) -> CliResult<Vec<(ConstraintPayload, String)>> {
    let mode = cfg.conditioning_mode()?;
    let dataset = cfg.dataset_dir();
    require_dir(&dataset, "dataset generate")?;
    let test = crate::artifacts::dataset_split(&dataset, "test")?;
    if test.is_empty() {
        return Err(CliError::dependency(
            "dataset test split is empty; nothing to condition on",
        ));
    }
    let keep: std::collections::BTreeSet<&str> = test.iter().map(|s| s.as_str()).collect();
    let mut payloads = Vec::new();
    match mode {
        ConditioningMode::Boundary => {
            for (stem_name, b) in load_boundaries(&dataset)? {
                if keep.contains(stem_name.as_str()) {
                    payloads.push((
                        ConstraintPayload::Boundary(b.vertices.clone()),
                        serialize_boundary(&b),
                    ));
                }
            }
        }
        ConditioningMode::Topology => {
            for (stem_name, t) in load_topologies(&dataset)? {
                if keep.contains(stem_name.as_str()) {
                    payloads.push((
                        ConstraintPayload::Topology(t.clone()),
                        serialize_topology(&t),
                    ));
                }
            }
        }
        ConditioningMode::None => unreachable!("caller checks the mode"),
    }
    if payloads.is_empty() {
        return Err(CliError::dependency(
            "no constraint files found in the dataset test split",
        ));
    }
    let mut cycled = Vec::with_capacity(count);
    for i in 0..count {
        cycled.push(payloads[i % payloads.len()].clone());
    }
    Ok(cycled)
}

pub fn sample(cfg: &RunConfig) -> CliResult<()> {
    let ckpt = node_checkpoint_path(&cfg.checkpoints_dir());
    require_checkpoint(&ckpt, "train-node")?;
    let (model, _header) = NodeModel::load(&ckpt)?;

    let count = cfg.sample.count;
    let steps = if cfg.sample.steps == 0 {
        model.cfg.horizon
    } else {
        cfg.sample.steps
    };

    let mode = cfg.conditioning_mode()?;
    let (contexts, payload_texts): (Option<Vec<ConditioningContext>>, Vec<(String, String)>) =
        if mode.is_none() {
            (None, Vec::new())
        } else {
            let (enc_path, producer) = encoder_checkpoint(cfg, &cfg.checkpoints_dir())?
                .expect("non-none mode has an encoder");
            require_checkpoint(&enc_path, &producer)?;
            let encoder = ConstraintEncoder::load(&enc_path)?;
            let payloads = sampling_payloads(cfg, count)?;
            let mut ctxs = Vec::with_capacity(count);
            let mut texts = Vec::with_capacity(count);
            let ext = match mode {
                ConditioningMode::Boundary => BOUNDARY_EXT,
                ConditioningMode::Topology => TOPOLOGY_EXT,
                ConditioningMode::None => unreachable!(),
            };
            for (payload, text) in payloads {
                ctxs.push(encoder.encode(&payload)?);
                texts.push((ext.to_string(), text));
            }
            (Some(ctxs), texts)
        };

    let mut rng = rng_for(cfg.stage_seed(lanes::SAMPLE), DATA_STREAM_INDEX);
    let ctx_refs: Option<Vec<&ConditioningContext>> =
        contexts.as_ref().map(|cs| cs.iter().collect());
    let graphs = model.sample_with_steps(
        count,
        ctx_refs.as_deref(),
        &mut rng,
        cfg.sample.clamp,
        steps,
    )?;

    let dir = samples_dir(cfg);
    ensure_dir(&dir)?;
    let mut files = Vec::new();
    for (i, g) in graphs.iter().enumerate() {
        let name = stem("sample", i, count);
        let file = format!("{}{}", name, GRAPH_EXT);
        write_text(&dir.join(&file), &serialize_graph(g))?;
        files.push(file);
        if let Some((ext, text)) = payload_texts.get(i) {
            let file = format!("{}{}", name, ext);
            write_text(&dir.join(&file), text)?;
            files.push(file);
        }
    }
    files.sort();
    Manifest::new("sample", cfg, files).write(&dir)?;
    println!(
        "sample: {} node sets ({} reverse steps, clamp {}) -> {}",
        count,
        steps,
        cfg.sample.clamp,
        dir.display()
    );
    Ok(())
}

/// Rebuild a graph around its real nodes so edge indices returned by the
/// classifier (which refer to slots) map onto the compacted node list.
fn with_predicted_edges(
    graph: &StructuralGraph,
    edges: &[(usize, usize)],
) -> CliResult<StructuralGraph> {
    let real = graph.real_node_indices();
    let mut position = vec![usize::MAX; graph.nodes.len()];
    for (pos, &idx) in real.iter().enumerate() {
        position[idx] = pos;
    }
    let real_nodes: Vec<Node> = real.iter().map(|&i| graph.nodes[i]).collect();
    let mut remapped = Vec::with_capacity(edges.len());
    for &(i, j) in edges {
        let (a, b) = (position[i], position[j]);
        if a == usize::MAX || b == usize::MAX {
            return Err(CliError::Numeric(format!(
                "predicted edge ({}, {}) touches a background slot",
                i, j
            )));
        }
        remapped.push((a.min(b), a.max(b)));
    }
    Ok(StructuralGraph::new(&real_nodes, remapped)?)
}

/// Conditioning context for one input stem during edge prediction, loaded
/// from the payload file written next to the sampled graph.
fn stem_context(
    encoder: &ConstraintEncoder,
    mode: ConditioningMode,
    dir: &Path,
    stem_name: &str,
) -> CliResult<ConditioningContext> {
    let payload = match mode {
        ConditioningMode::Boundary => {
            let path = dir.join(format!("{}{}", stem_name, BOUNDARY_EXT));
            if !path.is_file() {
                return Err(CliError::Dependency(format!(
                    "missing constraint sidecar {}",
                    path.display()
                )));
            }
            ConstraintPayload::Boundary(crate::artifacts::load_boundary(&path)?.vertices)
        }
        ConditioningMode::Topology => {
            let path = dir.join(format!("{}{}", stem_name, TOPOLOGY_EXT));
            if !path.is_file() {
                return Err(CliError::Dependency(format!(
                    "missing constraint sidecar {}",
                    path.display()
                )));
            }
            ConstraintPayload::Topology(crate::artifacts::load_topology(&path)?)
        }
        ConditioningMode::None => unreachable!("caller checks the mode"),
    };
    Ok(encoder.encode(&payload)?)
}

pub fn predict_edges(cfg: &RunConfig, graphs_in: Option<&Path>) -> CliResult<()> {
    let ckpt = edge_checkpoint_path(&cfg.checkpoints_dir());
    require_checkpoint(&ckpt, "train-edge")?;
    let (model, _header) = EdgeModel::load(&ckpt)?;

    let default_in = samples_dir(cfg);
    let input = graphs_in.unwrap_or(&default_in);
    require_dir(input, "sample")?;
    let graphs = load_graphs(input)?;
    if graphs.is_empty() {
        return Err(CliError::Dependency(format!(
            "no {} files in {}",
            GRAPH_EXT,
            input.display()
        )));
    }

    let mode = cfg.conditioning_mode()?;
    let encoder = if mode.is_none() {
        None
    } else {
        let (enc_path, producer) =
            encoder_checkpoint(cfg, &cfg.checkpoints_dir())?.expect("non-none mode");
        require_checkpoint(&enc_path, &producer)?;
        Some(ConstraintEncoder::load(&enc_path)?)
    };

    let dir = graphs_dir(cfg);
    ensure_dir(&dir)?;
    let mut files = Vec::new();
    let mut edge_total = 0usize;
    for (stem_name, graph) in &graphs {
        let ctx = match &encoder {
            Some(enc) => Some(stem_context(enc, mode, input, stem_name)?),
            None => None,
        };
        let edges = model.predict_edges(&graph.nodes, ctx.as_ref(), cfg.sample.threshold)?;
        edge_total += edges.len();
        let connected = with_predicted_edges(graph, &edges)?;
        let file = format!("{}{}", stem_name, GRAPH_EXT);
        write_text(&dir.join(&file), &serialize_graph(&connected))?;
        files.push(file);
    }
    files.sort();
    Manifest::new("predict-edges", cfg, files).write(&dir)?;
    println!(
        "predict-edges: {} graphs, {} edges total (threshold {}) -> {}",
        graphs.len(),
        edge_total,
        cfg.sample.threshold,
        dir.display()
    );
    Ok(())
}

pub fn extract(cfg: &RunConfig, graphs_in: Option<&Path>) -> CliResult<()> {
    let default_in = graphs_dir(cfg);
    let input = graphs_in.unwrap_or(&default_in);
    require_dir(input, "predict-edges")?;
    let graphs = load_graphs(input)?;
    if graphs.is_empty() {
        return Err(CliError::Dependency(format!(
            "no {} files in {}",
            GRAPH_EXT,
            input.display()
        )));
    }

    let dir = floorplans_dir(cfg);
    ensure_dir(&dir)?;
    let mut files = Vec::new();
    let mut skipped = 0usize;
    for (stem_name, graph) in &graphs {
        let plan = match extract_rooms(graph) {
            Ok(p) => p,
            Err(e) => {
                println!("extract: skipping {}: {}", stem_name, e);
                skipped += 1;
                continue;
            }
        };
        // The floorplan's room cycles index into its graph, so the graph is
        // copied alongside to keep the directory self-contained.
        let plan_file = format!("{}{}", stem_name, gsdiff_graph::codec::FLOORPLAN_EXT);
        let graph_file = format!("{}{}", stem_name, GRAPH_EXT);
        write_text(&dir.join(&plan_file), &serialize_floorplan(&plan))?;
        write_text(&dir.join(&graph_file), &serialize_graph(graph))?;
        files.push(plan_file);
        files.push(graph_file);
    }
    files.sort();
    Manifest::new("extract", cfg, files).write(&dir)?;
    println!(
        "extract: {} floorplans ({} skipped) -> {}",
        graphs.len() - skipped,
        skipped,
        dir.display()
    );
    Ok(())
}

