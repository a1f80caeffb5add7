//! Synthetic dataset generation: one structural graph plus its derived
//! topology and boundary constraint per plan, split train/val/test 80/10/10
//! by index.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;

use gsdiff_graph::codec::{
    serialize_boundary, serialize_graph, serialize_topology, BOUNDARY_EXT, GRAPH_EXT, TOPOLOGY_EXT,
};
use gsdiff_graph::synthetic::{
    derive_boundary, derive_topology, generate_floorplan, layout_to_graph, slant_balcony,
    GenParams,
};
use gsdiff_graph::types::{BoundaryPolygon, StructuralGraph, TopologyGraph};
use gsdiff_tensor::rng::rng_for;
use rand::Rng;

use crate::artifacts::{ensure_dir, stem, write_text, Manifest};
use crate::config::{lanes, RunConfig};
use crate::error::{CliError, CliResult};

const MAX_REJECTIONS: usize = 1000;

pub struct PlanSample {
    pub graph: StructuralGraph,
    pub topology: TopologyGraph,
    pub boundary: BoundaryPolygon,
    pub slanted: bool,
}

/// One plan from its own seeded stream. Layouts whose junction count
/// overflows the padded node budget are rejected and regenerated.
pub fn generate_plan(seed: u64, index: u64, slant_prob: f64) -> CliResult<PlanSample> {
    let mut rng = rng_for(seed, index);
    let params = GenParams::default();
    for _ in 0..MAX_REJECTIONS {
        let layout = match generate_floorplan(&mut rng, &params) {
            Ok(l) => l,
            Err(_) => continue,
        };
        let mut graph = match layout_to_graph(&layout) {
            Ok(g) => g,
            Err(_) => continue,
        };
        let mut slanted = false;
        if rng.random::<f64>() < slant_prob {
            slanted = slant_balcony(&mut graph, &layout)?;
        }
        let topology = derive_topology(&layout);
        let boundary = derive_boundary(&graph)?;
        return Ok(PlanSample {
            graph,
            topology,
            boundary,
            slanted,
        });
    }
    Err(CliError::Numeric(format!(
        "plan {} still rejected after {} generator attempts",
        index, MAX_REJECTIONS
    )))
}

pub fn run(cfg: &RunConfig) -> CliResult<()> {
    let dir = cfg.dataset_dir();
    ensure_dir(&dir)?;
    let count = cfg.dataset.count;
    let seed = cfg.stage_seed(lanes::DATASET);

    let plans: Vec<CliResult<PlanSample>> = (0..count)
        .into_par_iter()
        .map(|i| generate_plan(seed, i as u64, cfg.dataset.slant_prob))
        .collect();

    let mut files = Vec::with_capacity(count * 3);
    let mut stems = Vec::with_capacity(count);
    let mut slanted_total = 0usize;
    for (i, plan) in plans.into_iter().enumerate() {
        let plan = plan?;
        let name = stem("plan", i, count);
        write_text(
            &dir.join(format!("{}{}", name, GRAPH_EXT)),
            &serialize_graph(&plan.graph),
        )?;
        write_text(
            &dir.join(format!("{}{}", name, TOPOLOGY_EXT)),
            &serialize_topology(&plan.topology),
        )?;
        write_text(
            &dir.join(format!("{}{}", name, BOUNDARY_EXT)),
            &serialize_boundary(&plan.boundary),
        )?;
        files.push(format!("{}{}", name, GRAPH_EXT));
        files.push(format!("{}{}", name, TOPOLOGY_EXT));
        files.push(format!("{}{}", name, BOUNDARY_EXT));
        slanted_total += plan.slanted as usize;
        stems.push(name);
    }
    files.sort();

    let train_end = count * 8 / 10;
    let val_end = count * 9 / 10;
    let mut splits = BTreeMap::new();
    splits.insert("train".to_string(), stems[..train_end].to_vec());
    splits.insert("val".to_string(), stems[train_end..val_end].to_vec());
    splits.insert("test".to_string(), stems[val_end..].to_vec());

    let mut manifest = Manifest::new("dataset", cfg, files);
    manifest.splits = splits;
    manifest.write(&dir)?;

    println!(
        "dataset: {} plans ({} slanted) -> {} [train {} / val {} / test {}]",
        count,
        slanted_total,
        dir.display(),
        train_end,
        val_end - train_end,
        count - val_end
    );
    Ok(())
}

/// Stems of one split joined back to graph paths, with the companion
/// topology and boundary files alongside.
pub fn split_paths(
    dataset_dir: &Path,
    stems: &[String],
) -> Vec<(String, std::path::PathBuf)> {
    stems
        .iter()
        .map(|s| (s.clone(), dataset_dir.join(format!("{}{}", s, GRAPH_EXT))))
        .collect()
}
