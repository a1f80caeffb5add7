//! Artifact plumbing: directory layout, stem naming, the per-directory
//! manifest that ties outputs back to (config, seed, code version), and
//! loading helpers shared by the inference and eval commands.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use gsdiff_graph::codec::{
    parse_boundary, parse_floorplan, parse_graph, parse_topology, BOUNDARY_EXT, FLOORPLAN_EXT,
    GRAPH_EXT, TOPOLOGY_EXT,
};
use gsdiff_graph::types::{BoundaryPolygon, Floorplan, StructuralGraph, TopologyGraph};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult, PathContext};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_NAME: &str = "manifest.json";

/// Written next to every command's outputs. `splits` is only present for
/// dataset manifests.
#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub code_version: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: RunConfig,
    pub files: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub splits: BTreeMap<String, Vec<String>>,
}

impl Manifest {
    pub fn new(command: &str, cfg: &RunConfig, files: Vec<String>) -> Manifest {
        Manifest {
            code_version: CODE_VERSION.to_string(),
            command: command.to_string(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            config: cfg.clone(),
            files,
            splits: BTreeMap::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> CliResult<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        let path = dir.join(MANIFEST_NAME);
        fs::write(&path, text.as_bytes()).at_path(&path)?;
        Ok(())
    }
}

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).at_path(dir)?;
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).at_path(parent)?;
    }
    fs::write(path, text.as_bytes()).at_path(path)?;
    Ok(())
}

pub fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).at_path(path)
}

/// The checkpoint a stage requires; the error names both the file and the
/// command that produces it.
pub fn require_checkpoint(path: &Path, produced_by: &str) -> CliResult<()> {
    if path.is_file() {
        return Ok(());
    }
    Err(CliError::Dependency(format!(
        "missing checkpoint {}; run `gsdiff {}` first",
        path.display(),
        produced_by
    )))
}

pub fn require_dir(path: &Path, produced_by: &str) -> CliResult<()> {
    if path.is_dir() {
        return Ok(());
    }
    Err(CliError::Dependency(format!(
        "missing directory {}; run `gsdiff {}` first",
        path.display(),
        produced_by
    )))
}

/// Stems like `plan00017` or `sample0042`, zero-padded so that the
/// lexicographic listing order equals the numeric order.
pub fn stem(prefix: &str, index: usize, count: usize) -> String {
    let digits = count.max(1).saturating_sub(1).to_string().len().max(4);
    format!("{}{:0width$}", prefix, index, width = digits)
}

/// Files in `dir` whose name ends with `ext`, sorted by name.
pub fn list_by_extension(dir: &Path, ext: &str) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    let entries = fs::read_dir(dir).at_path(dir)?;
    for entry in entries {
        let entry = entry.at_path(dir)?;
        let path = entry.path();
        let name = match path.file_name().and_then(|n| n.to_str()) {
            Some(n) => n.to_string(),
            None => continue,
        };
        if name.ends_with(ext) && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Strip a multi-part artifact extension like `.sgraph.json`.
pub fn artifact_stem(path: &Path, ext: &str) -> Option<String> {
    let name = path.file_name()?.to_str()?;
    name.strip_suffix(ext).map(str::to_string)
}

pub fn load_graph(path: &Path) -> CliResult<StructuralGraph> {
    let text = read_text(path)?;
    parse_graph(&text).at_path(path)
}

pub fn load_topology(path: &Path) -> CliResult<TopologyGraph> {
    let text = read_text(path)?;
    parse_topology(&text).at_path(path)
}

pub fn load_boundary(path: &Path) -> CliResult<BoundaryPolygon> {
    let text = read_text(path)?;
    parse_boundary(&text).at_path(path)
}

pub fn load_graphs(dir: &Path) -> CliResult<Vec<(String, StructuralGraph)>> {
    let mut out = Vec::new();
    for path in list_by_extension(dir, GRAPH_EXT)? {
        let stem = artifact_stem(&path, GRAPH_EXT).expect("listed by extension");
        out.push((stem, load_graph(&path)?));
    }
    Ok(out)
}

/// Floorplans from a directory. Prefers `.floorplan.json` files (whose room
/// cycles index into the same-stem `.sgraph.json` next to them); falls back
/// to extracting rooms from bare graphs when no floorplan files exist.
pub fn load_floorplans(dir: &Path) -> CliResult<Vec<(String, Floorplan)>> {
    let plans = list_by_extension(dir, FLOORPLAN_EXT)?;
    let mut out = Vec::new();
    if plans.is_empty() {
        for (stem, graph) in load_graphs(dir)? {
            let plan = gsdiff_graph::extract::extract_rooms(&graph)?;
            out.push((stem, plan));
        }
        if out.is_empty() {
            return Err(CliError::Dependency(format!(
                "no {} or {} files in {}",
                FLOORPLAN_EXT,
                GRAPH_EXT,
                dir.display()
            )));
        }
        return Ok(out);
    }
    for path in plans {
        let stem = artifact_stem(&path, FLOORPLAN_EXT).expect("listed by extension");
        let graph_path = dir.join(format!("{}{}", stem, GRAPH_EXT));
        if !graph_path.is_file() {
            return Err(CliError::Dependency(format!(
                "floorplan {} has no source graph {}",
                path.display(),
                graph_path.display()
            )));
        }
        let source = load_graph(&graph_path)?;
        let text = read_text(&path)?;
        let plan = parse_floorplan(&text, &source).at_path(&path)?;
        out.push((stem, plan));
    }
    Ok(out)
}

pub fn load_topologies(dir: &Path) -> CliResult<Vec<(String, TopologyGraph)>> {
    let mut out = Vec::new();
    for path in list_by_extension(dir, TOPOLOGY_EXT)? {
        let stem = artifact_stem(&path, TOPOLOGY_EXT).expect("listed by extension");
        out.push((stem, load_topology(&path)?));
    }
    Ok(out)
}

pub fn load_boundaries(dir: &Path) -> CliResult<Vec<(String, BoundaryPolygon)>> {
    let mut out = Vec::new();
    for path in list_by_extension(dir, BOUNDARY_EXT)? {
        let stem = artifact_stem(&path, BOUNDARY_EXT).expect("listed by extension");
        out.push((stem, load_boundary(&path)?));
    }
    Ok(out)
}

/// Dataset split membership, read back from the dataset manifest.
pub fn dataset_split(dataset_dir: &Path, split: &str) -> CliResult<Vec<String>> {
    let path = dataset_dir.join(MANIFEST_NAME);
    if !path.is_file() {
        return Err(CliError::Dependency(format!(
            "missing dataset manifest {}; run `gsdiff dataset generate` first",
            path.display()
        )));
    }
    let text = read_text(&path)?;
    let manifest: Manifest = serde_json::from_str(&text).at_path(&path)?;
    manifest.splits.get(split).cloned().ok_or_else(|| {
        CliError::Dependency(format!(
            "dataset manifest {} has no {:?} split",
            path.display(),
            split
        ))
    })
}
