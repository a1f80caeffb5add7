//! SVG rendering of structural graphs and extracted floorplans. Output is a
//! fixed 512x512 view of the 256-pixel plan canvas: rooms as filled
//! polygons in a fixed per-category palette, walls as 2px black segments,
//! junctions as 3px dots. Rendering the same input twice yields identical
//! bytes; the producing config hash rides along in a comment.

use std::fmt::Write as _;
use std::path::Path;

use gsdiff_graph::codec::{FLOORPLAN_EXT, GRAPH_EXT};
use gsdiff_graph::types::{Floorplan, RoomCategory, StructuralGraph};

use crate::artifacts::{ensure_dir, load_floorplans, load_graphs, write_text, Manifest};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const VIEW: f64 = 512.0;
const SCALE: f64 = VIEW / 256.0;
const WALL_WIDTH: f64 = 2.0;
const DOT_RADIUS: f64 = 3.0;
const WALL_COLOR: &str = "#000000";
const BACKGROUND: &str = "#ffffff";

pub fn category_fill(category: Option<RoomCategory>) -> &'static str {
    match category {
        Some(RoomCategory::LivingRoom) => "#f2c98a",
        Some(RoomCategory::Bedroom) => "#a8c8e4",
        Some(RoomCategory::Kitchen) => "#e8927c",
        Some(RoomCategory::Bathroom) => "#9fd6cf",
        Some(RoomCategory::Balcony) => "#b5d99c",
        Some(RoomCategory::Storage) => "#c5b3d6",
        Some(RoomCategory::ExternalArea) => "#e6e6e6",
        None => "#d9d9d9",
    }
}

fn svg_open(out: &mut String, config_hash: &str) {
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {v} {v}\" width=\"{v}\" height=\"{v}\">\n",
        v = VIEW as u32
    ));
    let _ = writeln!(out, "<!-- cfg:{} -->", config_hash);
    let _ = writeln!(
        out,
        "<rect width=\"{v}\" height=\"{v}\" fill=\"{bg}\"/>",
        v = VIEW as u32,
        bg = BACKGROUND
    );
}

fn canvas(point: [f64; 2]) -> (f64, f64) {
    (point[0] * SCALE, point[1] * SCALE)
}

fn push_walls_and_junctions(out: &mut String, graph: &StructuralGraph) {
    for &(i, j) in &graph.edges {
        let (x1, y1) = canvas(graph.pixel(i));
        let (x2, y2) = canvas(graph.pixel(j));
        let _ = writeln!(
            out,
            "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"{}\" stroke-width=\"{}\"/>",
            x1, y1, x2, y2, WALL_COLOR, WALL_WIDTH
        );
    }
    for i in graph.real_node_indices() {
        let (cx, cy) = canvas(graph.pixel(i));
        let _ = writeln!(
            out,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"{}\" fill=\"{}\"/>",
            cx, cy, DOT_RADIUS, WALL_COLOR
        );
    }
}

/// A bare graph: walls and junctions on the background, no room fill.
pub fn graph_svg(graph: &StructuralGraph, config_hash: &str) -> String {
    let mut out = String::new();
    svg_open(&mut out, config_hash);
    push_walls_and_junctions(&mut out, graph);
    out.push_str("</svg>\n");
    out
}

/// A floorplan: room polygons first (so walls draw over their shared
/// borders), then the wall segments and junction dots of the source graph.
pub fn floorplan_svg(plan: &Floorplan, config_hash: &str) -> String {
    let mut out = String::new();
    svg_open(&mut out, config_hash);
    for room in &plan.rooms {
        let mut points = String::new();
        for &idx in &room.cycle {
            let (x, y) = canvas(plan.source.pixel(idx));
            if !points.is_empty() {
                points.push(' ');
            }
            let _ = write!(points, "{:.2},{:.2}", x, y);
        }
        let _ = writeln!(
            out,
            "<polygon points=\"{}\" fill=\"{}\" stroke=\"none\"/>",
            points,
            category_fill(room.category)
        );
    }
    push_walls_and_junctions(&mut out, &plan.source);
    out.push_str("</svg>\n");
    out
}

/// Render one artifact file or every floorplan/graph in a directory.
pub fn run(cfg: &RunConfig, input: Option<&Path>, out_dir: Option<&Path>) -> CliResult<()> {
    let default_in = crate::infer::floorplans_dir(cfg);
    let input = input.unwrap_or(&default_in);
    let default_out = cfg.output_dir().join("svg");
    let out_dir = out_dir.unwrap_or(&default_out);
    ensure_dir(out_dir)?;
    let hash = cfg.hash();

    let mut files = Vec::new();
    if input.is_file() {
        let name = input
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| CliError::Config(format!("unreadable file name {}", input.display())))?;
        if let Some(stem) = name.strip_suffix(FLOORPLAN_EXT) {
            let dir = input.parent().unwrap_or_else(|| Path::new("."));
            let plans = load_floorplans(dir)?;
            let plan = plans
                .iter()
                .find(|(s, _)| s == stem)
                .ok_or_else(|| CliError::Dependency(format!("cannot pair {}", input.display())))?;
            let file = format!("{}.svg", stem);
            write_text(&out_dir.join(&file), &floorplan_svg(&plan.1, &hash))?;
            files.push(file);
        } else if let Some(stem) = name.strip_suffix(GRAPH_EXT) {
            let graph = crate::artifacts::load_graph(input)?;
            let file = format!("{}.svg", stem);
            write_text(&out_dir.join(&file), &graph_svg(&graph, &hash))?;
            files.push(file);
        } else {
            return Err(CliError::Config(format!(
                "{} is neither a {} nor a {} file",
                input.display(),
                FLOORPLAN_EXT,
                GRAPH_EXT
            )));
        }
    } else {
        if !input.is_dir() {
            return Err(CliError::Dependency(format!(
                "render input {} does not exist",
                input.display()
            )));
        }
        let plans = crate::artifacts::list_by_extension(input, FLOORPLAN_EXT)?;
        if !plans.is_empty() {
            for (stem, plan) in load_floorplans(input)? {
                let file = format!("{}.svg", stem);
                write_text(&out_dir.join(&file), &floorplan_svg(&plan, &hash))?;
                files.push(file);
            }
        } else {
            for (stem, graph) in load_graphs(input)? {
                let file = format!("{}.svg", stem);
                write_text(&out_dir.join(&file), &graph_svg(&graph, &hash))?;
                files.push(file);
            }
        }
        if files.is_empty() {
            return Err(CliError::Dependency(format!(
                "nothing to render in {}",
                input.display()
            )));
        }
    }
    files.sort();
    Manifest::new("render", cfg, files.clone()).write(out_dir)?;
    println!("render: {} SVG files -> {}", files.len(), out_dir.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use gsdiff_graph::extract::extract_rooms;
    use gsdiff_graph::synthetic::{generate_floorplan, layout_to_graph, GenParams};
    use gsdiff_graph::types::Node;
    use gsdiff_tensor::rng::rng_for;

    #[test]
    fn empty_graph_renders_background_only() {
        let svg = graph_svg(&StructuralGraph::empty(), "deadbeef");
        assert!(svg.starts_with("<svg "));
        assert!(svg.ends_with("</svg>\n"));
        assert!(svg.contains("cfg:deadbeef"));
        assert!(svg.contains("<rect"));
        assert!(!svg.contains("<line"));
        assert!(!svg.contains("<circle"));
        assert!(!svg.contains("<polygon"));
    }

    #[test]
    fn square_room_yields_one_polygon_and_repeatable_bytes() {
        let quarter = |x: f64, y: f64| {
            let mut n = Node::real([x, y]);
            n.set_category(RoomCategory::Bedroom, true);
            n
        };
        let nodes = [
            quarter(-0.5, -0.5),
            quarter(0.5, -0.5),
            quarter(0.5, 0.5),
            quarter(-0.5, 0.5),
        ];
        let g = StructuralGraph::new(&nodes, vec![(0, 1), (1, 2), (2, 3), (0, 3)]).unwrap();
        let plan = extract_rooms(&g).unwrap();
        assert_eq!(plan.rooms.len(), 1);
        let a = floorplan_svg(&plan, "0");
        let b = floorplan_svg(&plan, "0");
        assert_eq!(a, b);
        assert_eq!(a.matches("<polygon").count(), 1);
        assert!(a.contains(category_fill(Some(RoomCategory::Bedroom))));
        assert_eq!(a.matches("<line").count(), 4);
        assert_eq!(a.matches("<circle").count(), 4);
    }

    #[test]
    fn generated_layouts_render_without_panic() {
        let mut rng = rng_for(5, 0);
        let params = GenParams::default();
        for _ in 0..20 {
            let layout = generate_floorplan(&mut rng, &params).unwrap();
            let graph = layout_to_graph(&layout).unwrap();
            let plan = extract_rooms(&graph).unwrap();
            let svg = floorplan_svg(&plan, "h");
            assert!(svg.contains("<polygon"));
        }
    }
}
