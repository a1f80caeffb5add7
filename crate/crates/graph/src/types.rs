//! Structural-graph data model.
//!
//! A floorplan is abstracted as wall junctions (nodes) and wall segments
//! (edges). Every graph carries exactly [`N_MAX`] node slots; unused slots are
//! background nodes with `b = 1` at the canonical parked position `(-1, -1)`.
//! Coordinates are stored normalized in `[-1, 1)`; the pixel domain is
//! `[0, 255]` on both axes.

use serde::{Deserialize, Serialize};

use crate::error::{GraphError, GraphResult};

/// Fixed node capacity of every graph.
pub const N_MAX: usize = 53;
/// Number of room categories (including the external area).
pub const CATEGORY_COUNT: usize = 7;
/// Half the pixel range; the normalization divisor.
pub const COORD_SCALE: f64 = 128.0;
/// Upper end of the pixel coordinate domain.
pub const PIXEL_MAX: f64 = 255.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RoomCategory {
    LivingRoom,
    Bedroom,
    Kitchen,
    Bathroom,
    Balcony,
    Storage,
    ExternalArea,
}

impl RoomCategory {
    pub const ALL: [RoomCategory; CATEGORY_COUNT] = [
        RoomCategory::LivingRoom,
        RoomCategory::Bedroom,
        RoomCategory::Kitchen,
        RoomCategory::Bathroom,
        RoomCategory::Balcony,
        RoomCategory::Storage,
        RoomCategory::ExternalArea,
    ];

    /// Room categories proper, excluding the external area.
    pub const ROOMS: [RoomCategory; 6] = [
        RoomCategory::LivingRoom,
        RoomCategory::Bedroom,
        RoomCategory::Kitchen,
        RoomCategory::Bathroom,
        RoomCategory::Balcony,
        RoomCategory::Storage,
    ];

    pub fn index(self) -> usize {
        match self {
            RoomCategory::LivingRoom => 0,
            RoomCategory::Bedroom => 1,
            RoomCategory::Kitchen => 2,
            RoomCategory::Bathroom => 3,
            RoomCategory::Balcony => 4,
            RoomCategory::Storage => 5,
            RoomCategory::ExternalArea => 6,
        }
    }

    pub fn from_index(i: usize) -> Option<RoomCategory> {
        RoomCategory::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            RoomCategory::LivingRoom => "LivingRoom",
            RoomCategory::Bedroom => "Bedroom",
            RoomCategory::Kitchen => "Kitchen",
            RoomCategory::Bathroom => "Bathroom",
            RoomCategory::Balcony => "Balcony",
            RoomCategory::Storage => "Storage",
            RoomCategory::ExternalArea => "ExternalArea",
        }
    }

    /// Tie priority for room labeling, strongest claim first.
    pub const TIE_PRIORITY: [RoomCategory; 6] = [
        RoomCategory::Storage,
        RoomCategory::Bathroom,
        RoomCategory::Kitchen,
        RoomCategory::Bedroom,
        RoomCategory::Balcony,
        RoomCategory::LivingRoom,
    ];
}

/// One wall junction (or padding slot).
///
/// `c`: normalized (x, y) in `[-1, 1)`. `r[k]`: 1 when the room category with
/// index `k` touches this junction. `b`: 1 marks a background (padding) node.
/// Values are reals so the same type carries raw model output before
/// thresholding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Node {
    pub c: [f64; 2],
    pub r: [f64; CATEGORY_COUNT],
    pub b: f64,
}

impl Node {
    pub fn background() -> Node {
        Node {
            c: [-1.0, -1.0],
            r: [0.0; CATEGORY_COUNT],
            b: 1.0,
        }
    }

    pub fn real(c: [f64; 2]) -> Node {
        Node {
            c,
            r: [0.0; CATEGORY_COUNT],
            b: 0.0,
        }
    }

    pub fn is_background(&self) -> bool {
        self.b >= 0.5
    }

    pub fn has_category(&self, cat: RoomCategory) -> bool {
        self.r[cat.index()] >= 0.5
    }

    pub fn set_category(&mut self, cat: RoomCategory) {
        self.r[cat.index()] = 1.0;
    }
}

/// Pixel `[0,255]` to normalized `[-1,1)` coordinates.
pub fn normalize_coord(p: [f64; 2]) -> GraphResult<[f64; 2]> {
    for &v in &p {
        if !(0.0..=PIXEL_MAX).contains(&v) {
            return Err(GraphError::Range {
                op: "normalize_coord",
                msg: format!("{} outside [0, {}]", v, PIXEL_MAX),
            });
        }
    }
    Ok([p[0] / COORD_SCALE - 1.0, p[1] / COORD_SCALE - 1.0])
}

/// Normalized `[-1,1)` back to pixel coordinates.
pub fn denormalize_coord(c: [f64; 2]) -> [f64; 2] {
    [(c[0] + 1.0) * COORD_SCALE, (c[1] + 1.0) * COORD_SCALE]
}

/// Real nodes first (order preserved), background slots after, `n_max` total.
pub fn pad_node_set(real_nodes: &[Node], n_max: usize) -> GraphResult<Vec<Node>> {
    if real_nodes.len() > n_max {
        return Err(GraphError::Capacity {
            max: n_max,
            got: real_nodes.len(),
        });
    }
    let mut nodes = real_nodes.to_vec();
    nodes.resize(n_max, Node::background());
    Ok(nodes)
}

/// Wall-junction graph with a fixed node capacity.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuralGraph {
    /// Exactly [`N_MAX`] entries.
    pub nodes: Vec<Node>,
    /// Unordered pairs, stored with `i < j`, sorted, deduplicated.
    pub edges: Vec<(usize, usize)>,
}

impl StructuralGraph {
    pub fn new(real_nodes: &[Node], mut edges: Vec<(usize, usize)>) -> GraphResult<StructuralGraph> {
        let nodes = pad_node_set(real_nodes, N_MAX)?;
        for e in edges.iter_mut() {
            if e.0 > e.1 {
                *e = (e.1, e.0);
            }
        }
        edges.sort_unstable();
        edges.dedup();
        Ok(StructuralGraph { nodes, edges })
    }

    pub fn empty() -> StructuralGraph {
        StructuralGraph {
            nodes: vec![Node::background(); N_MAX],
            edges: Vec::new(),
        }
    }

    pub fn real_node_count(&self) -> usize {
        self.nodes.iter().filter(|n| !n.is_background()).count()
    }

    pub fn real_node_indices(&self) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&i| !self.nodes[i].is_background()).collect()
    }

    /// Pixel-space position of node `i`.
    pub fn pixel(&self, i: usize) -> [f64; 2] {
        denormalize_coord(self.nodes[i].c)
    }

    /// Neighbor lists over the full index range, each sorted ascending.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for &(u, v) in &self.edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        for list in adj.iter_mut() {
            list.sort_unstable();
        }
        adj
    }
}

/// One traced room: a closed polygonal cycle of node indices plus its label.
/// `category` is `None` when no vertex carried any room semantics; such rooms
/// serialize as `"Unknown"` and are surfaced by validation.
#[derive(Debug, Clone, PartialEq)]
pub struct Room {
    pub cycle: Vec<usize>,
    pub category: Option<RoomCategory>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Floorplan {
    pub rooms: Vec<Room>,
    pub source: StructuralGraph,
}

/// Room-level bubble diagram: one entry per room, adjacency = shared wall.
#[derive(Debug, Clone, PartialEq)]
pub struct TopologyGraph {
    pub rooms: Vec<RoomCategory>,
    /// Unordered pairs `i < j`, sorted, deduplicated.
    pub adjacency: Vec<(usize, usize)>,
}

impl TopologyGraph {
    pub fn new(rooms: Vec<RoomCategory>, mut adjacency: Vec<(usize, usize)>) -> GraphResult<TopologyGraph> {
        for e in adjacency.iter_mut() {
            if e.0 > e.1 {
                *e = (e.1, e.0);
            }
        }
        adjacency.sort_unstable();
        adjacency.dedup();
        for &(i, j) in &adjacency {
            if i == j || j >= rooms.len() {
                return Err(GraphError::Topology {
                    msg: format!("adjacency ({}, {}) invalid for {} rooms", i, j, rooms.len()),
                });
            }
        }
        Ok(TopologyGraph { rooms, adjacency })
    }

    pub fn are_adjacent(&self, i: usize, j: usize) -> bool {
        let key = (i.min(j), i.max(j));
        self.adjacency.binary_search(&key).is_ok()
    }
}

/// Outer-wall contour in pixel coordinates, counterclockwise (positive area),
/// starting at the lexicographically smallest (y, x) vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryPolygon {
    pub vertices: Vec<[f64; 2]>,
}
