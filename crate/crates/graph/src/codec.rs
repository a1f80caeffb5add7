//! On-disk formats.
//!
//! Graph files (`.sgraph.json`): `{ "version": 1, "n_max": 53, "nodes":
//! [{"c":[x,y],"r":[7 floats],"b":0|1}, ...], "edges": [[i,j], ...] }` with
//! exactly 53 nodes and `i < j`. Unknown fields are rejected. Floats are
//! emitted in shortest-round-trip form, which reparses bit-exactly.
//!
//! Companion formats for supervision targets: topology files (`.topo.json`)
//! and boundary files (`.boundary.json`).

use serde::{Deserialize, Serialize};

use crate::error::{GraphError, GraphResult};
use crate::types::{
    BoundaryPolygon, Floorplan, Node, Room, RoomCategory, StructuralGraph, TopologyGraph,
    CATEGORY_COUNT, N_MAX,
};

pub const SCHEMA_VERSION: u32 = 1;
pub const GRAPH_EXT: &str = ".sgraph.json";
pub const TOPOLOGY_EXT: &str = ".topo.json";
pub const BOUNDARY_EXT: &str = ".boundary.json";
pub const FLOORPLAN_EXT: &str = ".floorplan.json";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeDoc {
    c: [f64; 2],
    r: Vec<f64>,
    b: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphDoc {
    version: u32,
    n_max: usize,
    nodes: Vec<NodeDoc>,
    edges: Vec<[usize; 2]>,
}

pub fn serialize_graph(g: &StructuralGraph) -> String {
    let doc = GraphDoc {
        version: SCHEMA_VERSION,
        n_max: N_MAX,
        nodes: g
            .nodes
            .iter()
            .map(|n| NodeDoc {
                c: n.c,
                r: n.r.to_vec(),
                b: n.b,
            })
            .collect(),
        edges: g.edges.iter().map(|&(i, j)| [i, j]).collect(),
    };
    serde_json::to_string_pretty(&doc).expect("graph doc serializes")
}

pub fn parse_graph(text: &str) -> GraphResult<StructuralGraph> {
    let doc: GraphDoc = serde_json::from_str(text).map_err(|e| GraphError::Parse {
        msg: format!("{} (line {}, column {})", e, e.line(), e.column()),
    })?;
    if doc.version != SCHEMA_VERSION {
        return Err(GraphError::Version {
            got: doc.version,
            expected: SCHEMA_VERSION,
        });
    }
    if doc.n_max != N_MAX {
        return Err(GraphError::Parse {
            msg: format!("n_max {} unsupported, expected {}", doc.n_max, N_MAX),
        });
    }
    if doc.nodes.len() > N_MAX {
        return Err(GraphError::Parse {
            msg: format!("node count exceeds {}: got {}", N_MAX, doc.nodes.len()),
        });
    }
    if doc.nodes.len() < N_MAX {
        return Err(GraphError::Parse {
            msg: format!("node count must be exactly {}, got {}", N_MAX, doc.nodes.len()),
        });
    }
    let mut nodes = Vec::with_capacity(N_MAX);
    for (i, nd) in doc.nodes.iter().enumerate() {
        if nd.r.len() != CATEGORY_COUNT {
            return Err(GraphError::Parse {
                msg: format!("node {} has {} semantics entries, expected {}", i, nd.r.len(), CATEGORY_COUNT),
            });
        }
        let mut r = [0.0; CATEGORY_COUNT];
        r.copy_from_slice(&nd.r);
        nodes.push(Node { c: nd.c, r, b: nd.b });
    }
    let mut edges = Vec::with_capacity(doc.edges.len());
    for &[i, j] in &doc.edges {
        if i >= j {
            return Err(GraphError::Parse {
                msg: format!("edge [{}, {}] must satisfy i < j", i, j),
            });
        }
        if j >= N_MAX {
            return Err(GraphError::Parse {
                msg: format!("edge [{}, {}] index out of range", i, j),
            });
        }
        edges.push((i, j));
    }
    let before = edges.len();
    edges.sort_unstable();
    edges.dedup();
    if edges.len() != before {
        return Err(GraphError::Parse {
            msg: "duplicate edges in document".into(),
        });
    }
    Ok(StructuralGraph { nodes, edges })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RoomDoc {
    cycle: Vec<usize>,
    category: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FloorplanDoc {
    rooms: Vec<RoomDoc>,
}

/// Floorplan files carry the room cycles and labels; cycles index into the
/// graph the plan was extracted from.
pub fn serialize_floorplan(fp: &Floorplan) -> String {
    let doc = FloorplanDoc {
        rooms: fp
            .rooms
            .iter()
            .map(|room| RoomDoc {
                cycle: room.cycle.clone(),
                category: room.category.map_or("Unknown", |c| c.name()).to_string(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&doc).expect("floorplan doc serializes")
}

/// Parse a floorplan document against the graph it indexes into.
pub fn parse_floorplan(text: &str, source: &StructuralGraph) -> GraphResult<Floorplan> {
    let doc: FloorplanDoc = serde_json::from_str(text).map_err(|e| GraphError::Parse {
        msg: format!("{} (line {}, column {})", e, e.line(), e.column()),
    })?;
    let mut rooms = Vec::with_capacity(doc.rooms.len());
    for (k, rd) in doc.rooms.iter().enumerate() {
        let category = if rd.category == "Unknown" {
            None
        } else {
            Some(category_from_name(&rd.category).ok_or_else(|| GraphError::Parse {
                msg: format!("room {} has unknown category {:?}", k, rd.category),
            })?)
        };
        for &i in &rd.cycle {
            if i >= source.nodes.len() {
                return Err(GraphError::Parse {
                    msg: format!("room {} cycle index {} out of range", k, i),
                });
            }
        }
        rooms.push(Room {
            cycle: rd.cycle.clone(),
            category,
        });
    }
    Ok(Floorplan {
        rooms,
        source: source.clone(),
    })
}

pub fn category_from_name(name: &str) -> Option<RoomCategory> {
    RoomCategory::ALL.iter().copied().find(|c| c.name() == name)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TopologyDoc {
    version: u32,
    rooms: Vec<String>,
    adjacency: Vec<[usize; 2]>,
}

pub fn serialize_topology(t: &TopologyGraph) -> String {
    let doc = TopologyDoc {
        version: SCHEMA_VERSION,
        rooms: t.rooms.iter().map(|c| c.name().to_string()).collect(),
        adjacency: t.adjacency.iter().map(|&(i, j)| [i, j]).collect(),
    };
    serde_json::to_string_pretty(&doc).expect("topology doc serializes")
}

pub fn parse_topology(text: &str) -> GraphResult<TopologyGraph> {
    let doc: TopologyDoc = serde_json::from_str(text).map_err(|e| GraphError::Parse {
        msg: format!("{} (line {}, column {})", e, e.line(), e.column()),
    })?;
    if doc.version != SCHEMA_VERSION {
        return Err(GraphError::Version {
            got: doc.version,
            expected: SCHEMA_VERSION,
        });
    }
    let mut rooms = Vec::with_capacity(doc.rooms.len());
    for name in &doc.rooms {
        rooms.push(category_from_name(name).ok_or_else(|| GraphError::Parse {
            msg: format!("unknown room category {:?}", name),
        })?);
    }
    TopologyGraph::new(rooms, doc.adjacency.iter().map(|&[i, j]| (i, j)).collect())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoundaryDoc {
    version: u32,
    vertices: Vec<[f64; 2]>,
}

pub fn serialize_boundary(b: &BoundaryPolygon) -> String {
    let doc = BoundaryDoc {
        version: SCHEMA_VERSION,
        vertices: b.vertices.clone(),
    };
    serde_json::to_string_pretty(&doc).expect("boundary doc serializes")
}

pub fn parse_boundary(text: &str) -> GraphResult<BoundaryPolygon> {
    let doc: BoundaryDoc = serde_json::from_str(text).map_err(|e| GraphError::Parse {
        msg: format!("{} (line {}, column {})", e, e.line(), e.column()),
    })?;
    if doc.version != SCHEMA_VERSION {
        return Err(GraphError::Version {
            got: doc.version,
            expected: SCHEMA_VERSION,
        });
    }
    if doc.vertices.len() < 3 {
        return Err(GraphError::Parse {
            msg: format!("boundary needs at least 3 vertices, got {}", doc.vertices.len()),
        });
    }
    Ok(BoundaryPolygon {
        vertices: doc.vertices,
    })
}
