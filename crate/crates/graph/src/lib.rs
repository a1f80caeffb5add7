//! Structural-graph floorplan model: fixed-capacity junction graphs, JSON
//! codecs, geometric validation, room extraction by face tracing, and a
//! procedural generator for ground-truth layouts with their supervision
//! targets (room topology and outer boundary).

pub mod codec;
pub mod error;
pub mod extract;
pub mod geometry;
pub mod oracle;
pub mod synthetic;
pub mod types;
pub mod validate;

pub use error::{GraphError, GraphResult};
pub use extract::{extract_rooms, trace_all_faces, Face};
pub use synthetic::{
    derive_boundary, derive_topology, generate_floorplan, layout_to_graph, slant_balcony,
    GenParams, Rect, RectLayout, RectRoom,
};
pub use types::{
    denormalize_coord, normalize_coord, pad_node_set, BoundaryPolygon, Floorplan, Node, Room,
    RoomCategory, StructuralGraph, TopologyGraph, CATEGORY_COUNT, COORD_SCALE, N_MAX, PIXEL_MAX,
};
pub use validate::{validate_graph, Violation};
