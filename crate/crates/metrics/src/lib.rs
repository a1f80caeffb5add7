//! Evaluation metrics for generated floorplans: node alignment error, edge
//! misclassification, exact graph edit distance against constraint
//! topologies, a kernel feature-distribution discrepancy, room-frequency
//! ratios, and nearest-training retrieval distances.

pub mod align;
pub mod error;
pub mod features;
pub mod ged;
pub mod oracle;
pub mod report;
pub mod retrieval;
pub mod stats;
pub mod topo;

pub use align::{alignment_error, fake_edge_ratio};
pub use error::{MetricsError, MetricsResult};
pub use features::{feature_mmd, mmd_from_features, plan_features, FEATURE_DIM};
pub use ged::{graph_edit_distance, MAX_GED_ROOMS};
pub use report::{csv_table, evaluate, EvalReport, SampleRow};
pub use retrieval::{
    category_raster, raster_euclidean, raster_wasserstein, retrieval_distance, CategoryRaster,
    RetrievalMetric, RASTER_SIZE,
};
pub use stats::{room_stats, RoomStats};
pub use topo::reconstruct_topology;
