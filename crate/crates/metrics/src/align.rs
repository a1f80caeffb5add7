//! Node alignment error and edge misclassification ratio.

use std::collections::BTreeSet;

use gsdiff_graph::StructuralGraph;

use crate::error::{MetricsError, MetricsResult};

/// Mean over real junctions of the smaller axis-wise gap to the nearest
/// other real junction, in pixels. Zero exactly when every junction shares
/// an x or y line with some other junction.
pub fn alignment_error(g: &StructuralGraph) -> MetricsResult<f64> {
    let real = g.real_node_indices();
    if real.len() < 2 {
        return Err(MetricsError::Arity(format!(
            "alignment error needs at least 2 real nodes, got {}",
            real.len()
        )));
    }
    let px: Vec<[f64; 2]> = real.iter().map(|&i| g.pixel(i)).collect();
    let mut total = 0.0;
    for (i, p) in px.iter().enumerate() {
        let mut gap_x = f64::INFINITY;
        let mut gap_y = f64::INFINITY;
        for (j, q) in px.iter().enumerate() {
            if i == j {
                continue;
            }
            gap_x = gap_x.min((p[0] - q[0]).abs());
            gap_y = gap_y.min((p[1] - q[1]).abs());
        }
        total += gap_x.min(gap_y);
    }
    Ok(total / px.len() as f64)
}

/// Fraction of candidate node pairs on which the two edge sets disagree.
/// Both graphs must carry the same node set; the denominator is the number
/// of unordered real-node pairs.
pub fn fake_edge_ratio(predicted: &StructuralGraph, truth: &StructuralGraph) -> MetricsResult<f64> {
    if predicted.nodes != truth.nodes {
        return Err(MetricsError::Arity(
            "edge sets compared over different node sets".into(),
        ));
    }
    let real = truth.real_node_count();
    let candidates = real * real.saturating_sub(1) / 2;
    if candidates == 0 {
        return Err(MetricsError::Arity(format!(
            "no candidate pairs among {} real nodes",
            real
        )));
    }
    let p: BTreeSet<(usize, usize)> = predicted.edges.iter().copied().collect();
    let t: BTreeSet<(usize, usize)> = truth.edges.iter().copied().collect();
    let differing = p.symmetric_difference(&t).count();
    Ok(differing as f64 / candidates as f64)
}
