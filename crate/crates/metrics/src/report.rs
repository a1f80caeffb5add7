//! Full evaluation run over generated and reference plan sets.

use std::collections::BTreeMap;

use serde::Serialize;

use gsdiff_graph::{Floorplan, TopologyGraph};

use crate::align::{alignment_error, fake_edge_ratio};
use crate::error::{MetricsError, MetricsResult};
use crate::features::feature_mmd;
use crate::ged::graph_edit_distance;
use crate::retrieval::{retrieval_distance, RetrievalMetric};
use crate::stats::room_stats;
use crate::topo::reconstruct_topology;

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub generated_plans: usize,
    pub reference_plans: usize,
    /// Mean alignment error in pixels over generated plans with at least
    /// two real junctions.
    pub alignment_error: f64,
    /// Mean edge disagreement, defined only when generated and reference
    /// plans pair up index-by-index over identical node sets.
    pub fake_edge_ratio: Option<f64>,
    /// Mean edit distance to the per-sample target topology: the given
    /// constraint inputs when provided, otherwise the paired reference
    /// plan's reconstruction. Absent when neither pairing exists.
    pub mean_ged: Option<f64>,
    /// Kernel discrepancy between plan feature distributions, clamped to 0
    /// (the unbiased estimate may dip below zero on matching sets).
    pub mmd: f64,
    pub mmd_unbiased: f64,
    pub room_ratios: BTreeMap<String, f64>,
    pub omitted_categories: Vec<String>,
    pub retrieval_euclidean_mean: f64,
    pub retrieval_wasserstein_mean: f64,
    /// The transport distance compares sorted pixel values only.
    pub wasserstein_is_sorted_pixel_approximation: bool,
}

/// One generated plan's metrics; empty fields mean the metric was not
/// defined for the sample.
#[derive(Clone, Debug, Serialize)]
pub struct SampleRow {
    pub index: usize,
    pub alignment_error: Option<f64>,
    pub fake_edge_ratio: Option<f64>,
    pub ged: Option<u32>,
    pub retrieval_euclidean: f64,
    pub nearest_euclidean: usize,
    pub retrieval_wasserstein: f64,
    pub nearest_wasserstein: usize,
}

/// Evaluate generated plans against a reference set. `topology_inputs`,
/// when given, pairs with `generated` by index and becomes the edit-distance
/// target.
pub fn evaluate(
    generated: &[Floorplan],
    reference: &[Floorplan],
    topology_inputs: Option<&[TopologyGraph]>,
) -> MetricsResult<(EvalReport, Vec<SampleRow>)> {
    if generated.len() < 2 || reference.len() < 2 {
        return Err(MetricsError::Arity(format!(
            "evaluation needs at least 2 plans per set, got {} generated and {} reference",
            generated.len(),
            reference.len()
        )));
    }
    if let Some(inputs) = topology_inputs {
        if inputs.len() != generated.len() {
            return Err(MetricsError::Arity(format!(
                "{} topology inputs for {} generated plans",
                inputs.len(),
                generated.len()
            )));
        }
    }
    let paired = generated.len() == reference.len()
        && generated
            .iter()
            .zip(reference)
            .all(|(g, r)| g.source.nodes == r.source.nodes);

    let mut rows = Vec::with_capacity(generated.len());
    for (index, plan) in generated.iter().enumerate() {
        let ae = alignment_error(&plan.source).ok();
        let fe = if paired {
            fake_edge_ratio(&plan.source, &reference[index].source).ok()
        } else {
            None
        };
        let target_topology = match topology_inputs {
            Some(inputs) => Some(inputs[index].clone()),
            None if generated.len() == reference.len() => {
                Some(reconstruct_topology(&reference[index]))
            }
            None => None,
        };
        let ged = target_topology
            .and_then(|t| graph_edit_distance(&reconstruct_topology(plan), &t).ok());
        let (de, ie) = retrieval_distance(plan, reference, RetrievalMetric::Euclidean)?;
        let (dw, iw) = retrieval_distance(plan, reference, RetrievalMetric::Wasserstein)?;
        rows.push(SampleRow {
            index,
            alignment_error: ae,
            fake_edge_ratio: fe,
            ged,
            retrieval_euclidean: de,
            nearest_euclidean: ie,
            retrieval_wasserstein: dw,
            nearest_wasserstein: iw,
        });
    }

    let mean_opt = |values: Vec<f64>| {
        if values.is_empty() {
            None
        } else {
            Some(values.iter().sum::<f64>() / values.len() as f64)
        }
    };
    let ae_mean = mean_opt(rows.iter().filter_map(|r| r.alignment_error).collect()).unwrap_or(0.0);
    let fe_mean = mean_opt(rows.iter().filter_map(|r| r.fake_edge_ratio).collect());
    let ged_mean = mean_opt(rows.iter().filter_map(|r| r.ged.map(f64::from)).collect());
    let mmd_unbiased = feature_mmd(generated, reference)?;
    let stats = room_stats(generated, reference)?;

    let report = EvalReport {
        generated_plans: generated.len(),
        reference_plans: reference.len(),
        alignment_error: ae_mean,
        fake_edge_ratio: fe_mean,
        mean_ged: ged_mean,
        mmd: mmd_unbiased.max(0.0),
        mmd_unbiased,
        room_ratios: stats
            .ratios
            .iter()
            .map(|(cat, ratio)| (cat.name().to_string(), *ratio))
            .collect(),
        omitted_categories: stats.omitted.iter().map(|c| c.name().to_string()).collect(),
        retrieval_euclidean_mean: rows.iter().map(|r| r.retrieval_euclidean).sum::<f64>()
            / rows.len() as f64,
        retrieval_wasserstein_mean: rows.iter().map(|r| r.retrieval_wasserstein).sum::<f64>()
            / rows.len() as f64,
        wasserstein_is_sorted_pixel_approximation: true,
    };
    Ok((report, rows))
}

/// Per-sample table as CSV, one row per generated plan, empty cells for
/// undefined metrics.
pub fn csv_table(rows: &[SampleRow]) -> String {
    let mut out = String::from(
        "index,alignment_error,fake_edge_ratio,ged,retrieval_euclidean,nearest_euclidean,retrieval_wasserstein,nearest_wasserstein\n",
    );
    let opt = |v: Option<String>| v.unwrap_or_default();
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            row.index,
            opt(row.alignment_error.map(|v| v.to_string())),
            opt(row.fake_edge_ratio.map(|v| v.to_string())),
            opt(row.ged.map(|v| v.to_string())),
            row.retrieval_euclidean,
            row.nearest_euclidean,
            row.retrieval_wasserstein,
            row.nearest_wasserstein,
        ));
    }
    out
}
