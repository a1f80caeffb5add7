//! Fixed per-plan feature vectors and a kernel two-sample discrepancy over
//! them, standing in for learned perceptual distribution metrics.

use gsdiff_graph::{Floorplan, RoomCategory};

use crate::align::alignment_error;
use crate::error::{MetricsError, MetricsResult};

/// room count, six per-category counts, mean room area, area variance,
/// junction count, edge count, mean edge length, alignment error.
pub const FEATURE_DIM: usize = 13;

fn cycle_area(fp: &Floorplan, cycle: &[usize]) -> f64 {
    let pts: Vec<[f64; 2]> = cycle.iter().map(|&i| fp.source.pixel(i)).collect();
    let mut twice = 0.0;
    for k in 0..pts.len() {
        let a = pts[k];
        let b = pts[(k + 1) % pts.len()];
        twice += a[0] * b[1] - b[0] * a[1];
    }
    twice.abs() / 2.0
}

/// Hand-crafted summary of one plan, in pixel units throughout.
pub fn plan_features(fp: &Floorplan) -> [f64; FEATURE_DIM] {
    let mut f = [0.0; FEATURE_DIM];
    f[0] = fp.rooms.len() as f64;
    for room in &fp.rooms {
        if let Some(cat) = room.category {
            if cat != RoomCategory::ExternalArea {
                f[1 + cat.index()] += 1.0;
            }
        }
    }
    let areas: Vec<f64> = fp.rooms.iter().map(|r| cycle_area(fp, &r.cycle)).collect();
    if !areas.is_empty() {
        let mean = areas.iter().sum::<f64>() / areas.len() as f64;
        f[7] = mean;
        f[8] = areas.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / areas.len() as f64;
    }
    let g = &fp.source;
    f[9] = g.real_node_count() as f64;
    f[10] = g.edges.len() as f64;
    if !g.edges.is_empty() {
        let total: f64 = g
            .edges
            .iter()
            .map(|&(u, v)| {
                let (a, b) = (g.pixel(u), g.pixel(v));
                ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
            })
            .sum();
        f[11] = total / g.edges.len() as f64;
    }
    f[12] = alignment_error(g).unwrap_or(0.0);
    f
}

fn sq_dist(a: &[f64; FEATURE_DIM], b: &[f64; FEATURE_DIM]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Unbiased squared maximum mean discrepancy with an RBF kernel,
/// `k(x, y) = exp(-|x-y|^2 / (2 h^2))`, bandwidth `h` the median pairwise
/// distance over both sets pooled. Unbiasedness means the estimate can dip
/// slightly below zero for matching distributions; callers reporting a
/// nonnegative score clamp it. Needs two vectors per side so the
/// within-set terms exist.
pub fn mmd_from_features(
    a: &[[f64; FEATURE_DIM]],
    b: &[[f64; FEATURE_DIM]],
) -> MetricsResult<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(MetricsError::Arity(format!(
            "discrepancy needs at least 2 plans per set, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let pooled: Vec<&[f64; FEATURE_DIM]> = a.iter().chain(b.iter()).collect();
    let mut dists = Vec::with_capacity(pooled.len() * (pooled.len() - 1) / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            dists.push(sq_dist(pooled[i], pooled[j]).sqrt());
        }
    }
    dists.sort_by(|x, y| x.partial_cmp(y).expect("finite distances"));
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 1 {
        dists[mid]
    } else {
        (dists[mid - 1] + dists[mid]) / 2.0
    };
    // All-identical pool: every kernel value is 1 regardless of bandwidth.
    let h = if median > 0.0 { median } else { 1.0 };
    let kernel = |x: &[f64; FEATURE_DIM], y: &[f64; FEATURE_DIM]| {
        (-sq_dist(x, y) / (2.0 * h * h)).exp()
    };

    let within = |set: &[[f64; FEATURE_DIM]]| {
        let m = set.len();
        let mut total = 0.0;
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    total += kernel(&set[i], &set[j]);
                }
            }
        }
        total / (m * (m - 1)) as f64
    };
    let mut cross = 0.0;
    for x in a {
        for y in b {
            cross += kernel(x, y);
        }
    }
    cross /= (a.len() * b.len()) as f64;
    Ok(within(a) + within(b) - 2.0 * cross)
}

/// [`mmd_from_features`] applied to plan feature vectors.
pub fn feature_mmd(a: &[Floorplan], b: &[Floorplan]) -> MetricsResult<f64> {
    let fa: Vec<[f64; FEATURE_DIM]> = a.iter().map(plan_features).collect();
    let fb: Vec<[f64; FEATURE_DIM]> = b.iter().map(plan_features).collect();
    mmd_from_features(&fa, &fb)
}
