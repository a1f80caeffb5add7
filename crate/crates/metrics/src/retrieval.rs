//! Nearest-training-sample search over rasterized plans, for memorization
//! analysis.

use serde::{Deserialize, Serialize};

use gsdiff_graph::Floorplan;

use crate::error::{MetricsError, MetricsResult};

/// Raster edge length used for retrieval comparisons.
pub const RASTER_SIZE: usize = 64;

/// Category-index image: 0 is empty space, `1 + category index` marks a
/// room's interior.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CategoryRaster(pub Vec<u8>);

fn point_in_polygon(p: [f64; 2], poly: &[[f64; 2]]) -> bool {
    let mut inside = false;
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
            if p[0] < x {
                inside = !inside;
            }
        }
    }
    inside
}

/// Paint each pixel with the category of the room containing its center
/// (rooms have disjoint interiors, so the first hit wins).
pub fn category_raster(fp: &Floorplan) -> CategoryRaster {
    let polygons: Vec<(u8, Vec<[f64; 2]>)> = fp
        .rooms
        .iter()
        .map(|room| {
            let value = room.category.map_or(0, |c| 1 + c.index() as u8);
            let pts = room.cycle.iter().map(|&i| fp.source.pixel(i)).collect();
            (value, pts)
        })
        .collect();
    let cell = 256.0 / RASTER_SIZE as f64;
    let mut pixels = vec![0u8; RASTER_SIZE * RASTER_SIZE];
    for row in 0..RASTER_SIZE {
        for col in 0..RASTER_SIZE {
            let center = [(col as f64 + 0.5) * cell, (row as f64 + 0.5) * cell];
            for (value, poly) in &polygons {
                if point_in_polygon(center, poly) {
                    pixels[row * RASTER_SIZE + col] = *value;
                    break;
                }
            }
        }
    }
    CategoryRaster(pixels)
}

/// L2 over pixel category values.
pub fn raster_euclidean(a: &CategoryRaster, b: &CategoryRaster) -> f64 {
    a.0.iter()
        .zip(&b.0)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// One-dimensional transport distance between the sorted pixel-value
/// distributions, mean per pixel. An approximation of image-space optimal
/// transport: it ignores pixel positions entirely.
pub fn raster_wasserstein(a: &CategoryRaster, b: &CategoryRaster) -> f64 {
    let mut sa = a.0.clone();
    let mut sb = b.0.clone();
    sa.sort_unstable();
    sb.sort_unstable();
    let total: f64 = sa
        .iter()
        .zip(&sb)
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .sum();
    total / sa.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalMetric {
    Euclidean,
    Wasserstein,
}

/// Distance from `sample` to its nearest plan in `training`, with the
/// winning index (lowest index on ties).
pub fn retrieval_distance(
    sample: &Floorplan,
    training: &[Floorplan],
    metric: RetrievalMetric,
) -> MetricsResult<(f64, usize)> {
    if training.is_empty() {
        return Err(MetricsError::Arity("retrieval against an empty training set".into()));
    }
    let target = category_raster(sample);
    let mut best = (f64::INFINITY, 0);
    for (idx, plan) in training.iter().enumerate() {
        let raster = category_raster(plan);
        let d = match metric {
            RetrievalMetric::Euclidean => raster_euclidean(&target, &raster),
            RetrievalMetric::Wasserstein => raster_wasserstein(&target, &raster),
        };
        if d < best.0 {
            best = (d, idx);
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use gsdiff_graph::{extract_rooms, generate_floorplan, layout_to_graph, GenParams, RoomCategory};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn plans(seed: u64, count: usize) -> Vec<Floorplan> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = GenParams::default();
        (0..count)
            .map(|_| {
                let layout = generate_floorplan(&mut rng, &params).unwrap();
                extract_rooms(&layout_to_graph(&layout).unwrap()).unwrap()
            })
            .collect()
    }

    #[test]
    fn constant_rasters_differ_by_the_pixel_count_root() {
        let zeros = CategoryRaster(vec![0; RASTER_SIZE * RASTER_SIZE]);
        let ones = CategoryRaster(vec![1; RASTER_SIZE * RASTER_SIZE]);
        assert_eq!(raster_euclidean(&zeros, &ones), ((RASTER_SIZE * RASTER_SIZE) as f64).sqrt());
        assert_eq!(raster_euclidean(&zeros, &zeros), 0.0);
        assert_eq!(raster_wasserstein(&zeros, &ones), 1.0);
    }

    #[test]
    fn euclidean_is_symmetric() {
        let set = plans(8, 2);
        let (a, b) = (category_raster(&set[0]), category_raster(&set[1]));
        assert_eq!(raster_euclidean(&a, &b), raster_euclidean(&b, &a));
        assert_eq!(raster_wasserstein(&a, &b), raster_wasserstein(&b, &a));
    }

    #[test]
    fn raster_recovers_room_interiors() {
        let set = plans(9, 1);
        let raster = category_raster(&set[0]);
        // Some pixel carries a room value and the histogram only uses
        // the declared label range.
        assert!(raster.0.iter().any(|&v| v > 0));
        assert!(raster.0.iter().all(|&v| v <= 1 + RoomCategory::ExternalArea.index() as u8));
    }

    #[test]
    fn member_of_training_set_retrieves_itself() {
        let set = plans(10, 6);
        for metric in [RetrievalMetric::Euclidean, RetrievalMetric::Wasserstein] {
            let (d, idx) = retrieval_distance(&set[3], &set, metric).unwrap();
            assert_eq!(d, 0.0);
            // Ties resolve to the lowest index; distinct plans make 3 unique.
            assert_eq!(idx, 3);
        }
        assert!(retrieval_distance(&set[0], &[], RetrievalMetric::Euclidean).is_err());
    }
}
