//! Per-category room frequency comparison between two plan collections.

use gsdiff_graph::{Floorplan, RoomCategory};

use crate::error::{MetricsError, MetricsResult};

/// Rooms-per-plan ratios, generated over reference, one entry per room
/// category that appears in the reference set. A ratio of 1 means the
/// generator produces that room type at the reference rate.
#[derive(Clone, Debug, PartialEq)]
pub struct RoomStats {
    pub ratios: Vec<(RoomCategory, f64)>,
    /// Categories absent from the reference set; no ratio is defined for
    /// them, and callers should surface the omission.
    pub omitted: Vec<RoomCategory>,
}

fn category_rates(plans: &[Floorplan]) -> [f64; 6] {
    let mut counts = [0usize; 6];
    for plan in plans {
        for room in &plan.rooms {
            if let Some(cat) = room.category {
                if cat != RoomCategory::ExternalArea {
                    counts[cat.index()] += 1;
                }
            }
        }
    }
    let mut rates = [0.0; 6];
    for (rate, count) in rates.iter_mut().zip(counts) {
        *rate = count as f64 / plans.len() as f64;
    }
    rates
}

pub fn room_stats(generated: &[Floorplan], reference: &[Floorplan]) -> MetricsResult<RoomStats> {
    if generated.is_empty() || reference.is_empty() {
        return Err(MetricsError::Arity(format!(
            "room statistics need nonempty sets, got {} and {}",
            generated.len(),
            reference.len()
        )));
    }
    let gen_rates = category_rates(generated);
    let ref_rates = category_rates(reference);
    let mut ratios = Vec::new();
    let mut omitted = Vec::new();
    for cat in RoomCategory::ROOMS {
        if ref_rates[cat.index()] > 0.0 {
            ratios.push((cat, gen_rates[cat.index()] / ref_rates[cat.index()]));
        } else {
            omitted.push(cat);
        }
    }
    Ok(RoomStats { ratios, omitted })
}

#[cfg(test)]
mod tests {
    use super::*;
    use gsdiff_graph::{extract_rooms, generate_floorplan, layout_to_graph, GenParams};
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
    fn identical_sets_give_unit_ratios() {
        let set = plans(3, 12);
        let stats = room_stats(&set, &set).unwrap();
        assert!(!stats.ratios.is_empty());
        for (cat, ratio) in &stats.ratios {
            assert!((ratio - 1.0).abs() < 1e-12, "{} ratio {}", cat.name(), ratio);
        }
        for cat in &stats.omitted {
            assert!(RoomCategory::ROOMS.contains(cat));
        }
        assert_eq!(stats.ratios.len() + stats.omitted.len(), 6);
    }

    #[test]
    fn doubling_a_category_doubles_its_ratio() {
        let reference = plans(4, 10);
        // Duplicate every plan's rooms by concatenating the set with itself:
        // per-plan counts double while the plan count stays fixed.
        let mut generated = Vec::new();
        for plan in &reference {
            let mut doubled = plan.clone();
            doubled.rooms.extend(plan.rooms.iter().cloned());
            generated.push(doubled);
        }
        let stats = room_stats(&generated, &reference).unwrap();
        for (_, ratio) in &stats.ratios {
            assert!((ratio - 2.0).abs() < 1e-12);
        }
        assert!(room_stats(&[], &reference).is_err());
    }
}
