//! Reference implementations kept deliberately naive, used to cross-check
//! the production search in tests.

use gsdiff_graph::TopologyGraph;

use crate::error::{MetricsError, MetricsResult};

/// Edit cost of one complete node assignment, computed from the definition:
/// deletions and relabels on `a`'s side, insertions for unmatched `b` nodes,
/// one unit per edge present on one side of the mapping but not the other.
fn assignment_cost(
    a: &TopologyGraph,
    b: &TopologyGraph,
    mapping: &[Option<usize>],
) -> u32 {
    let mut image = vec![None; b.rooms.len()];
    let mut cost = 0u32;
    for (i, choice) in mapping.iter().enumerate() {
        match choice {
            Some(j) => {
                image[*j] = Some(i);
                if a.rooms[i] != b.rooms[*j] {
                    cost += 1;
                }
            }
            None => cost += 1,
        }
    }
    cost += image.iter().filter(|slot| slot.is_none()).count() as u32;

    for &(i, j) in &a.adjacency {
        let covered = match (mapping[i], mapping[j]) {
            (Some(u), Some(v)) => b.are_adjacent(u, v),
            _ => false,
        };
        if !covered {
            cost += 1;
        }
    }
    for &(u, v) in &b.adjacency {
        let covered = match (image[u], image[v]) {
            (Some(i), Some(j)) => a.are_adjacent(i, j),
            _ => false,
        };
        if !covered {
            cost += 1;
        }
    }
    cost
}

fn enumerate(
    a: &TopologyGraph,
    b: &TopologyGraph,
    mapping: &mut Vec<Option<usize>>,
    used: &mut Vec<bool>,
    best: &mut u32,
) {
    if mapping.len() == a.rooms.len() {
        *best = (*best).min(assignment_cost(a, b, mapping));
        return;
    }
    mapping.push(None);
    enumerate(a, b, mapping, used, best);
    mapping.pop();
    for j in 0..b.rooms.len() {
        if used[j] {
            continue;
        }
        used[j] = true;
        mapping.push(Some(j));
        enumerate(a, b, mapping, used, best);
        mapping.pop();
        used[j] = false;
    }
}

/// Graph edit distance by enumerating every injective partial assignment.
/// Exponential; intended for small graphs only.
pub fn exhaustive_ged(a: &TopologyGraph, b: &TopologyGraph) -> MetricsResult<u32> {
    if a.rooms.len() > 8 || b.rooms.len() > 8 {
        return Err(MetricsError::Size(
            "exhaustive edit distance is capped at 8 rooms".into(),
        ));
    }
    let mut best = u32::MAX;
    enumerate(a, b, &mut Vec::new(), &mut vec![false; b.rooms.len()], &mut best);
    Ok(best)
}
