//! Exact graph edit distance between room topologies.
//!
//! Unit costs for node insertion, deletion, relabeling and edge insertion,
//! deletion. Exact search over injective node assignments with
//! branch-and-bound; tractable because room graphs are capped at
//! [`MAX_GED_ROOMS`] nodes.

use gsdiff_graph::{TopologyGraph, CATEGORY_COUNT};

use crate::error::{MetricsError, MetricsResult};

/// Largest room count the exact search accepts.
pub const MAX_GED_ROOMS: usize = 8;

struct Search {
    labels_a: Vec<usize>,
    labels_b: Vec<usize>,
    adj_a: Vec<Vec<bool>>,
    adj_b: Vec<Vec<bool>>,
    edges_b: Vec<(usize, usize)>,
    assignment: Vec<Option<usize>>,
    used: Vec<bool>,
    best: u32,
}

fn adjacency_matrix(g: &TopologyGraph) -> Vec<Vec<bool>> {
    let n = g.rooms.len();
    let mut adj = vec![vec![false; n]; n];
    for &(i, j) in &g.adjacency {
        adj[i][j] = true;
        adj[j][i] = true;
    }
    adj
}

fn check_size(g: &TopologyGraph) -> MetricsResult<()> {
    if g.rooms.len() > MAX_GED_ROOMS {
        return Err(MetricsError::Size(format!(
            "{} rooms exceed the exact-search cap of {}",
            g.rooms.len(),
            MAX_GED_ROOMS
        )));
    }
    Ok(())
}

impl Search {
    /// Edit cost newly fixed by assigning node `i`, given all nodes before
    /// `i` are already decided: the node operation itself plus every edge of
    /// `a` between `i` and a decided node (matched edges cost 0, the rest 1).
    fn step_cost(&self, i: usize, choice: Option<usize>) -> u32 {
        let mut cost = 0;
        match choice {
            Some(j) => {
                cost += u32::from(self.labels_a[i] != self.labels_b[j]);
                for i2 in 0..i {
                    cost += match self.assignment[i2] {
                        Some(j2) => u32::from(self.adj_a[i][i2] != self.adj_b[j][j2]),
                        None => u32::from(self.adj_a[i][i2]),
                    };
                }
            }
            None => {
                cost += 1;
                for i2 in 0..i {
                    cost += u32::from(self.adj_a[i][i2]);
                }
            }
        }
        cost
    }

    /// Admissible node-operation bound for the not-yet-decided part: label
    /// multiset matching between remaining `a` nodes and unused `b` nodes.
    fn lower_bound(&self, next: usize) -> u32 {
        let remaining_a = self.labels_a.len() - next;
        let mut count_a = [0u32; CATEGORY_COUNT];
        for &l in &self.labels_a[next..] {
            count_a[l] += 1;
        }
        let mut remaining_b = 0u32;
        let mut count_b = [0u32; CATEGORY_COUNT];
        for (j, &l) in self.labels_b.iter().enumerate() {
            if !self.used[j] {
                count_b[l] += 1;
                remaining_b += 1;
            }
        }
        let matched: u32 = (0..CATEGORY_COUNT)
            .map(|l| count_a[l].min(count_b[l]))
            .sum();
        let ra = remaining_a as u32;
        ra.abs_diff(remaining_b) + ra.min(remaining_b) - matched
    }

    fn descend(&mut self, i: usize, cost: u32) {
        if cost + self.lower_bound(i) >= self.best {
            return;
        }
        if i == self.labels_a.len() {
            let mut total = cost;
            total += self.used.iter().filter(|&&u| !u).count() as u32;
            for &(u, v) in &self.edges_b {
                if !self.used[u] || !self.used[v] {
                    total += 1;
                }
            }
            self.best = self.best.min(total);
            return;
        }
        // Same-label targets first, then deletion, then relabeling targets:
        // cheap branches early make the bound bite sooner.
        for round in 0..2 {
            for j in 0..self.labels_b.len() {
                if self.used[j] || (self.labels_a[i] == self.labels_b[j]) == (round == 1) {
                    continue;
                }
                self.used[j] = true;
                self.assignment[i] = Some(j);
                let step = self.step_cost(i, Some(j));
                self.descend(i + 1, cost + step);
                self.assignment[i] = None;
                self.used[j] = false;
            }
            if round == 0 {
                let step = self.step_cost(i, None);
                self.descend(i + 1, cost + step);
            }
        }
    }
}

/// Minimum number of unit-cost node and edge operations turning `a` into
/// `b`. A metric on labeled graphs: zero exactly on label-preserving
/// isomorphism, symmetric, and obeying the triangle inequality.
pub fn graph_edit_distance(a: &TopologyGraph, b: &TopologyGraph) -> MetricsResult<u32> {
    check_size(a)?;
    check_size(b)?;
    let labels_a: Vec<usize> = a.rooms.iter().map(|r| r.index()).collect();
    let labels_b: Vec<usize> = b.rooms.iter().map(|r| r.index()).collect();
    let na = labels_a.len();
    // Everything-differs mapping as the initial budget: delete all of a,
    // insert all of b.
    let worst = (na + labels_b.len() + a.adjacency.len() + b.adjacency.len()) as u32;
    let mut search = Search {
        labels_a,
        labels_b,
        adj_a: adjacency_matrix(a),
        adj_b: adjacency_matrix(b),
        edges_b: b.adjacency.clone(),
        assignment: vec![None; na],
        used: vec![false; b.rooms.len()],
        best: worst + 1,
    };
    search.descend(0, 0);
    Ok(search.best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::exhaustive_ged;
    use gsdiff_graph::RoomCategory;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn four_room() -> TopologyGraph {
        TopologyGraph::new(
            vec![
                RoomCategory::LivingRoom,
                RoomCategory::Bedroom,
                RoomCategory::Kitchen,
                RoomCategory::Bathroom,
            ],
            vec![(0, 1), (0, 2), (0, 3), (1, 2)],
        )
        .unwrap()
    }

    pub(crate) fn random_topology(rng: &mut ChaCha8Rng, max_rooms: usize) -> TopologyGraph {
        let n = rng.random_range(1..=max_rooms);
        let rooms: Vec<RoomCategory> = (0..n)
            .map(|_| RoomCategory::from_index(rng.random_range(0..6)).unwrap())
            .collect();
        let mut adjacency = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if rng.random::<f64>() < 0.4 {
                    adjacency.push((i, j));
                }
            }
        }
        TopologyGraph::new(rooms, adjacency).unwrap()
    }

    #[test]
    fn identical_graphs_have_distance_zero() {
        let g = four_room();
        assert_eq!(graph_edit_distance(&g, &g).unwrap(), 0);
    }

    #[test]
    fn single_relabel_costs_one() {
        let g = four_room();
        let mut rooms = g.rooms.clone();
        rooms[2] = RoomCategory::Storage;
        let relabeled = TopologyGraph::new(rooms, g.adjacency.clone()).unwrap();
        assert_eq!(graph_edit_distance(&g, &relabeled).unwrap(), 1);
        assert_eq!(exhaustive_ged(&g, &relabeled).unwrap(), 1);
    }

    #[test]
    fn single_edge_removal_costs_one() {
        let g = four_room();
        let mut adjacency = g.adjacency.clone();
        adjacency.pop();
        let thinner = TopologyGraph::new(g.rooms.clone(), adjacency).unwrap();
        assert_eq!(graph_edit_distance(&g, &thinner).unwrap(), 1);
        assert_eq!(exhaustive_ged(&g, &thinner).unwrap(), 1);
    }

    #[test]
    fn permuted_room_order_is_isomorphic() {
        let g = four_room();
        // Reverse the room order and relabel adjacency accordingly.
        let n = g.rooms.len();
        let rooms: Vec<RoomCategory> = g.rooms.iter().rev().copied().collect();
        let adjacency: Vec<(usize, usize)> = g
            .adjacency
            .iter()
            .map(|&(i, j)| (n - 1 - i, n - 1 - j))
            .collect();
        let permuted = TopologyGraph::new(rooms, adjacency).unwrap();
        assert_eq!(graph_edit_distance(&g, &permuted).unwrap(), 0);
    }

    #[test]
    fn oversized_graphs_are_refused() {
        let big = TopologyGraph::new(vec![RoomCategory::Bedroom; 9], vec![]).unwrap();
        assert!(matches!(
            graph_edit_distance(&big, &four_room()),
            Err(MetricsError::Size(_))
        ));
        assert!(graph_edit_distance(&four_room(), &big).is_err());
    }

    #[test]
    fn search_agrees_with_exhaustive_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(90);
        for _ in 0..60 {
            let a = random_topology(&mut rng, 5);
            let b = random_topology(&mut rng, 5);
            let fast = graph_edit_distance(&a, &b).unwrap();
            let slow = exhaustive_ged(&a, &b).unwrap();
            assert_eq!(fast, slow, "disagreement on {:?} vs {:?}", a, b);
        }
    }

    #[test]
    fn distance_is_symmetric_and_satisfies_triangles() {
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        for _ in 0..40 {
            let a = random_topology(&mut rng, 6);
            let b = random_topology(&mut rng, 6);
            let c = random_topology(&mut rng, 6);
            let ab = graph_edit_distance(&a, &b).unwrap();
            let ba = graph_edit_distance(&b, &a).unwrap();
            assert_eq!(ab, ba);
            let bc = graph_edit_distance(&b, &c).unwrap();
            let ac = graph_edit_distance(&a, &c).unwrap();
            assert!(ac <= ab + bc, "triangle violated: {} > {} + {}", ac, ab, bc);
        }
    }
}
