//! Floorplan extraction: trace the minimal polygonal cycles of a structural
//! graph, discard outer and degenerate faces, and label the remaining faces
//! as rooms.
//!
//! Tracing walks directed half-edges. Arriving along `u -> v`, the successor
//! leaves `v` through the neighbor `w` minimizing the clockwise angle from
//! the reversed incoming direction `(u - v)` to `(w - v)` in `(0, 2π]`; the
//! backtrack `w = u` sits exactly at 2π, so it is taken only at dead ends.
//! This keeps the traced face immediately to the left of each half-edge, so
//! interior faces come out counterclockwise (positive signed area, y up) and
//! each outer contour clockwise (negative). Every directed half-edge belongs
//! to exactly one face, giving the conservation law Σ cycle length = 2·|E|.

use crate::error::{GraphError, GraphResult};
use crate::geometry::{clockwise_angle, signed_area, sub};
use crate::types::{Floorplan, Node, Room, RoomCategory, StructuralGraph};

/// A traced face. The cycle lists each visited vertex once per visit, open
/// (the starting vertex is not repeated at the end). Signed area is in pixel²
/// with counterclockwise positive.
#[derive(Debug, Clone, PartialEq)]
pub struct Face {
    pub cycle: Vec<usize>,
    pub signed_area: f64,
}

/// Successor of the half-edge `(u, v)` under the minimal-clockwise-turn rule.
/// Angle ties (exactly collinear candidates) break toward the lowest index.
pub fn next_half_edge(
    g: &StructuralGraph,
    adjacency: &[Vec<usize>],
    u: usize,
    v: usize,
) -> GraphResult<(usize, usize)> {
    let neighbors = &adjacency[v];
    if neighbors.is_empty() {
        return Err(GraphError::Topology {
            msg: format!("node {} has no neighbors", v),
        });
    }
    if neighbors.len() == 1 && neighbors[0] == u {
        return Ok((v, u));
    }
    let back = sub(g.pixel(u), g.pixel(v));
    let mut best: Option<(f64, usize)> = None;
    for &w in neighbors {
        let angle = if w == u {
            std::f64::consts::TAU
        } else {
            clockwise_angle(back, sub(g.pixel(w), g.pixel(v)))
        };
        let better = match best {
            None => true,
            Some((best_angle, best_w)) => {
                angle < best_angle || (angle == best_angle && w < best_w)
            }
        };
        if better {
            best = Some((angle, w));
        }
    }
    let (_, w) = best.expect("nonempty neighbor list");
    Ok((v, w))
}

/// Trace the face containing the half-edge `start` until it recurs.
pub fn trace_face(
    g: &StructuralGraph,
    adjacency: &[Vec<usize>],
    start: (usize, usize),
) -> GraphResult<Face> {
    let limit = 2 * g.edges.len();
    let mut cycle = Vec::new();
    let mut cur = start;
    loop {
        cycle.push(cur.0);
        cur = next_half_edge(g, adjacency, cur.0, cur.1)?;
        if cur == start {
            break;
        }
        if cycle.len() > limit {
            return Err(GraphError::Cycle {
                msg: format!(
                    "face from ({}, {}) exceeded {} steps; inconsistent geometry",
                    start.0, start.1, limit
                ),
            });
        }
    }
    let points: Vec<[f64; 2]> = cycle.iter().map(|&i| g.pixel(i)).collect();
    let signed_area = signed_area(&points);
    Ok(Face { cycle, signed_area })
}

/// Trace every face of the graph exactly once (each directed half-edge is
/// consumed by one face).
pub fn trace_all_faces(g: &StructuralGraph) -> GraphResult<Vec<Face>> {
    let adjacency = g.adjacency();
    let n = g.nodes.len();
    let mut visited = vec![false; n * n];
    let mut faces = Vec::new();
    for &(a, b) in &g.edges {
        for (u, v) in [(a, b), (b, a)] {
            if visited[u * n + v] {
                continue;
            }
            let face = trace_face(g, &adjacency, (u, v))?;
            for k in 0..face.cycle.len() {
                let p = face.cycle[k];
                let q = face.cycle[(k + 1) % face.cycle.len()];
                visited[p * n + q] = true;
            }
            faces.push(face);
        }
    }
    Ok(faces)
}

/// Majority category over the face's distinct vertices. Each vertex votes for
/// every room category present in its semantics; the external area never
/// votes. `None` when no vertex carries any room category.
pub fn assign_category(face: &Face, nodes: &[Node]) -> Option<RoomCategory> {
    let mut distinct = face.cycle.clone();
    distinct.sort_unstable();
    distinct.dedup();
    let mut votes = [0usize; 6];
    for &i in &distinct {
        for cat in RoomCategory::ROOMS {
            if nodes[i].has_category(cat) {
                votes[cat.index()] += 1;
            }
        }
    }
    let max = *votes.iter().max().expect("six categories");
    if max == 0 {
        return None;
    }
    RoomCategory::TIE_PRIORITY
        .into_iter()
        .find(|cat| votes[cat.index()] == max)
}

/// Rotate (and if needed reverse) a cycle so it starts at its minimum vertex
/// index and continues toward the smaller of that vertex's two neighbors.
/// Cycles compare equal under this form iff they visit the same vertex ring,
/// regardless of starting point or direction.
pub fn canonical_cycle(cycle: &[usize]) -> Vec<usize> {
    let n = cycle.len();
    let start = (0..n).min_by_key(|&i| (cycle[i], cycle[(i + 1) % n])).expect("nonempty");
    let mut rotated: Vec<usize> = (0..n).map(|k| cycle[(start + k) % n]).collect();
    if n > 2 && rotated[n - 1] < rotated[1] {
        rotated[1..].reverse();
    }
    rotated
}

/// Extract rooms: all positively oriented faces with at least 3 distinct
/// vertices, canonically ordered, with majority-vote categories.
pub fn extract_rooms(g: &StructuralGraph) -> GraphResult<Floorplan> {
    let faces = trace_all_faces(g)?;
    let mut rooms: Vec<Room> = Vec::new();
    for face in &faces {
        let mut distinct = face.cycle.clone();
        distinct.sort_unstable();
        distinct.dedup();
        if distinct.len() < 3 || face.signed_area <= 0.0 {
            continue;
        }
        rooms.push(Room {
            cycle: canonical_cycle(&face.cycle),
            category: assign_category(face, &g.nodes),
        });
    }
    rooms.sort_by(|a, b| a.cycle.cmp(&b.cycle));
    Ok(Floorplan {
        rooms,
        source: g.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::normalize_coord;

    fn node_at(x: f64, y: f64, cats: &[RoomCategory]) -> Node {
        let mut n = Node::real(normalize_coord([x, y]).unwrap());
        for &c in cats {
            n.set_category(c);
        }
        n
    }

    fn square() -> StructuralGraph {
        use RoomCategory::*;
        let nodes = vec![
            node_at(64.0, 64.0, &[LivingRoom, ExternalArea]),
            node_at(192.0, 64.0, &[LivingRoom, ExternalArea]),
            node_at(192.0, 192.0, &[LivingRoom, ExternalArea]),
            node_at(64.0, 192.0, &[LivingRoom, ExternalArea]),
        ];
        StructuralGraph::new(&nodes, vec![(0, 1), (1, 2), (2, 3), (0, 3)]).unwrap()
    }

    #[test]
    fn square_successor_follows_the_interior() {
        let g = square();
        let adjacency = g.adjacency();
        // Arriving 0 -> 1, the interior continuation is 1 -> 2.
        assert_eq!(next_half_edge(&g, &adjacency, 0, 1).unwrap(), (1, 2));
        // Degree-2 vertices always continue to the other neighbor.
        assert_eq!(next_half_edge(&g, &adjacency, 1, 2).unwrap(), (2, 3));
    }

    #[test]
    fn dangling_tip_backtracks() {
        let nodes = vec![node_at(64.0, 64.0, &[]), node_at(192.0, 64.0, &[])];
        let g = StructuralGraph::new(&nodes, vec![(0, 1)]).unwrap();
        let adjacency = g.adjacency();
        assert_eq!(next_half_edge(&g, &adjacency, 0, 1).unwrap(), (1, 0));
    }

    #[test]
    fn square_faces_partition_half_edges() {
        let g = square();
        let faces = trace_all_faces(&g).unwrap();
        assert_eq!(faces.len(), 2);
        let total: usize = faces.iter().map(|f| f.cycle.len()).sum();
        assert_eq!(total, 2 * g.edges.len());
        let area_sum: f64 = faces.iter().map(|f| f.signed_area).sum();
        assert!(area_sum.abs() < 1e-6);
        // One interior (positive) face of 128x128 pixels.
        let interior: Vec<&Face> = faces.iter().filter(|f| f.signed_area > 0.0).collect();
        assert_eq!(interior.len(), 1);
        assert_eq!(interior[0].signed_area, 128.0 * 128.0);
    }

    #[test]
    fn square_extracts_one_living_room() {
        let fp = extract_rooms(&square()).unwrap();
        assert_eq!(fp.rooms.len(), 1);
        assert_eq!(fp.rooms[0].category, Some(RoomCategory::LivingRoom));
        assert_eq!(fp.rooms[0].cycle, vec![0, 1, 2, 3]);
    }

    #[test]
    fn single_segment_yields_no_rooms() {
        let nodes = vec![node_at(64.0, 64.0, &[]), node_at(192.0, 64.0, &[])];
        let g = StructuralGraph::new(&nodes, vec![(0, 1)]).unwrap();
        let fp = extract_rooms(&g).unwrap();
        assert!(fp.rooms.is_empty());
        // The degenerate out-and-back face still covers both half-edges.
        let faces = trace_all_faces(&g).unwrap();
        assert_eq!(faces.len(), 1);
        assert_eq!(faces[0].cycle.len(), 2);
    }

    #[test]
    fn empty_edges_yield_no_rooms() {
        let g = StructuralGraph::new(&[], vec![]).unwrap();
        assert!(extract_rooms(&g).unwrap().rooms.is_empty());
    }

    #[test]
    fn tie_breaks_use_priority_order() {
        use RoomCategory::*;
        // 2 kitchen votes vs 2 bathroom votes: bathroom outranks kitchen.
        let nodes = vec![
            node_at(64.0, 64.0, &[Kitchen]),
            node_at(192.0, 64.0, &[Kitchen]),
            node_at(192.0, 192.0, &[Bathroom]),
            node_at(64.0, 192.0, &[Bathroom]),
        ];
        let g = StructuralGraph::new(&nodes, vec![(0, 1), (1, 2), (2, 3), (0, 3)]).unwrap();
        let fp = extract_rooms(&g).unwrap();
        assert_eq!(fp.rooms[0].category, Some(RoomCategory::Bathroom));
    }

    #[test]
    fn unlabeled_room_is_unknown() {
        let nodes = vec![
            node_at(64.0, 64.0, &[]),
            node_at(192.0, 64.0, &[]),
            node_at(192.0, 192.0, &[]),
            node_at(64.0, 192.0, &[]),
        ];
        let g = StructuralGraph::new(&nodes, vec![(0, 1), (1, 2), (2, 3), (0, 3)]).unwrap();
        let fp = extract_rooms(&g).unwrap();
        assert_eq!(fp.rooms[0].category, None);
    }

    #[test]
    fn grid_3x3_has_four_rooms() {
        use RoomCategory::*;
        // 3x3 nodes at 64/128/192, all 12 unit edges.
        let mut nodes = Vec::new();
        for y in [64.0, 128.0, 192.0] {
            for x in [64.0, 128.0, 192.0] {
                nodes.push(node_at(x, y, &[Bedroom]));
            }
        }
        let mut edges = Vec::new();
        for row in 0..3 {
            for col in 0..2 {
                edges.push((row * 3 + col, row * 3 + col + 1));
                edges.push((col * 3 + row, (col + 1) * 3 + row));
            }
        }
        let g = StructuralGraph::new(&nodes, edges).unwrap();
        let fp = extract_rooms(&g).unwrap();
        assert_eq!(fp.rooms.len(), 4);
        for room in &fp.rooms {
            assert_eq!(room.cycle.len(), 4);
            assert_eq!(room.category, Some(Bedroom));
        }
        // Conservation: 4 interior squares + 1 outer face cover 24 half-edges.
        let faces = trace_all_faces(&g).unwrap();
        assert_eq!(faces.iter().map(|f| f.cycle.len()).sum::<usize>(), 2 * g.edges.len());
        assert_eq!(faces.len(), 5);
    }

    #[test]
    fn room_order_is_canonical_regardless_of_edge_order() {
        let g1 = square();
        let mut g2 = square();
        g2.edges.reverse();
        let fp1 = extract_rooms(&g1).unwrap();
        let fp2 = extract_rooms(&g2).unwrap();
        assert_eq!(fp1.rooms, fp2.rooms);
    }
}
