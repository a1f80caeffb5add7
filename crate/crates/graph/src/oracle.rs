//! Slow reference implementations used by the test suites to cross-check the
//! fast paths.
//!
//! Room finding here is deliberately independent of the half-edge tracer: it
//! enumerates every simple cycle of the graph and keeps those with an empty
//! interior (no vertex strictly inside, no edge passing through), which is
//! the defining property of a minimal cycle in a plane straight-line graph.
//! Exponential in graph size; intended for graphs of a dozen nodes.

use rand::Rng;

use crate::extract::{assign_category, canonical_cycle, Face};
use crate::geometry::signed_area;
use crate::synthetic::{generate_floorplan, slant_balcony, GenParams, Rect};
use crate::types::{Room, StructuralGraph};

/// Every simple cycle (length >= 3), each reported exactly once, canonical.
pub fn simple_cycles(g: &StructuralGraph) -> Vec<Vec<usize>> {
    let adjacency = g.adjacency();
    let mut cycles = Vec::new();
    let mut path = Vec::new();
    let mut on_path = vec![false; g.nodes.len()];
    for root in 0..g.nodes.len() {
        if adjacency[root].is_empty() {
            continue;
        }
        path.push(root);
        on_path[root] = true;
        grow(root, root, &adjacency, &mut path, &mut on_path, &mut cycles);
        path.pop();
        on_path[root] = false;
    }
    cycles
}

fn grow(
    root: usize,
    at: usize,
    adjacency: &[Vec<usize>],
    path: &mut Vec<usize>,
    on_path: &mut [bool],
    cycles: &mut Vec<Vec<usize>>,
) {
    for &w in &adjacency[at] {
        if w == root && path.len() >= 3 {
            // Rooted at the minimum vertex; fixing second < last picks one of
            // the two traversal directions, so each cycle appears once.
            if path[1] < *path.last().expect("path nonempty") {
                cycles.push(canonical_cycle(path));
            }
        } else if w > root && !on_path[w] {
            path.push(w);
            on_path[w] = true;
            grow(root, w, adjacency, path, on_path, cycles);
            path.pop();
            on_path[w] = false;
        }
    }
}

/// Even-odd ray crossing; the query point must not lie on the boundary.
fn point_strictly_inside(poly: &[[f64; 2]], q: [f64; 2]) -> bool {
    let mut inside = false;
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        if (a[1] <= q[1]) != (b[1] <= q[1]) {
            let t = (q[1] - a[1]) / (b[1] - a[1]);
            if a[0] + t * (b[0] - a[0]) > q[0] {
                inside = !inside;
            }
        }
    }
    inside
}

/// Rooms by exhaustive search: simple cycles whose interior contains no graph
/// vertex and no graph edge. Same canonical cycle form, category rule, and
/// room ordering as the tracer, so results compare with `==`.
pub fn minimal_cycle_rooms(g: &StructuralGraph) -> Vec<Room> {
    let mut rooms = Vec::new();
    for cycle in simple_cycles(g) {
        let poly: Vec<[f64; 2]> = cycle.iter().map(|&i| g.pixel(i)).collect();
        if signed_area(&poly) == 0.0 {
            continue;
        }
        let in_cycle = |v: usize| cycle.contains(&v);
        let occupied = (0..g.nodes.len()).any(|v| {
            !g.nodes[v].is_background() && !in_cycle(v) && point_strictly_inside(&poly, g.pixel(v))
        });
        if occupied {
            continue;
        }
        let cycle_edge = |a: usize, b: usize| {
            (0..cycle.len()).any(|k| {
                let (p, q) = (cycle[k], cycle[(k + 1) % cycle.len()]);
                (p, q) == (a, b) || (q, p) == (a, b)
            })
        };
        let crossed = g.edges.iter().any(|&(a, b)| {
            if cycle_edge(a, b) {
                return false;
            }
            let (pa, pb) = (g.pixel(a), g.pixel(b));
            let mid = [(pa[0] + pb[0]) / 2.0, (pa[1] + pb[1]) / 2.0];
            point_strictly_inside(&poly, mid)
        });
        if crossed {
            continue;
        }
        let face = Face {
            cycle: cycle.clone(),
            signed_area: signed_area(&poly),
        };
        rooms.push(Room {
            cycle,
            category: assign_category(&face, &g.nodes),
        });
    }
    rooms.sort_by(|a, b| a.cycle.cmp(&b.cycle));
    rooms
}

/// Test-domain sampler for the extraction cross-check: a small generated
/// layout, sometimes slanted, with up to two interior walls knocked out.
/// Deletions keep every node at degree two or more and never disconnect the
/// deleted edge's endpoints, so faces stay simple polygons. At most twelve
/// real nodes.
pub fn perturbed_small_graph<R: Rng>(rng: &mut R) -> StructuralGraph {
    let params = GenParams {
        room_count_range: (2, 4),
        min_room_size: 16,
        snap: 8,
        balcony_strip_prob: 0.3,
    };
    loop {
        let Ok(layout) = generate_floorplan(rng, &params) else {
            continue;
        };
        let Ok(mut g) = crate::synthetic::layout_to_graph(&layout) else {
            continue;
        };
        if g.real_node_count() > 12 {
            continue;
        }
        if layout.strip_balcony.is_some() && rng.random::<f64>() < 0.5 {
            // Slanted variant, geometry only.
            let _ = slant_balcony(&mut g, &layout);
            return g;
        }
        for _ in 0..rng.random_range(0..=2u32) {
            delete_one_interior_edge(rng, &mut g, &layout.outer);
        }
        return g;
    }
}

fn delete_one_interior_edge<R: Rng>(rng: &mut R, g: &mut StructuralGraph, outer: &Rect) {
    let mut degree = vec![0usize; g.nodes.len()];
    for &(a, b) in &g.edges {
        degree[a] += 1;
        degree[b] += 1;
    }
    let strictly_inside = |p: [f64; 2]| {
        p[0] > outer.x0 as f64 && p[0] < outer.x1 as f64 && p[1] > outer.y0 as f64 && p[1] < outer.y1 as f64
    };
    let candidates: Vec<usize> = (0..g.edges.len())
        .filter(|&k| {
            let (a, b) = g.edges[k];
            if degree[a] < 3 || degree[b] < 3 {
                return false;
            }
            let (pa, pb) = (g.pixel(a), g.pixel(b));
            let mid = [(pa[0] + pb[0]) / 2.0, (pa[1] + pb[1]) / 2.0];
            strictly_inside(mid) && connected_without(g, k)
        })
        .collect();
    if candidates.is_empty() {
        return;
    }
    let pick = candidates[rng.random_range(0..candidates.len())];
    g.edges.remove(pick);
}

/// True when the endpoints of edge `skip` stay connected without it.
fn connected_without(g: &StructuralGraph, skip: usize) -> bool {
    let (src, dst) = g.edges[skip];
    let mut seen = vec![false; g.nodes.len()];
    let mut stack = vec![src];
    seen[src] = true;
    while let Some(u) = stack.pop() {
        if u == dst {
            return true;
        }
        for (k, &(a, b)) in g.edges.iter().enumerate() {
            if k == skip {
                continue;
            }
            let other = if a == u { b } else if b == u { a } else { continue };
            if !seen[other] {
                seen[other] = true;
                stack.push(other);
            }
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extract::extract_rooms;
    use crate::types::{normalize_coord, Node, RoomCategory};

    fn grid_3x3() -> StructuralGraph {
        let mut nodes = Vec::new();
        for y in [64.0, 128.0, 192.0] {
            for x in [64.0, 128.0, 192.0] {
                let mut n = Node::real(normalize_coord([x, y]).unwrap());
                n.set_category(RoomCategory::Bedroom);
                nodes.push(n);
            }
        }
        let mut edges = Vec::new();
        for row in 0..3 {
            for col in 0..2 {
                edges.push((row * 3 + col, row * 3 + col + 1));
                edges.push((col * 3 + row, (col + 1) * 3 + row));
            }
        }
        StructuralGraph::new(&nodes, edges).unwrap()
    }

    #[test]
    fn grid_cycle_census() {
        // The 2x2 cell grid has 13 simple cycles: 4 unit squares, 4 dominoes
        // (6 boundary vertices), 4 L trominoes and the full square (8 each).
        let cycles = simple_cycles(&grid_3x3());
        assert_eq!(cycles.len(), 13);
        assert_eq!(cycles.iter().filter(|c| c.len() == 4).count(), 4);
        assert_eq!(cycles.iter().filter(|c| c.len() == 6).count(), 4);
        assert_eq!(cycles.iter().filter(|c| c.len() == 8).count(), 5);
    }

    #[test]
    fn grid_minimal_cycles_match_tracer() {
        let g = grid_3x3();
        let oracle = minimal_cycle_rooms(&g);
        assert_eq!(oracle.len(), 4);
        assert_eq!(oracle, extract_rooms(&g).unwrap().rooms);
    }

    #[test]
    fn chord_interior_is_detected() {
        // Two side-by-side rooms: the hexagon around both is a simple cycle
        // but the middle wall disqualifies it.
        let coords = [
            [64.0, 64.0],
            [128.0, 64.0],
            [192.0, 64.0],
            [64.0, 192.0],
            [128.0, 192.0],
            [192.0, 192.0],
        ];
        let nodes: Vec<Node> = coords
            .iter()
            .map(|&p| Node::real(normalize_coord(p).unwrap()))
            .collect();
        let edges = vec![(0, 1), (1, 2), (0, 3), (1, 4), (2, 5), (3, 4), (4, 5)];
        let g = StructuralGraph::new(&nodes, edges).unwrap();
        let cycles = simple_cycles(&g);
        assert_eq!(cycles.len(), 3);
        let rooms = minimal_cycle_rooms(&g);
        assert_eq!(rooms.len(), 2);
        assert_eq!(rooms, extract_rooms(&g).unwrap().rooms);
    }

    #[test]
    fn point_in_polygon_basics() {
        let square = [[0.0, 0.0], [10.0, 0.0], [10.0, 10.0], [0.0, 10.0]];
        assert!(point_strictly_inside(&square, [5.0, 5.0]));
        assert!(!point_strictly_inside(&square, [15.0, 5.0]));
        assert!(!point_strictly_inside(&square, [-1.0, 10.0]));
        // Ray through a vertex level.
        assert!(point_strictly_inside(&square, [5.0, 10.0 - 1e-9]));
    }
}
