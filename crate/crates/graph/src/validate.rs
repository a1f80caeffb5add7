//! Graph validation: a report of named rule violations rather than a
//! hard error, so pipelines can count and summarize model failures.

use crate::geometry::segments_conflict;
use crate::types::{StructuralGraph, N_MAX};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    /// Stable kebab-case rule identifier.
    pub rule: &'static str,
    pub detail: String,
}

impl Violation {
    fn new(rule: &'static str, detail: String) -> Violation {
        Violation { rule, detail }
    }
}

/// Check every structural invariant. An empty report means the graph is a
/// well-formed floorplan graph (geometry included: wall segments may only
/// meet at junction nodes).
pub fn validate_graph(g: &StructuralGraph) -> Vec<Violation> {
    let mut report = Vec::new();

    if g.nodes.len() != N_MAX {
        report.push(Violation::new(
            "node-count",
            format!("{} nodes, expected exactly {}", g.nodes.len(), N_MAX),
        ));
    }

    for (i, n) in g.nodes.iter().enumerate() {
        for (axis, &v) in n.c.iter().enumerate() {
            if !(-1.0..1.0).contains(&v) {
                report.push(Violation::new(
                    "coord-range",
                    format!("node {} axis {} coordinate {} outside [-1, 1)", i, axis, v),
                ));
            }
        }
        for (k, &v) in n.r.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                report.push(Violation::new(
                    "semantics-range",
                    format!("node {} semantics {} value {} outside [0, 1]", i, k, v),
                ));
            }
        }
        if !(0.0..=1.0).contains(&n.b) {
            report.push(Violation::new(
                "background-range",
                format!("node {} background flag {} outside [0, 1]", i, n.b),
            ));
        }
        if n.is_background() {
            if n.r.iter().any(|&v| v != 0.0) {
                report.push(Violation::new(
                    "background-semantics",
                    format!("background node {} carries room semantics", i),
                ));
            }
            if n.c != [-1.0, -1.0] {
                report.push(Violation::new(
                    "background-coords",
                    format!("background node {} at {:?}, expected (-1, -1)", i, n.c),
                ));
            }
        }
    }

    let mut seen = std::collections::BTreeSet::new();
    for (k, &(u, v)) in g.edges.iter().enumerate() {
        if u >= g.nodes.len() || v >= g.nodes.len() {
            report.push(Violation::new(
                "edge-index-range",
                format!("edge {} = ({}, {}) out of range", k, u, v),
            ));
            continue;
        }
        if u == v {
            report.push(Violation::new("edge-self-loop", format!("edge {} = ({}, {})", k, u, v)));
            continue;
        }
        let key = (u.min(v), u.max(v));
        if !seen.insert(key) {
            report.push(Violation::new(
                "duplicate-edge",
                format!("edge ({}, {}) appears more than once", key.0, key.1),
            ));
        }
        if g.nodes[u].is_background() || g.nodes[v].is_background() {
            report.push(Violation::new(
                "edge-on-padding",
                format!("edge ({}, {}) touches a background node", u, v),
            ));
        }
    }

    // Wall segments may share endpoints but must not cross, T-contact away
    // from a node, or overlap; such geometry has no planar room structure.
    let in_range =
        |&(u, v): &(usize, usize)| u < g.nodes.len() && v < g.nodes.len() && u != v;
    let edges: Vec<(usize, usize)> = g.edges.iter().filter(|e| in_range(e)).cloned().collect();
    for i in 0..edges.len() {
        for j in i + 1..edges.len() {
            let (a, b) = edges[i];
            let (c, d) = edges[j];
            if segments_conflict(g.pixel(a), g.pixel(b), g.pixel(c), g.pixel(d)) {
                report.push(Violation::new(
                    "edge-crossing",
                    format!("edges ({}, {}) and ({}, {}) intersect away from shared junctions", a, b, c, d),
                ));
            }
        }
    }

    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{normalize_coord, Node, RoomCategory};

    fn square() -> StructuralGraph {
        let mut nodes = Vec::new();
        for (x, y) in [(64.0, 64.0), (192.0, 64.0), (192.0, 192.0), (64.0, 192.0)] {
            let mut n = Node::real(normalize_coord([x, y]).unwrap());
            n.set_category(RoomCategory::LivingRoom);
            n.set_category(RoomCategory::ExternalArea);
            nodes.push(n);
        }
        StructuralGraph::new(&nodes, vec![(0, 1), (1, 2), (2, 3), (0, 3)]).unwrap()
    }

    #[test]
    fn well_formed_square_is_clean() {
        assert!(validate_graph(&square()).is_empty());
    }

    #[test]
    fn edge_on_padding_flagged() {
        let mut g = square();
        g.edges.push((0, 10));
        let report = validate_graph(&g);
        assert_eq!(report.len(), 1);
        assert_eq!(report[0].rule, "edge-on-padding");
    }

    #[test]
    fn duplicate_edge_flagged() {
        let mut g = square();
        // (2,1) duplicates (1,2) as an unordered pair.
        g.edges.push((1, 2));
        let report = validate_graph(&g);
        assert_eq!(report.iter().filter(|v| v.rule == "duplicate-edge").count(), 1);
    }

    #[test]
    fn crossing_edges_flagged() {
        let mut g = square();
        // Both diagonals cross at the square's center.
        g.edges.push((0, 2));
        g.edges.push((1, 3));
        let report = validate_graph(&g);
        assert!(report.iter().any(|v| v.rule == "edge-crossing"));
    }

    #[test]
    fn background_invariants_flagged() {
        let mut g = square();
        g.nodes[10].r[2] = 1.0;
        g.nodes[11].c = [0.0, 0.0];
        let report = validate_graph(&g);
        assert!(report.iter().any(|v| v.rule == "background-semantics"));
        assert!(report.iter().any(|v| v.rule == "background-coords"));
    }

    #[test]
    fn coordinate_range_flagged() {
        let mut g = square();
        g.nodes[0].c = [1.0, 0.0]; // 1.0 is outside the half-open range
        let report = validate_graph(&g);
        assert!(report.iter().any(|v| v.rule == "coord-range"));
    }
}
