//! Room topology recovered from an extracted floorplan.

use std::collections::BTreeSet;

use gsdiff_graph::{Floorplan, RoomCategory, TopologyGraph};

/// One topology node per extracted room, in the floorplan's room order;
/// two rooms are adjacent exactly when their cycles share a wall segment
/// (a graph edge), so corner contact does not count. Rooms without a
/// recoverable category are labeled as external area.
pub fn reconstruct_topology(fp: &Floorplan) -> TopologyGraph {
    let rooms: Vec<RoomCategory> = fp
        .rooms
        .iter()
        .map(|room| room.category.unwrap_or(RoomCategory::ExternalArea))
        .collect();

    let walls: Vec<BTreeSet<(usize, usize)>> = fp
        .rooms
        .iter()
        .map(|room| {
            let cycle = &room.cycle;
            (0..cycle.len())
                .map(|k| {
                    let (u, v) = (cycle[k], cycle[(k + 1) % cycle.len()]);
                    (u.min(v), u.max(v))
                })
                .collect()
        })
        .collect();

    let mut adjacency = Vec::new();
    for i in 0..walls.len() {
        for j in i + 1..walls.len() {
            if walls[i].intersection(&walls[j]).next().is_some() {
                adjacency.push((i, j));
            }
        }
    }
    TopologyGraph::new(rooms, adjacency).expect("room indices are in range by construction")
}

#[cfg(test)]
mod tests {
    use super::*;
    use gsdiff_graph::{extract_rooms, normalize_coord, Node, StructuralGraph};

    fn node_at(x: f64, y: f64, cats: &[RoomCategory]) -> Node {
        let mut n = Node::real(normalize_coord([x, y]).unwrap());
        for &c in cats {
            n.set_category(c);
        }
        n
    }

    #[test]
    fn shared_wall_yields_one_adjacency() {
        use RoomCategory::*;
        // Two rooms split by a vertical wall.
        let nodes = vec![
            node_at(0.0, 0.0, &[LivingRoom]),
            node_at(50.0, 0.0, &[LivingRoom, Bedroom]),
            node_at(100.0, 0.0, &[Bedroom]),
            node_at(100.0, 60.0, &[Bedroom]),
            node_at(50.0, 60.0, &[LivingRoom, Bedroom]),
            node_at(0.0, 60.0, &[LivingRoom]),
        ];
        let g = StructuralGraph::new(
            &nodes,
            vec![(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 0), (1, 4)],
        )
        .unwrap();
        let topo = reconstruct_topology(&extract_rooms(&g).unwrap());
        assert_eq!(topo.rooms.len(), 2);
        assert_eq!(topo.adjacency, vec![(0, 1)]);
        let mut sorted = topo.rooms.clone();
        sorted.sort();
        assert_eq!(sorted, vec![LivingRoom, Bedroom]);
    }

    #[test]
    fn corner_contact_is_not_adjacency() {
        use RoomCategory::*;
        // Two squares meeting only at the node (50, 50).
        let nodes = vec![
            node_at(0.0, 0.0, &[LivingRoom]),
            node_at(50.0, 0.0, &[LivingRoom]),
            node_at(50.0, 50.0, &[LivingRoom, Bedroom]),
            node_at(0.0, 50.0, &[LivingRoom]),
            node_at(100.0, 50.0, &[Bedroom]),
            node_at(100.0, 100.0, &[Bedroom]),
            node_at(50.0, 100.0, &[Bedroom]),
        ];
        let g = StructuralGraph::new(
            &nodes,
            vec![(0, 1), (1, 2), (2, 3), (3, 0), (2, 4), (4, 5), (5, 6), (6, 2)],
        )
        .unwrap();
        let topo = reconstruct_topology(&extract_rooms(&g).unwrap());
        assert_eq!(topo.rooms.len(), 2);
        assert!(topo.adjacency.is_empty());
    }
}
