//! Generator consistency: a layout converted to a junction graph and traced
//! back must reproduce the layout's rooms exactly, both geometry and labels.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gsdiff_graph::extract::{canonical_cycle, extract_rooms};
use gsdiff_graph::geometry::signed_area;
use gsdiff_graph::{
    denormalize_coord, derive_boundary, derive_topology, generate_floorplan, layout_to_graph,
    slant_balcony, validate_graph, GenParams, RectLayout, RoomCategory, StructuralGraph,
};

/// Expected cycle of a layout room, built straight from rectangle geometry:
/// the graph nodes on the rect boundary, ordered by perimeter position.
fn expected_cycle(g: &StructuralGraph, room: &gsdiff_graph::RectRoom) -> Vec<usize> {
    let r = room.rect;
    let (x0, y0, x1, y1) = (r.x0 as f64, r.y0 as f64, r.x1 as f64, r.y1 as f64);
    let mut on_rect: Vec<(f64, usize)> = Vec::new();
    for i in 0..g.nodes.len() {
        if g.nodes[i].is_background() {
            continue;
        }
        let p = denormalize_coord(g.nodes[i].c);
        let eps = 1e-9;
        let on = |v: f64, lo: f64| (v - lo).abs() < eps;
        let within = |v: f64, lo: f64, hi: f64| v > lo - eps && v < hi + eps;
        // Perimeter parameter, walking y0 side, x1 side, y1 side, x0 side.
        let t = if on(p[1], y0) && within(p[0], x0, x1) {
            p[0] - x0
        } else if on(p[0], x1) && within(p[1], y0, y1) {
            (x1 - x0) + (p[1] - y0)
        } else if on(p[1], y1) && within(p[0], x0, x1) {
            (x1 - x0) + (y1 - y0) + (x1 - p[0])
        } else if on(p[0], x0) && within(p[1], y0, y1) {
            2.0 * (x1 - x0) + (y1 - y0) + (y1 - p[1])
        } else {
            continue;
        };
        on_rect.push((t, i));
    }
    on_rect.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    on_rect.dedup_by_key(|e| e.1);
    canonical_cycle(&on_rect.iter().map(|&(_, i)| i).collect::<Vec<_>>())
}

fn check_roundtrip(g: &StructuralGraph, layout: &RectLayout, seed: u64) {
    let rooms = extract_rooms(g).unwrap().rooms;
    assert_eq!(rooms.len(), layout.rooms.len(), "seed {}", seed);

    let mut expected: Vec<(Vec<usize>, RoomCategory)> = layout
        .rooms
        .iter()
        .map(|room| (expected_cycle(g, room), room.category))
        .collect();
    expected.sort();
    let got: Vec<(Vec<usize>, RoomCategory)> = rooms
        .iter()
        .map(|room| (room.cycle.clone(), room.category.expect("labeled room")))
        .collect();
    for (e, g_) in expected.iter().zip(&got) {
        assert_eq!(e.0, g_.0, "seed {} cycle mismatch", seed);
    }
    // Labels must survive when majority voting is unambiguous enough; at
    // minimum the multiset of categories matches.
    let mut want: Vec<RoomCategory> = expected.iter().map(|e| e.1).collect();
    let mut have: Vec<RoomCategory> = got.iter().map(|g_| g_.1).collect();
    want.sort();
    have.sort();
    assert_eq!(want, have, "seed {} category multiset", seed);
}

#[test]
fn thousand_layouts_roundtrip_through_extraction() {
    let params = GenParams::default();
    for seed in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = generate_floorplan(&mut rng, &params).unwrap();
        let g = layout_to_graph(&layout).unwrap();
        assert!(validate_graph(&g).is_empty(), "seed {}", seed);
        check_roundtrip(&g, &layout, seed);
    }
}

#[test]
fn topology_counts_match_extraction() {
    let params = GenParams::default();
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(9000 + seed);
        let layout = generate_floorplan(&mut rng, &params).unwrap();
        let topo = derive_topology(&layout);
        let g = layout_to_graph(&layout).unwrap();
        let rooms = extract_rooms(&g).unwrap().rooms;
        assert_eq!(topo.rooms.len(), rooms.len());
        // Adjacency is symmetric, irreflexive, in range.
        for &(i, j) in &topo.adjacency {
            assert!(i < j && j < topo.rooms.len());
            assert!(topo.are_adjacent(j, i));
        }
    }
}

#[test]
fn slanted_layouts_keep_room_count_and_area_sum() {
    let params = GenParams {
        balcony_strip_prob: 1.0,
        ..GenParams::default()
    };
    let mut slanted_seen = 0;
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + seed);
        let layout = generate_floorplan(&mut rng, &params).unwrap();
        let mut g = layout_to_graph(&layout).unwrap();
        let did = slant_balcony(&mut g, &layout).unwrap();
        if !did {
            continue;
        }
        slanted_seen += 1;
        assert!(validate_graph(&g).is_empty(), "seed {}", seed);
        let rooms = extract_rooms(&g).unwrap().rooms;
        assert_eq!(rooms.len(), layout.rooms.len(), "seed {}", seed);
        // The slanted contour loses area exactly where the trapezoid cut it.
        let boundary = derive_boundary(&g).unwrap();
        let outer_area = signed_area(&boundary.vertices);
        let rect_area = layout.outer.area() as f64;
        assert!(outer_area < rect_area, "seed {}", seed);
        let room_area: f64 = rooms
            .iter()
            .map(|r| {
                let poly: Vec<[f64; 2]> = r.cycle.iter().map(|&i| g.pixel(i)).collect();
                signed_area(&poly).abs()
            })
            .sum();
        assert!((room_area - outer_area).abs() < 1e-6 * rect_area, "seed {}", seed);
    }
    assert!(slanted_seen > 100, "only {} slanted layouts", slanted_seen);
}

#[test]
fn room_and_junction_statistics_are_seed_stable() {
    let params = GenParams::default();
    let sample = |base: u64| {
        let mut rooms = 0usize;
        let mut nodes = 0usize;
        for seed in 0..500u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(base + seed);
            let layout = generate_floorplan(&mut rng, &params).unwrap();
            rooms += layout.rooms.len();
            nodes += layout_to_graph(&layout).unwrap().real_node_count();
        }
        (rooms as f64 / 500.0, nodes as f64 / 500.0)
    };
    let (r1, n1) = sample(0);
    let (r2, n2) = sample(1_000_000);
    assert!((r1 - r2).abs() / r1 < 0.05, "rooms {} vs {}", r1, r2);
    assert!((n1 - n2).abs() / n1 < 0.05, "nodes {} vs {}", n1, n2);
    // Sanity: generated graphs stay well under capacity.
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..200 {
        let layout = generate_floorplan(&mut rng, &params).unwrap();
        let g = layout_to_graph(&layout).unwrap();
        assert!(g.real_node_count() <= 30, "{} nodes", g.real_node_count());
        let _ = rng.random::<u64>();
    }
}
