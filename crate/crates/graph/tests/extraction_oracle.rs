//! Cross-checks the half-edge room tracer against the exhaustive
//! minimal-cycle search on randomized small graphs, including slanted
//! balconies and layouts with interior walls knocked out.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gsdiff_graph::extract::extract_rooms;
use gsdiff_graph::geometry::signed_area;
use gsdiff_graph::oracle::{minimal_cycle_rooms, perturbed_small_graph};

#[test]
fn tracer_matches_exhaustive_search_on_perturbed_graphs() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0AC1E);
    for case in 0..300 {
        let g = perturbed_small_graph(&mut rng);
        let fast = extract_rooms(&g).unwrap().rooms;
        let slow = minimal_cycle_rooms(&g);
        assert_eq!(fast, slow, "case {}: graph {:?}", case, g.edges);
        assert!(!fast.is_empty(), "case {} produced no rooms", case);
    }
}

#[test]
fn room_areas_tile_the_outer_contour() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for case in 0..100 {
        let g = perturbed_small_graph(&mut rng);
        let rooms = extract_rooms(&g).unwrap().rooms;
        let room_area: f64 = rooms
            .iter()
            .map(|r| {
                let poly: Vec<[f64; 2]> = r.cycle.iter().map(|&i| g.pixel(i)).collect();
                signed_area(&poly).abs()
            })
            .sum();
        let boundary = gsdiff_graph::derive_boundary(&g).unwrap();
        let outer_area = signed_area(&boundary.vertices);
        assert!(
            (room_area - outer_area).abs() < 1e-6 * outer_area.max(1.0),
            "case {}: rooms {} vs outer {}",
            case,
            room_area,
            outer_area
        );
    }
}
