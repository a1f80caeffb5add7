//! Generator layouts must survive the full chain: build the junction graph,
//! extract rooms, reconstruct the topology, and land exactly on the
//! topology derived straight from the layout rectangles.

use gsdiff_graph::{
    derive_topology, extract_rooms, generate_floorplan, layout_to_graph, slant_balcony, GenParams,
};
use gsdiff_metrics::reconstruct_topology;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn reconstruction_matches_derived_topology_with_and_without_slants() {
    let params = GenParams::default();
    let mut slanted_count = 0;
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = generate_floorplan(&mut rng, &params).unwrap();
        let mut graph = layout_to_graph(&layout).unwrap();
        let expected = derive_topology(&layout);

        let plain = reconstruct_topology(&extract_rooms(&graph).unwrap());
        assert_eq!(plain, expected, "seed {} disagreed unslanted", seed);

        if slant_balcony(&mut graph, &layout).unwrap() {
            slanted_count += 1;
            let slanted = reconstruct_topology(&extract_rooms(&graph).unwrap());
            assert_eq!(slanted, expected, "seed {} disagreed slanted", seed);
        }
    }
    assert!(slanted_count > 0, "no layout exercised the slant path");
}
