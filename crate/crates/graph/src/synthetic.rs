//! Procedural ground-truth floorplans.
//!
//! Layouts are built by recursive axis-alternating binary splits of an outer
//! rectangle on the `[0,255]` pixel grid, every coordinate snapped to
//! multiples of 8. The snap guarantees exact junction coincidence, integer
//! wall gaps, and therefore exactly-zero alignment loss on ground truth.
//!
//! A fraction of layouts carve a full-width balcony strip off one side before
//! splitting the remainder; such a balcony touches the outer boundary on
//! three sides and is the target of the trapezoid deformation in
//! [`slant_balcony`], the only non-rectilinear geometry in the dataset.

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::error::{GraphError, GraphResult};
use crate::extract::trace_all_faces;
use crate::geometry::drop_collinear;
use crate::types::{
    normalize_coord, BoundaryPolygon, Node, RoomCategory, StructuralGraph, TopologyGraph, N_MAX,
};

/// Axis-aligned rectangle with integer pixel corners, `x0 < x1`, `y0 < y1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl Rect {
    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn corners(&self) -> [[u32; 2]; 4] {
        [
            [self.x0, self.y0],
            [self.x1, self.y0],
            [self.x1, self.y1],
            [self.x0, self.y1],
        ]
    }

    fn contains_on_boundary(&self, p: [u32; 2]) -> bool {
        let inside = p[0] >= self.x0 && p[0] <= self.x1 && p[1] >= self.y0 && p[1] <= self.y1;
        inside && (p[0] == self.x0 || p[0] == self.x1 || p[1] == self.y0 || p[1] == self.y1)
    }

    /// Length of the wall shared with `other` (0 when not adjacent).
    fn shared_wall(&self, other: &Rect) -> u32 {
        let y_overlap = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0));
        if (self.x1 == other.x0 || other.x1 == self.x0) && y_overlap > 0 {
            return y_overlap;
        }
        let x_overlap = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0));
        if (self.y1 == other.y0 || other.y1 == self.y0) && x_overlap > 0 {
            return x_overlap;
        }
        0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RectRoom {
    pub rect: Rect,
    pub category: RoomCategory,
}

/// A rectangular layout: rooms tile `outer` exactly. Room order is sorted by
/// (y0, x0) and is the room index order used by derived topologies.
#[derive(Debug, Clone, PartialEq)]
pub struct RectLayout {
    pub outer: Rect,
    pub rooms: Vec<RectRoom>,
    /// Index of the carved three-outer-sided balcony, when present.
    pub strip_balcony: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct GenParams {
    pub room_count_range: (usize, usize),
    pub min_room_size: u32,
    pub snap: u32,
    /// Probability of carving the slant-eligible balcony strip.
    pub balcony_strip_prob: f64,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            room_count_range: (4, 8),
            min_room_size: 16,
            snap: 8,
            balcony_strip_prob: 0.15,
        }
    }
}

fn snapped_choices(lo: u32, hi: u32, snap: u32) -> Vec<u32> {
    let first = lo.div_ceil(snap) * snap;
    (0..)
        .map(|k| first + k * snap)
        .take_while(|&v| v <= hi)
        .collect()
}

struct Leaf {
    rect: Rect,
    depth: u32,
}

fn split_positions(lo: u32, hi: u32, min: u32, snap: u32) -> Vec<u32> {
    if hi - lo < 2 * min {
        return Vec::new();
    }
    snapped_choices(lo + min, hi - min, snap)
}

/// Room labels must survive the junction-vote labeling used downstream: every
/// room's category must win the majority-plus-priority vote over its own
/// boundary junctions. Sandwich geometries can make a label set unrecoverable
/// (a room whose every corner also touches some single other category loses
/// the tie), so category assignment re-rolls until the check passes.
fn labels_recoverable(rects: &[(Rect, bool)], cats: &[RoomCategory]) -> bool {
    let mut points: Vec<[u32; 2]> = rects.iter().flat_map(|(r, _)| r.corners()).collect();
    points.sort_unstable();
    points.dedup();
    for (k, (rect, _)) in rects.iter().enumerate() {
        let mut votes = [0usize; 6];
        for &p in &points {
            if !rect.contains_on_boundary(p) {
                continue;
            }
            let mut present = [false; 6];
            for (j, (other, _)) in rects.iter().enumerate() {
                if other.contains_on_boundary(p) {
                    present[cats[j].index()] = true;
                }
            }
            for (c, &is_present) in present.iter().enumerate() {
                votes[c] += is_present as usize;
            }
        }
        let max = *votes.iter().max().expect("six categories");
        let winner = RoomCategory::TIE_PRIORITY
            .into_iter()
            .find(|c| votes[c.index()] == max)
            .expect("max exists");
        if winner != cats[k] {
            return false;
        }
    }
    true
}

pub fn generate_floorplan<R: Rng>(rng: &mut R, params: &GenParams) -> GraphResult<RectLayout> {
    for _ in 0..64 {
        let layout = generate_candidate(rng, params)?;
        if let Some(layout) = layout {
            return Ok(layout);
        }
    }
    Err(GraphError::Generation {
        msg: "no layout with recoverable labels after 64 attempts".into(),
    })
}

/// One geometry draw plus up to 32 label draws; `None` when no recoverable
/// label set was found for this geometry.
fn generate_candidate<R: Rng>(rng: &mut R, params: &GenParams) -> GraphResult<Option<RectLayout>> {
    let (lo_rooms, hi_rooms) = params.room_count_range;
    if lo_rooms == 0 || lo_rooms > hi_rooms {
        return Err(GraphError::Generation {
            msg: format!("bad room count range ({}, {})", lo_rooms, hi_rooms),
        });
    }
    if params.min_room_size < 16 {
        return Err(GraphError::Generation {
            msg: format!("min room size {} below 16 px", params.min_room_size),
        });
    }
    if params.snap == 0 || params.min_room_size % params.snap != 0 {
        return Err(GraphError::Generation {
            msg: "min room size must be a positive multiple of the snap".into(),
        });
    }
    let target = rng.random_range(lo_rooms..=hi_rooms);

    // Outer rectangle: generous but varied, snapped, inside [0, 248].
    let sizes = snapped_choices(160, 248, params.snap);
    let w = *sizes.choose(rng).expect("size choices");
    let h = *sizes.choose(rng).expect("size choices");
    let xs = snapped_choices(0, 248 - w, params.snap);
    let ys = snapped_choices(0, 248 - h, params.snap);
    let x0 = *xs.choose(rng).expect("origin choices");
    let y0 = *ys.choose(rng).expect("origin choices");
    let outer = Rect { x0, y0, x1: x0 + w, y1: y0 + h };

    // Optionally carve the balcony strip off one side.
    let mut strip: Option<Rect> = None;
    let mut body = outer;
    if target >= 2 && rng.random::<f64>() < params.balcony_strip_prob {
        let thick = *[16u32, 24, 32, 40].choose(rng).expect("thickness");
        let side = rng.random_range(0..4u8);
        let (s, b) = match side {
            0 => (
                Rect { x0: outer.x0, y0: outer.y0, x1: outer.x1, y1: outer.y0 + thick },
                Rect { x0: outer.x0, y0: outer.y0 + thick, x1: outer.x1, y1: outer.y1 },
            ),
            1 => (
                Rect { x0: outer.x0, y0: outer.y1 - thick, x1: outer.x1, y1: outer.y1 },
                Rect { x0: outer.x0, y0: outer.y0, x1: outer.x1, y1: outer.y1 - thick },
            ),
            2 => (
                Rect { x0: outer.x0, y0: outer.y0, x1: outer.x0 + thick, y1: outer.y1 },
                Rect { x0: outer.x0 + thick, y0: outer.y0, x1: outer.x1, y1: outer.y1 },
            ),
            _ => (
                Rect { x0: outer.x1 - thick, y0: outer.y0, x1: outer.x1, y1: outer.y1 },
                Rect { x0: outer.x0, y0: outer.y0, x1: outer.x1 - thick, y1: outer.y1 },
            ),
        };
        strip = Some(s);
        body = b;
    }

    // Binary space partition of the body, axis alternating with depth.
    let body_target = target - strip.iter().count();
    let mut leaves = vec![Leaf { rect: body, depth: 0 }];
    while leaves.len() < body_target {
        // Split the largest leaf that still can be split.
        let mut order: Vec<usize> = (0..leaves.len()).collect();
        order.sort_by_key(|&i| std::cmp::Reverse(leaves[i].rect.area()));
        let mut split_done = false;
        for &i in &order {
            let Leaf { rect, depth } = leaves[i];
            let vertical_first = depth % 2 == 0;
            let axes = if vertical_first { [true, false] } else { [false, true] };
            for vertical in axes {
                let positions = if vertical {
                    split_positions(rect.x0, rect.x1, params.min_room_size, params.snap)
                } else {
                    split_positions(rect.y0, rect.y1, params.min_room_size, params.snap)
                };
                if positions.is_empty() {
                    continue;
                }
                let at = *positions.choose(rng).expect("nonempty");
                let (a, b) = if vertical {
                    (Rect { x1: at, ..rect }, Rect { x0: at, ..rect })
                } else {
                    (Rect { y1: at, ..rect }, Rect { y0: at, ..rect })
                };
                leaves[i] = Leaf { rect: a, depth: depth + 1 };
                leaves.push(Leaf { rect: b, depth: depth + 1 });
                split_done = true;
                break;
            }
            if split_done {
                break;
            }
        }
        if !split_done {
            return Err(GraphError::Generation {
                msg: format!(
                    "cannot reach {} rooms with min size {} in {}x{}",
                    target,
                    params.min_room_size,
                    outer.width(),
                    outer.height()
                ),
            });
        }
    }

    // Assemble rooms in canonical (y0, x0) order.
    let mut rects: Vec<(Rect, bool)> = leaves.iter().map(|l| (l.rect, false)).collect();
    if let Some(s) = strip {
        rects.push((s, true));
    }
    rects.sort_by_key(|(r, _)| (r.y0, r.x0, r.y1, r.x1));

    for _ in 0..32 {
        let categories = assign_categories(rng, &rects, &outer, target)?;
        if !labels_recoverable(&rects, &categories) {
            continue;
        }
        let rooms: Vec<RectRoom> = rects
            .iter()
            .zip(&categories)
            .map(|(&(rect, _), &category)| RectRoom { rect, category })
            .collect();
        let strip_balcony = rects.iter().position(|&(_, carved)| carved);
        return Ok(Some(RectLayout { outer, rooms, strip_balcony }));
    }
    Ok(None)
}

fn assign_categories<R: Rng>(
    rng: &mut R,
    rects: &[(Rect, bool)],
    outer: &Rect,
    target: usize,
) -> GraphResult<Vec<RoomCategory>> {
    use RoomCategory::*;
    let mut cats: Vec<Option<RoomCategory>> = vec![None; rects.len()];

    for (i, &(_, carved)) in rects.iter().enumerate() {
        if carved {
            cats[i] = Some(Balcony);
        }
    }
    // The living room is the largest non-carved room.
    let living = (0..rects.len())
        .filter(|&i| cats[i].is_none())
        .max_by_key(|&i| rects[i].0.area())
        .ok_or_else(|| GraphError::Generation {
            msg: "no room available for the living room".into(),
        })?;
    cats[living] = Some(LivingRoom);

    // Guarantee a bedroom when the plan is big enough to hold one.
    let open: Vec<usize> = (0..rects.len()).filter(|&i| cats[i].is_none()).collect();
    if let Some(&bedroom) = open.as_slice().choose(rng) {
        cats[bedroom] = Some(Bedroom);
    } else if target >= 4 {
        return Err(GraphError::Generation {
            msg: "no room left for the required bedroom".into(),
        });
    }

    let touches_outer = |r: &Rect| {
        r.x0 == outer.x0 || r.x1 == outer.x1 || r.y0 == outer.y0 || r.y1 == outer.y1
    };
    let mut kitchen_used = false;
    for i in 0..rects.len() {
        if cats[i].is_some() {
            kitchen_used |= cats[i] == Some(Kitchen);
            continue;
        }
        let mut pool: Vec<(RoomCategory, f64)> = vec![
            (Bedroom, 0.35),
            (Bathroom, 0.25),
            (Storage, 0.15),
        ];
        if !kitchen_used {
            pool.push((Kitchen, 0.2));
        }
        if touches_outer(&rects[i].0) {
            pool.push((Balcony, 0.12));
        }
        let total: f64 = pool.iter().map(|&(_, w)| w).sum();
        let mut pick = rng.random::<f64>() * total;
        let mut chosen = pool[0].0;
        for &(cat, w) in &pool {
            if pick < w {
                chosen = cat;
                break;
            }
            pick -= w;
        }
        kitchen_used |= chosen == Kitchen;
        cats[i] = Some(chosen);
    }
    Ok(cats.into_iter().map(|c| c.expect("all assigned")).collect())
}

/// Junction graph of a layout: nodes are distinct room corners (including
/// T-junctions), edges connect consecutive junctions along each wall, and
/// node semantics mark every incident room plus the external area on the
/// outer boundary. Node order is lexicographic by (y, x).
pub fn layout_to_graph(layout: &RectLayout) -> GraphResult<StructuralGraph> {
    let mut points: Vec<[u32; 2]> = layout
        .rooms
        .iter()
        .flat_map(|room| room.rect.corners())
        .collect();
    points.sort_by_key(|p| (p[1], p[0]));
    points.dedup();
    if points.len() > N_MAX {
        return Err(GraphError::Capacity {
            max: N_MAX,
            got: points.len(),
        });
    }
    let index_of = |p: [u32; 2]| points.binary_search_by_key(&(p[1], p[0]), |q| (q[1], q[0]));

    let mut nodes = Vec::with_capacity(points.len());
    for &p in &points {
        let mut node = Node::real(normalize_coord([p[0] as f64, p[1] as f64])?);
        for room in &layout.rooms {
            if room.rect.contains_on_boundary(p) {
                node.set_category(room.category);
            }
        }
        if layout.outer.contains_on_boundary(p) {
            node.set_category(RoomCategory::ExternalArea);
        }
        nodes.push(node);
    }

    let mut edges = std::collections::BTreeSet::new();
    for room in &layout.rooms {
        let r = room.rect;
        // For each side, connect consecutive junctions lying on it.
        let sides: [([u32; 2], [u32; 2]); 4] = [
            ([r.x0, r.y0], [r.x1, r.y0]),
            ([r.x0, r.y1], [r.x1, r.y1]),
            ([r.x0, r.y0], [r.x0, r.y1]),
            ([r.x1, r.y0], [r.x1, r.y1]),
        ];
        for (a, b) in sides {
            let horizontal = a[1] == b[1];
            let mut on_side: Vec<usize> = (0..points.len())
                .filter(|&i| {
                    let p = points[i];
                    if horizontal {
                        p[1] == a[1] && p[0] >= a[0] && p[0] <= b[0]
                    } else {
                        p[0] == a[0] && p[1] >= a[1] && p[1] <= b[1]
                    }
                })
                .collect();
            on_side.sort_by_key(|&i| if horizontal { points[i][0] } else { points[i][1] });
            for pair in on_side.windows(2) {
                edges.insert((pair[0].min(pair[1]), pair[0].max(pair[1])));
            }
        }
    }
    debug_assert!(points.iter().all(|&p| index_of(p).is_ok()));

    StructuralGraph::new(&nodes, edges.into_iter().collect())
}

/// Trapezoid deformation of a carved balcony: the side opposite the interior
/// wall is shortened symmetrically to 0.618 of its length, pulling its two
/// corner junctions inward along that side. Identity (returns `false`) when
/// the layout has no balcony with exactly three sides on the outer boundary.
pub fn slant_balcony(g: &mut StructuralGraph, layout: &RectLayout) -> GraphResult<bool> {
    const RATIO: f64 = 0.618;
    let Some((room, free_side)) = find_slant_candidate(layout) else {
        return Ok(false);
    };
    let r = room.rect;
    // Endpoints of the free side and the axis it runs along.
    let (a, b, horizontal) = match free_side {
        Side::Bottom => ([r.x0, r.y0], [r.x1, r.y0], true),
        Side::Top => ([r.x0, r.y1], [r.x1, r.y1], true),
        Side::Left => ([r.x0, r.y0], [r.x0, r.y1], false),
        Side::Right => ([r.x1, r.y0], [r.x1, r.y1], false),
    };
    let len = if horizontal { (b[0] - a[0]) as f64 } else { (b[1] - a[1]) as f64 };
    let inset = (1.0 - RATIO) / 2.0 * len;

    let mut moved = 0;
    for (corner, sign) in [(a, 1.0), (b, -1.0)] {
        let target = [corner[0] as f64, corner[1] as f64];
        let idx = g
            .nodes
            .iter()
            .position(|n| !n.is_background() && g_pixel_eq(n, target))
            .ok_or_else(|| GraphError::Topology {
                msg: format!("balcony corner ({}, {}) not found in graph", corner[0], corner[1]),
            })?;
        let shifted = if horizontal {
            [target[0] + sign * inset, target[1]]
        } else {
            [target[0], target[1] + sign * inset]
        };
        g.nodes[idx].c = normalize_coord(shifted)?;
        moved += 1;
    }
    Ok(moved == 2)
}

fn g_pixel_eq(n: &Node, pixel: [f64; 2]) -> bool {
    let p = crate::types::denormalize_coord(n.c);
    (p[0] - pixel[0]).abs() < 1e-6 && (p[1] - pixel[1]).abs() < 1e-6
}

#[derive(Clone, Copy, PartialEq)]
enum Side {
    Bottom,
    Top,
    Left,
    Right,
}

fn find_slant_candidate(layout: &RectLayout) -> Option<(&RectRoom, Side)> {
    for room in &layout.rooms {
        if room.category != RoomCategory::Balcony {
            continue;
        }
        let r = room.rect;
        let o = layout.outer;
        let on_outer = [
            (Side::Bottom, r.y0 == o.y0),
            (Side::Top, r.y1 == o.y1),
            (Side::Left, r.x0 == o.x0),
            (Side::Right, r.x1 == o.x1),
        ];
        let outer_sides: Vec<Side> = on_outer.iter().filter(|&&(_, on)| on).map(|&(s, _)| s).collect();
        if outer_sides.len() != 3 {
            continue;
        }
        // The free side is the outer side opposite the interior one.
        let interior = on_outer.iter().find(|&&(_, on)| !on).map(|&(s, _)| s)?;
        let free = match interior {
            Side::Bottom => Side::Top,
            Side::Top => Side::Bottom,
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        };
        return Some((room, free));
    }
    None
}

/// Room adjacency: two rooms are adjacent iff they share a wall segment of
/// positive length. Rooms keep their layout order.
pub fn derive_topology(layout: &RectLayout) -> TopologyGraph {
    let rooms: Vec<RoomCategory> = layout.rooms.iter().map(|r| r.category).collect();
    let mut adjacency = Vec::new();
    for i in 0..layout.rooms.len() {
        for j in i + 1..layout.rooms.len() {
            if layout.rooms[i].rect.shared_wall(&layout.rooms[j].rect) > 0 {
                adjacency.push((i, j));
            }
        }
    }
    TopologyGraph::new(rooms, adjacency).expect("layout adjacency is well formed")
}

/// Outer contour of a graph in pixel coordinates: the unique negatively
/// oriented traced face, reversed to counterclockwise, collinear vertices
/// dropped, starting at the lexicographically smallest (y, x) vertex.
pub fn derive_boundary(g: &StructuralGraph) -> GraphResult<BoundaryPolygon> {
    let faces = trace_all_faces(g)?;
    let outer: Vec<_> = faces.iter().filter(|f| f.signed_area < 0.0).collect();
    if outer.len() != 1 {
        return Err(GraphError::Topology {
            msg: format!("expected exactly one outer face, found {}", outer.len()),
        });
    }
    let mut pts: Vec<[f64; 2]> = outer[0].cycle.iter().rev().map(|&i| g.pixel(i)).collect();
    pts = drop_collinear(&pts);
    if pts.len() < 3 {
        return Err(GraphError::Topology {
            msg: "outer contour degenerated below 3 vertices".into(),
        });
    }
    let start = (0..pts.len())
        .min_by(|&i, &j| {
            let a = pts[i];
            let b = pts[j];
            (a[1], a[0]).partial_cmp(&(b[1], b[0])).expect("finite coords")
        })
        .expect("nonempty");
    pts.rotate_left(start);
    Ok(BoundaryPolygon { vertices: pts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layout_two_rooms() -> RectLayout {
        use RoomCategory::*;
        RectLayout {
            outer: Rect { x0: 0, y0: 0, x1: 248, y1: 100 },
            rooms: vec![
                RectRoom { rect: Rect { x0: 0, y0: 0, x1: 120, y1: 100 }, category: LivingRoom },
                RectRoom { rect: Rect { x0: 120, y0: 0, x1: 248, y1: 100 }, category: Bedroom },
            ],
            strip_balcony: None,
        }
    }

    #[test]
    fn two_rooms_give_six_nodes_seven_edges() {
        let g = layout_to_graph(&layout_two_rooms()).unwrap();
        assert_eq!(g.real_node_count(), 6);
        assert_eq!(g.edges.len(), 7);
        // Every node touches the outer boundary here.
        for i in g.real_node_indices() {
            assert!(g.nodes[i].has_category(RoomCategory::ExternalArea));
        }
    }

    #[test]
    fn single_room_layout_graph() {
        use RoomCategory::*;
        let layout = RectLayout {
            outer: Rect { x0: 0, y0: 0, x1: 160, y1: 160 },
            rooms: vec![RectRoom { rect: Rect { x0: 0, y0: 0, x1: 160, y1: 160 }, category: LivingRoom }],
            strip_balcony: None,
        };
        let g = layout_to_graph(&layout).unwrap();
        assert_eq!(g.real_node_count(), 4);
        assert_eq!(g.edges.len(), 4);
        for i in g.real_node_indices() {
            assert!(g.nodes[i].has_category(LivingRoom));
            assert!(g.nodes[i].has_category(ExternalArea));
        }
    }

    #[test]
    fn generated_layouts_hold_their_contracts() {
        let params = GenParams::default();
        for seed in 0..200 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let layout = generate_floorplan(&mut rng, &params).unwrap();
            let n = layout.rooms.len();
            assert!((4..=8).contains(&n), "room count {}", n);
            let living = layout
                .rooms
                .iter()
                .filter(|r| r.category == RoomCategory::LivingRoom)
                .count();
            assert_eq!(living, 1);
            let bedrooms = layout
                .rooms
                .iter()
                .filter(|r| r.category == RoomCategory::Bedroom)
                .count();
            assert!(bedrooms >= 1);
            let kitchens = layout
                .rooms
                .iter()
                .filter(|r| r.category == RoomCategory::Kitchen)
                .count();
            assert!(kitchens <= 1);
            // Tiling: areas sum exactly.
            let sum: u64 = layout.rooms.iter().map(|r| r.rect.area()).sum();
            assert_eq!(sum, layout.outer.area());
            // Balconies touch the outer boundary.
            for room in &layout.rooms {
                if room.category == RoomCategory::Balcony {
                    let r = room.rect;
                    let o = layout.outer;
                    assert!(r.x0 == o.x0 || r.x1 == o.x1 || r.y0 == o.y0 || r.y1 == o.y1);
                }
                assert!(room.rect.width() >= 16 && room.rect.height() >= 16);
                for c in room.rect.corners() {
                    assert_eq!(c[0] % 8, 0);
                    assert_eq!(c[1] % 8, 0);
                }
            }
        }
    }

    #[test]
    fn generated_graphs_validate_clean() {
        let params = GenParams::default();
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let layout = generate_floorplan(&mut rng, &params).unwrap();
            let g = layout_to_graph(&layout).unwrap();
            let report = crate::validate::validate_graph(&g);
            assert!(report.is_empty(), "seed {}: {:?}", seed, report);
        }
    }

    #[test]
    fn boundary_of_rectangular_layout_is_four_corners() {
        let g = layout_to_graph(&layout_two_rooms()).unwrap();
        let b = derive_boundary(&g).unwrap();
        assert_eq!(
            b.vertices,
            vec![[0.0, 0.0], [248.0, 0.0], [248.0, 100.0], [0.0, 100.0]]
        );
    }

    #[test]
    fn derive_topology_adjacency() {
        let t = derive_topology(&layout_two_rooms());
        assert_eq!(t.rooms.len(), 2);
        assert_eq!(t.adjacency, vec![(0, 1)]);
        // Corner-only contact is not adjacency.
        use RoomCategory::*;
        let corner = RectLayout {
            outer: Rect { x0: 0, y0: 0, x1: 200, y1: 200 },
            rooms: vec![
                RectRoom { rect: Rect { x0: 0, y0: 0, x1: 100, y1: 100 }, category: LivingRoom },
                RectRoom { rect: Rect { x0: 100, y0: 100, x1: 200, y1: 200 }, category: Bedroom },
                RectRoom { rect: Rect { x0: 100, y0: 0, x1: 200, y1: 100 }, category: Kitchen },
                RectRoom { rect: Rect { x0: 0, y0: 100, x1: 100, y1: 200 }, category: Bathroom },
            ],
            strip_balcony: None,
        };
        let t = derive_topology(&corner);
        assert!(!t.are_adjacent(0, 1));
        assert!(t.are_adjacent(0, 2));
        assert!(t.are_adjacent(0, 3));
    }

    fn strip_layout() -> RectLayout {
        use RoomCategory::*;
        // Balcony strip across the bottom, 100 px free side for the pinned
        // 61.8 / 19.1 arithmetic; two rooms above.
        RectLayout {
            outer: Rect { x0: 0, y0: 0, x1: 100, y1: 200 },
            rooms: vec![
                RectRoom { rect: Rect { x0: 0, y0: 0, x1: 100, y1: 40 }, category: Balcony },
                RectRoom { rect: Rect { x0: 0, y0: 40, x1: 100, y1: 200 }, category: LivingRoom },
            ],
            strip_balcony: Some(0),
        }
    }

    #[test]
    fn slant_moves_far_corners_golden_ratio() {
        let layout = strip_layout();
        let mut g = layout_to_graph(&layout).unwrap();
        let slanted = slant_balcony(&mut g, &layout).unwrap();
        assert!(slanted);
        let px: Vec<[f64; 2]> = g.real_node_indices().iter().map(|&i| g.pixel(i)).collect();
        // Far side was y=0 from x=0..100; corners move to 19.1 and 80.9.
        let near = |p: [f64; 2], q: [f64; 2]| (p[0] - q[0]).abs() < 1e-9 && (p[1] - q[1]).abs() < 1e-9;
        assert!(px.iter().any(|&p| near(p, [19.1, 0.0])), "{:?}", px);
        assert!(px.iter().any(|&p| near(p, [80.9, 0.0])), "{:?}", px);
        // 100 px base becomes 61.8.
        assert!((80.9f64 - 19.1 - 61.8).abs() < 1e-9);
        // Still a valid graph.
        assert!(crate::validate::validate_graph(&g).is_empty());
    }

    #[test]
    fn slant_without_candidate_is_identity() {
        let layout = layout_two_rooms();
        let mut g = layout_to_graph(&layout).unwrap();
        let before = g.clone();
        assert!(!slant_balcony(&mut g, &layout).unwrap());
        assert_eq!(g, before);
    }

    #[test]
    fn slanted_boundary_has_six_vertices() {
        let layout = strip_layout();
        let mut g = layout_to_graph(&layout).unwrap();
        slant_balcony(&mut g, &layout).unwrap();
        let b = derive_boundary(&g).unwrap();
        assert_eq!(b.vertices.len(), 6, "{:?}", b.vertices);
    }

    #[test]
    fn infeasible_params_error() {
        let params = GenParams {
            room_count_range: (40, 40),
            min_room_size: 80,
            snap: 8,
            balcony_strip_prob: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            generate_floorplan(&mut rng, &params),
            Err(GraphError::Generation { .. })
        ));
    }
}
