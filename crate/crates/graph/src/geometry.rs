//! Planar geometry helpers shared by validation, extraction, and the
//! synthetic generator. All angles use the mathematical convention (y up,
//! counterclockwise positive); signed polygon areas are positive for
//! counterclockwise cycles.

pub fn cross(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

pub fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

pub fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

/// Clockwise angle from direction `a` to direction `b`, in `(0, 2π]`.
/// Identical directions map to the full turn 2π, so a backtrack along the
/// reversed incoming edge is always the least preferred continuation.
pub fn clockwise_angle(a: [f64; 2], b: [f64; 2]) -> f64 {
    let ccw = f64::atan2(cross(a, b), dot(a, b));
    let cw = -ccw;
    if cw <= 0.0 {
        cw + std::f64::consts::TAU
    } else {
        cw
    }
}

/// Signed area of a closed polygon given without the repeated end vertex.
pub fn signed_area(points: &[[f64; 2]]) -> f64 {
    let n = points.len();
    if n < 3 {
        return 0.0;
    }
    let mut twice = 0.0;
    for i in 0..n {
        let p = points[i];
        let q = points[(i + 1) % n];
        twice += p[0] * q[1] - q[0] * p[1];
    }
    twice / 2.0
}

fn orient(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    cross(sub(b, a), sub(c, a))
}

pub fn point_on_segment(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> bool {
    if orient(a, b, p) != 0.0 {
        return false;
    }
    p[0] >= a[0].min(b[0])
        && p[0] <= a[0].max(b[0])
        && p[1] >= a[1].min(b[1])
        && p[1] <= a[1].max(b[1])
}

/// Whether segments `ab` and `cd` intersect anywhere other than a shared
/// endpoint: a proper crossing, a T-contact at an interior point, or a
/// positive-length collinear overlap.
pub fn segments_conflict(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> bool {
    let shares_endpoint = |p: [f64; 2]| p == c || p == d;
    let d1 = orient(c, d, a);
    let d2 = orient(c, d, b);
    let d3 = orient(a, b, c);
    let d4 = orient(a, b, d);

    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }

    // Collinear or touching cases: a contact point that is not a shared
    // endpoint is a conflict.
    let mut contacts: Vec<[f64; 2]> = Vec::new();
    if d3 == 0.0 && point_on_segment(c, a, b) {
        contacts.push(c);
    }
    if d4 == 0.0 && point_on_segment(d, a, b) {
        contacts.push(d);
    }
    if d1 == 0.0 && point_on_segment(a, c, d) {
        contacts.push(a);
    }
    if d2 == 0.0 && point_on_segment(b, c, d) {
        contacts.push(b);
    }
    if contacts.is_empty() {
        return false;
    }
    // Collinear overlap of positive length touches in more than one point.
    contacts.dedup();
    if contacts.len() > 1 {
        return true;
    }
    let p = contacts[0];
    !(shares_endpoint(a) || shares_endpoint(b)) || !(p == a || p == b)
}

/// Remove vertices where the turn is exactly straight (zero cross product).
pub fn drop_collinear(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let n = points.len();
    if n < 3 {
        return points.to_vec();
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let prev = points[(i + n - 1) % n];
        let cur = points[i];
        let next = points[(i + 1) % n];
        if cross(sub(cur, prev), sub(next, cur)) != 0.0 {
            out.push(cur);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI, TAU};

    #[test]
    fn clockwise_angle_quadrants() {
        let e = 1e-12;
        // From +x to -y is a quarter clockwise turn.
        assert!((clockwise_angle([1.0, 0.0], [0.0, -1.0]) - FRAC_PI_2).abs() < e);
        // From +x to +y is three quarters clockwise.
        assert!((clockwise_angle([1.0, 0.0], [0.0, 1.0]) - 3.0 * FRAC_PI_2).abs() < e);
        // Opposite direction is half a turn.
        assert!((clockwise_angle([1.0, 0.0], [-1.0, 0.0]) - PI).abs() < e);
        // Same direction is a full turn, never zero.
        assert!((clockwise_angle([1.0, 0.0], [1.0, 0.0]) - TAU).abs() < e);
        assert!((clockwise_angle([3.0, 4.0], [3.0, 4.0]) - TAU).abs() < e);
    }

    #[test]
    fn signed_area_orientation() {
        let ccw = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        assert_eq!(signed_area(&ccw), 1.0);
        let cw: Vec<[f64; 2]> = ccw.iter().rev().cloned().collect();
        assert_eq!(signed_area(&cw), -1.0);
    }

    #[test]
    fn segment_conflicts() {
        // Proper crossing.
        assert!(segments_conflict([0.0, 0.0], [2.0, 2.0], [0.0, 2.0], [2.0, 0.0]));
        // Shared endpoint only: fine.
        assert!(!segments_conflict([0.0, 0.0], [1.0, 0.0], [1.0, 0.0], [1.0, 1.0]));
        // T-contact at an interior point.
        assert!(segments_conflict([0.0, 0.0], [2.0, 0.0], [1.0, 0.0], [1.0, 1.0]));
        // Collinear overlap.
        assert!(segments_conflict([0.0, 0.0], [2.0, 0.0], [1.0, 0.0], [3.0, 0.0]));
        // Collinear but disjoint.
        assert!(!segments_conflict([0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]));
        // Parallel, offset.
        assert!(!segments_conflict([0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]));
    }

    #[test]
    fn drop_collinear_removes_straight_vertices() {
        let poly = [
            [0.0, 0.0],
            [1.0, 0.0],
            [2.0, 0.0],
            [2.0, 2.0],
            [0.0, 2.0],
        ];
        let cleaned = drop_collinear(&poly);
        assert_eq!(cleaned, vec![[0.0, 0.0], [2.0, 0.0], [2.0, 2.0], [0.0, 2.0]]);
    }
}
