//! Bowyer-Watson Delaunay triangulation of a fixed point set. The input
//! points are deterministic, so the triangulation is too.

/// Triangulate the given points; returns positively oriented triangles.
/// Points must be pairwise distinct and non-collinear as a set.
pub fn triangulate(points: &[[f64; 2]]) -> Vec<[usize; 3]> {
    assert!(points.len() >= 3);
    let (mut min, mut max) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in points {
        for k in 0..2 {
            min[k] = min[k].min(p[k]);
            max[k] = max[k].max(p[k]);
        }
    }
    let span = (max[0] - min[0]).max(max[1] - min[1]).max(1e-12);
    let cx = 0.5 * (min[0] + max[0]);
    let cy = 0.5 * (min[1] + max[1]);
    // super-triangle comfortably containing every circumcircle of interest
    let s = 50.0 * span;
    let mut pts: Vec<[f64; 2]> = points.to_vec();
    let n = pts.len();
    pts.push([cx - s, cy - 0.6 * s]);
    pts.push([cx + s, cy - 0.6 * s]);
    pts.push([cx, cy + s]);

    let mut tris: Vec<[usize; 3]> = vec![[n, n + 1, n + 2]];
    let mut alive: Vec<bool> = vec![true];

    for pi in 0..n {
        let p = pts[pi];
        // collect triangles whose circumcircle contains p
        let mut bad = Vec::new();
        for (t, tri) in tris.iter().enumerate() {
            if alive[t] && in_circumcircle(&pts, *tri, p) {
                bad.push(t);
            }
        }
        // boundary polygon: edges of bad triangles seen exactly once
        let mut edges: Vec<(usize, usize)> = Vec::with_capacity(bad.len() * 3);
        for &t in &bad {
            let [a, b, c] = tris[t];
            for (u, v) in [(a, b), (b, c), (c, a)] {
                edges.push((u, v));
            }
            alive[t] = false;
        }
        let mut keep = Vec::with_capacity(edges.len());
        'outer: for (i, &(u, v)) in edges.iter().enumerate() {
            for (j, &(x, y)) in edges.iter().enumerate() {
                if i != j && ((u, v) == (y, x) || (u, v) == (x, y)) {
                    continue 'outer;
                }
            }
            keep.push((u, v));
        }
        for (u, v) in keep {
            tris.push([u, v, pi]);
            alive.push(true);
        }
    }

    let mut out = Vec::new();
    for (t, tri) in tris.iter().enumerate() {
        if !alive[t] || tri.iter().any(|&v| v >= n) {
            continue;
        }
        let mut tri = *tri;
        if signed_area(&pts, tri) < 0.0 {
            tri.swap(1, 2);
        }
        out.push(tri);
    }
    out
}

fn signed_area(pts: &[[f64; 2]], [a, b, c]: [usize; 3]) -> f64 {
    let (pa, pb, pc) = (pts[a], pts[b], pts[c]);
    0.5 * ((pb[0] - pa[0]) * (pc[1] - pa[1]) - (pc[0] - pa[0]) * (pb[1] - pa[1]))
}

fn in_circumcircle(pts: &[[f64; 2]], tri: [usize; 3], p: [f64; 2]) -> bool {
    let mut tri = tri;
    if signed_area(pts, tri) < 0.0 {
        tri.swap(1, 2);
    }
    let [a, b, c] = tri;
    let (pa, pb, pc) = (pts[a], pts[b], pts[c]);
    let (ax, ay) = (pa[0] - p[0], pa[1] - p[1]);
    let (bx, by) = (pb[0] - p[0], pb[1] - p[1]);
    let (cx, cy) = (pc[0] - p[0], pc[1] - p[1]);
    let det = (ax * ax + ay * ay) * (bx * cy - cx * by)
        - (bx * bx + by * by) * (ax * cy - cx * ay)
        + (cx * cx + cy * cy) * (ax * by - bx * ay);
    det > 0.0
}
