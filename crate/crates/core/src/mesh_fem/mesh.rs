//! Mesh type, generators, validation, and plain-text serialization.

use super::delaunay::triangulate;
use super::geometry::ChannelGeometry;
use super::MeshError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BoundaryTag {
    Inlet,
    Top,
    Bottom,
    Cylinder,
    Outlet,
}

impl BoundaryTag {
    pub const ALL: [BoundaryTag; 5] = [
        BoundaryTag::Inlet,
        BoundaryTag::Top,
        BoundaryTag::Bottom,
        BoundaryTag::Cylinder,
        BoundaryTag::Outlet,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            BoundaryTag::Inlet => "inlet",
            BoundaryTag::Top => "top",
            BoundaryTag::Bottom => "bottom",
            BoundaryTag::Cylinder => "cylinder",
            BoundaryTag::Outlet => "outlet",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }
}

/// Triangular mesh with tagged boundary edges.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub nodes: Vec<[f64; 2]>,
    pub triangles: Vec<[usize; 3]>,
    pub boundary_edges: Vec<(usize, usize, BoundaryTag)>,
    pub h: f64,
}

impl Mesh {
    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        let (pa, pb, pc) = (self.nodes[a], self.nodes[b], self.nodes[c]);
        0.5 * ((pb[0] - pa[0]) * (pc[1] - pa[1]) - (pc[0] - pa[0]) * (pb[1] - pa[1]))
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// Check the structural invariants: positive orientation, each boundary
    /// edge on exactly one triangle, every single-triangle edge tagged.
    pub fn validate(&self) -> Result<(), MeshError> {
        for t in 0..self.triangles.len() {
            let a = self.triangle_area(t);
            if a <= 0.0 {
                return Err(MeshError::DegenerateTriangle(t, a));
            }
        }
        use std::collections::HashMap;
        let mut edge_count: HashMap<(usize, usize), usize> = HashMap::new();
        for tri in &self.triangles {
            for (u, v) in [(tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])] {
                *edge_count.entry((u.min(v), u.max(v))).or_insert(0) += 1;
            }
        }
        let mut tagged: HashMap<(usize, usize), usize> = HashMap::new();
        for &(u, v, _) in &self.boundary_edges {
            let key = (u.min(v), u.max(v));
            *tagged.entry(key).or_insert(0) += 1;
            match edge_count.get(&key) {
                Some(1) => {}
                Some(k) => {
                    return Err(MeshError::InvalidMesh(format!(
                        "tagged edge ({u},{v}) belongs to {k} triangles"
                    )))
                }
                None => {
                    return Err(MeshError::InvalidMesh(format!(
                        "tagged edge ({u},{v}) not in any triangle"
                    )))
                }
            }
        }
        for (&key, &count) in &edge_count {
            if count == 1 && tagged.get(&key).copied().unwrap_or(0) != 1 {
                return Err(MeshError::InvalidMesh(format!(
                    "boundary edge {key:?} tagged {} times",
                    tagged.get(&key).copied().unwrap_or(0)
                )));
            }
        }
        Ok(())
    }

    pub fn serialize(&self) -> String {
        let mut s = String::from("mesh2d v1\n");
        s.push_str(&format!("{}\n", self.nodes.len()));
        for n in &self.nodes {
            s.push_str(&format!("{:.17e} {:.17e}\n", n[0], n[1]));
        }
        s.push_str(&format!("{}\n", self.triangles.len()));
        for t in &self.triangles {
            s.push_str(&format!("{} {} {}\n", t[0], t[1], t[2]));
        }
        s.push_str(&format!("{}\n", self.boundary_edges.len()));
        for (u, v, tag) in &self.boundary_edges {
            s.push_str(&format!("{} {} {}\n", u, v, tag.name()));
        }
        s
    }

    pub fn deserialize(text: &str) -> Result<Self, MeshError> {
        let mut lines = text.lines().enumerate();
        let mut next = |what: &str| -> Result<(usize, &str), MeshError> {
            lines
                .next()
                .map(|(i, l)| (i + 1, l))
                .ok_or_else(|| MeshError::Parse(0, format!("missing {what}")))
        };
        let (ln, header) = next("header")?;
        if header.trim() != "mesh2d v1" {
            return Err(MeshError::Parse(ln, format!("bad header '{header}'")));
        }
        let (ln, nc) = next("node count")?;
        let n: usize = nc.trim().parse().map_err(|_| MeshError::Parse(ln, "node count".into()))?;
        let mut nodes = Vec::with_capacity(n);
        for _ in 0..n {
            let (ln, l) = next("node")?;
            let mut it = l.split_whitespace();
            let x: f64 = it
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| MeshError::Parse(ln, "node x".into()))?;
            let y: f64 = it
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| MeshError::Parse(ln, "node y".into()))?;
            nodes.push([x, y]);
        }
        let (ln, tc) = next("triangle count")?;
        let t: usize =
            tc.trim().parse().map_err(|_| MeshError::Parse(ln, "triangle count".into()))?;
        let mut triangles = Vec::with_capacity(t);
        for _ in 0..t {
            let (ln, l) = next("triangle")?;
            let idx: Vec<usize> = l.split_whitespace().filter_map(|t| t.parse().ok()).collect();
            if idx.len() != 3 || idx.iter().any(|&i| i >= n) {
                return Err(MeshError::Parse(ln, format!("bad triangle '{l}'")));
            }
            triangles.push([idx[0], idx[1], idx[2]]);
        }
        let (ln, bc) = next("edge count")?;
        let b: usize = bc.trim().parse().map_err(|_| MeshError::Parse(ln, "edge count".into()))?;
        let mut boundary_edges = Vec::with_capacity(b);
        for _ in 0..b {
            let (ln, l) = next("edge")?;
            let mut it = l.split_whitespace();
            let u: usize = it
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| MeshError::Parse(ln, "edge u".into()))?;
            let v: usize = it
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| MeshError::Parse(ln, "edge v".into()))?;
            let tag = it
                .next()
                .and_then(BoundaryTag::parse)
                .ok_or_else(|| MeshError::Parse(ln, "edge tag".into()))?;
            if u >= n || v >= n {
                return Err(MeshError::Parse(ln, "edge index out of range".into()));
            }
            boundary_edges.push((u, v, tag));
        }
        // nominal h recovered from median boundary edge length
        let mut lens: Vec<f64> = boundary_edges
            .iter()
            .map(|&(u, v, _)| {
                let (a, b) = (nodes[u], nodes[v]);
                ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
            })
            .collect();
        lens.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let h = lens.get(lens.len() / 2).cloned().unwrap_or(0.0);
        let mesh = Mesh { nodes, triangles, boundary_edges, h };
        mesh.validate()?;
        Ok(mesh)
    }
}

/// Deterministic hash jitter in [-1, 1], used to break grid degeneracies.
fn jitter(i: u64, j: u64) -> f64 {
    let mut x = i.wrapping_mul(0x9e3779b97f4a7c15) ^ j.wrapping_mul(0xc2b2ae3d27d4eb4f);
    x ^= x >> 33;
    x = x.wrapping_mul(0xff51afd7ed558ccd);
    x ^= x >> 33;
    (x >> 11) as f64 / (1u64 << 52) as f64 - 1.0
}

/// Unstructured mesh of the channel with a graded band around the cylinder.
/// Fully deterministic: same inputs give a bit-identical mesh.
pub fn generate_channel_mesh(
    geom: &ChannelGeometry,
    h: f64,
    refinement_band: f64,
) -> Result<Mesh, MeshError> {
    geom.validate()?;
    if !(h > 0.0) {
        return Err(MeshError::RejectedInput(format!("mesh size {h} must be positive")));
    }
    if !(refinement_band >= 1.0) {
        return Err(MeshError::RejectedInput(format!(
            "refinement band {refinement_band} must be at least 1"
        )));
    }
    let (len, hei) = (geom.length, geom.height);
    let (x0, y0) = geom.cylinder_center;
    let r = geom.radius();
    let h_fine = h / refinement_band;
    let mut pts: Vec<[f64; 2]> = Vec::new();

    // rectangle boundary, corners included exactly
    let nx = (len / h).round().max(2.0) as usize;
    let ny = (hei / h).round().max(2.0) as usize;
    for i in 0..=nx {
        let x = len * i as f64 / nx as f64;
        pts.push([x, 0.0]);
        pts.push([x, hei]);
    }
    for j in 1..ny {
        let y = hei * j as f64 / ny as f64;
        pts.push([0.0, y]);
        pts.push([len, y]);
    }

    // cylinder boundary, endpoints exactly on the circle
    let nc = ((2.0 * std::f64::consts::PI * r / h_fine).ceil() as usize).max(12);
    for k in 0..nc {
        let a = 2.0 * std::f64::consts::PI * k as f64 / nc as f64;
        pts.push([x0 + r * a.cos(), y0 + r * a.sin()]);
    }

    // graded rings: spacing grows geometrically from h_fine to h
    let mut ring_r = r;
    let mut delta = h_fine;
    let growth = 1.35;
    let mut ring_idx = 0u64;
    while delta < h {
        ring_r += delta;
        if ring_r + delta > 0.5 * (hei.min(len)) {
            break;
        }
        let nk = ((2.0 * std::f64::consts::PI * ring_r / delta).ceil() as usize).max(8);
        let stagger = 0.5 * (ring_idx as f64 + 1.0);
        for k in 0..nk {
            let a = 2.0 * std::f64::consts::PI * (k as f64 + stagger) / nk as f64;
            let (px, py) = (x0 + ring_r * a.cos(), y0 + ring_r * a.sin());
            if px > 0.55 * h && px < len - 0.55 * h && py > 0.55 * h && py < hei - 0.55 * h {
                pts.push([px, py]);
            }
        }
        delta *= growth;
        ring_idx += 1;
    }
    let clear_r = ring_r + 0.7 * h;

    // interior grid with tiny deterministic jitter
    for i in 1..nx {
        for j in 1..ny {
            let mut x = len * i as f64 / nx as f64;
            let mut y = hei * j as f64 / ny as f64;
            x += 0.12 * h * jitter(i as u64, j as u64);
            y += 0.12 * h * jitter(j as u64 + 7919, i as u64 + 104729);
            if x < 0.55 * h || x > len - 0.55 * h || y < 0.55 * h || y > hei - 0.55 * h {
                continue;
            }
            if ((x - x0).powi(2) + (y - y0).powi(2)).sqrt() < clear_r {
                continue;
            }
            pts.push([x, y]);
        }
    }

    let tris = triangulate(&pts);
    // drop triangles inside the cylinder hole
    let triangles: Vec<[usize; 3]> = tris
        .into_iter()
        .filter(|&[a, b, c]| {
            let gx = (pts[a][0] + pts[b][0] + pts[c][0]) / 3.0;
            let gy = (pts[a][1] + pts[b][1] + pts[c][1]) / 3.0;
            geom.distance_to_cylinder(gx, gy) > 0.0
        })
        .collect();

    // compact node list to used nodes only
    let mut used = vec![usize::MAX; pts.len()];
    let mut nodes = Vec::new();
    let mut triangles2 = Vec::with_capacity(triangles.len());
    for tri in &triangles {
        let mut t2 = [0usize; 3];
        for (k, &v) in tri.iter().enumerate() {
            if used[v] == usize::MAX {
                used[v] = nodes.len();
                nodes.push(pts[v]);
            }
            t2[k] = used[v];
        }
        triangles2.push(t2);
    }

    let boundary_edges = tag_boundary(&nodes, &triangles2, geom)?;
    let mesh = Mesh { nodes, triangles: triangles2, boundary_edges, h };
    mesh.validate()?;
    Ok(mesh)
}

/// Structured mesh of the plain rectangle (no cylinder); right-going
/// diagonals. Used for analytic oracle problems.
pub fn generate_rectangle_mesh(
    length: f64,
    height: f64,
    nx: usize,
    ny: usize,
) -> Result<Mesh, MeshError> {
    if !(length > 0.0 && height > 0.0) || nx < 1 || ny < 1 {
        return Err(MeshError::RejectedInput("rectangle sizes and cell counts must be positive".into()));
    }
    let mut nodes = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            nodes.push([length * i as f64 / nx as f64, height * j as f64 / ny as f64]);
        }
    }
    let id = |i: usize, j: usize| j * (nx + 1) + i;
    let mut triangles = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            triangles.push([id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
            triangles.push([id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
        }
    }
    let mut boundary_edges = Vec::new();
    for i in 0..nx {
        boundary_edges.push((id(i, 0), id(i + 1, 0), BoundaryTag::Bottom));
        boundary_edges.push((id(i, ny), id(i + 1, ny), BoundaryTag::Top));
    }
    for j in 0..ny {
        boundary_edges.push((id(0, j), id(0, j + 1), BoundaryTag::Inlet));
        boundary_edges.push((id(nx, j), id(nx, j + 1), BoundaryTag::Outlet));
    }
    let mesh =
        Mesh { nodes, triangles, boundary_edges, h: (length / nx as f64).max(height / ny as f64) };
    mesh.validate()?;
    Ok(mesh)
}

/// Find single-triangle edges and tag them by position.
fn tag_boundary(
    nodes: &[[f64; 2]],
    triangles: &[[usize; 3]],
    geom: &ChannelGeometry,
) -> Result<Vec<(usize, usize, BoundaryTag)>, MeshError> {
    use std::collections::HashMap;
    let mut edge_count: HashMap<(usize, usize), usize> = HashMap::new();
    for tri in triangles {
        for (u, v) in [(tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])] {
            *edge_count.entry((u.min(v), u.max(v))).or_insert(0) += 1;
        }
    }
    let tol = 1e-9 * geom.length.max(geom.height);
    let mut out = Vec::new();
    let mut boundary: Vec<(usize, usize)> =
        edge_count.iter().filter(|(_, &c)| c == 1).map(|(&e, _)| e).collect();
    boundary.sort_unstable();
    for (u, v) in boundary {
        let (a, b) = (nodes[u], nodes[v]);
        let mx = 0.5 * (a[0] + b[0]);
        let my = 0.5 * (a[1] + b[1]);
        let tag = if a[0].abs() < tol && b[0].abs() < tol {
            BoundaryTag::Inlet
        } else if (a[0] - geom.length).abs() < tol && (b[0] - geom.length).abs() < tol {
            BoundaryTag::Outlet
        } else if a[1].abs() < tol && b[1].abs() < tol {
            BoundaryTag::Bottom
        } else if (a[1] - geom.height).abs() < tol && (b[1] - geom.height).abs() < tol {
            BoundaryTag::Top
        } else if geom.distance_to_cylinder(mx, my) < 0.3 * geom.radius() {
            BoundaryTag::Cylinder
        } else {
            return Err(MeshError::InvalidMesh(format!(
                "untaggable boundary edge between {a:?} and {b:?}"
            )));
        };
        out.push((u, v, tag));
    }
    Ok(out)
}
