//! Taylor-Hood function spaces: P2 velocity (vertices plus edge midpoints,
//! two stacked components) and P1 pressure (vertices).

use super::mesh::{BoundaryTag, Mesh};
use std::collections::HashMap;

/// P2 shape functions at reference coordinates (x, y).
pub fn p2_shape(x: f64, y: f64) -> [f64; 6] {
    let l1 = 1.0 - x - y;
    let (l2, l3) = (x, y);
    [
        l1 * (2.0 * l1 - 1.0),
        l2 * (2.0 * l2 - 1.0),
        l3 * (2.0 * l3 - 1.0),
        4.0 * l2 * l3,
        4.0 * l3 * l1,
        4.0 * l1 * l2,
    ]
}

/// Reference-coordinate gradients of the P2 shape functions.
pub fn p2_grad(x: f64, y: f64) -> [[f64; 2]; 6] {
    let l1 = 1.0 - x - y;
    let (l2, l3) = (x, y);
    let d1 = [-1.0, -1.0];
    let d2 = [1.0, 0.0];
    let d3 = [0.0, 1.0];
    let mut g = [[0.0; 2]; 6];
    for k in 0..2 {
        g[0][k] = (4.0 * l1 - 1.0) * d1[k];
        g[1][k] = (4.0 * l2 - 1.0) * d2[k];
        g[2][k] = (4.0 * l3 - 1.0) * d3[k];
        g[3][k] = 4.0 * (l2 * d3[k] + l3 * d2[k]);
        g[4][k] = 4.0 * (l3 * d1[k] + l1 * d3[k]);
        g[5][k] = 4.0 * (l1 * d2[k] + l2 * d1[k]);
    }
    g
}

/// P1 shape functions at reference coordinates.
pub fn p1_shape(x: f64, y: f64) -> [f64; 3] {
    [1.0 - x - y, x, y]
}

/// Per-triangle affine map data.
#[derive(Debug, Clone, Copy)]
pub struct ElementGeom {
    /// Jacobian columns (p1-p0, p2-p0).
    pub jac: [[f64; 2]; 2],
    /// Inverse transpose of the Jacobian, maps reference gradients to
    /// physical gradients.
    pub jac_inv_t: [[f64; 2]; 2],
    pub det: f64,
}

impl ElementGeom {
    pub fn of(mesh: &Mesh, t: usize) -> Self {
        let [a, b, c] = mesh.triangles[t];
        let (pa, pb, pc) = (mesh.nodes[a], mesh.nodes[b], mesh.nodes[c]);
        let jac = [[pb[0] - pa[0], pc[0] - pa[0]], [pb[1] - pa[1], pc[1] - pa[1]]];
        let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
        // J^{-T} maps reference gradients to physical gradients
        let jac_inv_t = [
            [jac[1][1] / det, -jac[1][0] / det],
            [-jac[0][1] / det, jac[0][0] / det],
        ];
        Self { jac, jac_inv_t, det }
    }

    pub fn to_physical(&self, origin: [f64; 2], xr: f64, yr: f64) -> [f64; 2] {
        [
            origin[0] + self.jac[0][0] * xr + self.jac[0][1] * yr,
            origin[1] + self.jac[1][0] * xr + self.jac[1][1] * yr,
        ]
    }

    pub fn grad_physical(&self, gref: [f64; 2]) -> [f64; 2] {
        [
            self.jac_inv_t[0][0] * gref[0] + self.jac_inv_t[0][1] * gref[1],
            self.jac_inv_t[1][0] * gref[0] + self.jac_inv_t[1][1] * gref[1],
        ]
    }
}

/// The discrete spaces over one mesh.
#[derive(Debug, Clone)]
pub struct FemSpace {
    n_vertices: usize,
    n_edges: usize,
    /// Scalar velocity node ids per triangle: three vertices then the
    /// midpoints opposite each vertex.
    pub tri_dofs: Vec<[usize; 6]>,
    /// Coordinates of all scalar velocity nodes (vertices then midpoints).
    pub node_coords: Vec<[f64; 2]>,
    /// Strong-boundary tag per scalar velocity node; Outlet marks a
    /// do-nothing node (no Dirichlet condition).
    pub node_tag: Vec<Option<BoundaryTag>>,
}

fn tag_rank(tag: BoundaryTag) -> u8 {
    match tag {
        BoundaryTag::Cylinder => 4,
        BoundaryTag::Inlet => 3,
        BoundaryTag::Bottom => 2,
        BoundaryTag::Top => 1,
        BoundaryTag::Outlet => 0,
    }
}

impl FemSpace {
    pub fn build(mesh: &Mesh) -> Self {
        let n_vertices = mesh.nodes.len();
        let mut edge_ids: HashMap<(usize, usize), usize> = HashMap::new();
        let mut midpoints: Vec<[f64; 2]> = Vec::new();
        let mut tri_dofs = Vec::with_capacity(mesh.triangles.len());
        for tri in &mesh.triangles {
            let mut dofs = [0usize; 6];
            dofs[..3].copy_from_slice(tri);
            for k in 0..3 {
                let (u, v) = (tri[(k + 1) % 3], tri[(k + 2) % 3]);
                let key = (u.min(v), u.max(v));
                let next = midpoints.len();
                let id = *edge_ids.entry(key).or_insert_with(|| {
                    let (a, b) = (mesh.nodes[key.0], mesh.nodes[key.1]);
                    midpoints.push([0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])]);
                    next
                });
                dofs[3 + k] = n_vertices + id;
            }
            tri_dofs.push(dofs);
        }
        let n_edges = midpoints.len();
        let mut node_coords = mesh.nodes.clone();
        node_coords.extend(midpoints);

        let mut node_tag: Vec<Option<BoundaryTag>> = vec![None; n_vertices + n_edges];
        let assign = |idx: usize, tag: BoundaryTag, node_tag: &mut Vec<Option<BoundaryTag>>| {
            match node_tag[idx] {
                Some(old) if tag_rank(old) >= tag_rank(tag) => {}
                _ => node_tag[idx] = Some(tag),
            }
        };
        for &(u, v, tag) in &mesh.boundary_edges {
            assign(u, tag, &mut node_tag);
            assign(v, tag, &mut node_tag);
            let key = (u.min(v), u.max(v));
            if let Some(&e) = edge_ids.get(&key) {
                assign(n_vertices + e, tag, &mut node_tag);
            }
        }
        Self { n_vertices, n_edges, tri_dofs, node_coords, node_tag }
    }

    /// Scalar velocity nodes per component.
    pub fn n_scalar(&self) -> usize {
        self.n_vertices + self.n_edges
    }

    /// Total velocity dofs (both components, x block then y block).
    pub fn n_velocity(&self) -> usize {
        2 * self.n_scalar()
    }

    pub fn n_pressure(&self) -> usize {
        self.n_vertices
    }

    pub fn ux_dof(&self, node: usize) -> usize {
        node
    }

    pub fn uy_dof(&self, node: usize) -> usize {
        self.n_scalar() + node
    }

    /// Dirichlet mask over scalar velocity nodes for one boundary tag.
    pub fn dirichlet_mask(&self, tag: BoundaryTag) -> Vec<bool> {
        self.node_tag.iter().map(|t| *t == Some(tag)).collect()
    }

    /// A node carries a strong condition unless untagged or on the outlet.
    pub fn is_dirichlet_node(&self, node: usize) -> bool {
        matches!(self.node_tag[node], Some(t) if t != BoundaryTag::Outlet)
    }

    /// Mask over the full velocity dof vector (both components).
    pub fn dirichlet_velocity_mask(&self) -> Vec<bool> {
        let n = self.n_scalar();
        let mut mask = vec![false; 2 * n];
        for i in 0..n {
            if self.is_dirichlet_node(i) {
                mask[i] = true;
                mask[n + i] = true;
            }
        }
        mask
    }

    /// Nodal interpolation of a velocity field.
    pub fn interpolate(&self, f: impl Fn(f64, f64) -> (f64, f64)) -> Vec<f64> {
        let n = self.n_scalar();
        let mut out = vec![0.0; 2 * n];
        for (i, p) in self.node_coords.iter().enumerate() {
            let (ux, uy) = f(p[0], p[1]);
            out[i] = ux;
            out[n + i] = uy;
        }
        out
    }

    /// Nodal interpolation of a pressure field at the vertices.
    pub fn interpolate_pressure(&self, mesh: &Mesh, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        mesh.nodes.iter().map(|p| f(p[0], p[1])).collect()
    }

    /// Evaluate one velocity component inside triangle t at reference
    /// coordinates.
    pub fn eval_component(
        &self,
        field: &[f64],
        component: usize,
        t: usize,
        xr: f64,
        yr: f64,
    ) -> f64 {
        let shift = component * self.n_scalar();
        let shape = p2_shape(xr, yr);
        self.tri_dofs[t]
            .iter()
            .zip(shape.iter())
            .map(|(&d, &s)| field[shift + d] * s)
            .sum()
    }

    /// L2 norm of a velocity field (both components).
    pub fn l2_norm(&self, mesh: &Mesh, field: &[f64]) -> f64 {
        self.l2_error(mesh, field, |_, _| (0.0, 0.0))
    }

    /// L2 distance between a discrete field and an analytic one.
    pub fn l2_error(
        &self,
        mesh: &Mesh,
        field: &[f64],
        exact: impl Fn(f64, f64) -> (f64, f64),
    ) -> f64 {
        let rule = super::quadrature::triangle_rule(5);
        let mut total = 0.0;
        for t in 0..mesh.triangles.len() {
            let geom = ElementGeom::of(mesh, t);
            let origin = mesh.nodes[mesh.triangles[t][0]];
            for &([xr, yr], w) in rule {
                let p = geom.to_physical(origin, xr, yr);
                let (ex, ey) = exact(p[0], p[1]);
                let ux = self.eval_component(field, 0, t, xr, yr);
                let uy = self.eval_component(field, 1, t, xr, yr);
                total += w * geom.det * ((ux - ex).powi(2) + (uy - ey).powi(2));
            }
        }
        total.sqrt()
    }
}

/// Uniform-grid spatial index for point location in a mesh, with graceful
/// fallback to the nearest triangle for points just outside the covered
/// region (boundary roundoff and polygonal-hole gaps).
pub struct TriLocator {
    min: [f64; 2],
    inv_cell: f64,
    nx: usize,
    ny: usize,
    bins: Vec<Vec<usize>>,
}

impl TriLocator {
    pub fn build(mesh: &Mesh) -> Self {
        let (mut min, mut max) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in &mesh.nodes {
            for k in 0..2 {
                min[k] = min[k].min(p[k]);
                max[k] = max[k].max(p[k]);
            }
        }
        let span = (max[0] - min[0]).max(max[1] - min[1]).max(1e-12);
        let target = (mesh.triangles.len() as f64).sqrt().ceil().max(4.0) as usize;
        let cell = span / target as f64;
        let nx = ((max[0] - min[0]) / cell).ceil().max(1.0) as usize + 1;
        let ny = ((max[1] - min[1]) / cell).ceil().max(1.0) as usize + 1;
        let mut bins = vec![Vec::new(); nx * ny];
        for (t, tri) in mesh.triangles.iter().enumerate() {
            let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
            for &v in tri {
                for k in 0..2 {
                    lo[k] = lo[k].min(mesh.nodes[v][k]);
                    hi[k] = hi[k].max(mesh.nodes[v][k]);
                }
            }
            let i0 = ((lo[0] - min[0]) / cell).floor().max(0.0) as usize;
            let i1 = (((hi[0] - min[0]) / cell).floor() as usize).min(nx - 1);
            let j0 = ((lo[1] - min[1]) / cell).floor().max(0.0) as usize;
            let j1 = (((hi[1] - min[1]) / cell).floor() as usize).min(ny - 1);
            for j in j0..=j1 {
                for i in i0..=i1 {
                    bins[j * nx + i].push(t);
                }
            }
        }
        Self { min, inv_cell: 1.0 / cell, nx, ny, bins }
    }

    fn bary(mesh: &Mesh, t: usize, p: [f64; 2]) -> [f64; 3] {
        let geom = ElementGeom::of(mesh, t);
        let origin = mesh.nodes[mesh.triangles[t][0]];
        let dx = p[0] - origin[0];
        let dy = p[1] - origin[1];
        // reference coordinates via the inverse Jacobian
        let det = geom.det;
        let xr = (geom.jac[1][1] * dx - geom.jac[0][1] * dy) / det;
        let yr = (-geom.jac[1][0] * dx + geom.jac[0][0] * dy) / det;
        [1.0 - xr - yr, xr, yr]
    }

    /// Find the triangle containing p; if none contains it, return the
    /// nearby triangle with the least barycentric violation. The returned
    /// reference coordinates may lie slightly outside the element.
    pub fn locate(&self, mesh: &Mesh, p: [f64; 2]) -> (usize, f64, f64) {
        let ci = (((p[0] - self.min[0]) * self.inv_cell).floor().max(0.0) as usize).min(self.nx - 1);
        let cj = (((p[1] - self.min[1]) * self.inv_cell).floor().max(0.0) as usize).min(self.ny - 1);
        let mut best = (usize::MAX, f64::NEG_INFINITY, 0.0, 0.0);
        for ring in 0..3usize {
            let (i0, i1) = (ci.saturating_sub(ring), (ci + ring).min(self.nx - 1));
            let (j0, j1) = (cj.saturating_sub(ring), (cj + ring).min(self.ny - 1));
            for j in j0..=j1 {
                for i in i0..=i1 {
                    for &t in &self.bins[j * self.nx + i] {
                        let b = Self::bary(mesh, t, p);
                        let margin = b[0].min(b[1]).min(b[2]);
                        if margin > best.1 {
                            best = (t, margin, b[1], b[2]);
                        }
                    }
                }
            }
            if best.1 >= -1e-12 {
                break;
            }
        }
        if best.0 == usize::MAX {
            // empty neighborhood: brute force
            for t in 0..mesh.triangles.len() {
                let b = Self::bary(mesh, t, p);
                let margin = b[0].min(b[1]).min(b[2]);
                if margin > best.1 {
                    best = (t, margin, b[1], b[2]);
                }
            }
        }
        (best.0, best.2, best.3)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh_fem::mesh::{generate_channel_mesh, generate_rectangle_mesh};
    use crate::mesh_fem::ChannelGeometry;

    #[test]
    fn shape_functions_partition_of_unity_and_kronecker() {
        let nodes_ref = [
            [0.0, 0.0],
            [1.0, 0.0],
            [0.0, 1.0],
            [0.5, 0.5],
            [0.0, 0.5],
            [0.5, 0.0],
        ];
        for (i, &[x, y]) in nodes_ref.iter().enumerate() {
            let s = p2_shape(x, y);
            for (j, &v) in s.iter().enumerate() {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((v - expect).abs() < 1e-14, "N_{j}({x},{y})");
            }
        }
        let s = p2_shape(0.21, 0.37);
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        let p = p1_shape(0.21, 0.37);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (x, y) = (0.23, 0.31);
        let eps = 1e-6;
        let g = p2_grad(x, y);
        for j in 0..6 {
            let dx = (p2_shape(x + eps, y)[j] - p2_shape(x - eps, y)[j]) / (2.0 * eps);
            let dy = (p2_shape(x, y + eps)[j] - p2_shape(x, y - eps)[j]) / (2.0 * eps);
            assert!((g[j][0] - dx).abs() < 1e-8);
            assert!((g[j][1] - dy).abs() < 1e-8);
        }
    }

    #[test]
    fn dof_counts_pressure_below_velocity() {
        let mesh = generate_rectangle_mesh(1.0, 1.0, 4, 4).unwrap();
        let space = FemSpace::build(&mesh);
        assert!(space.n_pressure() < space.n_scalar());
        // Euler relation check: vertices + edges
        assert_eq!(space.n_scalar(), mesh.nodes.len() + 56);
    }

    #[test]
    fn every_nonoutlet_boundary_node_in_exactly_one_mask() {
        let mesh = generate_channel_mesh(&ChannelGeometry::default(), 0.05, 2.0).unwrap();
        let space = FemSpace::build(&mesh);
        let masks: Vec<Vec<bool>> = [
            BoundaryTag::Inlet,
            BoundaryTag::Top,
            BoundaryTag::Bottom,
            BoundaryTag::Cylinder,
        ]
        .iter()
        .map(|&t| space.dirichlet_mask(t))
        .collect();
        for i in 0..space.n_scalar() {
            let count = masks.iter().filter(|m| m[i]).count();
            if space.is_dirichlet_node(i) {
                assert_eq!(count, 1, "node {i}");
            } else {
                assert_eq!(count, 0, "node {i}");
            }
        }
    }

    #[test]
    fn interpolation_exact_for_quadratics() {
        let mesh = generate_rectangle_mesh(1.2, 0.5, 6, 3).unwrap();
        let space = FemSpace::build(&mesh);
        let h = 0.5;
        let u = space.interpolate(|_x, y| (y * (h - y), 0.0));
        let err = space.l2_error(&mesh, &u, |_x, y| (y * (h - y), 0.0));
        assert!(err < 1e-13, "quadratic interpolation error {err}");
    }

    #[test]
    fn interpolation_convergence_order() {
        let f = |x: f64, y: f64| {
            ((std::f64::consts::PI * x).sin() * (std::f64::consts::PI * y).sin(), 0.0)
        };
        let mut errs = Vec::new();
        for n in [4usize, 8, 16] {
            let mesh = generate_rectangle_mesh(1.0, 1.0, n, n).unwrap();
            let space = FemSpace::build(&mesh);
            let u = space.interpolate(f);
            errs.push(space.l2_error(&mesh, &u, f));
        }
        let o1 = (errs[0] / errs[1]).log2();
        let o2 = (errs[1] / errs[2]).log2();
        assert!(o1 >= 2.5 && o2 >= 2.5, "orders {o1} {o2}");
    }

    #[test]
    fn locator_finds_containing_triangle() {
        let mesh = generate_channel_mesh(&ChannelGeometry::default(), 0.05, 2.0).unwrap();
        let loc = TriLocator::build(&mesh);
        let space = FemSpace::build(&mesh);
        let field = space.interpolate(|x, y| (x + 2.0 * y, x * y));
        for &p in [[0.6, 0.3], [0.1, 0.05], [1.15, 0.45], [0.2, 0.31]].iter() {
            let (t, xr, yr) = loc.locate(&mesh, p);
            assert!(t < mesh.triangles.len());
            let ux = space.eval_component(&field, 0, t, xr, yr);
            let uy = space.eval_component(&field, 1, t, xr, yr);
            assert!((ux - (p[0] + 2.0 * p[1])).abs() < 1e-10, "at {p:?}");
            // x*y is quadratic, P2 exact
            assert!((uy - p[0] * p[1]).abs() < 1e-10);
        }
    }
}
