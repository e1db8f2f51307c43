//! Assembly of the Taylor-Hood operators: velocity mass, viscous
//! stiffness, divergence, convection, and the cylinder force functional.

use super::mesh::{BoundaryTag, Mesh};
use super::quadrature::{edge_rule, triangle_rule};
use super::space::{p1_shape, p2_grad, p2_shape, ElementGeom, FemSpace};
use super::MeshError;
use crate::linalg::{CsrMatrix, Triplets};

/// Immutable operator bundle for one mesh/space pair.
#[derive(Debug)]
pub struct AssembledOperators {
    /// Velocity mass, both components (block diagonal).
    pub m: CsrMatrix,
    /// Scalar one-component mass (used for spatial inner products).
    pub mass_scalar: CsrMatrix,
    /// Viscous stiffness scaled by 1/Re, both components.
    pub a: CsrMatrix,
    /// Divergence: pressure-test rows by velocity columns.
    pub b: CsrMatrix,
    pub re: f64,
}

/// Drag/lift force and coefficient sample.
#[derive(Debug, Clone, Copy)]
pub struct ForceSample {
    pub fd: f64,
    pub fl: f64,
    pub cd: f64,
    pub cl: f64,
}

pub fn assemble_operators(
    mesh: &Mesh,
    space: &FemSpace,
    re: f64,
) -> Result<AssembledOperators, MeshError> {
    if !(re > 0.0) {
        return Err(MeshError::RejectedInput(format!("Reynolds number {re} must be positive")));
    }
    let ns = space.n_scalar();
    let np = space.n_pressure();
    let mut tm = Triplets::new(ns, ns);
    let mut tk = Triplets::new(ns, ns);
    let mut tb = Triplets::new(np, 2 * ns);
    let rule5 = triangle_rule(5);
    let rule3 = triangle_rule(3);
    for t in 0..mesh.triangles.len() {
        let geom = ElementGeom::of(mesh, t);
        if geom.det <= 0.0 {
            return Err(MeshError::DegenerateTriangle(t, 0.5 * geom.det));
        }
        let dofs = space.tri_dofs[t];
        let verts = mesh.triangles[t];
        let mut m_loc = [[0.0f64; 6]; 6];
        for &([xr, yr], w) in rule5 {
            let shape = p2_shape(xr, yr);
            let c = w * geom.det;
            for i in 0..6 {
                for j in 0..6 {
                    m_loc[i][j] += c * shape[i] * shape[j];
                }
            }
        }
        let mut k_loc = [[0.0f64; 6]; 6];
        let mut b_loc = [[[0.0f64; 2]; 6]; 3];
        for &([xr, yr], w) in rule3 {
            let gref = p2_grad(xr, yr);
            let mut g = [[0.0; 2]; 6];
            for j in 0..6 {
                g[j] = geom.grad_physical(gref[j]);
            }
            let p1 = p1_shape(xr, yr);
            let c = w * geom.det;
            for i in 0..6 {
                for j in 0..6 {
                    k_loc[i][j] += c * (g[i][0] * g[j][0] + g[i][1] * g[j][1]);
                }
            }
            for q in 0..3 {
                for j in 0..6 {
                    b_loc[q][j][0] += c * p1[q] * g[j][0];
                    b_loc[q][j][1] += c * p1[q] * g[j][1];
                }
            }
        }
        for i in 0..6 {
            for j in 0..6 {
                tm.push(dofs[i], dofs[j], m_loc[i][j]);
                tk.push(dofs[i], dofs[j], k_loc[i][j]);
            }
        }
        for q in 0..3 {
            for j in 0..6 {
                tb.push(verts[q], space.ux_dof(dofs[j]), b_loc[q][j][0]);
                tb.push(verts[q], space.uy_dof(dofs[j]), b_loc[q][j][1]);
            }
        }
    }
    let mass_scalar = tm.to_csr();
    let stiff_scalar = tk.to_csr();
    let m = block_diag(&mass_scalar, 1.0);
    let mut a = block_diag(&stiff_scalar, 1.0);
    a.scale(1.0 / re);
    Ok(AssembledOperators { m, mass_scalar, a, b: tb.to_csr(), re })
}

/// Duplicate a scalar operator onto both velocity components.
fn block_diag(s: &CsrMatrix, factor: f64) -> CsrMatrix {
    let n = s.nrows();
    let mut t = Triplets::new(2 * n, 2 * n);
    for r in 0..n {
        for (c, v) in s.row_entries(r) {
            t.push(r, c, factor * v);
            t.push(n + r, n + c, factor * v);
        }
    }
    t.to_csr()
}

/// Block duplication that preserves explicit zeros.
fn block_diag_full(s: &CsrMatrix) -> CsrMatrix {
    let n = s.nrows();
    let mut t = Triplets::new(2 * n, 2 * n);
    for r in 0..n {
        for (c, v) in s.row_entries(r) {
            t.push_always(r, c, v);
            t.push_always(n + r, n + c, v);
        }
    }
    t.to_csr()
}

/// Convection operator N(w) with (N(w) u, v) = integral of ((w.grad) u) . v.
/// Block diagonal: the same scalar transport block acts on each component.
pub fn assemble_convection(
    mesh: &Mesh,
    space: &FemSpace,
    w: &[f64],
) -> Result<CsrMatrix, MeshError> {
    assemble_convection_impl(mesh, space, w, false)
}

/// Same operator but with every element entry stored even when zero, so
/// repeated assemblies share one sparsity pattern.
pub fn assemble_convection_full(
    mesh: &Mesh,
    space: &FemSpace,
    w: &[f64],
) -> Result<CsrMatrix, MeshError> {
    assemble_convection_impl(mesh, space, w, true)
}

fn assemble_convection_impl(
    mesh: &Mesh,
    space: &FemSpace,
    w: &[f64],
    keep_zeros: bool,
) -> Result<CsrMatrix, MeshError> {
    if w.len() != space.n_velocity() {
        return Err(MeshError::RejectedInput(format!(
            "velocity field has {} dofs, space has {}",
            w.len(),
            space.n_velocity()
        )));
    }
    let ns = space.n_scalar();
    let mut tn = Triplets::new(ns, ns);
    let rule = triangle_rule(5);
    for t in 0..mesh.triangles.len() {
        let geom = ElementGeom::of(mesh, t);
        let dofs = space.tri_dofs[t];
        let mut n_loc = [[0.0f64; 6]; 6];
        for &([xr, yr], wq) in rule {
            let shape = p2_shape(xr, yr);
            let gref = p2_grad(xr, yr);
            let mut g = [[0.0; 2]; 6];
            for j in 0..6 {
                g[j] = geom.grad_physical(gref[j]);
            }
            let mut wx = 0.0;
            let mut wy = 0.0;
            for (k, &d) in dofs.iter().enumerate() {
                wx += w[space.ux_dof(d)] * shape[k];
                wy += w[space.uy_dof(d)] * shape[k];
            }
            let c = wq * geom.det;
            for i in 0..6 {
                for j in 0..6 {
                    n_loc[i][j] += c * shape[i] * (wx * g[j][0] + wy * g[j][1]);
                }
            }
        }
        for i in 0..6 {
            for j in 0..6 {
                if keep_zeros {
                    tn.push_always(dofs[i], dofs[j], n_loc[i][j]);
                } else {
                    tn.push(dofs[i], dofs[j], n_loc[i][j]);
                }
            }
        }
    }
    if keep_zeros {
        Ok(block_diag_full(&tn.to_csr()))
    } else {
        Ok(block_diag(&tn.to_csr(), 1.0))
    }
}

/// Cylinder force by boundary quadrature of p n - (1/Re) du/dn, with the
/// normal oriented away from the fluid (into the cylinder).
pub fn compute_forces(
    mesh: &Mesh,
    space: &FemSpace,
    u: &[f64],
    p: &[f64],
    re: f64,
) -> Result<ForceSample, MeshError> {
    use std::collections::HashMap;
    if u.len() != space.n_velocity() || p.len() != space.n_pressure() {
        return Err(MeshError::RejectedInput("state layout does not match space".into()));
    }
    // owning triangle and local edge for each boundary edge
    let mut owner: HashMap<(usize, usize), (usize, usize)> = HashMap::new();
    for (t, tri) in mesh.triangles.iter().enumerate() {
        for k in 0..3 {
            let (a, b) = (tri[(k + 1) % 3], tri[(k + 2) % 3]);
            owner.insert((a.min(b), a.max(b)), (t, k));
        }
    }
    let mut fd = 0.0;
    let mut fl = 0.0;
    let mut found = false;
    // reference vertex coordinates
    let vref = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
    for &(eu, ev, tag) in &mesh.boundary_edges {
        if tag != BoundaryTag::Cylinder {
            continue;
        }
        found = true;
        let (t, k) = *owner
            .get(&(eu.min(ev), eu.max(ev)))
            .ok_or_else(|| MeshError::Configuration("cylinder edge without triangle".into()))?;
        let tri = mesh.triangles[t];
        let (la, lb) = ((k + 1) % 3, (k + 2) % 3);
        let (pa, pb) = (mesh.nodes[tri[la]], mesh.nodes[tri[lb]]);
        let ex = pb[0] - pa[0];
        let ey = pb[1] - pa[1];
        let len = (ex * ex + ey * ey).sqrt();
        let mut nx = ey / len;
        let mut ny = -ex / len;
        // orient away from the triangle interior
        let centroid = [
            (mesh.nodes[tri[0]][0] + mesh.nodes[tri[1]][0] + mesh.nodes[tri[2]][0]) / 3.0,
            (mesh.nodes[tri[0]][1] + mesh.nodes[tri[1]][1] + mesh.nodes[tri[2]][1]) / 3.0,
        ];
        let mid = [0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])];
        if nx * (centroid[0] - mid[0]) + ny * (centroid[1] - mid[1]) > 0.0 {
            nx = -nx;
            ny = -ny;
        }
        let geom = ElementGeom::of(mesh, t);
        let dofs = space.tri_dofs[t];
        for &(s, wq) in edge_rule().iter() {
            let xr = vref[la][0] + s * (vref[lb][0] - vref[la][0]);
            let yr = vref[la][1] + s * (vref[lb][1] - vref[la][1]);
            let p1 = p1_shape(xr, yr);
            let pval: f64 = (0..3).map(|q| p[tri[q]] * p1[q]).sum();
            let gref = p2_grad(xr, yr);
            // velocity gradient rows: d(u_c)/dx, d(u_c)/dy
            let mut du = [[0.0f64; 2]; 2];
            for (j, &d) in dofs.iter().enumerate() {
                let g = geom.grad_physical(gref[j]);
                du[0][0] += u[space.ux_dof(d)] * g[0];
                du[0][1] += u[space.ux_dof(d)] * g[1];
                du[1][0] += u[space.uy_dof(d)] * g[0];
                du[1][1] += u[space.uy_dof(d)] * g[1];
            }
            let dudn = [du[0][0] * nx + du[0][1] * ny, du[1][0] * nx + du[1][1] * ny];
            let c = wq * len;
            fd += c * (pval * nx - dudn[0] / re);
            fl += c * (pval * ny - dudn[1] / re);
        }
    }
    if !found {
        return Err(MeshError::Configuration("mesh has no cylinder boundary edges".into()));
    }
    Ok(ForceSample { fd, fl, cd: 2.0 * fd, cl: 2.0 * fl })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh_fem::mesh::{generate_channel_mesh, generate_rectangle_mesh};
    use crate::mesh_fem::ChannelGeometry;

    fn rect_setup(nx: usize, ny: usize) -> (Mesh, FemSpace, AssembledOperators) {
        let mesh = generate_rectangle_mesh(1.2, 0.5, nx, ny).unwrap();
        let space = FemSpace::build(&mesh);
        let ops = assemble_operators(&mesh, &space, 100.0).unwrap();
        (mesh, space, ops)
    }

    #[test]
    fn mass_matrix_symmetric_and_total() {
        let (mesh, space, ops) = rect_setup(8, 4);
        let n = space.n_velocity();
        let mut max_asym: f64 = 0.0;
        let mut total = 0.0;
        for r in 0..n {
            for (c, v) in ops.m.row_entries(r) {
                max_asym = max_asym.max((v - ops.m.get(c, r)).abs());
                total += v;
            }
        }
        assert!(max_asym < 1e-13);
        assert!((total - 2.0 * mesh.area()).abs() < 1e-12, "total {total}");
    }

    #[test]
    fn mass_matrix_positive_definite_sample() {
        let (_, space, ops) = rect_setup(5, 3);
        let n = space.n_velocity();
        for seed in 0..5u64 {
            let x: Vec<f64> =
                (0..n).map(|i| ((i as f64 + seed as f64 * 0.7).sin()) + 0.1).collect();
            assert!(ops.m.bilinear(&x, &x) > 0.0);
        }
    }

    #[test]
    fn stiffness_vanishes_on_constants() {
        let (_, space, ops) = rect_setup(6, 3);
        let w = space.interpolate(|_, _| (3.0, -2.0));
        let q = ops.a.bilinear(&w, &w);
        assert!(q.abs() < 1e-12, "quadratic form {q}");
    }

    #[test]
    fn divergence_free_poiseuille_in_kernel() {
        let (_, space, ops) = rect_setup(8, 4);
        let h = 0.5;
        let u = space.interpolate(|_x, y| (y * (h - y), 0.0));
        let mut bu = vec![0.0; ops.b.nrows()];
        ops.b.matvec(&u, &mut bu);
        let norm_bu: f64 = bu.iter().map(|v| v * v).sum::<f64>().sqrt();
        let norm_u: f64 = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm_bu / norm_u < 1e-13, "relative divergence {}", norm_bu / norm_u);
    }

    #[test]
    fn convection_zero_field_and_constants() {
        let (mesh, space, _) = rect_setup(5, 3);
        let zero = vec![0.0; space.n_velocity()];
        let n0 = assemble_convection(&mesh, &space, &zero).unwrap();
        assert_eq!(n0.nnz(), 0);
        let w = space.interpolate(|_, _| (1.0, 2.0));
        let u = space.interpolate(|_, _| (4.0, -1.0));
        let nw = assemble_convection(&mesh, &space, &w).unwrap();
        let mut out = vec![0.0; space.n_velocity()];
        nw.matvec(&u, &mut out);
        // rows of interior test functions must vanish (gradient of constant)
        let norm: f64 = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 1e-12, "constant transport norm {norm}");
    }

    #[test]
    fn convection_poiseuille_self_transport_vanishes() {
        let (mesh, space, _) = rect_setup(8, 4);
        let h = 0.5;
        let u = space.interpolate(|_x, y| (y * (h - y), 0.0));
        let nw = assemble_convection(&mesh, &space, &u).unwrap();
        // (u.grad)u = u_x d/dx (profile of y only) = 0
        let c = nw.bilinear(&u, &u);
        assert!(c.abs() < 1e-12, "c(u,u,u) = {c}");
    }

    #[test]
    fn convection_matches_analytic_integral() {
        let (l, h): (f64, f64) = (1.2, 0.5);
        let (mesh, space, _) = rect_setup(8, 4);
        let w = space.interpolate(|x, y| (y, x));
        let u = space.interpolate(|x, y| (x * x, y * y));
        let nw = assemble_convection(&mesh, &space, &w).unwrap();
        // integral of ((w.grad)u).u = L^4 H^2 / 4 + L^2 H^4 / 4
        let expect = l.powi(4) * h * h / 4.0 + l * l * h.powi(4) / 4.0;
        let got = nw.bilinear(&u, &u);
        assert!((got - expect).abs() < 1e-10, "{got} vs {expect}");
    }

    #[test]
    fn skew_symmetry_for_divergence_free_transport() {
        let (l, h) = (1.2, 0.5);
        let (mesh, space, _) = rect_setup(6, 4);
        let w = space.interpolate(|_x, y| (y * (h - y), 0.0));
        // boundary-zero fields (quartic bubbles, P2-interpolated)
        let u = space.interpolate(|x, y| {
            let b = x * (l - x) * y * (h - y);
            (b, 2.0 * b)
        });
        let v = space.interpolate(|x, y| {
            let b = x * (l - x) * y * (h - y);
            (-b, b * (1.0 + x))
        });
        let nw = assemble_convection(&mesh, &space, &w).unwrap();
        let s = nw.bilinear(&v, &u) + nw.bilinear(&u, &v);
        let scale: f64 = [&u, &v, &w]
            .iter()
            .map(|f| f.iter().map(|x| x * x).sum::<f64>().sqrt())
            .product();
        assert!(s.abs() <= 1e-12 * scale.max(1.0), "skew defect {s}");
    }

    #[test]
    fn forces_constant_pressure_closed_curve() {
        let geom = ChannelGeometry::default();
        let mesh = generate_channel_mesh(&geom, 0.05, 2.0).unwrap();
        let space = FemSpace::build(&mesh);
        let u = vec![0.0; space.n_velocity()];
        let p = vec![1.0; space.n_pressure()];
        let f = compute_forces(&mesh, &space, &u, &p, 200.0).unwrap();
        let bound = 1e-8 * std::f64::consts::PI * geom.cylinder_diameter;
        assert!(f.fd.abs() < bound && f.fl.abs() < bound, "{f:?}");
    }

    #[test]
    fn forces_linear_pressure_gives_signed_hole_area() {
        // p = x, u = 0: the integral of p n over the closed polygon with the
        // normal pointing into the hole equals minus the hole area in x
        let geom = ChannelGeometry::default();
        let mesh = generate_channel_mesh(&geom, 0.04, 2.0).unwrap();
        let space = FemSpace::build(&mesh);
        let u = vec![0.0; space.n_velocity()];
        let p: Vec<f64> = mesh.nodes.iter().map(|n| n[0]).collect();
        let f = compute_forces(&mesh, &space, &u, &p, 200.0).unwrap();
        let hole = std::f64::consts::PI * geom.radius().powi(2);
        assert!((f.fd + hole).abs() < 0.05 * hole, "fd {} vs {}", f.fd, -hole);
        assert!(f.fl.abs() < 1e-10);
    }

    #[test]
    fn forces_require_cylinder_edges() {
        let mesh = generate_rectangle_mesh(1.0, 0.5, 4, 2).unwrap();
        let space = FemSpace::build(&mesh);
        let u = vec![0.0; space.n_velocity()];
        let p = vec![0.0; space.n_pressure()];
        assert!(matches!(
            compute_forces(&mesh, &space, &u, &p, 100.0),
            Err(MeshError::Configuration(_))
        ));
    }

    #[test]
    fn degenerate_triangle_reported_by_index() {
        let mut mesh = generate_rectangle_mesh(1.0, 0.5, 3, 2).unwrap();
        // collapse one triangle
        let [a, b, _c] = mesh.triangles[4];
        mesh.nodes[mesh.triangles[4][2]] = [
            0.5 * (mesh.nodes[a][0] + mesh.nodes[b][0]),
            0.5 * (mesh.nodes[a][1] + mesh.nodes[b][1]),
        ];
        let space = FemSpace::build(&mesh);
        match assemble_operators(&mesh, &space, 10.0) {
            Err(MeshError::DegenerateTriangle(_t, _)) => {}
            other => panic!("expected degenerate triangle error, got {other:?}"),
        }
    }
}
