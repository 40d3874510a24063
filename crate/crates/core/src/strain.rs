//! Green–Lagrange strain per triangle, von Mises equivalent strain at
//! anchors, and the strain-continuity penalty `f_S` with its gradient.

use std::io::Write;
use std::path::Path;

use log::warn;

use crate::error::{Error, Result};
use crate::geometry::{
    edge_matrix, edge_matrix_inverse, mat_mul, signed_area, Point2, SimplicialMesh, TriangleLocator, DEGENERATE_AREA,
};
use crate::trajectory::TrajectoryField;

/// Per-triangle equivalent strain is clamped here.
pub const STRAIN_CAP: f64 = 10.0;
pub const STRAIN_CSV_HEADER: &str = "anchor,t,S";

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GreenStrain {
    pub exx: f64,
    pub eyy: f64,
    pub exy: f64,
}

/// `E = ½ (FᵀF − I)`.
pub fn green_strain(f: &[[f64; 2]; 2]) -> GreenStrain {
    GreenStrain {
        exx: 0.5 * (f[0][0] * f[0][0] + f[1][0] * f[1][0] - 1.0),
        eyy: 0.5 * (f[0][1] * f[0][1] + f[1][1] * f[1][1] - 1.0),
        exy: 0.5 * (f[0][0] * f[0][1] + f[1][0] * f[1][1]),
    }
}

pub fn von_mises(e: GreenStrain) -> f64 {
    vm_squared(e).max(0.0).sqrt()
}

#[inline]
fn vm_squared(e: GreenStrain) -> f64 {
    e.exx * e.exx - e.exx * e.eyy + e.eyy * e.eyy + 3.0 * e.exy * e.exy
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrainField {
    /// Von Mises strain `S_i` per anchor.
    pub anchor: Vec<f64>,
    pub triangle: Vec<GreenStrain>,
    /// Equivalent strain per triangle after capping.
    pub triangle_vm: Vec<f64>,
    /// Triangles whose strain hit [`STRAIN_CAP`] or whose deformed image
    /// collapsed or flipped.
    pub capped: Vec<usize>,
}

/// Deformation gradient of one triangle, or `None` when the deformed
/// triangle is degenerate or inverted.
fn deformation_gradient(mesh: &SimplicialMesh, positions: &[Point2], tri: usize) -> Option<[[f64; 2]; 2]> {
    let [i, j, k] = mesh.triangles[tri].0;
    let deformed = [positions[i], positions[j], positions[k]];
    if !(signed_area(&deformed) > DEGENERATE_AREA) {
        return None;
    }
    let rest = mesh.rest_vertices(tri);
    Some(mat_mul(&edge_matrix(&deformed), &edge_matrix_inverse(&rest)))
}

/// Strain for anchors at the given current positions (one per anchor).
pub fn strain_from_positions(mesh: &SimplicialMesh, positions: &[Point2]) -> StrainField {
    let nt = mesh.num_triangles();
    let mut triangle = Vec::with_capacity(nt);
    let mut triangle_vm = Vec::with_capacity(nt);
    let mut capped = Vec::new();
    for t in 0..nt {
        match deformation_gradient(mesh, positions, t) {
            Some(f) => {
                let e = green_strain(&f);
                let vm = von_mises(e);
                if !(vm <= STRAIN_CAP) {
                    capped.push(t);
                }
                triangle.push(e);
                triangle_vm.push(if vm.is_finite() { vm.min(STRAIN_CAP) } else { STRAIN_CAP });
            }
            None => {
                capped.push(t);
                triangle.push(GreenStrain::default());
                triangle_vm.push(STRAIN_CAP);
            }
        }
    }
    if !capped.is_empty() {
        warn!("strain capped at {STRAIN_CAP} on {} triangle(s)", capped.len());
    }
    let mut num = vec![0.0; mesh.num_anchors()];
    let mut den = vec![0.0; mesh.num_anchors()];
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let area = mesh.rest_area(t);
        for &a in &tri.0 {
            num[a] += area * triangle_vm[t];
            den[a] += area;
        }
    }
    let anchor = num
        .iter()
        .zip(&den)
        .map(|(n, d)| if *d > 0.0 { n / d } else { 0.0 })
        .collect();
    StrainField {
        anchor,
        triangle,
        triangle_vm,
        capped,
    }
}

pub fn anchor_strain(tf: &TrajectoryField, t: f64) -> Result<StrainField> {
    Ok(strain_from_positions(tf.mesh(), &tf.positions_at(t)?))
}

/// Mean of `(S_i − S_j)²` over unique mesh edges.
pub fn continuity_of(mesh: &SimplicialMesh, strain: &[f64]) -> f64 {
    let edges = mesh.edges();
    if edges.is_empty() {
        return 0.0;
    }
    edges.iter().map(|&(i, j)| (strain[i] - strain[j]).powi(2)).sum::<f64>() / edges.len() as f64
}

pub fn strain_continuity(tf: &TrajectoryField, t: f64) -> Result<f64> {
    let s = anchor_strain(tf, t)?;
    Ok(continuity_of(tf.mesh(), &s.anchor))
}

/// `f_S` at the given positions; adds `scale · ∂f_S/∂position` into `grad`.
/// Capped triangles contribute no gradient.
pub fn continuity_with_gradient(mesh: &SimplicialMesh, positions: &[Point2], grad: &mut [Point2], scale: f64) -> f64 {
    let field = strain_from_positions(mesh, positions);
    let s = &field.anchor;
    let edges = mesh.edges();
    if edges.is_empty() {
        return 0.0;
    }
    let inv_e = 1.0 / edges.len() as f64;
    let mut value = 0.0;
    let mut d_s = vec![0.0; mesh.num_anchors()];
    for &(i, j) in &edges {
        let d = s[i] - s[j];
        value += d * d;
        d_s[i] += 2.0 * d * inv_e;
        d_s[j] -= 2.0 * d * inv_e;
    }
    value *= inv_e;

    let mut weight_sum = vec![0.0; mesh.num_anchors()];
    for (t, tri) in mesh.triangles.iter().enumerate() {
        for &a in &tri.0 {
            weight_sum[a] += mesh.rest_area(t);
        }
    }
    for (t, tri) in mesh.triangles.iter().enumerate() {
        if field.capped.binary_search(&t).is_ok() {
            continue;
        }
        let vm = field.triangle_vm[t];
        if vm <= 0.0 {
            continue;
        }
        let area = mesh.rest_area(t);
        let d_vm: f64 = tri.0.iter().map(|&a| d_s[a] * area / weight_sum[a]).sum::<f64>() * scale;
        if d_vm == 0.0 {
            continue;
        }
        let e = field.triangle[t];
        let k = d_vm / (2.0 * vm);
        let g11 = k * (2.0 * e.exx - e.eyy);
        let g22 = k * (2.0 * e.eyy - e.exx);
        let g12 = k * 6.0 * e.exy;
        let f = deformation_gradient(mesh, positions, t).expect("uncapped triangle has a gradient");
        let gm = [[g11, 0.5 * g12], [0.5 * g12, g22]];
        let g_f = mat_mul(&f, &gm);
        let rinv = edge_matrix_inverse(&mesh.rest_vertices(t));
        let rinv_t = [[rinv[0][0], rinv[1][0]], [rinv[0][1], rinv[1][1]]];
        let g_d = mat_mul(&g_f, &rinv_t);
        let c0 = Point2::new(g_d[0][0], g_d[1][0]);
        let c1 = Point2::new(g_d[0][1], g_d[1][1]);
        let [v1, v2, v3] = tri.0;
        grad[v2] += c0;
        grad[v3] += c1;
        grad[v1] -= c0 + c1;
    }
    value
}

pub fn write_strain_csv(out: &mut impl Write, t: f64, field: &StrainField) -> std::io::Result<()> {
    for (a, s) in field.anchor.iter().enumerate() {
        writeln!(out, "{a},{t},{s}")?;
    }
    Ok(())
}

/// Reads `anchor,t,S` rows grouped by time, in file order.
pub fn read_strain_csv(path: &Path) -> Result<Vec<(f64, Vec<f64>)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(STRAIN_CSV_HEADER) {
        return Err(Error::parse(path, format!("expected header `{STRAIN_CSV_HEADER}`")));
    }
    let mut out: Vec<(f64, Vec<f64>)> = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::parse(path, format!("line {}: malformed row `{line}`", n + 2));
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 3 {
            return Err(bad());
        }
        let anchor: usize = f[0].parse().map_err(|_| bad())?;
        let t: f64 = f[1].parse().map_err(|_| bad())?;
        let s: f64 = f[2].parse().map_err(|_| bad())?;
        match out.last_mut() {
            Some((tt, v)) if *tt == t && anchor == v.len() => v.push(s),
            _ if anchor == 0 => out.push((t, vec![s])),
            _ => return Err(bad()),
        }
    }
    Ok(out)
}

/// Rasterizes anchor strain over the deformed mesh by barycentric
/// interpolation; pixels outside the mesh are 0.
pub fn strain_heat_map(
    mesh: &SimplicialMesh,
    positions: &[Point2],
    strain: &[f64],
    width: usize,
    height: usize,
) -> Vec<f64> {
    let locator = TriangleLocator::new(&mesh.triangles, positions);
    let mut out = vec![0.0; width * height];
    for y in 0..height {
        for x in 0..width {
            if let Some((t, w)) = locator.locate(Point2::new(x as f64, y as f64)) {
                let [i, j, k] = mesh.triangles[t].0;
                let w = w.weights();
                out[y * width + x] = w[0] * strain[i] + w[1] * strain[j] + w[2] * strain[k];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Roi;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn grid_mesh() -> SimplicialMesh {
        SimplicialMesh::grid(Roi::new(0.0, 0.0, 20.0, 20.0).unwrap(), 2, 2).unwrap()
    }

    fn mapped(mesh: &SimplicialMesh, f: impl Fn(Point2) -> Point2) -> Vec<Point2> {
        mesh.anchors.iter().map(|&p| f(p)).collect()
    }

    #[test]
    fn green_strain_examples() {
        assert_eq!(green_strain(&[[1.0, 0.0], [0.0, 1.0]]), GreenStrain::default());
        let (s, c) = 30f64.to_radians().sin_cos();
        let e = green_strain(&[[c, -s], [s, c]]);
        assert_abs_diff_eq!(e.exx, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(e.eyy, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(e.exy, 0.0, epsilon = 1e-15);
        let e = green_strain(&[[1.1, 0.0], [0.0, 1.0]]);
        assert_abs_diff_eq!(e.exx, 0.5 * (1.1f64 * 1.1 - 1.0), epsilon = 1e-15);
        assert_eq!((e.eyy, e.exy), (0.0, 0.0));
    }

    #[test]
    fn von_mises_examples() {
        assert_eq!(von_mises(GreenStrain::default()), 0.0);
        for s in [-0.3, 0.2, 1.5] {
            assert_abs_diff_eq!(
                von_mises(GreenStrain {
                    exx: s,
                    eyy: s,
                    exy: 0.0
                }),
                s.abs(),
                epsilon = 1e-15
            );
        }
        assert_abs_diff_eq!(
            von_mises(GreenStrain {
                exx: 0.105,
                eyy: 0.0,
                exy: 0.0
            }),
            0.105,
            epsilon = 1e-12
        );
    }

    #[test]
    fn rigid_and_uniform_fields() {
        let mesh = grid_mesh();
        let moved = mapped(&mesh, |p| {
            p.rotate_about(Point2::new(3.0, 7.0), 0.4) + Point2::new(5.0, -2.0)
        });
        let f = strain_from_positions(&mesh, &moved);
        assert!(f.anchor.iter().all(|&s| s.abs() < 1e-12));
        let stretched = mapped(&mesh, |p| Point2::new(1.1 * p.x, p.y));
        let f = strain_from_positions(&mesh, &stretched);
        let expected = 0.5 * (1.1f64 * 1.1 - 1.0);
        for s in &f.anchor {
            assert_abs_diff_eq!(*s, expected, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(continuity_of(&mesh, &f.anchor), 0.0, epsilon = 1e-20);
    }

    #[test]
    fn single_stretched_triangle_blends_into_neighbors() {
        let mesh = grid_mesh();
        // the bottom-right corner anchor belongs to one triangle only
        let corner = mesh.anchors.iter().position(|&p| p == Point2::new(20.0, 0.0)).unwrap();
        let owners: Vec<usize> = (0..mesh.num_triangles())
            .filter(|&t| mesh.triangles[t].0.contains(&corner))
            .collect();
        assert_eq!(owners.len(), 1);
        let mut pos = mesh.anchors.clone();
        pos[corner] = Point2::new(23.0, -1.0);
        let f = strain_from_positions(&mesh, &pos);
        let vm0 = f.triangle_vm[owners[0]];
        assert!(vm0 > 0.0);
        let incident = mesh.incident_triangles();
        for &a in &mesh.triangles[owners[0]].0 {
            // equal rest areas, so the weight is 1 / #incident
            let expected = vm0 / incident[a].len() as f64;
            assert_abs_diff_eq!(f.anchor[a], expected, epsilon = 1e-12);
            if a != corner {
                assert!(f.anchor[a] > 0.0 && f.anchor[a] < vm0);
            }
        }
    }

    #[test]
    fn continuity_examples() {
        let mesh = SimplicialMesh::new(
            vec![Point2::new(0.0, 0.0), Point2::new(1.0, 0.0), Point2::new(0.0, 1.0)],
            vec![[0, 1, 2]],
        )
        .unwrap();
        // edges (0,1), (0,2), (1,2): S = (0, 1, 1) gives (1 + 1 + 0) / 3
        assert_abs_diff_eq!(continuity_of(&mesh, &[0.0, 1.0, 1.0]), 2.0 / 3.0, epsilon = 1e-15);

        let sub = mesh.subdivide();
        let s: Vec<f64> = (0..sub.num_anchors()).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        // brute force: every pair that co-occurs in some triangle, once
        let mut pairs = std::collections::BTreeSet::new();
        for t in &sub.triangles {
            for a in 0..3 {
                for b in 0..3 {
                    if t.0[a] < t.0[b] {
                        pairs.insert((t.0[a], t.0[b]));
                    }
                }
            }
        }
        let oracle = pairs.iter().map(|&(i, j)| (s[i] - s[j]).powi(2)).sum::<f64>() / pairs.len() as f64;
        assert_abs_diff_eq!(continuity_of(&sub, &s), oracle, epsilon = 1e-15);
        assert_eq!(pairs.len(), 9);
    }

    #[test]
    fn degenerate_triangles_are_capped() {
        let mesh = grid_mesh();
        let mut pos = mesh.anchors.clone();
        let c = mesh.anchors.iter().position(|&p| p == Point2::new(10.0, 10.0)).unwrap();
        pos[c] = Point2::new(30.0, 30.0);
        let f = strain_from_positions(&mesh, &pos);
        assert!(!f.capped.is_empty());
        assert!(f.anchor.iter().all(|&s| (0.0..=STRAIN_CAP).contains(&s)));
    }

    #[test]
    fn moderate_stretch_never_caps() {
        let mesh = grid_mesh().subdivide();
        let pos = mapped(&mesh, |p| Point2::new(1.5 * p.x, p.y + 0.1 * p.x));
        assert!(strain_from_positions(&mesh, &pos).capped.is_empty());
    }

    #[test]
    fn continuity_gradient_matches_finite_differences() {
        let mesh = grid_mesh().subdivide();
        let pos: Vec<Point2> = mesh
            .anchors
            .iter()
            .enumerate()
            .map(|(i, &p)| p + Point2::new((i as f64 * 1.3).sin(), (i as f64 * 0.7).cos()) * 0.8)
            .collect();
        let mut grad = vec![Point2::ZERO; pos.len()];
        continuity_with_gradient(&mesh, &pos, &mut grad, 1.0);
        let h = 1e-6;
        for a in 0..pos.len() {
            for axis in 0..2 {
                let eval = |d: f64| {
                    let mut p = pos.clone();
                    if axis == 0 {
                        p[a].x += d
                    } else {
                        p[a].y += d
                    }
                    continuity_of(&mesh, &strain_from_positions(&mesh, &p).anchor)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = if axis == 0 { grad[a].x } else { grad[a].y };
                assert_abs_diff_eq!(an, fd, epsilon = 1e-7 + 1e-5 * fd.abs());
            }
        }
    }

    #[test]
    fn heat_map_interpolates() {
        let mesh = grid_mesh();
        let s: Vec<f64> = mesh.anchors.iter().map(|p| p.x / 20.0).collect();
        let img = strain_heat_map(&mesh, &mesh.anchors, &s, 24, 24);
        assert_abs_diff_eq!(img[5 * 24 + 5], 0.25, epsilon = 1e-12);
        assert_eq!(img[22 * 24 + 22], 0.0);
    }

    proptest! {
        #[test]
        fn rotation_invariance(theta in -3.1..3.1f64, seed in 0u64..1000) {
            let mesh = grid_mesh();
            let pos: Vec<Point2> = mesh.anchors.iter().enumerate()
                .map(|(i, &p)| p + Point2::new(((i as u64 + seed) as f64).sin(), ((i as u64 * 7 + seed) as f64).cos()))
                .collect();
            let rotated: Vec<Point2> = pos.iter().map(|p| p.rotate_about(Point2::new(4.0, -3.0), theta)).collect();
            let a = strain_from_positions(&mesh, &pos);
            let b = strain_from_positions(&mesh, &rotated);
            for (x, y) in a.anchor.iter().zip(&b.anchor) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            let fs = continuity_of(&mesh, &a.anchor);
            prop_assert!(fs >= 0.0);
        }
    }
}
