//! Planar simplicial primitives: points, triangles, barycentric weights,
//! per-triangle affine maps, and the conforming 1→4 midpoint refinement.

use std::collections::HashMap;
use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};

use crate::error::{Error, Result};

/// Triangles whose |signed area| falls at or below this are degenerate (px²).
pub const DEGENERATE_AREA: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const ZERO: Point2 = Point2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn cross(self, other: Point2) -> f64 {
        self.x * other.y - self.y * other.x
    }

    pub fn dot(self, other: Point2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn midpoint(self, other: Point2) -> Point2 {
        Point2::new(0.5 * (self.x + other.x), 0.5 * (self.y + other.y))
    }

    /// Rotates by `angle` radians about `center`.
    pub fn rotate_about(self, center: Point2, angle: f64) -> Point2 {
        let (s, c) = angle.sin_cos();
        let d = self - center;
        Point2::new(center.x + c * d.x - s * d.y, center.y + s * d.x + c * d.y)
    }
}

impl Add for Point2 {
    type Output = Point2;
    fn add(self, rhs: Point2) -> Point2 {
        Point2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl AddAssign for Point2 {
    fn add_assign(&mut self, rhs: Point2) {
        self.x += rhs.x;
        self.y += rhs.y;
    }
}

impl Sub for Point2 {
    type Output = Point2;
    fn sub(self, rhs: Point2) -> Point2 {
        Point2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl SubAssign for Point2 {
    fn sub_assign(&mut self, rhs: Point2) {
        self.x -= rhs.x;
        self.y -= rhs.y;
    }
}

impl Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, rhs: f64) -> Point2 {
        Point2::new(self.x * rhs, self.y * rhs)
    }
}

impl Neg for Point2 {
    type Output = Point2;
    fn neg(self) -> Point2 {
        Point2::new(-self.x, -self.y)
    }
}

/// Three anchor indices, counter-clockwise once owned by a mesh.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Triangle(pub [usize; 3]);

impl Triangle {
    pub fn vertices(&self) -> [usize; 3] {
        self.0
    }

    pub fn edges(&self) -> [(usize, usize); 3] {
        let [a, b, c] = self.0;
        [(a, b), (b, c), (c, a)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarycentricCoords(pub [f64; 3]);

impl BarycentricCoords {
    pub const CENTROID: BarycentricCoords = BarycentricCoords([1.0 / 3.0; 3]);

    pub fn weights(&self) -> [f64; 3] {
        self.0
    }

    /// `Σ λ_k V_k`.
    pub fn combine(&self, vertices: &[Point2; 3]) -> Point2 {
        let [l1, l2, l3] = self.0;
        Point2::new(
            l1 * vertices[0].x + l2 * vertices[1].x + l3 * vertices[2].x,
            l1 * vertices[0].y + l2 * vertices[1].y + l3 * vertices[2].y,
        )
    }
}

/// `x ↦ A x + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineMap {
    pub a: [[f64; 2]; 2],
    pub b: Point2,
}

impl AffineMap {
    pub const IDENTITY: AffineMap = AffineMap {
        a: [[1.0, 0.0], [0.0, 1.0]],
        b: Point2::ZERO,
    };

    pub fn apply(&self, p: Point2) -> Point2 {
        Point2::new(
            self.a[0][0] * p.x + self.a[0][1] * p.y + self.b.x,
            self.a[1][0] * p.x + self.a[1][1] * p.y + self.b.y,
        )
    }

    pub fn is_finite(&self) -> bool {
        self.a.iter().flatten().all(|v| v.is_finite()) && self.b.is_finite()
    }
}

/// `(b − a) × (p − a)`; positive when `p` lies left of the directed edge a→b.
pub fn signed_side(a: Point2, b: Point2, p: Point2) -> f64 {
    (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x)
}

pub fn signed_area(v: &[Point2; 3]) -> f64 {
    0.5 * signed_side(v[0], v[1], v[2])
}

fn check_non_degenerate(v: &[Point2; 3]) -> Result<f64> {
    let area = signed_area(v);
    if area.abs() <= DEGENERATE_AREA || !area.is_finite() {
        return Err(Error::DegenerateTriangle { area });
    }
    Ok(area)
}

/// Same-side test. Points on an edge (a zero determinant) count as inside.
pub fn point_in_triangle(p: Point2, v: &[Point2; 3]) -> Result<bool> {
    check_non_degenerate(v)?;
    Ok(same_side_unchecked(p, v))
}

#[inline]
pub(crate) fn same_side_unchecked(p: Point2, v: &[Point2; 3]) -> bool {
    let c1 = signed_side(v[0], v[1], p);
    let c2 = signed_side(v[1], v[2], p);
    let c3 = signed_side(v[2], v[0], p);
    (c1 >= 0.0 && c2 >= 0.0 && c3 >= 0.0) || (c1 <= 0.0 && c2 <= 0.0 && c3 <= 0.0)
}

/// Weights with `p = Σ λ_k V_k`, `Σ λ_k = 1`, by Cramer's rule on the
/// edge system `p − V3 = λ1 (V1 − V3) + λ2 (V2 − V3)`.
pub fn barycentric_of(p: Point2, v: &[Point2; 3]) -> Result<BarycentricCoords> {
    check_non_degenerate(v)?;
    Ok(barycentric_unchecked(p, v))
}

#[inline]
pub(crate) fn barycentric_unchecked(p: Point2, v: &[Point2; 3]) -> BarycentricCoords {
    let e1 = v[0] - v[2];
    let e2 = v[1] - v[2];
    let r = p - v[2];
    let det = e1.cross(e2);
    let l1 = r.cross(e2) / det;
    let l2 = e1.cross(r) / det;
    BarycentricCoords([l1, l2, 1.0 - l1 - l2])
}

/// The unique affine map carrying the rest triangle onto the deformed one.
pub fn affine_from_triangles(rest: &[Point2; 3], deformed: &[Point2; 3]) -> Result<AffineMap> {
    check_non_degenerate(rest)?;
    let inv = edge_matrix_inverse(rest);
    let d = edge_matrix(deformed);
    let a = mat_mul(&d, &inv);
    let b = Point2::new(
        deformed[0].x - (a[0][0] * rest[0].x + a[0][1] * rest[0].y),
        deformed[0].y - (a[1][0] * rest[0].x + a[1][1] * rest[0].y),
    );
    Ok(AffineMap { a, b })
}

/// Columns `V2 − V1`, `V3 − V1`.
pub(crate) fn edge_matrix(v: &[Point2; 3]) -> [[f64; 2]; 2] {
    let e1 = v[1] - v[0];
    let e2 = v[2] - v[0];
    [[e1.x, e2.x], [e1.y, e2.y]]
}

pub(crate) fn edge_matrix_inverse(v: &[Point2; 3]) -> [[f64; 2]; 2] {
    let m = edge_matrix(v);
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]]
}

pub(crate) fn mat_mul(a: &[[f64; 2]; 2], b: &[[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let mut out = [[0.0; 2]; 2];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    out
}

/// Axis-aligned rectangle in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Roi {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Roi {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        if !(x1 > x0 && y1 > y0) || ![x0, y0, x1, y1].iter().all(|v| v.is_finite()) {
            return Err(Error::Config(format!("roi ({x0}, {y0})-({x1}, {y1}) is empty")));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    /// Image bounds shrunk by `margin` on every side.
    pub fn inset(width: usize, height: usize, margin: f64) -> Result<Self> {
        Self::new(
            margin,
            margin,
            width as f64 - 1.0 - margin,
            height as f64 - 1.0 - margin,
        )
    }

    pub fn contains(&self, p: Point2) -> bool {
        p.x >= self.x0 && p.x <= self.x1 && p.y >= self.y0 && p.y <= self.y1
    }

    pub fn center(&self) -> Point2 {
        Point2::new(0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))
    }

    /// Row-major grid of points with the given spacing, starting at the
    /// top-left corner.
    pub fn grid_points(&self, spacing: f64) -> Vec<Point2> {
        let nx = ((self.x1 - self.x0) / spacing + 1e-9).floor() as usize;
        let ny = ((self.y1 - self.y0) / spacing + 1e-9).floor() as usize;
        let mut pts = Vec::with_capacity((nx + 1) * (ny + 1));
        for j in 0..=ny {
            for i in 0..=nx {
                pts.push(Point2::new(self.x0 + i as f64 * spacing, self.y0 + j as f64 * spacing));
            }
        }
        pts
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimplicialMesh {
    /// Rest positions.
    pub anchors: Vec<Point2>,
    pub triangles: Vec<Triangle>,
    /// Number of refinements applied since construction.
    pub level: usize,
    /// Child triangle → parent triangle of the most recent refinement.
    pub parent_map: Vec<usize>,
    /// For every anchor created by refinement, the two edge endpoints it
    /// bisects. Parents always have smaller indices.
    pub anchor_parents: Vec<Option<[usize; 2]>>,
    /// Anchor count of each level, `level_anchor_counts[l]` for level `l`.
    pub level_anchor_counts: Vec<usize>,
}

impl SimplicialMesh {
    /// Builds a level-0 mesh, reordering vertices to counter-clockwise.
    pub fn new(anchors: Vec<Point2>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        if anchors.iter().any(|p| !p.is_finite()) {
            return Err(Error::Config("non-finite anchor".into()));
        }
        let mut tris = Vec::with_capacity(triangles.len());
        for t in triangles {
            let [a, b, c] = t;
            if a == b || b == c || a == c {
                return Err(Error::Config(format!("triangle {t:?} repeats an anchor")));
            }
            if t.iter().any(|&i| i >= anchors.len()) {
                return Err(Error::Config(format!("triangle {t:?} out of range")));
            }
            let v = [anchors[a], anchors[b], anchors[c]];
            let area = check_non_degenerate(&v)?;
            tris.push(if area > 0.0 {
                Triangle([a, b, c])
            } else {
                Triangle([a, c, b])
            });
        }
        let n = anchors.len();
        let ntri = tris.len();
        Ok(Self {
            anchors,
            triangles: tris,
            level: 0,
            parent_map: (0..ntri).collect(),
            anchor_parents: vec![None; n],
            level_anchor_counts: vec![n],
        })
    }

    /// Regular right-triangle grid over `roi`, `cols × rows` cells, two
    /// triangles per cell split along the (x0,y0)–(x1,y1) diagonal.
    pub fn grid(roi: Roi, cols: usize, rows: usize) -> Result<Self> {
        if cols == 0 || rows == 0 {
            return Err(Error::Config("grid needs at least one cell".into()));
        }
        let mut anchors = Vec::with_capacity((cols + 1) * (rows + 1));
        for j in 0..=rows {
            for i in 0..=cols {
                anchors.push(Point2::new(
                    roi.x0 + (roi.x1 - roi.x0) * i as f64 / cols as f64,
                    roi.y0 + (roi.y1 - roi.y0) * j as f64 / rows as f64,
                ));
            }
        }
        let idx = |i: usize, j: usize| j * (cols + 1) + i;
        let mut tris = Vec::with_capacity(2 * cols * rows);
        for j in 0..rows {
            for i in 0..cols {
                let (p00, p10, p01, p11) = (idx(i, j), idx(i + 1, j), idx(i, j + 1), idx(i + 1, j + 1));
                tris.push([p00, p10, p11]);
                tris.push([p00, p11, p01]);
            }
        }
        Self::new(anchors, tris)
    }

    pub fn num_anchors(&self) -> usize {
        self.anchors.len()
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn rest_vertices(&self, tri: usize) -> [Point2; 3] {
        let [a, b, c] = self.triangles[tri].0;
        [self.anchors[a], self.anchors[b], self.anchors[c]]
    }

    pub fn rest_area(&self, tri: usize) -> f64 {
        signed_area(&self.rest_vertices(tri))
    }

    pub fn total_area(&self) -> f64 {
        (0..self.num_triangles()).map(|t| self.rest_area(t)).sum()
    }

    pub fn centroid(&self) -> Point2 {
        centroid_of(&self.anchors)
    }

    /// Unique undirected edges `(i, j)` with `i < j`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut edges: Vec<(usize, usize)> = self
            .triangles
            .iter()
            .flat_map(|t| t.edges())
            .map(|(a, b)| (a.min(b), a.max(b)))
            .collect();
        edges.sort_unstable();
        edges.dedup();
        edges
    }

    /// Triangle indices incident to each anchor, ascending.
    pub fn incident_triangles(&self) -> Vec<Vec<usize>> {
        let mut inc = vec![Vec::new(); self.num_anchors()];
        for (ti, t) in self.triangles.iter().enumerate() {
            for &v in &t.0 {
                inc[v].push(ti);
            }
        }
        inc
    }

    /// First triangle (in index order) whose rest shape contains `p`.
    pub fn locate_rest(&self, p: Point2) -> Option<(usize, BarycentricCoords)> {
        TriangleLocator::new(&self.triangles, &self.anchors).locate(p)
    }

    /// Conforming 1→4 midpoint refinement. Shared edges get one midpoint;
    /// new anchors are appended after the existing ones.
    pub fn subdivide(&self) -> SimplicialMesh {
        let mut anchors = self.anchors.clone();
        let mut anchor_parents = self.anchor_parents.clone();
        let mut midpoints: HashMap<(usize, usize), usize> = HashMap::new();
        let mut mid = |a: usize, b: usize, anchors: &mut Vec<Point2>| -> usize {
            let key = (a.min(b), a.max(b));
            *midpoints.entry(key).or_insert_with(|| {
                anchors.push(anchors[key.0].midpoint(anchors[key.1]));
                anchor_parents.push(Some([key.0, key.1]));
                anchors.len() - 1
            })
        };
        let mut triangles = Vec::with_capacity(4 * self.triangles.len());
        let mut parent_map = Vec::with_capacity(4 * self.triangles.len());
        for (ti, t) in self.triangles.iter().enumerate() {
            let [v1, v2, v3] = t.0;
            let m1 = mid(v1, v2, &mut anchors);
            let m2 = mid(v2, v3, &mut anchors);
            let m3 = mid(v3, v1, &mut anchors);
            triangles.extend([
                Triangle([v1, m1, m3]),
                Triangle([v2, m2, m1]),
                Triangle([v3, m3, m2]),
                Triangle([m1, m2, m3]),
            ]);
            parent_map.extend([ti; 4]);
        }
        let mut level_anchor_counts = self.level_anchor_counts.clone();
        level_anchor_counts.push(anchors.len());
        SimplicialMesh {
            anchors,
            triangles,
            level: self.level + 1,
            parent_map,
            anchor_parents,
            level_anchor_counts,
        }
    }

    /// Anchor count at `level`, clamped to the mesh's own level.
    pub fn anchors_at_level(&self, level: usize) -> usize {
        self.level_anchor_counts[level.min(self.level)]
    }
}

pub fn centroid_of(points: &[Point2]) -> Point2 {
    if points.is_empty() {
        return Point2::ZERO;
    }
    let s = points.iter().fold(Point2::ZERO, |acc, &p| acc + p);
    s * (1.0 / points.len() as f64)
}

/// Bucketed point location over a fixed set of triangle vertices. Candidate
/// lists are kept in ascending triangle order, so the answer is always the
/// lowest-index triangle that contains the point.
pub struct TriangleLocator<'a> {
    triangles: &'a [Triangle],
    vertices: &'a [Point2],
    origin: Point2,
    cell: f64,
    cols: usize,
    rows: usize,
    buckets: Vec<Vec<u32>>,
}

impl<'a> TriangleLocator<'a> {
    pub fn new(triangles: &'a [Triangle], vertices: &'a [Point2]) -> Self {
        let (mut lo, mut hi) = (
            Point2::new(f64::INFINITY, f64::INFINITY),
            Point2::new(f64::NEG_INFINITY, f64::NEG_INFINITY),
        );
        for t in triangles {
            for &v in &t.0 {
                let p = vertices[v];
                lo = Point2::new(lo.x.min(p.x), lo.y.min(p.y));
                hi = Point2::new(hi.x.max(p.x), hi.y.max(p.y));
            }
        }
        if triangles.is_empty() {
            lo = Point2::ZERO;
            hi = Point2::new(1.0, 1.0);
        }
        let side = (triangles.len() as f64).sqrt().ceil().max(1.0) as usize;
        let extent = (hi.x - lo.x).max(hi.y - lo.y).max(1e-6);
        let cell = extent / side as f64;
        let cols = (((hi.x - lo.x) / cell).floor() as usize + 1).max(1);
        let rows = (((hi.y - lo.y) / cell).floor() as usize + 1).max(1);
        let mut buckets = vec![Vec::new(); cols * rows];
        for (ti, t) in triangles.iter().enumerate() {
            let (mut a, mut b) = (
                Point2::new(f64::INFINITY, f64::INFINITY),
                Point2::new(f64::NEG_INFINITY, f64::NEG_INFINITY),
            );
            for &v in &t.0 {
                let p = vertices[v];
                a = Point2::new(a.x.min(p.x), a.y.min(p.y));
                b = Point2::new(b.x.max(p.x), b.y.max(p.y));
            }
            let (c0, r0) = Self::cell_of_raw(lo, cell, cols, rows, a);
            let (c1, r1) = Self::cell_of_raw(lo, cell, cols, rows, b);
            for r in r0..=r1 {
                for c in c0..=c1 {
                    buckets[r * cols + c].push(ti as u32);
                }
            }
        }
        Self {
            triangles,
            vertices,
            origin: lo,
            cell,
            cols,
            rows,
            buckets,
        }
    }

    fn cell_of_raw(origin: Point2, cell: f64, cols: usize, rows: usize, p: Point2) -> (usize, usize) {
        let c = ((p.x - origin.x) / cell).floor().clamp(0.0, (cols - 1) as f64) as usize;
        let r = ((p.y - origin.y) / cell).floor().clamp(0.0, (rows - 1) as f64) as usize;
        (c, r)
    }

    pub fn locate(&self, p: Point2) -> Option<(usize, BarycentricCoords)> {
        if !p.is_finite() || self.triangles.is_empty() {
            return None;
        }
        // Outside the bucket grid entirely means outside every triangle, but
        // boundary points must still reach the edge buckets.
        let span_x = self.cols as f64 * self.cell;
        let span_y = self.rows as f64 * self.cell;
        if p.x < self.origin.x || p.y < self.origin.y || p.x > self.origin.x + span_x || p.y > self.origin.y + span_y {
            return None;
        }
        let (c, r) = Self::cell_of_raw(self.origin, self.cell, self.cols, self.rows, p);
        for &ti in &self.buckets[r * self.cols + c] {
            let t = self.triangles[ti as usize].0;
            let v = [self.vertices[t[0]], self.vertices[t[1]], self.vertices[t[2]]];
            if signed_area(&v).abs() <= DEGENERATE_AREA {
                continue;
            }
            if same_side_unchecked(p, &v) {
                return Some((ti as usize, barycentric_unchecked(p, &v)));
            }
        }
        None
    }
}
