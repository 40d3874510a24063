//! Piecewise-linear anchor trajectories over a window's time grid, and
//! barycentric transport of material points along them.

use std::io::Write;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::{BarycentricCoords, Point2, SimplicialMesh, TriangleLocator};

#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    knots: Vec<f64>,
}

/// Linear blend of two neighbouring knots; `hi == lo` at the last knot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KnotBlend {
    pub lo: usize,
    pub hi: usize,
    pub w_lo: f64,
    pub w_hi: f64,
}

impl TimeGrid {
    pub fn new(knots: Vec<f64>) -> Result<Self> {
        if knots.len() < 2 {
            return Err(Error::InvalidTimeGrid("need at least two knots".into()));
        }
        if knots.iter().any(|t| !t.is_finite()) || knots.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidTimeGrid(format!(
                "knots must be finite and strictly increasing: {knots:?}"
            )));
        }
        Ok(Self { knots })
    }

    /// `bins + 1` evenly spaced knots over `[start, end]`.
    pub fn uniform(start: f64, end: f64, bins: usize) -> Result<Self> {
        let bins = bins.max(1);
        let mut knots: Vec<f64> = (0..=bins)
            .map(|i| start + (end - start) * i as f64 / bins as f64)
            .collect();
        knots[bins] = end;
        Self::new(knots)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn num_knots(&self) -> usize {
        self.knots.len()
    }

    /// Number of bins `M`.
    pub fn num_bins(&self) -> usize {
        self.knots.len() - 1
    }

    pub fn start(&self) -> f64 {
        self.knots[0]
    }

    pub fn end(&self) -> f64 {
        self.knots[self.knots.len() - 1]
    }

    pub fn blend(&self, t: f64) -> Result<KnotBlend> {
        let (start, end) = (self.start(), self.end());
        if !(t >= start && t <= end) {
            return Err(Error::TimeOutOfWindow { t, start, end });
        }
        // index of the first knot strictly greater than t
        let upper = self.knots.partition_point(|&k| k <= t);
        let lo = upper - 1;
        if self.knots[lo] == t || lo + 1 == self.knots.len() {
            return Ok(KnotBlend {
                lo,
                hi: lo,
                w_lo: 1.0,
                w_hi: 0.0,
            });
        }
        let s = (t - self.knots[lo]) / (self.knots[lo + 1] - self.knots[lo]);
        Ok(KnotBlend {
            lo,
            hi: lo + 1,
            w_lo: 1.0 - s,
            w_hi: s,
        })
    }
}

/// Per-anchor positions at every knot of one window.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryField {
    mesh: Arc<SimplicialMesh>,
    grid: TimeGrid,
    /// Anchor-major: `positions[anchor * num_knots + knot]`.
    positions: Vec<Point2>,
}

impl TrajectoryField {
    /// Every anchor parked at its rest position for the whole window.
    pub fn at_rest(mesh: Arc<SimplicialMesh>, grid: TimeGrid) -> Self {
        let k = grid.num_knots();
        let positions = mesh.anchors.iter().flat_map(|&p| std::iter::repeat_n(p, k)).collect();
        Self { mesh, grid, positions }
    }

    /// Positions from `f(anchor rest position, knot time)`.
    pub fn from_fn(mesh: Arc<SimplicialMesh>, grid: TimeGrid, mut f: impl FnMut(usize, Point2, f64) -> Point2) -> Self {
        let mut positions = Vec::with_capacity(mesh.num_anchors() * grid.num_knots());
        for (a, &rest) in mesh.anchors.iter().enumerate() {
            for &t in grid.knots() {
                positions.push(f(a, rest, t));
            }
        }
        Self { mesh, grid, positions }
    }

    pub fn from_positions(mesh: Arc<SimplicialMesh>, grid: TimeGrid, positions: Vec<Point2>) -> Result<Self> {
        if positions.len() != mesh.num_anchors() * grid.num_knots() {
            return Err(Error::Config(format!(
                "expected {} positions, got {}",
                mesh.num_anchors() * grid.num_knots(),
                positions.len()
            )));
        }
        if positions.iter().any(|p| !p.is_finite()) {
            return Err(Error::Config("non-finite trajectory position".into()));
        }
        Ok(Self { mesh, grid, positions })
    }

    pub fn mesh(&self) -> &SimplicialMesh {
        &self.mesh
    }

    pub fn mesh_arc(&self) -> &Arc<SimplicialMesh> {
        &self.mesh
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn num_anchors(&self) -> usize {
        self.mesh.num_anchors()
    }

    pub fn num_knots(&self) -> usize {
        self.grid.num_knots()
    }

    pub fn positions(&self) -> &[Point2] {
        &self.positions
    }

    pub fn positions_mut(&mut self) -> &mut [Point2] {
        &mut self.positions
    }

    #[inline]
    pub fn index(&self, anchor: usize, knot: usize) -> usize {
        anchor * self.grid.num_knots() + knot
    }

    #[inline]
    pub fn knot_position(&self, anchor: usize, knot: usize) -> Point2 {
        self.positions[self.index(anchor, knot)]
    }

    pub fn set_knot_position(&mut self, anchor: usize, knot: usize, p: Point2) {
        let i = self.index(anchor, knot);
        self.positions[i] = p;
    }

    /// All anchors at one knot.
    pub fn knot_positions(&self, knot: usize) -> Vec<Point2> {
        (0..self.num_anchors()).map(|a| self.knot_position(a, knot)).collect()
    }

    pub fn position_at(&self, anchor: usize, t: f64) -> Result<Point2> {
        let b = self.grid.blend(t)?;
        Ok(self.blend_position(anchor, b))
    }

    #[inline]
    pub(crate) fn blend_position(&self, anchor: usize, b: KnotBlend) -> Point2 {
        let lo = self.knot_position(anchor, b.lo);
        if b.w_hi == 0.0 {
            return lo;
        }
        let hi = self.knot_position(anchor, b.hi);
        lo * b.w_lo + hi * b.w_hi
    }

    pub fn positions_at(&self, t: f64) -> Result<Vec<Point2>> {
        let b = self.grid.blend(t)?;
        Ok((0..self.num_anchors()).map(|a| self.blend_position(a, b)).collect())
    }

    pub fn vertices_at(&self, tri: usize, t: f64) -> Result<[Point2; 3]> {
        let b = self.grid.blend(t)?;
        let [i, j, k] = self.mesh.triangles[tri].0;
        Ok([
            self.blend_position(i, b),
            self.blend_position(j, b),
            self.blend_position(k, b),
        ])
    }

    /// Triangle containing `p` at time `t` and the weights of `p` with
    /// respect to its deformed vertices.
    pub fn locate_and_weights(&self, p: Point2, t: f64) -> Result<(usize, BarycentricCoords)> {
        let verts = self.positions_at(t)?;
        TriangleLocator::new(&self.mesh.triangles, &verts)
            .locate(p)
            .ok_or(Error::OutsideMesh { x: p.x, y: p.y })
    }

    /// `Σ_k w_k Tr_k(t_ref)`.
    pub fn warp_point(&self, tri: usize, w: BarycentricCoords, t_ref: f64) -> Result<Point2> {
        Ok(w.combine(&self.vertices_at(tri, t_ref)?))
    }

    /// `u(X, t)` for rest-coordinate queries, one result per query.
    pub fn displacement_field(&self, queries: &[Point2], t: f64) -> Result<Vec<Result<Point2>>> {
        let now = self.positions_at(t)?;
        let locator = TriangleLocator::new(&self.mesh.triangles, &self.mesh.anchors);
        Ok(queries
            .iter()
            .map(|&q| {
                let (tri, w) = locator.locate(q).ok_or(Error::OutsideMesh { x: q.x, y: q.y })?;
                let [i, j, k] = self.mesh.triangles[tri].0;
                Ok(w.combine(&[now[i], now[j], now[k]]) - q)
            })
            .collect())
    }

    /// Refines the mesh; new anchors start at the midpoint of their parent
    /// edge at every knot, so the field inside each parent is unchanged.
    pub fn subdivide(&self) -> TrajectoryField {
        let fine = Arc::new(self.mesh.subdivide());
        let k = self.num_knots();
        let old = self.num_anchors();
        let mut positions = self.positions.clone();
        positions.reserve((fine.num_anchors() - old) * k);
        for a in old..fine.num_anchors() {
            let [p, q] = fine.anchor_parents[a].expect("refined anchor has parents");
            for knot in 0..k {
                let m = positions[p * k + knot].midpoint(positions[q * k + knot]);
                positions.push(m);
            }
        }
        TrajectoryField {
            mesh: fine,
            grid: self.grid.clone(),
            positions,
        }
    }

    /// Starts the next window: every knot of the new grid holds this
    /// window's end positions, bit-exactly.
    pub fn hand_off(&self, grid: TimeGrid) -> TrajectoryField {
        let last = self.num_knots() - 1;
        let end = self.knot_positions(last);
        let k = grid.num_knots();
        let positions = end.iter().flat_map(|&p| std::iter::repeat_n(p, k)).collect();
        TrajectoryField {
            mesh: self.mesh.clone(),
            grid,
            positions,
        }
    }

    /// Rows `window,anchor,knot,t,x,y`.
    pub fn write_csv_rows(&self, window: usize, out: &mut impl Write) -> std::io::Result<()> {
        for a in 0..self.num_anchors() {
            for (knot, &t) in self.grid.knots().iter().enumerate() {
                let p = self.knot_position(a, knot);
                writeln!(out, "{window},{a},{knot},{t},{},{}", p.x, p.y)?;
            }
        }
        Ok(())
    }
}

pub const TRAJECTORY_CSV_HEADER: &str = "window,anchor,knot,t,x,y";
