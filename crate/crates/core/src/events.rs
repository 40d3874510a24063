//! Event storage, equal-count binning, images of warped events (IWE) and
//! the contrast objective with its analytic gradient.

use std::io::{BufRead, BufReader, Write};
use std::ops::Range;
use std::path::Path;

use log::warn;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Point2, TriangleLocator};
use crate::trajectory::{KnotBlend, TrajectoryField};

/// `ε` in the IWE ratio and in the contrast normalizer.
pub const IWE_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn sign(self) -> i8 {
        match self {
            Polarity::Positive => 1,
            Polarity::Negative => -1,
        }
    }

    pub fn from_sign(s: i64) -> Option<Self> {
        match s {
            1 => Some(Polarity::Positive),
            -1 => Some(Polarity::Negative),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub x: f64,
    pub y: f64,
    pub t: f64,
    pub p: Polarity,
}

impl Event {
    pub fn new(x: f64, y: f64, t: f64, p: Polarity) -> Self {
        Self { x, y, t, p }
    }

    pub fn position(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SensorSize {
    pub width: usize,
    pub height: usize,
}

impl SensorSize {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height }
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }
}

/// Events between two frames, split into `M` bins of (almost) equal count.
#[derive(Debug, Clone)]
pub struct EventWindow {
    pub events: Vec<Event>,
    pub t_start: f64,
    pub t_end: f64,
    /// `M + 1` strictly increasing times, first `t_start`, last `t_end`.
    pub bin_edges: Vec<f64>,
    /// Event index range of each bin.
    pub bins: Vec<Range<usize>>,
}

impl EventWindow {
    pub fn num_bins(&self) -> usize {
        self.bins.len()
    }

    /// Events of bins `lo..hi` as an index range.
    pub fn bin_span(&self, bins: Range<usize>) -> Range<usize> {
        if bins.is_empty() {
            return 0..0;
        }
        self.bins[bins.start].start..self.bins[bins.end - 1].end
    }

    pub fn all(&self) -> Range<usize> {
        0..self.events.len()
    }
}

/// Splits time-sorted events into `m` bins whose counts differ by at most
/// one; the first `N mod m` bins take the extra event. Interior edges sit
/// halfway between the last event of one bin and the first of the next.
pub fn partition_bins(events: Vec<Event>, t_start: f64, t_end: f64, m: usize) -> Result<EventWindow> {
    let n = events.len();
    if m == 0 || n < m {
        return Err(Error::TooFewEvents { got: n, bins: m.max(1) });
    }
    if !(t_end > t_start) {
        return Err(Error::InvalidTimeGrid(format!("window [{t_start}, {t_end}] is empty")));
    }
    if events.windows(2).any(|w| w[1].t < w[0].t) {
        return Err(Error::Config("events are not time-sorted".into()));
    }
    if events.iter().any(|e| e.t < t_start || e.t > t_end) {
        return Err(Error::Config(format!("events fall outside [{t_start}, {t_end}]")));
    }
    let (base, extra) = (n / m, n % m);
    let mut bins = Vec::with_capacity(m);
    let mut start = 0;
    for i in 0..m {
        let len = base + usize::from(i < extra);
        bins.push(start..start + len);
        start += len;
    }
    let span = t_end - t_start;
    let min_gap = span * 1e-9;
    let mut edges = Vec::with_capacity(m + 1);
    edges.push(t_start);
    for b in &bins[1..] {
        let edge = 0.5 * (events[b.start - 1].t + events[b.start].t);
        let prev = *edges.last().unwrap();
        edges.push(edge.max(prev + min_gap));
    }
    edges.push(t_end);
    // Clustered timestamps can squeeze edges against the window end.
    for i in (1..m).rev() {
        if edges[i] >= edges[i + 1] - min_gap {
            edges[i] = edges[i + 1] - min_gap;
        }
    }
    if edges.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidTimeGrid(format!(
            "cannot separate {m} bins in [{t_start}, {t_end}]"
        )));
    }
    Ok(EventWindow {
        events,
        t_start,
        t_end,
        bin_edges: edges,
        bins,
    })
}

/// An event's triangle and barycentric weights at its triggering time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Association {
    pub tri: u32,
    pub weights: [f64; 3],
}

/// Associates every event with the deformed mesh at its own timestamp.
/// Events outside the mesh map to `None`.
pub fn associate(events: &[Event], tf: &TrajectoryField) -> Vec<Option<Association>> {
    let grid = tf.grid();
    let tris = &tf.mesh().triangles;
    let mut out = Vec::with_capacity(events.len());
    let mut i = 0;
    // Events sharing a bin interval share a linear blend; rebuild the
    // locator only when the interpolated vertex set changes.
    while i < events.len() {
        let t = events[i].t;
        let Ok(blend) = grid.blend(t) else {
            out.push(None);
            i += 1;
            continue;
        };
        let verts: Vec<Point2> = (0..tf.num_anchors()).map(|a| tf.blend_position(a, blend)).collect();
        let locator = TriangleLocator::new(tris, &verts);
        let mut j = i;
        while j < events.len() && events[j].t == t {
            out.push(locator.locate(events[j].position()).map(|(tri, w)| Association {
                tri: tri as u32,
                weights: w.0,
            }));
            j += 1;
        }
        i = j;
    }
    out
}

/// Per-polarity image of warped events at `t_ref`.
#[derive(Debug, Clone)]
pub struct Iwe {
    pub sensor: SensorSize,
    pub t_ref: f64,
    /// `T_+1`, `T_-1` (ratio form).
    pub pos: Vec<f64>,
    pub neg: Vec<f64>,
    /// Number of warped events touching each pixel with non-zero weight.
    pub count: Vec<u32>,
    /// Per-polarity kernel mass `Σ κκ`, kept for the gradient.
    den_pos: Vec<f64>,
    den_neg: Vec<f64>,
}

impl Iwe {
    pub fn active_pixels(&self) -> usize {
        self.count.iter().filter(|&&c| c > 0).count()
    }

    /// Plain event-count image (`n(x′)`), the usual visualisation.
    pub fn count_image(&self) -> Vec<f64> {
        self.count.iter().map(|&c| c as f64).collect()
    }
}

#[inline]
fn kernel_taps(x: f64) -> (i64, [f64; 2]) {
    let i0 = x.floor();
    let f = x - i0;
    (i0 as i64, [1.0 - f, f])
}

/// Which reference-time sampling the warp uses: a knot blend shared by
/// every anchor.
struct WarpTarget {
    blend: KnotBlend,
    anchors: Vec<Point2>,
}

impl WarpTarget {
    fn new(tf: &TrajectoryField, t_ref: f64) -> Result<Self> {
        let blend = tf.grid().blend(t_ref)?;
        let anchors = (0..tf.num_anchors()).map(|a| tf.blend_position(a, blend)).collect();
        Ok(Self { blend, anchors })
    }

    #[inline]
    fn warp(&self, tf: &TrajectoryField, a: &Association) -> Point2 {
        let [i, j, k] = tf.mesh().triangles[a.tri as usize].0;
        let w = a.weights;
        Point2::new(
            w[0] * self.anchors[i].x + w[1] * self.anchors[j].x + w[2] * self.anchors[k].x,
            w[0] * self.anchors[i].y + w[1] * self.anchors[j].y + w[2] * self.anchors[k].y,
        )
    }
}

fn time_weights(events: &[Event], t_ref: f64) -> (f64, bool) {
    let max_dt = events.iter().map(|e| (t_ref - e.t).abs()).fold(0.0, f64::max);
    (max_dt, max_dt > 0.0)
}

#[inline]
fn time_weight(t: f64, t_ref: f64, max_dt: (f64, bool)) -> f64 {
    if max_dt.1 {
        1.0 - (t_ref - t).abs() / max_dt.0
    } else {
        1.0
    }
}

/// Warps `events[range]` to `t_ref` and accumulates the ratio-form IWE.
pub fn build_iwe(
    window: &EventWindow,
    assoc: &[Option<Association>],
    tf: &TrajectoryField,
    t_ref: f64,
    range: Range<usize>,
    sensor: SensorSize,
) -> Result<Iwe> {
    let target = WarpTarget::new(tf, t_ref)?;
    accumulate(&window.events[range.clone()], &assoc[range], tf, &target, t_ref, sensor)
}

fn accumulate(
    events: &[Event],
    assoc: &[Option<Association>],
    tf: &TrajectoryField,
    target: &WarpTarget,
    t_ref: f64,
    sensor: SensorSize,
) -> Result<Iwe> {
    let n_px = sensor.pixels();
    let mut num_pos = vec![0.0; n_px];
    let mut num_neg = vec![0.0; n_px];
    let mut den_pos = vec![0.0; n_px];
    let mut den_neg = vec![0.0; n_px];
    let mut count = vec![0u32; n_px];
    let max_dt = time_weights(events, t_ref);
    let (w_px, h_px) = (sensor.width as i64, sensor.height as i64);
    let mut any = false;
    for (e, a) in events.iter().zip(assoc) {
        let Some(a) = a else { continue };
        any = true;
        let p = target.warp(tf, a);
        let wt = time_weight(e.t, t_ref, max_dt);
        let (ix, kx) = kernel_taps(p.x);
        let (iy, ky) = kernel_taps(p.y);
        let (num, den) = match e.p {
            Polarity::Positive => (&mut num_pos, &mut den_pos),
            Polarity::Negative => (&mut num_neg, &mut den_neg),
        };
        for (dy, &wy) in ky.iter().enumerate() {
            let y = iy + dy as i64;
            if y < 0 || y >= h_px || wy <= 0.0 {
                continue;
            }
            for (dx, &wx) in kx.iter().enumerate() {
                let x = ix + dx as i64;
                if x < 0 || x >= w_px || wx <= 0.0 {
                    continue;
                }
                let k = wx * wy;
                let idx = (y * w_px + x) as usize;
                num[idx] += k * wt;
                den[idx] += k;
                count[idx] += 1;
            }
        }
    }
    if !any {
        return Err(Error::NoAssociatedEvents);
    }
    let pos = num_pos
        .iter()
        .zip(&den_pos)
        .map(|(n, d)| n / (d + IWE_EPSILON))
        .collect();
    let neg = num_neg
        .iter()
        .zip(&den_neg)
        .map(|(n, d)| n / (d + IWE_EPSILON))
        .collect();
    Ok(Iwe {
        sensor,
        t_ref,
        pos,
        neg,
        count,
        den_pos,
        den_neg,
    })
}

/// `Σ (T₊² + T₋²) / (#active pixels + ε)`; zero for an empty image.
pub fn contrast(iwe: &Iwe) -> f64 {
    let active = iwe.active_pixels();
    if active == 0 {
        return 0.0;
    }
    let sq: f64 = iwe.pos.iter().chain(&iwe.neg).map(|t| t * t).sum();
    sq / (active as f64 + IWE_EPSILON)
}

/// Gradient of a scalar w.r.t. every trajectory knot position, laid out
/// like `TrajectoryField::positions`.
pub type PositionGradient = Vec<Point2>;

/// Contrast of `events[range]` warped to `t_ref`, adding `scale · ∂/∂Tr`
/// into `grad` when given. Association weights are treated as constants.
pub fn contrast_with_gradient(
    window: &EventWindow,
    assoc: &[Option<Association>],
    tf: &TrajectoryField,
    t_ref: f64,
    range: Range<usize>,
    sensor: SensorSize,
    grad: Option<(&mut [Point2], f64)>,
) -> Result<f64> {
    let target = WarpTarget::new(tf, t_ref)?;
    let events = &window.events[range.clone()];
    let assoc = &assoc[range];
    let iwe = accumulate(events, assoc, tf, &target, t_ref, sensor)?;
    let value = contrast(&iwe);
    let Some((grad, scale)) = grad else {
        return Ok(value);
    };
    let active = iwe.active_pixels();
    if active == 0 {
        return Ok(value);
    }
    let norm = scale / (active as f64 + IWE_EPSILON);
    let max_dt = time_weights(events, t_ref);
    let (w_px, h_px) = (sensor.width as i64, sensor.height as i64);
    let k = tf.num_knots();
    let tris = &tf.mesh().triangles;
    for (e, a) in events.iter().zip(assoc) {
        let Some(a) = a else { continue };
        let p = target.warp(tf, a);
        let wt = time_weight(e.t, t_ref, max_dt);
        let (ix, kx) = kernel_taps(p.x);
        let (iy, ky) = kernel_taps(p.y);
        let dkx = [-1.0, 1.0];
        let (t_img, den) = match e.p {
            Polarity::Positive => (&iwe.pos, &iwe.den_pos),
            Polarity::Negative => (&iwe.neg, &iwe.den_neg),
        };
        let mut g = Point2::ZERO;
        for dy in 0..2 {
            let y = iy + dy as i64;
            if y < 0 || y >= h_px {
                continue;
            }
            for dx in 0..2 {
                let x = ix + dx as i64;
                if x < 0 || x >= w_px {
                    continue;
                }
                let idx = (y * w_px + x) as usize;
                let t = t_img[idx];
                if t == 0.0 || kx[dx] * ky[dy] == 0.0 {
                    continue;
                }
                // ∂f/∂(κκ) for this pixel
                let coef = 2.0 * t * (wt - t) / (den[idx] + IWE_EPSILON);
                g.x += coef * dkx[dx] * ky[dy];
                g.y += coef * kx[dx] * dkx[dy];
            }
        }
        if g.x == 0.0 && g.y == 0.0 {
            continue;
        }
        let g = g * norm;
        for (slot, &v) in tris[a.tri as usize].0.iter().enumerate() {
            let gw = g * a.weights[slot];
            grad[v * k + target.blend.lo] += gw * target.blend.w_lo;
            if target.blend.w_hi != 0.0 {
                grad[v * k + target.blend.hi] += gw * target.blend.w_hi;
            }
        }
    }
    Ok(value)
}

/// Outcome of a multi-IWE objective: the value plus whether any IWE had
/// no associated events and contributed zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveValue {
    pub value: f64,
    pub empty_iwes: usize,
}

/// Mean contrast over the listed `(t_ref, range)` IWEs, evaluated in
/// parallel and reduced in list order.
fn mean_contrast(
    window: &EventWindow,
    assoc: &[Option<Association>],
    tf: &TrajectoryField,
    targets: &[(f64, Range<usize>)],
    sensor: SensorSize,
    grad: Option<(&mut [Point2], f64)>,
) -> Result<ObjectiveValue> {
    if targets.is_empty() {
        return Ok(ObjectiveValue {
            value: 0.0,
            empty_iwes: 0,
        });
    }
    let want_grad = grad.is_some();
    let scale = grad.as_ref().map_or(0.0, |g| g.1) / targets.len() as f64;
    let results: Vec<Result<(f64, Option<Vec<Point2>>)>> = targets
        .par_iter()
        .map(|(t_ref, range)| {
            let mut local = want_grad.then(|| vec![Point2::ZERO; tf.positions().len()]);
            let v = contrast_with_gradient(
                window,
                assoc,
                tf,
                *t_ref,
                range.clone(),
                sensor,
                local.as_deref_mut().map(|g| (g, scale)),
            );
            match v {
                Ok(v) => Ok((v, local)),
                Err(Error::NoAssociatedEvents) => Ok((f64::NAN, None)),
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut sum = 0.0;
    let mut empty = 0;
    let mut grad = grad;
    for r in results {
        let (v, local) = r?;
        if v.is_nan() {
            empty += 1;
            continue;
        }
        sum += v;
        if let (Some((g, _)), Some(local)) = (grad.as_mut(), local) {
            for (a, b) in g.iter_mut().zip(local) {
                *a += b;
            }
        }
    }
    if empty > 0 {
        warn!("{empty} of {} IWEs had no associated events", targets.len());
    }
    Ok(ObjectiveValue {
        value: sum / targets.len() as f64,
        empty_iwes: empty,
    })
}

/// IWE targets of the short-term warp: every knot with the events of its
/// adjacent bins.
pub fn warp1_targets(window: &EventWindow, tf: &TrajectoryField) -> Vec<(f64, Range<usize>)> {
    let m = window.num_bins();
    tf.grid()
        .knots()
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let lo = i.saturating_sub(1);
            let hi = (i + 1).min(m);
            (t, window.bin_span(lo..hi))
        })
        .collect()
}

pub fn warp2_targets(window: &EventWindow, t_frame_a: f64, t_frame_b: f64) -> Vec<(f64, Range<usize>)> {
    if window.events.is_empty() {
        return Vec::new();
    }
    vec![(t_frame_a, window.all()), (t_frame_b, window.all())]
}

/// Short-term warp: mean contrast over the `M + 1` knot IWEs.
pub fn warp1_objective(
    window: &EventWindow,
    assoc: &[Option<Association>],
    tf: &TrajectoryField,
    sensor: SensorSize,
    grad: Option<(&mut [Point2], f64)>,
) -> Result<ObjectiveValue> {
    if window.events.is_empty() {
        return Ok(ObjectiveValue {
            value: 0.0,
            empty_iwes: 0,
        });
    }
    let targets = warp1_targets(window, tf);
    mean_contrast(window, assoc, tf, &targets, sensor, grad)
}

/// Whole-window warp to both frame timestamps.
pub fn warp2_objective(
    window: &EventWindow,
    assoc: &[Option<Association>],
    tf: &TrajectoryField,
    t_frame_a: f64,
    t_frame_b: f64,
    sensor: SensorSize,
    grad: Option<(&mut [Point2], f64)>,
) -> Result<ObjectiveValue> {
    let targets = warp2_targets(window, t_frame_a, t_frame_b);
    mean_contrast(window, assoc, tf, &targets, sensor, grad)
}

pub const EVENT_CSV_HEADER: &str = "t,x,y,p";

pub fn read_events_csv(path: &Path) -> Result<Vec<Event>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut events = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if lineno == 0 {
            if line.replace(' ', "") != EVENT_CSV_HEADER {
                return Err(Error::parse(
                    path,
                    format!("expected header `{EVENT_CSV_HEADER}`, got `{line}`"),
                ));
            }
            continue;
        }
        let bad = || Error::parse(path, format!("line {}: malformed event `{line}`", lineno + 1));
        let mut it = line.split(',').map(str::trim);
        let t: f64 = it.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let x: f64 = it.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let y: f64 = it.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let p = it
            .next()
            .and_then(|s| s.parse::<i64>().ok())
            .and_then(Polarity::from_sign)
            .ok_or_else(bad)?;
        if it.next().is_some() || !(t.is_finite() && x.is_finite() && y.is_finite()) {
            return Err(bad());
        }
        if let Some(prev) = events.last().map(|e: &Event| e.t) {
            if t < prev {
                return Err(Error::parse(
                    path,
                    format!("line {}: events not time-sorted", lineno + 1),
                ));
            }
        }
        events.push(Event::new(x, y, t, p));
    }
    Ok(events)
}

pub fn write_events_csv(path: &Path, events: &[Event]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let res = (|| -> std::io::Result<()> {
        writeln!(w, "{EVENT_CSV_HEADER}")?;
        for e in events {
            writeln!(w, "{},{},{},{}", e.t, e.x, e.y, e.p.sign())?;
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}
