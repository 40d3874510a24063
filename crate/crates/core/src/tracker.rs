//! Window-by-window tracking of a whole sequence and its output files.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{info, warn};

use crate::config::{self, FlatConfig};
use crate::error::{Error, Result};
use crate::evaluation::{DisplacementRow, DisplacementTable};
use crate::events::{partition_bins, read_events_csv, Event, SensorSize};
use crate::frames::{load_frames, sample_grid, Frame, FrameSet};
use crate::geometry::{Point2, SimplicialMesh};
use crate::optimizer::{
    coarse_to_fine, greedy_refine, rigid_stage, ConvergenceReport, ObjectiveContext, StageTrace, TrackerConfig,
};
use crate::strain::{anchor_strain, write_strain_csv, STRAIN_CSV_HEADER};
use crate::trajectory::{TimeGrid, TrajectoryField, TRAJECTORY_CSV_HEADER};

/// Output file names inside a tracking result directory.
pub mod layout {
    pub const TRAJECTORIES: &str = "trajectories.csv";
    pub const DISPLACEMENTS: &str = "displacements.csv";
    pub const STRAIN: &str = "strain.csv";
    pub const OBJECTIVE: &str = "objective.csv";
    pub const CONVERGENCE: &str = "convergence.csv";
    pub const WINDOWS: &str = "windows.csv";
    pub const CONFIG: &str = "tracker.cfg";
    pub const INPUTS: &str = "inputs.cfg";
}

/// Events plus frames of one recording.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub events: Vec<Event>,
    pub frames: Vec<Frame>,
}

impl Dataset {
    pub fn load(events_csv: &Path, manifest: &Path) -> Result<Self> {
        let events = read_events_csv(events_csv)?;
        let frames = load_frames(manifest)?;
        Self::new(events, frames)
    }

    pub fn new(events: Vec<Event>, frames: Vec<Frame>) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::Config(format!("need at least two frames, got {}", frames.len())));
        }
        let (w, h) = (frames[0].width, frames[0].height);
        if frames.iter().any(|f| f.width != w || f.height != h) {
            return Err(Error::Config("frames differ in size".into()));
        }
        if events.windows(2).any(|p| p[1].t < p[0].t) {
            return Err(Error::Config("events are not time-sorted".into()));
        }
        Ok(Self { events, frames })
    }

    pub fn sensor(&self) -> SensorSize {
        SensorSize::new(self.frames[0].width, self.frames[0].height)
    }

    /// Events of window `w`, spanning frames `w` and `w + 1`. Windows are
    /// half-open except the last.
    pub fn window_events(&self, w: usize) -> &[Event] {
        let (a, b) = (self.frames[w].t, self.frames[w + 1].t);
        let last = w + 2 == self.frames.len();
        let lo = self.events.partition_point(|e| e.t < a);
        let hi = if last {
            self.events.partition_point(|e| e.t <= b)
        } else {
            self.events.partition_point(|e| e.t < b)
        };
        &self.events[lo..hi]
    }
}

/// Where a window starts: end positions and per-anchor velocity of the
/// previous window.
#[derive(Debug, Clone)]
pub struct WindowStart {
    pub mesh: Arc<SimplicialMesh>,
    pub positions: Vec<Point2>,
    pub velocity: Vec<Point2>,
}

impl WindowStart {
    pub fn at_rest(mesh: Arc<SimplicialMesh>) -> Self {
        let n = mesh.num_anchors();
        Self {
            positions: mesh.anchors.clone(),
            velocity: vec![Point2::ZERO; n],
            mesh,
        }
    }

    pub fn after(tf: &TrajectoryField) -> Self {
        let last = tf.num_knots() - 1;
        let dt = tf.grid().end() - tf.grid().start();
        let positions = tf.knot_positions(last);
        let velocity = (0..tf.num_anchors())
            .map(|a| (positions[a] - tf.knot_position(a, 0)) * (1.0 / dt))
            .collect();
        Self {
            mesh: tf.mesh_arc().clone(),
            positions,
            velocity,
        }
    }

    /// Constant-velocity guess; knot 0 equals the previous end bit-exactly.
    pub fn initial_guess(&self, grid: TimeGrid) -> TrajectoryField {
        let t0 = grid.start();
        TrajectoryField::from_fn(self.mesh.clone(), grid, |a, _, t| {
            if t == t0 {
                self.positions[a]
            } else {
                self.positions[a] + self.velocity[a] * (t - t0)
            }
        })
    }
}

#[derive(Debug, Clone)]
pub struct WindowResult {
    pub tf: TrajectoryField,
    pub report: ConvergenceReport,
    pub traces: Vec<StageTrace>,
    pub events: usize,
}

/// Initialize from the previous window, bin the events, then run the rigid
/// stage, coarse-to-fine refinement and greedy rounds.
pub fn track_window(
    start: &WindowStart,
    events: &[Event],
    frames: FrameSet<'_>,
    sensor: SensorSize,
    cfg: &TrackerConfig,
) -> Result<WindowResult> {
    let window = partition_bins(events.to_vec(), frames.previous.t, frames.current.t, cfg.bins)?;
    let grid = TimeGrid::new(window.bin_edges.clone())?;
    let samples = sample_grid(cfg.samples_per_edge)?;
    let ctx = ObjectiveContext {
        window: &window,
        frames,
        grid: &samples,
        sensor,
    };
    let guess = start.initial_guess(grid);
    let (tf, rigid) = rigid_stage(&guess, &ctx, cfg)?;
    let (tf, report, mut traces) = coarse_to_fine(&tf, &ctx, cfg)?;
    traces.insert(0, rigid);
    let (tf, report, greedy) = greedy_refine(&tf, &ctx, cfg, report)?;
    traces.extend(greedy);
    Ok(WindowResult {
        tf,
        report,
        traces,
        events: window.events.len(),
    })
}

/// A window's result, or the initial guess it fell back to.
#[derive(Debug, Clone)]
pub struct WindowOutcome {
    pub tf: TrajectoryField,
    pub report: Option<ConvergenceReport>,
    pub traces: Vec<StageTrace>,
    pub events: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SequenceResult {
    pub config: TrackerConfig,
    pub windows: Vec<WindowOutcome>,
    pub queries: Vec<Point2>,
    pub frame_times: Vec<f64>,
}

pub fn initial_mesh(cfg: &TrackerConfig, sensor: SensorSize) -> Result<SimplicialMesh> {
    SimplicialMesh::grid(cfg.roi_for(sensor.width, sensor.height)?, cfg.grid_cols, cfg.grid_rows)
}

/// The mesh every window after the first uses.
pub fn finest_mesh(cfg: &TrackerConfig, sensor: SensorSize) -> Result<SimplicialMesh> {
    let mut mesh = initial_mesh(cfg, sensor)?;
    for _ in 0..cfg.max_levels {
        mesh = mesh.subdivide();
    }
    Ok(mesh)
}

/// Chains [`track_window`] over every frame interval. A failed window is
/// recorded and replaced by its initial guess so tracking can continue.
pub fn track_sequence(data: &Dataset, cfg: &TrackerConfig) -> Result<SequenceResult> {
    cfg.validate()?;
    let sensor = data.sensor();
    let mesh = Arc::new(initial_mesh(cfg, sensor)?);
    let queries = cfg.roi_for(sensor.width, sensor.height)?.grid_points(cfg.query_spacing);
    let mut start = WindowStart::at_rest(mesh);
    let mut windows = Vec::with_capacity(data.frames.len() - 1);
    for w in 0..data.frames.len() - 1 {
        let frames = FrameSet {
            initial: &data.frames[0],
            previous: &data.frames[w],
            current: &data.frames[w + 1],
        };
        let events = data.window_events(w);
        let outcome = match track_window(&start, events, frames, sensor, cfg) {
            Ok(r) => {
                info!(
                    "window {w}: {} events, {}/{} triangles converged, {} greedy round(s)",
                    r.events,
                    r.report.num_converged(),
                    r.report.converged.len(),
                    r.report.rounds
                );
                WindowOutcome {
                    tf: r.tf,
                    report: Some(r.report),
                    traces: r.traces,
                    events: r.events,
                    error: None,
                }
            }
            Err(e) => {
                warn!("window {w} failed: {e}");
                let grid = TimeGrid::new(vec![frames.previous.t, frames.current.t])?;
                let mut tf = start.initial_guess(grid);
                while tf.mesh().level < cfg.max_levels {
                    tf = tf.subdivide();
                }
                WindowOutcome {
                    tf,
                    report: None,
                    traces: Vec::new(),
                    events: events.len(),
                    error: Some(e.to_string()),
                }
            }
        };
        start = WindowStart::after(&outcome.tf);
        windows.push(outcome);
    }
    Ok(SequenceResult {
        config: cfg.clone(),
        windows,
        queries,
        frame_times: data.frames.iter().map(|f| f.t).collect(),
    })
}

impl SequenceResult {
    /// Displacement at the query points for every frame; frame 0 is zero.
    pub fn displacements(&self) -> Result<DisplacementTable> {
        let mut rows = Vec::with_capacity(self.queries.len() * self.frame_times.len());
        for (f, &t) in self.frame_times.iter().enumerate() {
            let u: Vec<Point2> = if f == 0 {
                vec![Point2::ZERO; self.queries.len()]
            } else {
                self.windows[f - 1]
                    .tf
                    .displacement_field(&self.queries, t)?
                    .into_iter()
                    .collect::<Result<_>>()?
            };
            for (id, (q, u)) in self.queries.iter().zip(u).enumerate() {
                rows.push(DisplacementRow {
                    frame: f,
                    t,
                    point_id: id,
                    x0: q.x,
                    y0: q.y,
                    ux: u.x,
                    uy: u.y,
                });
            }
        }
        Ok(DisplacementTable { rows })
    }

    pub fn trajectories_csv(&self) -> String {
        let mut out = Vec::new();
        let _ = writeln!(out, "{TRAJECTORY_CSV_HEADER}");
        for (w, win) in self.windows.iter().enumerate() {
            let _ = win.tf.write_csv_rows(w, &mut out);
        }
        String::from_utf8(out).expect("CSV is UTF-8")
    }

    /// Anchor strain at every frame time after the first.
    pub fn strain_csv(&self) -> Result<String> {
        let mut out = Vec::new();
        let _ = writeln!(out, "{STRAIN_CSV_HEADER}");
        for (f, &t) in self.frame_times.iter().enumerate().skip(1) {
            let s = anchor_strain(&self.windows[f - 1].tf, t)?;
            let _ = write_strain_csv(&mut out, t, &s);
        }
        Ok(String::from_utf8(out).expect("CSV is UTF-8"))
    }

    pub fn objective_csv(&self) -> String {
        let mut s = String::from("window,stage,iter,loss\n");
        for (w, win) in self.windows.iter().enumerate() {
            for tr in &win.traces {
                for (i, l) in tr.losses.iter().enumerate() {
                    let _ = writeln!(s, "{w},{},{i},{l}", tr.stage);
                }
            }
        }
        s
    }

    pub fn convergence_csv(&self) -> String {
        let mut s = String::from("window,triangle,p,converged,no_texture\n");
        for (w, win) in self.windows.iter().enumerate() {
            if let Some(r) = &win.report {
                for t in 0..r.p.len() {
                    let _ = writeln!(
                        s,
                        "{w},{t},{},{},{}",
                        r.p[t],
                        u8::from(r.converged[t]),
                        u8::from(r.no_texture[t])
                    );
                }
            }
        }
        s
    }

    pub fn windows_csv(&self) -> String {
        let mut s =
            String::from("window,t_start,t_end,events,converged,triangles,rounds,stalled,reverted_stages,error\n");
        for (w, win) in self.windows.iter().enumerate() {
            let (conv, tris, rounds, stalled) = match &win.report {
                Some(r) => (
                    r.num_converged(),
                    r.converged.len(),
                    r.rounds,
                    u8::from(r.greedy_stalled),
                ),
                None => (0, win.tf.mesh().num_triangles(), 0, 0),
            };
            let reverted = win.traces.iter().filter(|t| t.reverted).count();
            let err = win.error.as_deref().unwrap_or("").replace(',', ";");
            let _ = writeln!(
                s,
                "{w},{},{},{},{conv},{tris},{rounds},{stalled},{reverted},{err}",
                win.tf.grid().start(),
                win.tf.grid().end(),
                win.events
            );
        }
        s
    }

    /// Writes every output file into `out_dir`. `inputs` names the event
    /// and manifest files for later rendering.
    pub fn write(&self, out_dir: &Path, inputs: Option<(&Path, &Path)>) -> Result<()> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let put = |name: &str, text: &str| {
            let p = out_dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        put(layout::TRAJECTORIES, &self.trajectories_csv())?;
        self.displacements()?.write_csv(&out_dir.join(layout::DISPLACEMENTS))?;
        put(layout::STRAIN, &self.strain_csv()?)?;
        put(layout::OBJECTIVE, &self.objective_csv())?;
        put(layout::CONVERGENCE, &self.convergence_csv())?;
        put(layout::WINDOWS, &self.windows_csv())?;
        put(layout::CONFIG, &self.config.to_config())?;
        if let Some((events, frames)) = inputs {
            let abs = |p: &Path| std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf());
            let text = config::render(&[
                ("events", abs(events).display().to_string()),
                ("frames", abs(frames).display().to_string()),
            ]);
            put(layout::INPUTS, &text)?;
        }
        Ok(())
    }
}

/// Trajectories of a tracking result directory, one field per window.
pub fn read_trajectories(path: &Path, mesh: Arc<SimplicialMesh>) -> Result<Vec<TrajectoryField>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(TRAJECTORY_CSV_HEADER) {
        return Err(Error::parse(path, format!("expected header `{TRAJECTORY_CSV_HEADER}`")));
    }
    // (window, anchor, knot, t, position)
    let mut rows: Vec<(usize, usize, usize, f64, Point2)> = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::parse(path, format!("line {}: malformed row", n + 2));
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 6 {
            return Err(bad());
        }
        let u = |s: &str| s.parse::<usize>().map_err(|_| bad());
        let r = |s: &str| s.parse::<f64>().map_err(|_| bad());
        rows.push((u(f[0])?, u(f[1])?, u(f[2])?, r(f[3])?, Point2::new(r(f[4])?, r(f[5])?)));
    }
    let mut out = Vec::new();
    let mut i = 0;
    while i < rows.len() {
        let w = rows[i].0;
        let j = i + rows[i..].iter().take_while(|r| r.0 == w).count();
        let block = &rows[i..j];
        let k = block.iter().take_while(|r| r.1 == block[0].1).count();
        let knots: Vec<f64> = block[..k].iter().map(|r| r.3).collect();
        let grid = TimeGrid::new(knots)?;
        let positions = block.iter().map(|r| r.4).collect();
        out.push(
            TrajectoryField::from_positions(mesh.clone(), grid, positions)
                .map_err(|e| Error::parse(path, format!("window {w}: {e}")))?,
        );
        i = j;
    }
    Ok(out)
}

/// Event and manifest paths recorded by [`SequenceResult::write`].
pub fn read_inputs(track_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let cfg = FlatConfig::load(&track_dir.join(layout::INPUTS))?;
    let get = |k: &str| {
        cfg.raw(k)
            .map(PathBuf::from)
            .ok_or_else(|| Error::Config(format!("{} lacks `{k}`", layout::INPUTS)))
    };
    Ok((get("events")?, get("frames")?))
}

/// Per-window convergence rows `(window, P_j per triangle)`.
pub fn read_convergence(path: &Path) -> Result<Vec<(usize, Vec<f64>)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out: Vec<(usize, Vec<f64>)> = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::parse(path, format!("line {}: malformed row", n + 1));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad());
        }
        let w: usize = f[0].parse().map_err(|_| bad())?;
        let p: f64 = f[2].parse().map_err(|_| bad())?;
        match out.last_mut() {
            Some((lw, v)) if *lw == w => v.push(p),
            _ => out.push((w, vec![p])),
        }
    }
    Ok(out)
}
