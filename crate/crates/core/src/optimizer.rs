//! Composite objective, Adam updates and the staged optimization of one
//! window: rigid pre-stage, coarse-to-fine refinement, convergence
//! assessment and neighborhood-greedy rounds.

use std::collections::BTreeSet;
use std::path::Path;

use log::{debug, warn};

use crate::config::{self, FlatConfig};
use crate::error::{Error, Result};
use crate::events::{associate, warp1_objective, warp2_objective, Association, EventWindow, SensorSize};
use crate::frames::{frame_objective, triangle_samples, FrameSet, SampleGrid, MIN_SIGMA, MIN_VALID_SAMPLES};
use crate::geometry::{centroid_of, Point2, Roi};
use crate::strain::continuity_with_gradient;
use crate::trajectory::TrajectoryField;

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerConfig {
    /// Equal-count event bins per window (`M`).
    pub bins: usize,
    pub max_levels: usize,
    pub grid_cols: usize,
    pub grid_rows: usize,
    /// Tracked region; the frame inset by 16 px when unset.
    pub roi: Option<Roi>,
    pub samples_per_edge: usize,
    pub query_spacing: f64,
    pub lambda1_rigid: f64,
    pub lambda2_rigid: f64,
    pub lambda1_coarse: f64,
    pub lambda2_coarse: f64,
    pub lambda1_fine: f64,
    pub lambda2_fine: f64,
    pub lambda3_greedy: f64,
    pub step: f64,
    /// Step size reached at the end of each stage (geometric decay).
    pub step_final: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub iters_rigid: usize,
    pub iters_level: usize,
    pub iters_greedy: usize,
    pub outlier_k: f64,
    pub outlier_tau: f64,
    /// Lower bound on the MSE used in the outlier threshold.
    pub mse_floor: f64,
    pub greedy_rounds: usize,
    /// Iterations between association refreshes.
    pub refresh: usize,
    /// Consecutive loss increases that abort the rigid stage.
    pub divergence_window: usize,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            bins: 4,
            max_levels: 1,
            grid_cols: 2,
            grid_rows: 2,
            roi: None,
            samples_per_edge: crate::frames::DEFAULT_SAMPLES_PER_EDGE,
            query_spacing: 4.0,
            lambda1_rigid: 0.01,
            lambda2_rigid: 1.0,
            lambda1_coarse: 0.01,
            lambda2_coarse: 1.0,
            lambda1_fine: 0.005,
            lambda2_fine: 1.0,
            lambda3_greedy: 0.1,
            step: 0.5,
            step_final: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            iters_rigid: 150,
            iters_level: 200,
            iters_greedy: 100,
            outlier_k: 3.0,
            outlier_tau: 0.5,
            mse_floor: 0.01,
            greedy_rounds: 3,
            refresh: 10,
            divergence_window: 50,
        }
    }
}

const TRACKER_KEYS: &[&str] = &[
    "bins",
    "max_levels",
    "grid_cols",
    "grid_rows",
    "roi",
    "samples_per_edge",
    "query_spacing",
    "lambda1_rigid",
    "lambda2_rigid",
    "lambda1_coarse",
    "lambda2_coarse",
    "lambda1_fine",
    "lambda2_fine",
    "lambda3_greedy",
    "step",
    "step_final",
    "beta1",
    "beta2",
    "iters_rigid",
    "iters_level",
    "iters_greedy",
    "outlier_k",
    "outlier_tau",
    "mse_floor",
    "greedy_rounds",
    "refresh",
    "divergence_window",
];

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.bins < 1 {
            return bad("bins must be at least 1");
        }
        if !(self.outlier_k > 1.0) {
            return bad("outlier_k must exceed 1");
        }
        if !(self.outlier_tau > 0.0 && self.outlier_tau < 1.0) {
            return bad("outlier_tau must lie in (0, 1)");
        }
        let lambdas = [
            self.lambda1_rigid,
            self.lambda2_rigid,
            self.lambda1_coarse,
            self.lambda2_coarse,
            self.lambda1_fine,
            self.lambda2_fine,
            self.lambda3_greedy,
        ];
        if lambdas.iter().any(|l| !(*l >= 0.0)) {
            return bad("objective weights must be non-negative");
        }
        if !(self.step > 0.0) || !(self.step_final > 0.0) {
            return bad("step sizes must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if self.grid_cols == 0 || self.grid_rows == 0 || self.samples_per_edge == 0 {
            return bad("grid_cols, grid_rows and samples_per_edge must be positive");
        }
        if self.refresh == 0 || self.divergence_window == 0 {
            return bad("refresh and divergence_window must be positive");
        }
        if !(self.query_spacing > 0.0) || !(self.mse_floor >= 0.0) {
            return bad("query_spacing must be positive and mse_floor non-negative");
        }
        Ok(())
    }

    pub fn from_config(cfg: &FlatConfig) -> Result<Self> {
        cfg.reject_unknown(TRACKER_KEYS)?;
        let mut c = Self::default();
        cfg.set("bins", &mut c.bins)?;
        cfg.set("max_levels", &mut c.max_levels)?;
        cfg.set("grid_cols", &mut c.grid_cols)?;
        cfg.set("grid_rows", &mut c.grid_rows)?;
        cfg.set("samples_per_edge", &mut c.samples_per_edge)?;
        cfg.set("query_spacing", &mut c.query_spacing)?;
        cfg.set("lambda1_rigid", &mut c.lambda1_rigid)?;
        cfg.set("lambda2_rigid", &mut c.lambda2_rigid)?;
        cfg.set("lambda1_coarse", &mut c.lambda1_coarse)?;
        cfg.set("lambda2_coarse", &mut c.lambda2_coarse)?;
        cfg.set("lambda1_fine", &mut c.lambda1_fine)?;
        cfg.set("lambda2_fine", &mut c.lambda2_fine)?;
        cfg.set("lambda3_greedy", &mut c.lambda3_greedy)?;
        cfg.set("step", &mut c.step)?;
        cfg.set("step_final", &mut c.step_final)?;
        cfg.set("beta1", &mut c.beta1)?;
        cfg.set("beta2", &mut c.beta2)?;
        cfg.set("iters_rigid", &mut c.iters_rigid)?;
        cfg.set("iters_level", &mut c.iters_level)?;
        cfg.set("iters_greedy", &mut c.iters_greedy)?;
        cfg.set("outlier_k", &mut c.outlier_k)?;
        cfg.set("outlier_tau", &mut c.outlier_tau)?;
        cfg.set("mse_floor", &mut c.mse_floor)?;
        cfg.set("greedy_rounds", &mut c.greedy_rounds)?;
        cfg.set("refresh", &mut c.refresh)?;
        cfg.set("divergence_window", &mut c.divergence_window)?;
        if let Some(r) = cfg.get_list::<f64>("roi")? {
            if r.len() != 4 {
                return Err(Error::Config("`roi` takes x0,y0,x1,y1".into()));
            }
            c.roi = Some(Roi::new(r[0], r[1], r[2], r[3])?);
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_config(&FlatConfig::load(path)?)
    }

    pub fn to_config(&self) -> String {
        let mut e: Vec<(&str, String)> = vec![
            ("bins", self.bins.to_string()),
            ("max_levels", self.max_levels.to_string()),
            ("grid_cols", self.grid_cols.to_string()),
            ("grid_rows", self.grid_rows.to_string()),
        ];
        if let Some(r) = self.roi {
            e.push(("roi", format!("{},{},{},{}", r.x0, r.y0, r.x1, r.y1)));
        }
        e.extend([
            ("samples_per_edge", self.samples_per_edge.to_string()),
            ("query_spacing", self.query_spacing.to_string()),
            ("lambda1_rigid", self.lambda1_rigid.to_string()),
            ("lambda2_rigid", self.lambda2_rigid.to_string()),
            ("lambda1_coarse", self.lambda1_coarse.to_string()),
            ("lambda2_coarse", self.lambda2_coarse.to_string()),
            ("lambda1_fine", self.lambda1_fine.to_string()),
            ("lambda2_fine", self.lambda2_fine.to_string()),
            ("lambda3_greedy", self.lambda3_greedy.to_string()),
            ("step", self.step.to_string()),
            ("step_final", self.step_final.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("iters_rigid", self.iters_rigid.to_string()),
            ("iters_level", self.iters_level.to_string()),
            ("iters_greedy", self.iters_greedy.to_string()),
            ("outlier_k", self.outlier_k.to_string()),
            ("outlier_tau", self.outlier_tau.to_string()),
            ("mse_floor", self.mse_floor.to_string()),
            ("greedy_rounds", self.greedy_rounds.to_string()),
            ("refresh", self.refresh.to_string()),
            ("divergence_window", self.divergence_window.to_string()),
        ]);
        config::render(&e)
    }

    pub fn roi_for(&self, width: usize, height: usize) -> Result<Roi> {
        match self.roi {
            Some(r) => Ok(r),
            None => Roi::inset(width, height, crate::simulator::DEFAULT_ROI_MARGIN),
        }
    }

    pub fn lambdas(&self, stage: Stage) -> Lambdas {
        match stage {
            Stage::Rigid => Lambdas::new(self.lambda1_rigid, self.lambda2_rigid, 0.0),
            Stage::Coarse(_) => Lambdas::new(self.lambda1_coarse, self.lambda2_coarse, 0.0),
            Stage::Fine(_) => Lambdas::new(self.lambda1_fine, self.lambda2_fine, 0.0),
            Stage::Greedy(_) => Lambdas::new(self.lambda1_fine, self.lambda2_fine, self.lambda3_greedy),
        }
    }

    /// Stage of optimization level `level`.
    pub fn level_stage(&self, level: usize) -> Stage {
        if level < self.max_levels {
            Stage::Coarse(level)
        } else {
            Stage::Fine(level)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Rigid,
    Coarse(usize),
    Fine(usize),
    Greedy(usize),
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stage::Rigid => write!(f, "rigid"),
            Stage::Coarse(l) => write!(f, "level{l}"),
            Stage::Fine(l) => write!(f, "level{l}"),
            Stage::Greedy(r) => write!(f, "greedy{r}"),
        }
    }
}

/// Objective weights: `cm` on both contrast terms, `cc` on the frame term,
/// `strain` on strain continuity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lambdas {
    pub cm: f64,
    pub cc: f64,
    pub strain: f64,
}

impl Lambdas {
    pub const fn new(cm: f64, cc: f64, strain: f64) -> Self {
        Self { cm, cc, strain }
    }
}

/// Inputs shared by every objective evaluation in a window.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveContext<'a> {
    pub window: &'a EventWindow,
    pub frames: FrameSet<'a>,
    pub grid: &'a SampleGrid,
    pub sensor: SensorSize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ObjectiveTerms {
    pub loss: f64,
    pub warp1: f64,
    pub warp2: f64,
    pub cc: f64,
    pub strain: f64,
}

/// `λ1 (warp1 + warp2) − λ2 f_CC + λ3 f_S`, to be minimized. Terms with a
/// zero weight are skipped and reported as 0. With `grad`, the gradient
/// with respect to every knot position is added into it.
pub fn total_objective(
    tf: &TrajectoryField,
    ctx: &ObjectiveContext<'_>,
    assoc: &[Option<Association>],
    lambdas: Lambdas,
    mut grad: Option<&mut [Point2]>,
) -> Result<ObjectiveTerms> {
    let mut t = ObjectiveTerms::default();
    if lambdas.cm != 0.0 {
        t.warp1 = warp1_objective(
            ctx.window,
            assoc,
            tf,
            ctx.sensor,
            grad.as_deref_mut().map(|g| (g, lambdas.cm)),
        )?
        .value;
        t.warp2 = warp2_objective(
            ctx.window,
            assoc,
            tf,
            ctx.frames.previous.t,
            ctx.frames.current.t,
            ctx.sensor,
            grad.as_deref_mut().map(|g| (g, lambdas.cm)),
        )?
        .value;
    }
    if lambdas.cc != 0.0 {
        match frame_objective(tf, ctx.frames, ctx.grid, grad.as_deref_mut().map(|g| (g, -lambdas.cc))) {
            Ok(v) => t.cc = v.value,
            Err(Error::NoTexture) => warn!("no triangle has usable texture; frame term skipped"),
            Err(e) => return Err(e),
        }
    }
    if lambdas.strain != 0.0 {
        let k = tf.num_knots();
        let mesh = tf.mesh();
        let scale = lambdas.strain / k as f64;
        let mut knot_grad = vec![Point2::ZERO; tf.num_anchors()];
        for knot in 0..k {
            let pos = tf.knot_positions(knot);
            knot_grad.iter_mut().for_each(|g| *g = Point2::ZERO);
            t.strain += continuity_with_gradient(mesh, &pos, &mut knot_grad, scale);
            if let Some(g) = grad.as_deref_mut() {
                for (a, kg) in knot_grad.iter().enumerate() {
                    g[a * k + knot] += *kg;
                }
            }
        }
        t.strain /= k as f64;
    }
    t.loss = lambdas.cm * (t.warp1 + t.warp2) - lambdas.cc * t.cc + lambdas.strain * t.strain;
    Ok(t)
}

/// First/second-moment gradient descent with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    beta1: f64,
    beta2: f64,
}

impl Adam {
    const EPS: f64 = 1e-8;

    pub fn new(dim: usize, beta1: f64, beta2: f64) -> Self {
        Self {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
            beta1,
            beta2,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + Self::EPS);
        }
    }
}

/// Maps a flat parameter vector onto trajectory positions. Knot 0 is never
/// a parameter: it carries the previous window's end state.
pub enum Parameterization<'a> {
    /// Per knot `(s, tx, ty)`: rotation by `s / radius` about the knot's
    /// centroid, then translation.
    Rigid {
        base: &'a TrajectoryField,
        centers: Vec<Point2>,
        radius: f64,
    },
    /// Increments at the first `active` anchors, prolonged to finer anchors
    /// by edge-midpoint averaging. Anchors with `free[a] == false` stay put.
    Anchors {
        base: &'a TrajectoryField,
        active: usize,
        free: Vec<bool>,
    },
}

impl<'a> Parameterization<'a> {
    pub fn rigid(base: &'a TrajectoryField) -> Self {
        let k = base.num_knots();
        let centers: Vec<Point2> = (0..k).map(|i| centroid_of(&base.knot_positions(i))).collect();
        let pos0 = base.knot_positions(0);
        let r2 = pos0.iter().map(|p| (*p - centers[0]).dot(*p - centers[0])).sum::<f64>() / pos0.len().max(1) as f64;
        Self::Rigid {
            base,
            centers,
            radius: r2.sqrt().max(1.0),
        }
    }

    pub fn anchors(base: &'a TrajectoryField, active: usize, frozen: &BTreeSet<usize>) -> Self {
        let free = (0..active).map(|a| !frozen.contains(&a)).collect();
        Self::Anchors { base, active, free }
    }

    pub fn base(&self) -> &'a TrajectoryField {
        match self {
            Self::Rigid { base, .. } | Self::Anchors { base, .. } => base,
        }
    }

    pub fn dim(&self) -> usize {
        let m = self.base().num_knots() - 1;
        match self {
            Self::Rigid { .. } => 3 * m,
            Self::Anchors { active, .. } => 2 * active * m,
        }
    }

    pub fn apply(&self, params: &[f64]) -> TrajectoryField {
        let params = &self.cumulate(params);
        let base = self.base();
        let k = base.num_knots();
        let mut tf = base.clone();
        match self {
            Self::Rigid { centers, radius, .. } => {
                let pos = tf.positions_mut();
                for knot in 1..k {
                    let p = &params[3 * (knot - 1)..3 * knot];
                    let (s, c) = (p[0] / radius).sin_cos();
                    let ctr = centers[knot];
                    for a in 0..pos.len() / k {
                        let d = base.positions()[a * k + knot] - ctr;
                        pos[a * k + knot] =
                            Point2::new(c * d.x - s * d.y + ctr.x + p[1], s * d.x + c * d.y + ctr.y + p[2]);
                    }
                }
            }
            Self::Anchors { active, .. } => {
                let delta = self.prolong(params, *active);
                for (p, d) in tf.positions_mut().iter_mut().zip(delta) {
                    *p += d;
                }
            }
        }
        tf
    }

    fn prolong(&self, params: &[f64], active: usize) -> Vec<Point2> {
        let base = self.base();
        let k = base.num_knots();
        let n = base.num_anchors();
        let mut delta = vec![Point2::ZERO; n * k];
        for a in 0..active {
            for knot in 1..k {
                let i = 2 * (a * (k - 1) + knot - 1);
                delta[a * k + knot] = Point2::new(params[i], params[i + 1]);
            }
        }
        let parents = &base.mesh().anchor_parents;
        for m in active..n {
            let [p, q] = parents[m].expect("anchors beyond the active level have parents");
            for knot in 1..k {
                delta[m * k + knot] = (delta[p * k + knot] + delta[q * k + knot]) * 0.5;
            }
        }
        delta
    }

    /// Values per knot are stored as increments over the previous knot, so
    /// a step at an early knot carries every later knot along.
    fn stride(&self) -> (usize, usize) {
        let m = self.base().num_knots() - 1;
        match self {
            Self::Rigid { .. } => (3, m),
            Self::Anchors { .. } => (2, m),
        }
    }

    /// Increments to absolute per-knot values.
    fn cumulate(&self, params: &[f64]) -> Vec<f64> {
        let (width, m) = self.stride();
        let mut out = params.to_vec();
        match self {
            Self::Rigid { .. } => {
                for knot in 1..m {
                    for c in 0..width {
                        out[knot * width + c] += out[(knot - 1) * width + c];
                    }
                }
            }
            Self::Anchors { .. } => {
                for block in out.chunks_mut(width * m) {
                    for knot in 1..m {
                        for c in 0..width {
                            block[knot * width + c] += block[(knot - 1) * width + c];
                        }
                    }
                }
            }
        }
        out
    }

    /// Transpose of [`Self::cumulate`]: suffix sums over knots.
    fn decumulate_grad(&self, grad: &mut [f64]) {
        let (width, m) = self.stride();
        let blocks: Vec<&mut [f64]> = match self {
            Self::Rigid { .. } => vec![grad],
            Self::Anchors { .. } => grad.chunks_mut(width * m).collect(),
        };
        for block in blocks {
            for knot in (0..m.saturating_sub(1)).rev() {
                for c in 0..width {
                    block[knot * width + c] += block[(knot + 1) * width + c];
                }
            }
        }
    }

    /// Chain rule from position gradients to parameter gradients.
    pub fn pullback(&self, params: &[f64], pos_grad: &[Point2]) -> Vec<f64> {
        let mut out = self.pullback_absolute(&self.cumulate(params), pos_grad);
        self.decumulate_grad(&mut out);
        out
    }

    fn pullback_absolute(&self, params: &[f64], pos_grad: &[Point2]) -> Vec<f64> {
        let base = self.base();
        let k = base.num_knots();
        let mut out = vec![0.0; self.dim()];
        match self {
            Self::Rigid { centers, radius, .. } => {
                for knot in 1..k {
                    let s = params[3 * (knot - 1)] / radius;
                    let (sn, cs) = s.sin_cos();
                    let ctr = centers[knot];
                    let (mut gs, mut gx, mut gy) = (0.0, 0.0, 0.0);
                    for a in 0..base.num_anchors() {
                        let g = pos_grad[a * k + knot];
                        let d = base.positions()[a * k + knot] - ctr;
                        gs += g.x * (-sn * d.x - cs * d.y) + g.y * (cs * d.x - sn * d.y);
                        gx += g.x;
                        gy += g.y;
                    }
                    out[3 * (knot - 1)] = gs / radius;
                    out[3 * (knot - 1) + 1] = gx;
                    out[3 * (knot - 1) + 2] = gy;
                }
            }
            Self::Anchors { active, free, .. } => {
                let n = base.num_anchors();
                let mut g = pos_grad.to_vec();
                let parents = &base.mesh().anchor_parents;
                for m in (*active..n).rev() {
                    let [p, q] = parents[m].expect("anchors beyond the active level have parents");
                    for knot in 1..k {
                        let half = g[m * k + knot] * 0.5;
                        g[p * k + knot] += half;
                        g[q * k + knot] += half;
                    }
                }
                for a in 0..*active {
                    if !free[a] {
                        continue;
                    }
                    for knot in 1..k {
                        let i = 2 * (a * (k - 1) + knot - 1);
                        out[i] = g[a * k + knot].x;
                        out[i + 1] = g[a * k + knot].y;
                    }
                }
            }
        }
        out
    }
}

/// One stage's loss trace and outcome.
#[derive(Debug, Clone)]
pub struct StageTrace {
    pub stage: Stage,
    pub losses: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub reverted: bool,
}

/// Loss of `tf` with its own association.
pub fn evaluate(tf: &TrajectoryField, ctx: &ObjectiveContext<'_>, lambdas: Lambdas) -> Result<ObjectiveTerms> {
    let assoc = associate(&ctx.window.events, tf);
    total_objective(tf, ctx, &assoc, lambdas, None)
}

/// Runs Adam on `param` for `iters` steps. Returns the final field (or the
/// base field when the stage made the loss worse) and its trace.
pub fn run_stage(
    param: &Parameterization<'_>,
    ctx: &ObjectiveContext<'_>,
    cfg: &TrackerConfig,
    stage: Stage,
    iters: usize,
    detect_divergence: bool,
) -> Result<(TrajectoryField, StageTrace)> {
    let lambdas = cfg.lambdas(stage);
    let base = param.base();
    let initial_loss = evaluate(base, ctx, lambdas)?.loss;
    let dim = param.dim();
    let mut params = vec![0.0; dim];
    let mut adam = Adam::new(dim, cfg.beta1, cfg.beta2);
    let mut tf = base.clone();
    let mut assoc = Vec::new();
    let mut losses = Vec::with_capacity(iters);
    let mut rising = 0usize;
    let decay = (cfg.step_final / cfg.step).ln();
    let mut pos_grad = vec![Point2::ZERO; tf.positions().len()];
    for it in 0..iters {
        if it % cfg.refresh == 0 {
            assoc = associate(&ctx.window.events, &tf);
        }
        pos_grad.iter_mut().for_each(|g| *g = Point2::ZERO);
        let terms = total_objective(&tf, ctx, &assoc, lambdas, Some(&mut pos_grad))?;
        if let Some(&prev) = losses.last() {
            rising = if terms.loss > prev { rising + 1 } else { 0 };
        }
        losses.push(terms.loss);
        if detect_divergence && rising >= cfg.divergence_window {
            return Err(Error::RigidStageDiverged(it));
        }
        let g = param.pullback(&params, &pos_grad);
        let lr = cfg.step * (decay * it as f64 / iters.max(1) as f64).exp();
        adam.step(&mut params, &g, lr);
        tf = param.apply(&params);
    }
    let final_loss = evaluate(&tf, ctx, lambdas)?.loss;
    let reverted = !(final_loss <= initial_loss);
    if reverted {
        debug!("stage {stage}: loss {final_loss:.6} above initial {initial_loss:.6}; reverting");
        tf = base.clone();
    }
    debug!("stage {stage}: {initial_loss:.6} -> {final_loss:.6}");
    Ok((
        tf,
        StageTrace {
            stage,
            losses,
            initial_loss,
            final_loss: if reverted { initial_loss } else { final_loss },
            reverted,
        },
    ))
}

/// Per-knot rotation + translation of the whole mesh about its centroid.
pub fn rigid_stage(
    tf: &TrajectoryField,
    ctx: &ObjectiveContext<'_>,
    cfg: &TrackerConfig,
) -> Result<(TrajectoryField, StageTrace)> {
    let p = Parameterization::rigid(tf);
    run_stage(&p, ctx, cfg, Stage::Rigid, cfg.iters_rigid, true)
}

/// Per-triangle outlier statistics of the current frame against the
/// initial frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    /// Fraction of outlier samples per triangle.
    pub p: Vec<f64>,
    pub converged: Vec<bool>,
    pub no_texture: Vec<bool>,
    /// Frozen anchors, sorted.
    pub fixed: BTreeSet<usize>,
    pub rounds: usize,
    pub greedy_stalled: bool,
    /// Median over usable triangles of the mean squared normalized residual.
    pub mse: f64,
}

impl ConvergenceReport {
    pub fn all_converged(&self) -> bool {
        self.converged.iter().all(|&c| c)
    }

    pub fn num_converged(&self) -> usize {
        self.converged.iter().filter(|&&c| c).count()
    }
}

fn standardize(v: &[f64]) -> Option<Vec<f64>> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if !(sd > MIN_SIGMA) {
        return None;
    }
    Some(v.iter().map(|x| (x - mean) / sd).collect())
}

/// Samples each triangle in the current frame (at its end-of-window
/// position) and the initial frame (at rest), standardizes both, and counts
/// samples whose squared residual exceeds `k · max(MSE, mse_floor)`, where
/// MSE is the median of the per-triangle mean squared residuals.
pub fn assess_convergence(
    tf: &TrajectoryField,
    frames: FrameSet<'_>,
    grid: &SampleGrid,
    k: f64,
    tau: f64,
    mse_floor: f64,
) -> Result<ConvergenceReport> {
    let nt = tf.mesh().num_triangles();
    let mut se: Vec<Option<Vec<f64>>> = Vec::with_capacity(nt);
    for tri in 0..nt {
        let s = triangle_samples(tf, tri, frames, grid)?;
        let entry = if s.current.len() < MIN_VALID_SAMPLES {
            None
        } else {
            match (standardize(&s.current), standardize(&s.initial)) {
                (Some(c), Some(i)) => Some(c.iter().zip(&i).map(|(a, b)| (a - b).powi(2)).collect()),
                _ => None,
            }
        };
        se.push(entry);
    }
    let mut tri_mse: Vec<f64> = se
        .iter()
        .flatten()
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
        .collect();
    tri_mse.sort_by(f64::total_cmp);
    let mse = match tri_mse.len() {
        0 => 0.0,
        n if n % 2 == 1 => tri_mse[n / 2],
        n => 0.5 * (tri_mse[n / 2 - 1] + tri_mse[n / 2]),
    };
    let threshold = k * mse.max(mse_floor);
    let mut p = Vec::with_capacity(nt);
    let mut converged = Vec::with_capacity(nt);
    let mut no_texture = Vec::with_capacity(nt);
    for e in &se {
        match e {
            Some(v) => {
                let pj = v.iter().filter(|&&x| x > threshold).count() as f64 / v.len() as f64;
                p.push(pj);
                converged.push(pj <= tau);
                no_texture.push(false);
            }
            None => {
                p.push(1.0);
                converged.push(false);
                no_texture.push(true);
            }
        }
    }
    Ok(ConvergenceReport {
        p,
        converged,
        no_texture,
        fixed: BTreeSet::new(),
        rounds: 0,
        greedy_stalled: false,
        mse,
    })
}

pub fn assess(tf: &TrajectoryField, ctx: &ObjectiveContext<'_>, cfg: &TrackerConfig) -> Result<ConvergenceReport> {
    assess_convergence(tf, ctx.frames, ctx.grid, cfg.outlier_k, cfg.outlier_tau, cfg.mse_floor)
}

/// Level-by-level refinement. A coarser mesh is subdivided as the levels
/// advance; a mesh already at the finest level is optimized through
/// increments of its coarser-level anchors.
pub fn coarse_to_fine(
    tf: &TrajectoryField,
    ctx: &ObjectiveContext<'_>,
    cfg: &TrackerConfig,
) -> Result<(TrajectoryField, ConvergenceReport, Vec<StageTrace>)> {
    let mut tf = tf.clone();
    let mut traces = Vec::new();
    for level in 0..=cfg.max_levels {
        while tf.mesh().level < level {
            tf = tf.subdivide();
        }
        let active = tf.mesh().anchors_at_level(level);
        let stage = cfg.level_stage(level);
        let p = Parameterization::anchors(&tf, active, &BTreeSet::new());
        let (next, trace) = run_stage(&p, ctx, cfg, stage, cfg.iters_level, false)?;
        tf = next;
        traces.push(trace);
    }
    let report = assess(&tf, ctx, cfg)?;
    Ok((tf, report, traces))
}

/// Anchors all of whose incident triangles converged.
pub fn freezable_anchors(tf: &TrajectoryField, report: &ConvergenceReport) -> BTreeSet<usize> {
    tf.mesh()
        .incident_triangles()
        .iter()
        .enumerate()
        .filter(|(_, tris)| !tris.is_empty() && tris.iter().all(|&t| report.converged[t]))
        .map(|(a, _)| a)
        .collect()
}

/// One neighborhood-greedy round: freeze anchors of converged regions,
/// re-optimize the rest with strain continuity active, re-assess.
pub fn greedy_round(
    tf: &TrajectoryField,
    ctx: &ObjectiveContext<'_>,
    cfg: &TrackerConfig,
    report: &ConvergenceReport,
) -> Result<(TrajectoryField, ConvergenceReport, Option<StageTrace>)> {
    if report.all_converged() {
        return Ok((tf.clone(), report.clone(), None));
    }
    let mut fixed = report.fixed.clone();
    fixed.extend(freezable_anchors(tf, report));
    let p = Parameterization::anchors(tf, tf.num_anchors(), &fixed);
    let round = report.rounds + 1;
    let (next, trace) = run_stage(&p, ctx, cfg, Stage::Greedy(round), cfg.iters_greedy, false)?;
    let mut new_report = assess(&next, ctx, cfg)?;
    new_report.fixed = fixed;
    new_report.rounds = round;
    Ok((next, new_report, Some(trace)))
}

/// Greedy rounds until every triangle converged or the round budget is
/// spent; flags the report as stalled in the latter case.
pub fn greedy_refine(
    tf: &TrajectoryField,
    ctx: &ObjectiveContext<'_>,
    cfg: &TrackerConfig,
    report: ConvergenceReport,
) -> Result<(TrajectoryField, ConvergenceReport, Vec<StageTrace>)> {
    let mut tf = tf.clone();
    let mut report = report;
    let mut traces = Vec::new();
    while !report.all_converged() && report.rounds < cfg.greedy_rounds {
        let (next, rep, trace) = greedy_round(&tf, ctx, cfg, &report)?;
        tf = next;
        report = rep;
        traces.extend(trace);
    }
    if !report.all_converged() && cfg.greedy_rounds > 0 {
        report.greedy_stalled = true;
        warn!(
            "{} of {} triangles unconverged after {} greedy round(s)",
            report.converged.len() - report.num_converged(),
            report.converged.len(),
            report.rounds
        );
    }
    Ok((tf, report, traces))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{partition_bins, Event, Polarity};
    use crate::frames::{sample_grid, Frame};
    use crate::geometry::SimplicialMesh;
    use crate::trajectory::TimeGrid;
    use approx::assert_abs_diff_eq;
    use std::sync::Arc;

    #[test]
    fn config_round_trip_and_validation() {
        let c = TrackerConfig {
            roi: Some(Roi::new(1.0, 2.0, 30.0, 40.0).unwrap()),
            bins: 6,
            lambda3_greedy: 0.25,
            ..TrackerConfig::default()
        };
        let parsed = FlatConfig::parse(&c.to_config(), Path::new("c")).unwrap();
        assert_eq!(TrackerConfig::from_config(&parsed).unwrap(), c);
        for bad in [
            "outlier_k = 1",
            "outlier_tau = 1.5",
            "bins = 0",
            "lambda2_fine = -1",
            "nope = 3",
        ] {
            let cfg = FlatConfig::parse(bad, Path::new("c")).unwrap();
            assert!(TrackerConfig::from_config(&cfg).is_err(), "{bad}");
        }
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut x = vec![5.0, -3.0];
        let mut adam = Adam::new(2, 0.9, 0.999);
        for i in 0..400 {
            let g = vec![2.0 * (x[0] - 1.0), 8.0 * (x[1] + 2.0)];
            adam.step(&mut x, &g, 0.5 * (0.01f64.ln() * i as f64 / 400.0).exp());
        }
        assert_abs_diff_eq!(x[0], 1.0, epsilon = 1e-2);
        assert_abs_diff_eq!(x[1], -2.0, epsilon = 1e-2);
    }

    fn field(levels: usize) -> TrajectoryField {
        let mut mesh = SimplicialMesh::grid(Roi::new(10.0, 10.0, 50.0, 50.0).unwrap(), 2, 2).unwrap();
        for _ in 0..levels {
            mesh = mesh.subdivide();
        }
        TrajectoryField::from_fn(Arc::new(mesh), TimeGrid::uniform(0.0, 1.0, 3).unwrap(), |a, p, t| {
            p + Point2::new(t * (a as f64 * 0.3).sin(), t * 0.5)
        })
    }

    fn check_pullback(p: &Parameterization<'_>, params: &[f64]) {
        // linear functional L = Σ c_i · position_i has gradient c
        let n = p.base().positions().len();
        let c: Vec<Point2> = (0..n)
            .map(|i| Point2::new((i as f64).sin(), (i as f64 * 0.7).cos()))
            .collect();
        let value = |q: &[f64]| -> f64 { p.apply(q).positions().iter().zip(&c).map(|(x, c)| x.dot(*c)).sum() };
        let g = p.pullback(params, &c);
        let h = 1e-6;
        for i in 0..params.len() {
            let mut a = params.to_vec();
            let mut b = params.to_vec();
            a[i] += h;
            b[i] -= h;
            let fd = (value(&a) - value(&b)) / (2.0 * h);
            assert_abs_diff_eq!(g[i], fd, epsilon = 1e-5 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn parameterizations_chain_correctly() {
        let tf = field(1);
        let rigid = Parameterization::rigid(&tf);
        let params: Vec<f64> = (0..rigid.dim()).map(|i| 0.3 * (i as f64 + 1.0).sin()).collect();
        check_pullback(&rigid, &params);

        let mut frozen = BTreeSet::new();
        frozen.insert(1);
        let coarse = Parameterization::anchors(&tf, tf.mesh().anchors_at_level(0), &frozen);
        let params: Vec<f64> = (0..coarse.dim()).map(|i| (i as f64 * 0.9).cos()).collect();
        check_pullback_masked(&coarse, &params, &frozen);
    }

    fn check_pullback_masked(p: &Parameterization<'_>, params: &[f64], frozen: &BTreeSet<usize>) {
        let k = p.base().num_knots();
        let n = p.base().positions().len();
        let c: Vec<Point2> = (0..n)
            .map(|i| Point2::new((i as f64).sin(), (i as f64 * 0.7).cos()))
            .collect();
        let g = p.pullback(params, &c);
        let h = 1e-6;
        for i in 0..params.len() {
            let anchor = i / (2 * (k - 1));
            if frozen.contains(&anchor) {
                assert_eq!(g[i], 0.0);
                continue;
            }
            let mut a = params.to_vec();
            let mut b = params.to_vec();
            a[i] += h;
            b[i] -= h;
            let va: f64 = p.apply(&a).positions().iter().zip(&c).map(|(x, c)| x.dot(*c)).sum();
            let vb: f64 = p.apply(&b).positions().iter().zip(&c).map(|(x, c)| x.dot(*c)).sum();
            assert_abs_diff_eq!(g[i], (va - vb) / (2.0 * h), epsilon = 1e-5);
        }
    }

    #[test]
    fn coarse_increments_reproduce_subdivision() {
        // optimizing level-0 increments on a level-1 mesh equals moving the
        // coarse mesh and subdividing it
        let coarse = field(0);
        let fine = coarse.subdivide();
        let pc = Parameterization::anchors(&coarse, coarse.num_anchors(), &BTreeSet::new());
        let pf = Parameterization::anchors(&fine, fine.mesh().anchors_at_level(0), &BTreeSet::new());
        let params: Vec<f64> = (0..pc.dim()).map(|i| (i as f64 * 1.7).sin() * 2.0).collect();
        let a = pc.apply(&params).subdivide();
        let b = pf.apply(&params);
        for (x, y) in a.positions().iter().zip(b.positions()) {
            assert_abs_diff_eq!((*x - *y).norm(), 0.0, epsilon = 1e-12);
        }
        // knot 0 never moves
        for anchor in 0..b.num_anchors() {
            assert_eq!(b.knot_position(anchor, 0), fine.knot_position(anchor, 0));
        }
    }

    fn speckle(w: usize, h: usize, shift: Point2, t: f64) -> Frame {
        let px = (0..w * h)
            .map(|i| {
                let x = (i % w) as f64 - shift.x;
                let y = (i / w) as f64 - shift.y;
                0.5 + 0.2 * (0.7 * x).sin() * (0.5 * y).cos() + 0.15 * (0.31 * x + 0.23 * y).sin()
            })
            .collect();
        Frame::new(w, h, px, t).unwrap()
    }

    #[test]
    fn objective_weights_compose() {
        let tf = field(0);
        let events: Vec<Event> = (0..40)
            .map(|i| {
                Event::new(
                    15.0 + (i % 20) as f64,
                    20.0 + (i / 20) as f64 * 3.0,
                    i as f64 / 40.0,
                    Polarity::Positive,
                )
            })
            .collect();
        let window = partition_bins(events, 0.0, 1.0, 3).unwrap();
        let f0 = speckle(64, 64, Point2::ZERO, 0.0);
        let f1 = speckle(64, 64, Point2::new(0.0, 0.5), 1.0);
        let grid = sample_grid(4).unwrap();
        let ctx = ObjectiveContext {
            window: &window,
            frames: FrameSet {
                initial: &f0,
                previous: &f0,
                current: &f1,
            },
            grid: &grid,
            sensor: SensorSize::new(64, 64),
        };
        let assoc = associate(&window.events, &tf);
        let zero = total_objective(&tf, &ctx, &assoc, Lambdas::new(0.0, 0.0, 0.0), None).unwrap();
        assert_eq!(zero.loss, 0.0);
        let cm = total_objective(&tf, &ctx, &assoc, Lambdas::new(1.0, 0.0, 0.0), None).unwrap();
        assert_abs_diff_eq!(cm.loss, cm.warp1 + cm.warp2, epsilon = 1e-15);
        let all = total_objective(&tf, &ctx, &assoc, Lambdas::new(0.7, 0.3, 2.0), None).unwrap();
        assert_abs_diff_eq!(
            all.loss,
            0.7 * (all.warp1 + all.warp2) - 0.3 * all.cc + 2.0 * all.strain,
            epsilon = 1e-12
        );
    }

    #[test]
    fn freezing_needs_every_incident_triangle() {
        let tf = field(0);
        let nt = tf.mesh().num_triangles();
        let mut report = ConvergenceReport {
            p: vec![0.0; nt],
            converged: vec![true; nt],
            no_texture: vec![false; nt],
            fixed: BTreeSet::new(),
            rounds: 0,
            greedy_stalled: false,
            mse: 0.0,
        };
        assert_eq!(freezable_anchors(&tf, &report).len(), tf.num_anchors());
        report.converged[0] = false;
        let frozen = freezable_anchors(&tf, &report);
        for a in tf.mesh().triangles[0].0 {
            assert!(!frozen.contains(&a));
        }
        assert_eq!(frozen.len(), tf.num_anchors() - 3);
    }
}
