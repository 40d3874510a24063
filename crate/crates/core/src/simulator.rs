//! Synthetic ground truth: a speckle texture carried by an analytic
//! deformation field, rendered to frames and converted to events with a
//! per-pixel log-intensity threshold model.

use std::f64::consts::PI;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;

use crate::config::{self, FlatConfig};
use crate::error::{Error, Result};
use crate::evaluation::{DisplacementRow, DisplacementTable};
use crate::events::{write_events_csv, Event, Polarity, SensorSize};
use crate::frames::{write_manifest, write_pgm, Frame};
use crate::geometry::{Point2, Roi};

/// Offset inside `log(I + LOG_OFFSET)` keeping black pixels finite.
pub const LOG_OFFSET: f64 = 0.01;
/// Intensity where no texture exists.
pub const BACKGROUND: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeformationFamily {
    Translate,
    Rotate,
    AffineStretch,
    SinusoidalBend,
    RadialSqueeze,
}

impl DeformationFamily {
    pub fn name(self) -> &'static str {
        match self {
            DeformationFamily::Translate => "translate",
            DeformationFamily::Rotate => "rotate",
            DeformationFamily::AffineStretch => "affine_stretch",
            DeformationFamily::SinusoidalBend => "sinusoidal_bend",
            DeformationFamily::RadialSqueeze => "radial_squeeze",
        }
    }
}

impl FromStr for DeformationFamily {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "translate" => DeformationFamily::Translate,
            "rotate" => DeformationFamily::Rotate,
            "affine_stretch" => DeformationFamily::AffineStretch,
            "sinusoidal_bend" => DeformationFamily::SinusoidalBend,
            "radial_squeeze" => DeformationFamily::RadialSqueeze,
            other => return Err(format!("unknown deformation family `{other}`")),
        })
    }
}

/// One additive displacement component with its peak amplitude in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Motion {
    pub family: DeformationFamily,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    /// Blobs per square pixel.
    pub speckle_density: f64,
    /// Gaussian blob radius (sigma), pixels.
    pub speckle_radius: f64,
    /// Components summed into the displacement field.
    pub motions: Vec<Motion>,
    /// Direction of the translation component, degrees from +x.
    pub direction_deg: f64,
    pub duration: f64,
    pub frame_rate: f64,
    /// Contrast threshold `c` in log units.
    pub threshold: f64,
    pub refractory: f64,
    /// Background noise events per pixel per second.
    pub noise_rate: f64,
    /// Log-intensity sampling rate as a multiple of the frame rate.
    pub fine_factor: usize,
    pub seed: u64,
    /// Region whose dense query points get ground truth; defaults to the
    /// image inset by 16 px.
    pub roi: Option<Roi>,
    pub query_spacing: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            speckle_density: 0.08,
            speckle_radius: 1.5,
            motions: vec![Motion {
                family: DeformationFamily::Translate,
                amplitude: 10.0,
            }],
            direction_deg: 0.0,
            duration: 2.0,
            frame_rate: 5.0,
            threshold: 0.2,
            refractory: 1e-3,
            noise_rate: 0.0,
            fine_factor: 20,
            seed: 1,
            roi: None,
            query_spacing: 4.0,
        }
    }
}

pub const DEFAULT_ROI_MARGIN: f64 = 16.0;

const SCENE_KEYS: &[&str] = &[
    "width",
    "height",
    "speckle_density",
    "speckle_radius",
    "family",
    "amplitude",
    "direction_deg",
    "duration",
    "frame_rate",
    "threshold",
    "refractory",
    "noise_rate",
    "fine_factor",
    "seed",
    "roi",
    "query_spacing",
];

impl SceneSpec {
    pub fn single(family: DeformationFamily, amplitude: f64) -> Self {
        Self {
            motions: vec![Motion { family, amplitude }],
            ..Self::default()
        }
    }

    pub fn sensor(&self) -> SensorSize {
        SensorSize::new(self.width, self.height)
    }

    pub fn center(&self) -> Point2 {
        Point2::new((self.width as f64 - 1.0) / 2.0, (self.height as f64 - 1.0) / 2.0)
    }

    pub fn roi(&self) -> Result<Roi> {
        match self.roi {
            Some(r) => Ok(r),
            None => Roi::inset(self.width, self.height, DEFAULT_ROI_MARGIN),
        }
    }

    pub fn query_points(&self) -> Result<Vec<Point2>> {
        Ok(self.roi()?.grid_points(self.query_spacing))
    }

    pub fn num_frames(&self) -> usize {
        (self.duration * self.frame_rate + 1e-9).floor() as usize + 1
    }

    pub fn frame_time(&self, index: usize) -> f64 {
        index as f64 / self.frame_rate
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.width < 8 || self.height < 8 {
            return bad("image must be at least 8x8");
        }
        if !(self.threshold > 0.0) {
            return bad("threshold must be positive");
        }
        if !(self.frame_rate > 0.0) || !(self.duration > 0.0) {
            return bad("frame_rate and duration must be positive");
        }
        if self.motions.iter().any(|m| !(m.amplitude >= 0.0)) {
            return bad("amplitudes must be non-negative");
        }
        if !(self.speckle_radius > 0.0) || !(self.speckle_density >= 0.0) {
            return bad("speckle radius must be positive and density non-negative");
        }
        if !(self.refractory >= 0.0) || !(self.noise_rate >= 0.0) || self.fine_factor < 20 {
            return bad("refractory and noise rate must be non-negative; fine_factor at least 20");
        }
        if !(self.query_spacing > 0.0) {
            return bad("query_spacing must be positive");
        }
        Ok(())
    }

    pub fn from_config(cfg: &FlatConfig) -> Result<Self> {
        cfg.reject_unknown(SCENE_KEYS)?;
        let mut s = Self::default();
        cfg.set("width", &mut s.width)?;
        cfg.set("height", &mut s.height)?;
        cfg.set("speckle_density", &mut s.speckle_density)?;
        cfg.set("speckle_radius", &mut s.speckle_radius)?;
        cfg.set("direction_deg", &mut s.direction_deg)?;
        cfg.set("duration", &mut s.duration)?;
        cfg.set("frame_rate", &mut s.frame_rate)?;
        cfg.set("threshold", &mut s.threshold)?;
        cfg.set("refractory", &mut s.refractory)?;
        cfg.set("noise_rate", &mut s.noise_rate)?;
        cfg.set("fine_factor", &mut s.fine_factor)?;
        cfg.set("seed", &mut s.seed)?;
        cfg.set("query_spacing", &mut s.query_spacing)?;
        let families: Option<Vec<DeformationFamily>> = cfg.get_list("family")?;
        let amplitudes: Option<Vec<f64>> = cfg.get_list("amplitude")?;
        match (families, amplitudes) {
            (Some(f), Some(a)) if f.len() == a.len() => {
                s.motions = f
                    .into_iter()
                    .zip(a)
                    .map(|(family, amplitude)| Motion { family, amplitude })
                    .collect();
            }
            (Some(f), None) => {
                s.motions = f
                    .into_iter()
                    .map(|family| Motion {
                        family,
                        amplitude: 10.0,
                    })
                    .collect();
            }
            (None, Some(a)) if a.len() == s.motions.len() => s.motions[0].amplitude = a[0],
            (None, None) => {}
            _ => {
                return Err(Error::Config(
                    "`family` and `amplitude` lists must have equal length".into(),
                ))
            }
        }
        if let Some(r) = cfg.get_list::<f64>("roi")? {
            if r.len() != 4 {
                return Err(Error::Config("`roi` takes x0,y0,x1,y1".into()));
            }
            s.roi = Some(Roi::new(r[0], r[1], r[2], r[3])?);
        }
        s.validate()?;
        Ok(s)
    }

    pub fn to_config(&self) -> String {
        let join = |v: Vec<String>| v.join(",");
        let mut entries = vec![
            ("width", self.width.to_string()),
            ("height", self.height.to_string()),
            ("speckle_density", self.speckle_density.to_string()),
            ("speckle_radius", self.speckle_radius.to_string()),
            (
                "family",
                join(self.motions.iter().map(|m| m.family.name().to_string()).collect()),
            ),
            (
                "amplitude",
                join(self.motions.iter().map(|m| m.amplitude.to_string()).collect()),
            ),
            ("direction_deg", self.direction_deg.to_string()),
            ("duration", self.duration.to_string()),
            ("frame_rate", self.frame_rate.to_string()),
            ("threshold", self.threshold.to_string()),
            ("refractory", self.refractory.to_string()),
            ("noise_rate", self.noise_rate.to_string()),
            ("fine_factor", self.fine_factor.to_string()),
            ("seed", self.seed.to_string()),
            ("query_spacing", self.query_spacing.to_string()),
        ];
        if let Some(r) = self.roi {
            entries.push(("roi", format!("{},{},{},{}", r.x0, r.y0, r.x1, r.y1)));
        }
        config::render(&entries)
    }

    /// Upper bound on `|u_gt|` anywhere in the image.
    fn max_displacement(&self) -> f64 {
        let half_diag = 0.5 * ((self.width * self.width + self.height * self.height) as f64).sqrt();
        let r = self.reference_radius();
        self.motions
            .iter()
            .map(|m| match m.family {
                DeformationFamily::Rotate => m.amplitude * half_diag / r,
                DeformationFamily::AffineStretch => m.amplitude * (self.width as f64 / 2.0) / (self.width as f64 / 2.0),
                _ => m.amplitude,
            })
            .sum()
    }

    fn reference_radius(&self) -> f64 {
        0.5 * self.width.min(self.height) as f64
    }
}

/// Analytic displacement `u_gt(X, t)` with a linear ramp from `t = 0` to
/// `t = duration`.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    spec: SceneSpec,
}

impl GroundTruth {
    pub fn new(spec: &SceneSpec) -> Self {
        Self { spec: spec.clone() }
    }

    pub fn displacement(&self, x: Point2, t: f64) -> Point2 {
        let s = (t / self.spec.duration).clamp(0.0, 1.0);
        let c = self.spec.center();
        let r = self.spec.reference_radius();
        let half_w = self.spec.width as f64 / 2.0;
        let mut u = Point2::ZERO;
        for m in &self.spec.motions {
            let a = m.amplitude * s;
            u += match m.family {
                DeformationFamily::Translate => {
                    let phi = self.spec.direction_deg.to_radians();
                    Point2::new(a * phi.cos(), a * phi.sin())
                }
                DeformationFamily::Rotate => x.rotate_about(c, a / r) - x,
                DeformationFamily::AffineStretch => Point2::new(a * (x.x - c.x) / half_w, 0.0),
                DeformationFamily::SinusoidalBend => {
                    Point2::new(0.0, a * (PI * x.x / (self.spec.width as f64 - 1.0)).sin())
                }
                DeformationFamily::RadialSqueeze => {
                    let d = x - c;
                    let q = d.dot(d) / (2.0 * r * r);
                    d * (-a / r * (0.5 - q).exp())
                }
            };
        }
        u
    }

    /// Current position of the material point at rest position `x`.
    pub fn forward(&self, x: Point2, t: f64) -> Point2 {
        x + self.displacement(x, t)
    }

    /// Rest position of whatever material sits at `x` at time `t`.
    pub fn inverse(&self, x: Point2, t: f64) -> Point2 {
        let mut rest = x - self.displacement(x, t);
        for _ in 0..60 {
            let next = x - self.displacement(rest, t);
            let step = (next - rest).norm();
            rest = next;
            if step < 1e-12 {
                break;
            }
        }
        rest
    }
}

/// Material-space speckle texture rasterized on a padded pixel grid.
#[derive(Debug, Clone)]
pub struct Texture {
    origin: Point2,
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Texture {
    pub fn generate(spec: &SceneSpec) -> Self {
        let pad = (spec.max_displacement() + 4.0 * spec.speckle_radius + 4.0).ceil();
        let width = spec.width + 2 * pad as usize;
        let height = spec.height + 2 * pad as usize;
        let origin = Point2::new(-pad, -pad);
        let area = (width * height) as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let n_blobs = (spec.speckle_density * area).round() as usize;
        let sigma = spec.speckle_radius;
        let reach = (3.0 * sigma).ceil() as i64;
        let mut field = vec![0.0f64; width * height];
        for _ in 0..n_blobs {
            let bx = rng.random_range(0.0..width as f64);
            let by = rng.random_range(0.0..height as f64);
            let amp = rng.random_range(0.5..1.0);
            let (cx, cy) = (bx.round() as i64, by.round() as i64);
            for y in (cy - reach).max(0)..=(cy + reach).min(height as i64 - 1) {
                for x in (cx - reach).max(0)..=(cx + reach).min(width as i64 - 1) {
                    let d2 = (x as f64 - bx).powi(2) + (y as f64 - by).powi(2);
                    field[y as usize * width + x as usize] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
                }
            }
        }
        let data = field.into_iter().map(|v| 0.1 + 0.8 * (1.0 - (-v).exp())).collect();
        Self {
            origin,
            width,
            height,
            data,
        }
    }

    /// A raster whose pixel `(0, 0)` sits at material point `origin`.
    pub fn from_raster(origin: Point2, width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width < 2 || height < 2 || data.len() != width * height {
            return Err(Error::Config(format!(
                "texture raster {width}x{height} with {} values",
                data.len()
            )));
        }
        Ok(Self {
            origin,
            width,
            height,
            data,
        })
    }

    /// Bilinear lookup in material coordinates; background outside.
    pub fn sample(&self, x: Point2) -> f64 {
        let fx = x.x - self.origin.x;
        let fy = x.y - self.origin.y;
        if !(fx >= 0.0 && fy >= 0.0 && fx <= (self.width - 1) as f64 && fy <= (self.height - 1) as f64) {
            return BACKGROUND;
        }
        let x0 = (fx.floor() as usize).min(self.width - 2);
        let y0 = (fy.floor() as usize).min(self.height - 2);
        let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
        let at = |x: usize, y: usize| self.data[y * self.width + x];
        let top = at(x0, y0) + ax * (at(x0 + 1, y0) - at(x0, y0));
        let bottom = at(x0, y0 + 1) + ax * (at(x0 + 1, y0 + 1) - at(x0, y0 + 1));
        top + ay * (bottom - top)
    }
}

/// A scene ready to render: texture plus ground-truth field.
#[derive(Debug, Clone)]
pub struct Simulator {
    pub spec: SceneSpec,
    pub truth: GroundTruth,
    pub texture: Texture,
}

impl Simulator {
    pub fn new(spec: SceneSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            truth: GroundTruth::new(&spec),
            texture: Texture::generate(&spec),
            spec,
        })
    }

    fn render_row(&self, y: usize, t: f64, out: &mut [f64]) {
        for (x, v) in out.iter_mut().enumerate() {
            let rest = self.truth.inverse(Point2::new(x as f64, y as f64), t);
            *v = self.texture.sample(rest);
        }
    }

    /// Inverse-warp render of the texture at time `t`.
    pub fn render_frame(&self, t: f64) -> Frame {
        let (w, h) = (self.spec.width, self.spec.height);
        let mut pixels = vec![0.0; w * h];
        pixels
            .par_chunks_mut(w)
            .enumerate()
            .for_each(|(y, row)| self.render_row(y, t, row));
        Frame {
            width: w,
            height: h,
            pixels,
            t,
        }
    }

    pub fn frames(&self) -> Vec<Frame> {
        (0..self.spec.num_frames())
            .map(|i| self.render_frame(self.spec.frame_time(i)))
            .collect()
    }

    /// Number of log-intensity samples over the whole sequence: at least
    /// `fine_factor ×` the frame rate, and fine enough that the texture
    /// moves at most a quarter pixel per step.
    pub fn fine_steps(&self) -> usize {
        let by_rate = (self.spec.duration * self.spec.frame_rate * self.spec.fine_factor as f64).ceil() as usize;
        let by_motion = (self.spec.max_displacement() / 0.25).ceil() as usize;
        by_rate.max(by_motion).max(1)
    }

    /// Threshold-crossing events from `t = 0` to `duration`, time-sorted.
    pub fn generate_events(&self) -> Vec<Event> {
        let spec = &self.spec;
        let (w, h) = (spec.width, spec.height);
        let steps = self.fine_steps();
        let dt = spec.duration / steps as f64;
        let c = spec.threshold;
        let log_of = |v: f64| (v + LOG_OFFSET).ln();

        let mut frame = vec![0.0; w * h];
        frame
            .par_chunks_mut(w)
            .enumerate()
            .for_each(|(y, row)| self.render_row(y, 0.0, row));
        let mut prev: Vec<f64> = frame.iter().map(|&v| log_of(v)).collect();
        let mut reference = prev.clone();
        let mut last_event = vec![f64::NEG_INFINITY; w * h];
        let mut events = Vec::new();

        for k in 1..=steps {
            let t0 = (k - 1) as f64 * dt;
            let t1 = if k == steps { spec.duration } else { k as f64 * dt };
            frame
                .par_chunks_mut(w)
                .enumerate()
                .for_each(|(y, row)| self.render_row(y, t1, row));
            let rows: Vec<Vec<Event>> = frame
                .par_chunks(w)
                .zip(prev.par_chunks_mut(w))
                .zip(reference.par_chunks_mut(w))
                .zip(last_event.par_chunks_mut(w))
                .enumerate()
                .map(|(y, (((cur, prev), reference), last))| {
                    let mut out = Vec::new();
                    for x in 0..w {
                        let l1 = log_of(cur[x]);
                        let l0 = prev[x];
                        let slope = l1 - l0;
                        loop {
                            let (target, p) = if l1 - reference[x] >= c {
                                (reference[x] + c, Polarity::Positive)
                            } else if l1 - reference[x] <= -c {
                                (reference[x] - c, Polarity::Negative)
                            } else {
                                break;
                            };
                            let frac = if slope != 0.0 {
                                ((target - l0) / slope).clamp(0.0, 1.0)
                            } else {
                                1.0
                            };
                            let te = t0 + frac * (t1 - t0);
                            reference[x] = target;
                            if te - last[x] >= spec.refractory {
                                last[x] = te;
                                out.push(Event::new(x as f64, y as f64, te, p));
                            }
                        }
                        prev[x] = l1;
                    }
                    out
                })
                .collect();
            for mut r in rows {
                r.sort_by(|a, b| a.t.total_cmp(&b.t));
                events.append(&mut r);
            }
        }

        if spec.noise_rate > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x05ee_d0f4_015e);
            let mean = spec.noise_rate * (w * h) as f64 * spec.duration;
            let n = Poisson::new(mean).map(|d| d.sample(&mut rng) as usize).unwrap_or(0);
            for _ in 0..n {
                let p = if rng.random_bool(0.5) {
                    Polarity::Positive
                } else {
                    Polarity::Negative
                };
                events.push(Event::new(
                    rng.random_range(0..w) as f64,
                    rng.random_range(0..h) as f64,
                    rng.random_range(0.0..spec.duration),
                    p,
                ));
            }
        }
        events.sort_by(|a, b| a.t.total_cmp(&b.t));
        events
    }

    /// Ground-truth displacements at the dense query points, one block per
    /// frame.
    pub fn ground_truth_table(&self) -> Result<DisplacementTable> {
        let points = self.spec.query_points()?;
        let mut rows = Vec::with_capacity(points.len() * self.spec.num_frames());
        for f in 0..self.spec.num_frames() {
            let t = self.spec.frame_time(f);
            for (id, &p) in points.iter().enumerate() {
                let u = self.truth.displacement(p, t);
                rows.push(DisplacementRow {
                    frame: f,
                    t,
                    point_id: id,
                    x0: p.x,
                    y0: p.y,
                    ux: u.x,
                    uy: u.y,
                });
            }
        }
        Ok(DisplacementTable { rows })
    }
}

/// File names inside a generated dataset directory.
pub mod layout {
    pub const EVENTS: &str = "events.csv";
    pub const MANIFEST: &str = "frames.csv";
    pub const GROUND_TRUTH: &str = "gt.csv";
    pub const SPEC: &str = "scene.cfg";
    pub const TRACKER_CONFIG: &str = "tracker.cfg";
}

/// Summary of what [`make_sequence`] wrote.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub frames: usize,
    pub events: usize,
    pub query_points: usize,
}

/// Writes frames (PGM + manifest), events, ground truth, the spec echo and
/// a matching tracker config into `out_dir`.
pub fn make_sequence(spec: &SceneSpec, out_dir: &Path) -> Result<DatasetManifest> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let sim = Simulator::new(spec.clone())?;
    let mut entries = Vec::new();
    for i in 0..spec.num_frames() {
        let t = spec.frame_time(i);
        let frame = sim.render_frame(t);
        let name = format!("frame_{i:04}.pgm");
        write_pgm(&out_dir.join(&name), frame.width, frame.height, &frame.pixels)?;
        entries.push((i, t, name));
    }
    write_manifest(&out_dir.join(layout::MANIFEST), &entries)?;
    let events = sim.generate_events();
    write_events_csv(&out_dir.join(layout::EVENTS), &events)?;
    let gt = sim.ground_truth_table()?;
    gt.write_csv(&out_dir.join(layout::GROUND_TRUTH))?;
    let spec_path = out_dir.join(layout::SPEC);
    std::fs::write(&spec_path, spec.to_config()).map_err(|e| Error::io(&spec_path, e))?;
    let roi = spec.roi()?;
    let tracker = config::render(&[
        ("roi", format!("{},{},{},{}", roi.x0, roi.y0, roi.x1, roi.y1)),
        ("query_spacing", spec.query_spacing.to_string()),
    ]);
    let tracker_path = out_dir.join(layout::TRACKER_CONFIG);
    std::fs::write(&tracker_path, tracker).map_err(|e| Error::io(&tracker_path, e))?;
    Ok(DatasetManifest {
        frames: entries.len(),
        events: events.len(),
        query_points: spec.query_points()?.len(),
    })
}
