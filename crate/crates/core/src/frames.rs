//! Grayscale frames, barycentric intensity sampling and the ZNCC
//! cross-correlation objective.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use log::warn;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::trajectory::{KnotBlend, TrajectoryField};

/// Standard deviations below this make a sample vector textureless.
pub const MIN_SIGMA: f64 = 1e-12;
/// Triangles keeping fewer valid samples are left out of the objective.
pub const MIN_VALID_SAMPLES: usize = 6;
pub const DEFAULT_SAMPLES_PER_EDGE: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    /// Row-major intensities in `[0, 1]`.
    pub pixels: Vec<f64>,
    /// Capture time in seconds.
    pub t: f64,
}

impl Frame {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>, t: f64) -> Result<Self> {
        if pixels.len() != width * height || width < 2 || height < 2 {
            return Err(Error::Config(format!(
                "frame {width}x{height} needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("non-finite frame intensity".into()));
        }
        Ok(Self {
            width,
            height,
            pixels,
            t,
        })
    }

    pub fn constant(width: usize, height: usize, value: f64, t: f64) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
            t,
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn contains(&self, p: Point2) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x <= (self.width - 1) as f64 && p.y <= (self.height - 1) as f64
    }

    /// Bilinear intensity and its spatial gradient; `None` outside.
    #[inline]
    pub fn sample_with_gradient(&self, p: Point2) -> Option<(f64, Point2)> {
        if !self.contains(p) {
            return None;
        }
        let x0 = (p.x.floor() as usize).min(self.width - 2);
        let y0 = (p.y.floor() as usize).min(self.height - 2);
        let fx = p.x - x0 as f64;
        let fy = p.y - y0 as f64;
        let i00 = self.at(x0, y0);
        let i10 = self.at(x0 + 1, y0);
        let i01 = self.at(x0, y0 + 1);
        let i11 = self.at(x0 + 1, y0 + 1);
        let top = i00 + fx * (i10 - i00);
        let bottom = i01 + fx * (i11 - i01);
        let value = top + fy * (bottom - top);
        let gx = (1.0 - fy) * (i10 - i00) + fy * (i11 - i01);
        let gy = bottom - top;
        Some((value, Point2::new(gx, gy)))
    }
}

pub fn bilinear_sample(frame: &Frame, p: Point2) -> Result<f64> {
    frame
        .sample_with_gradient(p)
        .map(|(v, _)| v)
        .ok_or(Error::OutOfImage { x: p.x, y: p.y })
}

/// Uniform barycentric lattice with `n` samples per edge.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGrid {
    pub n: usize,
    pub bary: Vec<[f64; 3]>,
}

pub fn sample_grid(n: usize) -> Result<SampleGrid> {
    if n == 0 {
        return Err(Error::InvalidSampleDensity(n));
    }
    let mut bary = Vec::with_capacity((n + 1) * (n + 2) / 2);
    let nf = n as f64;
    for i in 0..=n {
        for j in 0..=(n - i) {
            let u = i as f64 / nf;
            let v = j as f64 / nf;
            bary.push([u, v, (n - i - j) as f64 / nf]);
        }
    }
    Ok(SampleGrid { n, bary })
}

/// Zero-mean normalized cross-correlation.
pub fn zncc(s1: &[f64], s2: &[f64]) -> Result<f64> {
    zncc_parts(s1, s2).map(|p| p.r)
}

struct ZnccParts {
    r: f64,
    mean1: f64,
    mean2: f64,
    ss1: f64,
    ss2: f64,
}

fn zncc_parts(s1: &[f64], s2: &[f64]) -> Result<ZnccParts> {
    if s1.len() != s2.len() || s1.len() < 2 {
        return Err(Error::Config(format!(
            "zncc needs two equal-length vectors of at least 2 samples, got {} and {}",
            s1.len(),
            s2.len()
        )));
    }
    let n = s1.len() as f64;
    let mean1 = s1.iter().sum::<f64>() / n;
    let mean2 = s2.iter().sum::<f64>() / n;
    let (mut ss1, mut ss2, mut cross) = (0.0, 0.0, 0.0);
    for (&a, &b) in s1.iter().zip(s2) {
        let (da, db) = (a - mean1, b - mean2);
        ss1 += da * da;
        ss2 += db * db;
        cross += da * db;
    }
    if (ss1 / n).sqrt() < MIN_SIGMA || (ss2 / n).sqrt() < MIN_SIGMA {
        return Err(Error::ZeroVariance);
    }
    let r = (cross / (ss1 * ss2).sqrt()).clamp(-1.0, 1.0);
    Ok(ZnccParts {
        r,
        mean1,
        mean2,
        ss1,
        ss2,
    })
}

impl ZnccParts {
    /// `∂r/∂s1_i` given both vectors.
    fn d_first(&self, i: usize, s1: &[f64], s2: &[f64]) -> f64 {
        let da = s1[i] - self.mean1;
        let db = s2[i] - self.mean2;
        db / (self.ss1 * self.ss2).sqrt() - self.r * da / self.ss1
    }

    fn d_second(&self, i: usize, s1: &[f64], s2: &[f64]) -> f64 {
        let da = s1[i] - self.mean1;
        let db = s2[i] - self.mean2;
        da / (self.ss1 * self.ss2).sqrt() - self.r * db / self.ss2
    }
}

/// The three frames a window correlates: the sequence's first frame, the
/// frame at the window start and the frame at the window end.
#[derive(Debug, Clone, Copy)]
pub struct FrameSet<'a> {
    pub initial: &'a Frame,
    pub previous: &'a Frame,
    pub current: &'a Frame,
}

/// Intensity samples of one triangle in all three frames, with invalid
/// (off-image) samples dropped from every vector together.
pub(crate) struct TriangleSamples {
    pub current: Vec<f64>,
    pub previous: Vec<f64>,
    pub initial: Vec<f64>,
    /// Per kept sample: lattice index, image gradients in current/previous.
    pub kept: Vec<(usize, Point2, Point2)>,
}

pub(crate) fn triangle_samples(
    tf: &TrajectoryField,
    tri: usize,
    frames: FrameSet<'_>,
    grid: &SampleGrid,
) -> Result<TriangleSamples> {
    let [a, b, c] = tf.mesh().triangles[tri].0;
    let cur_blend = tf.grid().blend(frames.current.t)?;
    let prev_blend = tf.grid().blend(frames.previous.t)?;
    let cur = [a, b, c].map(|v| tf.blend_position(v, cur_blend));
    let prev = [a, b, c].map(|v| tf.blend_position(v, prev_blend));
    let rest = [a, b, c].map(|v| tf.mesh().anchors[v]);
    let n = grid.bary.len();
    let mut out = TriangleSamples {
        current: Vec::with_capacity(n),
        previous: Vec::with_capacity(n),
        initial: Vec::with_capacity(n),
        kept: Vec::with_capacity(n),
    };
    let at = |v: &[Point2; 3], w: &[f64; 3]| {
        Point2::new(
            w[0] * v[0].x + w[1] * v[1].x + w[2] * v[2].x,
            w[0] * v[0].y + w[1] * v[1].y + w[2] * v[2].y,
        )
    };
    for (s, w) in grid.bary.iter().enumerate() {
        let (Some((ic, gc)), Some((ip, gp)), Some((i0, _))) = (
            frames.current.sample_with_gradient(at(&cur, w)),
            frames.previous.sample_with_gradient(at(&prev, w)),
            frames.initial.sample_with_gradient(at(&rest, w)),
        ) else {
            continue;
        };
        out.current.push(ic);
        out.previous.push(ip);
        out.initial.push(i0);
        out.kept.push((s, gc, gp));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameObjectiveValue {
    pub value: f64,
    pub valid_triangles: usize,
    pub textureless: usize,
}

type TriangleTerm = Option<(f64, Vec<(usize, Point2)>)>;

/// Mean over triangles of `zncc(current, previous) + zncc(current, initial)`.
/// With `grad`, adds `scale · ∂/∂Tr` for every knot position.
pub fn frame_objective(
    tf: &TrajectoryField,
    frames: FrameSet<'_>,
    grid: &SampleGrid,
    grad: Option<(&mut [Point2], f64)>,
) -> Result<FrameObjectiveValue> {
    let cur_blend = tf.grid().blend(frames.current.t)?;
    let prev_blend = tf.grid().blend(frames.previous.t)?;
    let want_grad = grad.is_some();
    let terms: Vec<Result<TriangleTerm>> = (0..tf.mesh().num_triangles())
        .into_par_iter()
        .map(|tri| triangle_term(tf, tri, frames, grid, want_grad))
        .collect();
    let mut sum = 0.0;
    let mut valid = 0;
    let mut per_tri = Vec::with_capacity(terms.len());
    for (tri, term) in terms.into_iter().enumerate() {
        if let Some((v, g)) = term? {
            sum += v;
            valid += 1;
            per_tri.push((tri, g));
        }
    }
    let textureless = tf.mesh().num_triangles() - valid;
    if valid == 0 {
        return Err(Error::NoTexture);
    }
    if textureless > 0 {
        warn!("{textureless} triangles excluded from the frame objective");
    }
    if let Some((grad, scale)) = grad {
        let k = tf.num_knots();
        let s = scale / valid as f64;
        for (tri, g) in per_tri {
            let verts = tf.mesh().triangles[tri].0;
            for (sample, dpos) in g {
                let w = grid.bary[sample % grid.bary.len()];
                let blend = if sample < grid.bary.len() {
                    cur_blend
                } else {
                    prev_blend
                };
                scatter(grad, k, &verts, &w, blend, dpos * s);
            }
        }
    }
    Ok(FrameObjectiveValue {
        value: sum / valid as f64,
        valid_triangles: valid,
        textureless,
    })
}

#[inline]
fn scatter(grad: &mut [Point2], k: usize, verts: &[usize; 3], w: &[f64; 3], blend: KnotBlend, g: Point2) {
    for (slot, &v) in verts.iter().enumerate() {
        let gw = g * w[slot];
        grad[v * k + blend.lo] += gw * blend.w_lo;
        if blend.w_hi != 0.0 {
            grad[v * k + blend.hi] += gw * blend.w_hi;
        }
    }
}

/// One triangle's two-term score. Gradient entries are keyed by lattice
/// index, offset by the lattice size for previous-frame samples.
fn triangle_term(
    tf: &TrajectoryField,
    tri: usize,
    frames: FrameSet<'_>,
    grid: &SampleGrid,
    want_grad: bool,
) -> Result<TriangleTerm> {
    let s = triangle_samples(tf, tri, frames, grid)?;
    if s.current.len() < MIN_VALID_SAMPLES {
        return Ok(None);
    }
    let (cp, ci) = match (zncc_parts(&s.current, &s.previous), zncc_parts(&s.current, &s.initial)) {
        (Ok(cp), Ok(ci)) => (cp, ci),
        (Err(Error::ZeroVariance), _) | (_, Err(Error::ZeroVariance)) => return Ok(None),
        (Err(e), _) | (_, Err(e)) => return Err(e),
    };
    let value = cp.r + ci.r;
    if !want_grad {
        return Ok(Some((value, Vec::new())));
    }
    let n = grid.bary.len();
    let mut g = Vec::with_capacity(2 * s.kept.len());
    for (i, &(lattice, grad_cur, grad_prev)) in s.kept.iter().enumerate() {
        let d_cur = cp.d_first(i, &s.current, &s.previous) + ci.d_first(i, &s.current, &s.initial);
        let d_prev = cp.d_second(i, &s.current, &s.previous);
        g.push((lattice, grad_cur * d_cur));
        if frames.previous.t != frames.current.t {
            g.push((lattice + n, grad_prev * d_prev));
        } else {
            // same knot blend: fold into the current-frame entry
            let last = g.last_mut().unwrap();
            last.1 += grad_prev * d_prev;
        }
    }
    Ok(Some((value, g)))
}

/// Reads an 8-bit binary PGM (P5) scaled to `[0, 1]`.
pub fn read_pgm(path: &Path, t: f64) -> Result<Frame> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::parse(path, "truncated PGM header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if tokens[0] != "P5" {
        return Err(Error::parse(path, format!("not a binary PGM (magic `{}`)", tokens[0])));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::parse(path, format!("bad PGM header field `{s}`")))
    };
    let (w, h, maxval) = (num(&tokens[1])?, num(&tokens[2])?, num(&tokens[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(Error::parse(path, format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let mut raster = Vec::with_capacity(w * h);
    (&bytes[pos.min(bytes.len())..])
        .read_to_end(&mut raster)
        .map_err(|e| Error::io(path, e))?;
    if raster.len() < w * h {
        return Err(Error::parse(
            path,
            format!("expected {} pixels, found {}", w * h, raster.len()),
        ));
    }
    let scale = 1.0 / maxval as f64;
    let pixels = raster[..w * h].iter().map(|&b| b as f64 * scale).collect();
    Frame::new(w, h, pixels, t).map_err(|e| Error::parse(path, e.to_string()))
}

/// Writes values in `[0, 1]` as an 8-bit PGM (clamped, rounded).
pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    let mut data = format!("P5\n{width} {height}\n255\n").into_bytes();
    data.extend(values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    std::fs::write(path, data).map_err(|e| Error::io(path, e))
}

/// Min-max normalizes to `[0, 1]` before writing; a flat image maps to 0.
pub fn write_pgm_normalized(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let scaled: Vec<f64> = if span > 0.0 && span.is_finite() {
        values.iter().map(|v| (v - lo) / span).collect()
    } else {
        vec![0.0; values.len()]
    };
    write_pgm(path, width, height, &scaled)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub frame_index: usize,
    pub t: f64,
    pub path: PathBuf,
}

pub const MANIFEST_CSV_HEADER: &str = "frame_index,t,path";

/// Parses `frame_index,t,path`; relative paths resolve against the
/// manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries: Vec<ManifestEntry> = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if lineno == 0 {
            if line.replace(' ', "") != MANIFEST_CSV_HEADER {
                return Err(Error::parse(path, format!("expected header `{MANIFEST_CSV_HEADER}`")));
            }
            continue;
        }
        let bad = || Error::parse(path, format!("line {}: malformed entry `{line}`", lineno + 1));
        let mut it = line.splitn(3, ',').map(str::trim);
        let frame_index = it.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let t: f64 = it.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let rel = it.next().filter(|s| !s.is_empty()).ok_or_else(bad)?;
        if let Some(prev) = entries.last() {
            if t <= prev.t {
                return Err(Error::parse(
                    path,
                    format!("line {}: timestamps must increase", lineno + 1),
                ));
            }
        }
        let p = Path::new(rel);
        entries.push(ManifestEntry {
            frame_index,
            t,
            path: if p.is_absolute() { p.to_path_buf() } else { base.join(p) },
        });
    }
    Ok(entries)
}

pub fn write_manifest(path: &Path, entries: &[(usize, f64, String)]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let res = (|| -> std::io::Result<()> {
        writeln!(w, "{MANIFEST_CSV_HEADER}")?;
        for (i, t, p) in entries {
            writeln!(w, "{i},{t},{p}")?;
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

pub fn load_frames(manifest: &Path) -> Result<Vec<Frame>> {
    read_manifest(manifest)?
        .iter()
        .map(|e| read_pgm(&e.path, e.t))
        .collect()
}
