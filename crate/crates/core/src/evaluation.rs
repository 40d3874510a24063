//! Dense displacement tables and the EPE / SEPE / survival metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const DISPLACEMENT_CSV_HEADER: &str = "frame,t,point_id,x0,y0,ux,uy";
/// Endpoint error above which a point counts as lost.
pub const FAIL_DISTANCE: f64 = 5.0;
/// Fraction of lost points that marks a frame as failed (strictly above).
pub const FAIL_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DisplacementRow {
    pub frame: usize,
    pub t: f64,
    pub point_id: usize,
    pub x0: f64,
    pub y0: f64,
    pub ux: f64,
    pub uy: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DisplacementTable {
    pub rows: Vec<DisplacementRow>,
}

impl DisplacementTable {
    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == DISPLACEMENT_CSV_HEADER => {}
            _ => {
                return Err(Error::parse(
                    path,
                    format!("expected header `{DISPLACEMENT_CSV_HEADER}`"),
                ))
            }
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = || Error::parse(path, format!("line {}: malformed row `{line}`", i + 2));
            if f.len() != 7 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(bad);
            rows.push(DisplacementRow {
                frame: f[0].parse().map_err(|_| bad())?,
                t: num(f[1])?,
                point_id: f[2].parse().map_err(|_| bad())?,
                x0: num(f[3])?,
                y0: num(f[4])?,
                ux: num(f[5])?,
                uy: num(f[6])?,
            });
        }
        Ok(Self { rows })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(DISPLACEMENT_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.frame, r.t, r.point_id, r.x0, r.y0, r.ux, r.uy
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Per-(frame, point) endpoint errors, grouped by frame in time order.
#[derive(Debug, Clone)]
pub struct ErrorGrid {
    /// `(frame index, t, errors ordered by point_id)`
    pub frames: Vec<(usize, f64, Vec<f64>)>,
}

/// Pairs rows on `(frame, point_id)`; both tables must cover the same keys.
pub fn align(pred: &DisplacementTable, gt: &DisplacementTable) -> Result<ErrorGrid> {
    if pred.rows.is_empty() || gt.rows.is_empty() {
        return Err(Error::TableMismatch("empty table".into()));
    }
    let index = |t: &DisplacementTable| -> Result<BTreeMap<(usize, usize), DisplacementRow>> {
        let mut m = BTreeMap::new();
        for r in &t.rows {
            if m.insert((r.frame, r.point_id), *r).is_some() {
                return Err(Error::TableMismatch(format!(
                    "duplicate row for frame {} point {}",
                    r.frame, r.point_id
                )));
            }
        }
        Ok(m)
    };
    let p = index(pred)?;
    let g = index(gt)?;
    if p.len() != g.len() {
        return Err(Error::TableMismatch(format!(
            "{} predicted rows vs {} ground-truth rows",
            p.len(),
            g.len()
        )));
    }
    let mut frames: Vec<(usize, f64, Vec<f64>)> = Vec::new();
    for ((key, pr), (gkey, gr)) in p.iter().zip(g.iter()) {
        if key != gkey {
            return Err(Error::TableMismatch(format!(
                "no ground truth for frame {} point {}",
                key.0, key.1
            )));
        }
        if (pr.x0 - gr.x0).abs() > 1e-6 || (pr.y0 - gr.y0).abs() > 1e-6 {
            return Err(Error::TableMismatch(format!(
                "point {} has different rest positions in the two tables",
                key.1
            )));
        }
        let err = ((pr.ux - gr.ux).powi(2) + (pr.uy - gr.uy).powi(2)).sqrt();
        match frames.last_mut() {
            Some((f, _, errs)) if *f == key.0 => errs.push(err),
            _ => frames.push((key.0, gr.t, vec![err])),
        }
    }
    let n = frames[0].2.len();
    if frames.iter().any(|(_, _, e)| e.len() != n) {
        return Err(Error::TableMismatch("frames cover different point sets".into()));
    }
    Ok(ErrorGrid { frames })
}

impl ErrorGrid {
    fn lost_fraction(errors: &[f64]) -> f64 {
        errors.iter().filter(|&&e| e > FAIL_DISTANCE).count() as f64 / errors.len() as f64
    }

    /// Position (not frame label) of the first failed frame.
    pub fn failure_frame(&self) -> Option<usize> {
        self.frames
            .iter()
            .position(|(_, _, e)| Self::lost_fraction(e) > FAIL_FRACTION)
    }

    pub fn epe(&self) -> f64 {
        let (sum, n) = self
            .frames
            .iter()
            .flat_map(|(_, _, e)| e.iter())
            .fold((0.0, 0usize), |(s, n), &e| (s + e, n + 1));
        sum / n as f64
    }

    pub fn survival(&self) -> f64 {
        match self.failure_frame() {
            Some(f) => f as f64 / self.frames.len() as f64,
            None => 1.0,
        }
    }

    /// Mean error over every (point, frame) pair within the loss distance.
    pub fn sepe(&self) -> Result<f64> {
        let (sum, n) = self
            .frames
            .iter()
            .flat_map(|(_, _, e)| e.iter())
            .filter(|&&e| e <= FAIL_DISTANCE)
            .fold((0.0, 0usize), |(s, n), &e| (s + e, n + 1));
        if n == 0 {
            return Err(Error::NoSurvivors);
        }
        Ok(sum / n as f64)
    }
}

pub fn epe(pred: &DisplacementTable, gt: &DisplacementTable) -> Result<f64> {
    Ok(align(pred, gt)?.epe())
}

pub fn survival(pred: &DisplacementTable, gt: &DisplacementTable) -> Result<f64> {
    Ok(align(pred, gt)?.survival())
}

pub fn sepe(pred: &DisplacementTable, gt: &DisplacementTable) -> Result<f64> {
    align(pred, gt)?.sepe()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameMetrics {
    pub frame: usize,
    pub t: f64,
    pub epe: f64,
    pub lost_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub epe: f64,
    /// `None` when no (point, frame) pair survived.
    pub sepe: Option<f64>,
    pub survival: f64,
    pub points: usize,
    pub per_frame: Vec<FrameMetrics>,
}

impl MetricReport {
    pub fn compute(pred: &DisplacementTable, gt: &DisplacementTable) -> Result<Self> {
        let grid = align(pred, gt)?;
        let per_frame = grid
            .frames
            .iter()
            .map(|(frame, t, e)| FrameMetrics {
                frame: *frame,
                t: *t,
                epe: e.iter().sum::<f64>() / e.len() as f64,
                lost_fraction: ErrorGrid::lost_fraction(e),
            })
            .collect();
        Ok(Self {
            epe: grid.epe(),
            sepe: grid.sepe().ok(),
            survival: grid.survival(),
            points: grid.frames[0].2.len(),
            per_frame,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "points   {}", self.points);
        let _ = writeln!(s, "frames   {}", self.per_frame.len());
        let _ = writeln!(s, "epe      {:.6} px", self.epe);
        match self.sepe {
            Some(v) => {
                let _ = writeln!(s, "sepe     {v:.6} px");
            }
            None => {
                let _ = writeln!(s, "sepe     n/a (no surviving points)");
            }
        }
        let _ = writeln!(s, "survival {:.6}", self.survival);
        let _ = writeln!(s);
        let _ = writeln!(s, "frame        t        epe   lost");
        for f in &self.per_frame {
            let _ = writeln!(s, "{:5} {:8.4} {:10.4} {:6.3}", f.frame, f.t, f.epe, f.lost_fraction);
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame,t,epe,lost_fraction\n");
        for f in &self.per_frame {
            let _ = writeln!(s, "{},{},{},{}", f.frame, f.t, f.epe, f.lost_fraction);
        }
        let sepe = self.sepe.map(|v| v.to_string()).unwrap_or_else(|| "nan".into());
        let _ = writeln!(s, "summary,epe,{},", self.epe);
        let _ = writeln!(s, "summary,sepe,{sepe},");
        let _ = writeln!(s, "summary,survival,{},", self.survival);
        s
    }

    /// Writes the text report to `path` and the CSV next to it with a
    /// `.csv` extension.
    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))?;
        let csv = path.with_extension("csv");
        let csv = if csv == path {
            path.with_extension("metrics.csv")
        } else {
            csv
        };
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))
    }
}
