//! PGM visualizations of a tracking result directory: warped-event images,
//! per-triangle outlier maps and von Mises strain heat maps.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::events::{associate, build_iwe, partition_bins, SensorSize};
use crate::frames::{write_pgm, write_pgm_normalized};
use crate::geometry::{Point2, SimplicialMesh, TriangleLocator};
use crate::optimizer::TrackerConfig;
use crate::strain::anchor_strain;
use crate::tracker::{finest_mesh, layout, read_convergence, read_inputs, read_trajectories, Dataset};
use crate::trajectory::TrajectoryField;

/// A tracking result loaded back from disk.
pub struct TrackOutput {
    pub config: TrackerConfig,
    pub data: Dataset,
    pub windows: Vec<TrajectoryField>,
}

impl TrackOutput {
    pub fn load(track_dir: &Path) -> Result<Self> {
        let config = TrackerConfig::load(&track_dir.join(layout::CONFIG))?;
        let (events, frames) = read_inputs(track_dir)?;
        let data = Dataset::load(&events, &frames)?;
        let mesh = Arc::new(finest_mesh(&config, data.sensor())?);
        let windows = read_trajectories(&track_dir.join(layout::TRAJECTORIES), mesh)?;
        if windows.len() + 1 != data.frames.len() {
            return Err(Error::parse(
                track_dir.join(layout::TRAJECTORIES),
                format!("{} windows for {} frames", windows.len(), data.frames.len()),
            ));
        }
        Ok(Self { config, data, windows })
    }
}

/// Event counts of window `w` warped to the window end under `tf`.
pub fn window_iwe(data: &Dataset, w: usize, tf: &TrajectoryField) -> Result<Vec<f64>> {
    let grid = tf.grid();
    let window = partition_bins(
        data.window_events(w).to_vec(),
        grid.start(),
        grid.end(),
        grid.knots().len() - 1,
    )?;
    let assoc = associate(&window.events, tf);
    let iwe = build_iwe(&window, &assoc, tf, grid.end(), window.all(), data.sensor())?;
    Ok(iwe.count_image())
}

/// Paints each deformed triangle with its value; pixels outside are 0.
pub fn triangle_map(mesh: &SimplicialMesh, positions: &[Point2], values: &[f64], sensor: SensorSize) -> Vec<f64> {
    let locator = TriangleLocator::new(&mesh.triangles, positions);
    let mut out = vec![0.0; sensor.pixels()];
    for y in 0..sensor.height {
        for x in 0..sensor.width {
            if let Some((t, _)) = locator.locate(Point2::new(x as f64, y as f64)) {
                out[y * sensor.width + x] = values[t];
            }
        }
    }
    out
}

fn write(
    out_dir: &Path,
    name: String,
    sensor: SensorSize,
    values: &[f64],
    normalize: bool,
    written: &mut Vec<PathBuf>,
) -> Result<()> {
    let path = out_dir.join(name);
    if normalize {
        write_pgm_normalized(&path, sensor.width, sensor.height, values)?;
    } else {
        write_pgm(&path, sensor.width, sensor.height, values)?;
    }
    written.push(path);
    Ok(())
}

/// Writes `iwe_WWWW.pgm` for every window and `pj_WWWW.pgm` (P_j on a
/// fixed 0–1 scale) for every window with a convergence report.
pub fn render_iwe(track_dir: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let out = TrackOutput::load(track_dir)?;
    let conv = read_convergence(&track_dir.join(layout::CONVERGENCE))?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let sensor = out.data.sensor();
    let mut written = Vec::new();
    for (w, tf) in out.windows.iter().enumerate() {
        let iwe = window_iwe(&out.data, w, tf)?;
        write(out_dir, format!("iwe_{w:04}.pgm"), sensor, &iwe, true, &mut written)?;
    }
    for (w, p) in conv {
        let Some(tf) = out.windows.get(w) else { continue };
        if p.len() != tf.mesh().num_triangles() {
            continue;
        }
        let end = tf.positions_at(tf.grid().end())?;
        let map = triangle_map(tf.mesh(), &end, &p, sensor);
        write(out_dir, format!("pj_{w:04}.pgm"), sensor, &map, false, &mut written)?;
    }
    Ok(written)
}

/// Writes `strain_WWWW.pgm`, the anchor von Mises strain at each window
/// end interpolated over the deformed mesh.
pub fn render_strain(track_dir: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let out = TrackOutput::load(track_dir)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let sensor = out.data.sensor();
    let mut written = Vec::new();
    for (w, tf) in out.windows.iter().enumerate() {
        let t = tf.grid().end();
        let s = anchor_strain(tf, t)?;
        let end = tf.positions_at(t)?;
        let map = crate::strain::strain_heat_map(tf.mesh(), &end, &s.anchor, sensor.width, sensor.height);
        write(out_dir, format!("strain_{w:04}.pgm"), sensor, &map, true, &mut written)?;
    }
    Ok(written)
}
