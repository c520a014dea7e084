//! Simulation driver: grows the surface along the toolpath and emits scan
//! streams, a pose stream and the ground-truth surface mesh.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geom::{Point3, RigidTransform};
use crate::meshing::{write_ply, MeshError};
use crate::reference::DepositionModel;
use crate::toolpath::{Toolpath, ToolpathError};

use super::streams::{write_jsonl, PoseSample, ProfileFrame, StreamError};
use super::{scan_frame, ActiveOccluder, FieldExtent, HeightField, VirtualProfiler};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Toolpath(#[from] ToolpathError),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("output directory {path}: {source}")]
    OutDir {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Localized deposition-rate disturbance: while the plume center is inside
/// the disc and the active layer is in range, the deposition rate is
/// multiplied by `scale`. This is how fixtures plant over- and underbuild
/// defects with known magnitude.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RateAnomaly {
    pub center_xy: (f64, f64),
    pub radius: f64,
    pub scale: f64,
    /// Inclusive layer range (file layer indices).
    pub layers: (u32, u32),
}

impl RateAnomaly {
    fn applies(&self, pos: &Point3, layer: u32) -> bool {
        if layer < self.layers.0 || layer > self.layers.1 {
            return false;
        }
        let dx = pos.x - self.center_xy.0;
        let dy = pos.y - self.center_xy.1;
        dx * dx + dy * dy <= self.radius * self.radius
    }
}

/// Optional nozzle shadow: a vertical cylinder of `radius_mm` around the
/// nozzle axis whose bottom sits `bottom_clearance_mm` above the tool point.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct NozzleOccluder {
    pub radius_mm: f64,
    pub bottom_clearance_mm: f64,
}

#[derive(Debug, Clone)]
pub struct SimulationConfig {
    pub cell_size: f64,
    pub extent: FieldExtent,
    pub pose_rate_hz: f64,
    /// Trigger cascade spacing between scanners in one group.
    pub trigger_interval_us: u64,
    pub seed: u64,
    /// Nozzle tip in the base frame {B}; the pose stream is generated so the
    /// nozzle lands on the commanded toolpath point in {O}.
    pub nozzle_base: Point3,
    pub anomalies: Vec<RateAnomaly>,
    pub occluder: Option<NozzleOccluder>,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            cell_size: 0.5,
            extent: FieldExtent::centered(40.0, 40.0),
            pose_rate_hz: 100.0,
            trigger_interval_us: 20_000,
            seed: 0,
            nozzle_base: Point3::new(0.0, 0.0, 30.0),
            anomalies: Vec::new(),
            occluder: None,
        }
    }
}

#[derive(Debug)]
pub struct SimulationOutputs {
    pub scan_paths: Vec<PathBuf>,
    pub pose_path: PathBuf,
    pub truth_path: PathBuf,
    pub frames_per_scanner: Vec<usize>,
    pub final_heights: HeightField,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum EventKind {
    Pose,
    Frame(usize),
}

/// Work-object pose at path time t: the substrate translates so the nozzle
/// tip coincides with the commanded toolpath point.
fn pose_at(path: &Toolpath, nozzle_base: &Point3, t_s: f64) -> Result<RigidTransform, SimError> {
    let total = path.total_duration();
    let sample = path.sample_at(t_s.min(total))?;
    Ok(RigidTransform::from_translation(
        sample.position - nozzle_base,
    ))
}

/// Run the full simulation: deposition advanced continuously, profilers
/// triggered in 20 ms cascades at their frame rate, poses sampled at
/// `pose_rate_hz`, ground truth exported at the end.
pub fn run_simulation(
    path: &Toolpath,
    model: &DepositionModel,
    profilers: &[VirtualProfiler],
    cfg: &SimulationConfig,
    out_dir: &Path,
) -> Result<SimulationOutputs, SimError> {
    for p in profilers {
        p.validate().map_err(SimError::InvalidConfig)?;
    }
    for anomaly in &cfg.anomalies {
        if !(anomaly.scale >= 0.0 && anomaly.scale.is_finite()) {
            return Err(SimError::InvalidConfig(format!(
                "anomaly rate scale must be finite and >= 0, got {}",
                anomaly.scale
            )));
        }
        if anomaly.radius <= 0.0 {
            return Err(SimError::InvalidConfig(format!(
                "anomaly radius must be > 0, got {}",
                anomaly.radius
            )));
        }
    }
    if path.is_empty() {
        return Err(SimError::InvalidConfig("toolpath has no segments".into()));
    }
    if cfg.pose_rate_hz < 100.0 {
        return Err(SimError::InvalidConfig(format!(
            "pose rate must be >= 100 Hz, got {}",
            cfg.pose_rate_hz
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|source| SimError::OutDir {
        path: out_dir.display().to_string(),
        source,
    })?;

    let total_s = path.total_duration();
    let total_us = (total_s * 1e6).floor() as u64;

    // Event schedule: poses over [0, total], frames strictly before the end
    // so every acquisition sees a defined pose interval around it.
    let mut events: Vec<(u64, EventKind)> = Vec::new();
    let pose_period_us = (1e6 / cfg.pose_rate_hz).round() as u64;
    let mut t = 0u64;
    while t <= total_us {
        events.push((t, EventKind::Pose));
        t += pose_period_us;
    }
    for (idx, p) in profilers.iter().enumerate() {
        let period_us = (1e6 / p.frame_rate).round() as u64;
        let offset = idx as u64 * cfg.trigger_interval_us;
        let mut t = offset;
        while t < total_us {
            events.push((t, EventKind::Frame(idx)));
            t += period_us;
        }
    }
    events.sort_unstable_by_key(|&(t, kind)| (t, kind));

    let mut heights = HeightField::new(cfg.extent, cfg.cell_size);
    let max_dt = model.sigma() / (2.0 * path.max_speed());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut pose_records: Vec<PoseSample> = Vec::new();
    let mut frame_records: Vec<Vec<ProfileFrame>> = vec![Vec::new(); profilers.len()];

    let mut cursor_s = 0.0f64;
    for (t_us, kind) in events {
        let t_s = (t_us as f64) * 1e-6;
        advance_deposition(
            path,
            model,
            &cfg.anomalies,
            &mut heights,
            cursor_s,
            t_s,
            max_dt,
        )?;
        cursor_s = cursor_s.max(t_s);

        match kind {
            EventKind::Pose => {
                let pose = pose_at(path, &cfg.nozzle_base, t_s)?;
                pose_records.push(PoseSample::from_transform(t_us, &pose));
            }
            EventKind::Frame(idx) => {
                let pose = pose_at(path, &cfg.nozzle_base, t_s)?;
                let occluder = match cfg.occluder {
                    Some(o) => {
                        let tool = path.sample_at(t_s.min(total_s))?.position;
                        Some(ActiveOccluder {
                            center_xy: (tool.x, tool.y),
                            radius: o.radius_mm,
                            bottom_z: tool.z + o.bottom_clearance_mm,
                        })
                    }
                    None => None,
                };
                let frame = scan_frame(
                    &heights,
                    &profilers[idx],
                    &pose,
                    t_us,
                    occluder.as_ref(),
                    &mut rng,
                );
                frame_records[idx].push(frame);
            }
        }
    }
    // Finish any deposition tail after the last event.
    advance_deposition(
        path,
        model,
        &cfg.anomalies,
        &mut heights,
        cursor_s,
        total_s,
        max_dt,
    )?;

    let mut scan_paths = Vec::new();
    let mut frames_per_scanner = Vec::new();
    for (idx, p) in profilers.iter().enumerate() {
        let path_out = out_dir.join(format!("scan_{:02}.jsonl", p.id));
        write_jsonl(&path_out, &frame_records[idx])?;
        frames_per_scanner.push(frame_records[idx].len());
        scan_paths.push(path_out);
    }
    let pose_path = out_dir.join("poses.jsonl");
    write_jsonl(&pose_path, &pose_records)?;
    let truth_path = out_dir.join("truth.ply");
    write_ply(&truth_path, &heights.to_mesh(), None)?;

    Ok(SimulationOutputs {
        scan_paths,
        pose_path,
        truth_path,
        frames_per_scanner,
        final_heights: heights,
    })
}

/// Deposit over (t0, t1] in midpoint substeps no longer than `max_dt`.
/// The spray is never shuttered: skip segments deposit too, thinned only by
/// their higher traverse speed.
fn advance_deposition(
    path: &Toolpath,
    model: &DepositionModel,
    anomalies: &[RateAnomaly],
    heights: &mut HeightField,
    t0: f64,
    t1: f64,
    max_dt: f64,
) -> Result<(), SimError> {
    if t1 <= t0 {
        return Ok(());
    }
    let span = t1 - t0;
    let n = (span / max_dt).ceil().max(1.0) as usize;
    let dt = span / n as f64;
    let total = path.total_duration();
    for i in 0..n {
        let t_mid = (t0 + (i as f64 + 0.5) * dt).min(total);
        let sample = path.sample_at(t_mid)?;
        let mut scale = 1.0;
        for anomaly in anomalies {
            if anomaly.applies(&sample.position, sample.layer) {
                scale *= anomaly.scale;
            }
        }
        heights.deposit_spot(
            model,
            (sample.position.x, sample.position.y),
            sample.tilt_deg,
            dt,
            scale,
        );
    }
    Ok(())
}
