//! The live ingest-and-analyze loop behind `run`: stream frames through the
//! fusion grid, cut layers on tool-height steps from the pose stream, and
//! per layer extract, compare, segment, track and report.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use depomap::deviation::{class_colors, classify, compute_deviation, segment};
use depomap::fusion::{ActiveRegion, SparseTsdfGrid};
use depomap::geom::{Point3, RigidTransform};
use depomap::meshing::{marching_cubes, write_ply};
use depomap::reference::ReferenceBuilder;
use depomap::scansim::{read_pose_stream, read_scan_stream, PoseSample, ProfileFrame};
use depomap::toolpath::parse_toolpath;
use depomap::tracking::{GlobalStats, Tracker};

use crate::config::PipelineConfig;
use crate::CliError;

/// Pose lookup with linear translation interpolation and rotation slerp.
pub struct PoseTrack {
    samples: Vec<(u64, RigidTransform)>,
}

impl PoseTrack {
    pub fn from_records(records: &[PoseSample]) -> Result<Self, CliError> {
        if records.is_empty() {
            return Err(CliError::Stream("pose stream is empty".into()));
        }
        let mut samples = Vec::with_capacity(records.len());
        for rec in records {
            let transform = rec
                .transform()
                .map_err(|e| CliError::Stream(e.to_string()))?;
            samples.push((rec.t_us, transform));
        }
        samples.sort_by_key(|(t, _)| *t);
        Ok(Self { samples })
    }

    pub fn time_span_us(&self) -> (u64, u64) {
        (
            self.samples.first().unwrap().0,
            self.samples.last().unwrap().0,
        )
    }

    /// Largest gap between consecutive samples, microseconds.
    pub fn max_gap_us(&self) -> u64 {
        self.samples
            .windows(2)
            .map(|w| w[1].0 - w[0].0)
            .max()
            .unwrap_or(0)
    }

    pub fn sample(&self, t_us: u64) -> RigidTransform {
        let idx = self.samples.partition_point(|(t, _)| *t <= t_us);
        if idx == 0 {
            return self.samples[0].1;
        }
        if idx >= self.samples.len() {
            return self.samples[self.samples.len() - 1].1;
        }
        let (t0, ref a) = self.samples[idx - 1];
        let (t1, ref b) = self.samples[idx];
        if t1 == t0 {
            return *a;
        }
        let frac = (t_us - t0) as f64 / (t1 - t0) as f64;
        RigidTransform::interpolate(a, b, frac)
    }
}

#[derive(Debug, Default, Serialize)]
pub struct StageTimings {
    pub fusion_ms: f64,
    pub meshing_ms: f64,
    pub reference_ms: f64,
    pub deviation_ms: f64,
    pub tracking_ms: f64,
    pub io_ms: f64,
}

#[derive(Debug, Serialize)]
pub struct RunStats {
    pub frames: usize,
    pub skipped_frames: usize,
    pub points_integrated: usize,
    pub non_finite_points: usize,
    pub layers: u32,
    pub mean_frame_integration_ms: f64,
    pub integration_fps: f64,
    pub stage_ms: StageTimings,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_echo: serde_json::Value,
    pub toolpath: String,
    pub streams: String,
    pub outputs: Vec<String>,
    pub stats: RunStats,
    pub warnings: Vec<String>,
}

pub struct RunOutcome {
    pub manifest_path: PathBuf,
    pub manifest: RunManifest,
}

pub fn cmd_run(
    cfg: &PipelineConfig,
    cfg_dir: &Path,
    toolpath_path: &Path,
    streams_dir: &Path,
    out_dir: &Path,
    layer_range: Option<(u32, u32)>,
) -> Result<RunOutcome, CliError> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", out_dir.display())))?;

    let calibration = depomap::geom::load_calibration(&cfg.calibration_path(cfg_dir))
        .map_err(|e| CliError::Config(e.to_string()))?;
    for p in &cfg.profilers {
        if !calibration.contains_key(&p.id) {
            return Err(CliError::Config(format!(
                "profiler {} has no calibration entry",
                p.id
            )));
        }
    }
    let toolpath = parse_toolpath(toolpath_path).map_err(|e| match e {
        depomap::toolpath::ToolpathError::Io { .. } => CliError::Io(e.to_string()),
        other => CliError::Config(other.to_string()),
    })?;
    let model = cfg.deposition_model()?;

    let mut warnings: Vec<String> = Vec::new();

    // Pose stream.
    let (pose_records, bad_poses) = read_pose_stream(&streams_dir.join("poses.jsonl"))
        .map_err(|e| CliError::Io(e.to_string()))?;
    if bad_poses > 0 {
        warnings.push(format!("{bad_poses} unparseable pose records skipped"));
    }
    let poses = PoseTrack::from_records(&pose_records)?;
    if poses.max_gap_us() > 1_000_000 {
        warnings.push(format!(
            "pose stream has a {:.2} s gap",
            poses.max_gap_us() as f64 * 1e-6
        ));
    }

    // Scan streams, merged by (timestamp, scanner id).
    let mut frames: Vec<ProfileFrame> = Vec::new();
    let mut skipped_frames = 0usize;
    for p in &cfg.profilers {
        let path = streams_dir.join(format!("scan_{:02}.jsonl", p.id));
        let (stream, skipped) = read_scan_stream(&path).map_err(|e| CliError::Io(e.to_string()))?;
        skipped_frames += skipped;
        frames.extend(stream);
    }
    if skipped_frames > 0 {
        warnings.push(format!("{skipped_frames} unparseable frames skipped"));
    }
    if frames.is_empty() {
        return Err(CliError::Stream("no scan frames in any stream".into()));
    }
    frames.sort_by_key(|f| (f.t_us, f.scanner_id));
    let (pose_t0, pose_t1) = poses.time_span_us();
    if frames.last().unwrap().t_us < pose_t0 || frames[0].t_us > pose_t1 {
        return Err(CliError::Stream(
            "scan frames lie entirely outside pose stream coverage".into(),
        ));
    }
    let frame_gap = frames
        .windows(2)
        .map(|w| w[1].t_us - w[0].t_us)
        .max()
        .unwrap_or(0);
    if frame_gap > 1_000_000 {
        warnings.push(format!(
            "scan streams have a {:.2} s gap",
            frame_gap as f64 * 1e-6
        ));
    }

    // Engine state.
    let grid = SparseTsdfGrid::new(cfg.fusion_params());
    let mut reference = ReferenceBuilder::new(&toolpath, &model, cfg.reference_grid_config());
    let mut tracker = Tracker::new(cfg.tracker_params());
    let nozzle_base = cfg.nozzle_base();
    let mut active = ActiveRegion::new(Point3::origin(), cfg.active_region.radius_mm);
    let max_file_layer = toolpath.layer_count().saturating_sub(1);

    let mut timings = StageTimings::default();
    let mut outputs: Vec<PathBuf> = Vec::new();
    let mut layer_index: u32 = 0;
    let mut layer_ref_z: Option<f64> = None;
    let mut integration_time_s = 0.0f64;
    let mut points_integrated = 0usize;
    let mut non_finite = 0usize;
    let total_frames = frames.len();

    let emit_layer = |k: u32| -> bool { layer_range.is_none_or(|(a, b)| k >= a && k <= b) };

    let finalize_layer = |k: u32,
                          grid: &SparseTsdfGrid,
                          reference: &mut ReferenceBuilder,
                          tracker: &mut Tracker,
                          timings: &mut StageTimings,
                          outputs: &mut Vec<PathBuf>,
                          warnings: &mut Vec<String>|
     -> Result<(), CliError> {
        let t0 = Instant::now();
        let snapshot = grid.snapshot();
        // The truncation band fabricates a thin skirt one voxel past the
        // plate edge; the analysis domain is the plate, so crop to it.
        let extent = cfg.field_extent();
        let scanned = marching_cubes(&snapshot, 0.0).crop_xy(extent.min, extent.max);
        timings.meshing_ms += t0.elapsed().as_secs_f64() * 1e3;

        let file_layer = k.min(max_file_layer);
        if file_layer != k {
            warnings.push(format!(
                "detected layer {k} beyond toolpath ({} layers); reference clamped",
                max_file_layer + 1
            ));
        }
        let t0 = Instant::now();
        let ref_model = reference
            .advance_to_layer(file_layer)
            .map_err(|e| CliError::Config(e.to_string()))?;
        timings.reference_ms += t0.elapsed().as_secs_f64() * 1e3;

        if scanned.is_empty() {
            warnings.push(format!("layer {k}: fused surface is empty, skipped"));
            return Ok(());
        }

        let t0 = Instant::now();
        let mut map = compute_deviation(scanned, &ref_model)
            .map_err(|e| CliError::Stream(format!("layer {k}: {e}")))?;
        classify(&mut map, cfg.thresholds.delta_g_mm, cfg.thresholds.delta_l)
            .map_err(|e| CliError::Config(e.to_string()))?;
        let regions = segment(&map, cfg.thresholds.a_min_mm2, k);
        timings.deviation_ms += t0.elapsed().as_secs_f64() * 1e3;

        let t0 = Instant::now();
        tracker.associate(&regions, k);
        let report = tracker.layer_report(
            k,
            GlobalStats {
                mean_dev_mm: map.mean_signed_deviation(),
                max_dev_mm: map.max_abs_deviation(),
            },
        );
        timings.tracking_ms += t0.elapsed().as_secs_f64() * 1e3;

        if emit_layer(k) {
            let t0 = Instant::now();
            let fused_path = out_dir.join(format!("layer_{k:03}_fused.ply"));
            let mut fused = map.mesh.clone();
            fused.scalar = None;
            write_ply(&fused_path, &fused, None).map_err(|e| CliError::Io(e.to_string()))?;

            let ref_path = out_dir.join(format!("layer_{k:03}_reference.ply"));
            write_ply(&ref_path, ref_model.mesh(), None)
                .map_err(|e| CliError::Io(e.to_string()))?;

            let dev_path = out_dir.join(format!("layer_{k:03}_deviation.ply"));
            let colors = class_colors(&map, cfg.thresholds.delta_g_mm);
            write_ply(&dev_path, &map.mesh, Some(&colors))
                .map_err(|e| CliError::Io(e.to_string()))?;

            let report_path = out_dir.join(format!("layer_{k:03}.json"));
            let json = serde_json::to_string_pretty(&report).expect("report serializes");
            std::fs::write(&report_path, json)
                .map_err(|e| CliError::Io(format!("{}: {e}", report_path.display())))?;

            outputs.extend([fused_path, ref_path, dev_path, report_path]);
            timings.io_ms += t0.elapsed().as_secs_f64() * 1e3;
        }
        Ok(())
    };

    for frame in &frames {
        let Some(profiler) = cfg.profilers.iter().find(|p| p.id == frame.scanner_id) else {
            skipped_frames += 1;
            continue;
        };
        let pose = poses.sample(frame.t_us);
        let nozzle_o = pose.apply(&nozzle_base);

        // Layer segmentation from tool-height steps in the pose stream.
        match layer_ref_z {
            None => layer_ref_z = Some(nozzle_o.z),
            Some(z_ref) => {
                if nozzle_o.z - z_ref > cfg.layer_thickness_mm * 0.5 {
                    finalize_layer(
                        layer_index,
                        &grid,
                        &mut reference,
                        &mut tracker,
                        &mut timings,
                        &mut outputs,
                        &mut warnings,
                    )?;
                    layer_index += 1;
                    layer_ref_z = Some(nozzle_o.z);
                }
            }
        }

        let calib = &calibration[&frame.scanner_id];
        let chain = pose.compose(calib);
        let sensor_origin = chain.apply(&Point3::origin());
        let mut points: Vec<Point3> = Vec::with_capacity(profiler.points_per_frame);
        for (p, &ok) in frame.points.iter().zip(&frame.valid_mask) {
            if ok {
                points.push(chain.apply(&Point3::new(p[0], 0.0, p[1])));
            }
        }

        let t0 = Instant::now();
        active = grid.update_active_region(&active, &nozzle_o);
        let stats = grid.integrate_frame(&sensor_origin, &points, Some(&active));
        integration_time_s += t0.elapsed().as_secs_f64();
        points_integrated += stats.points - stats.skipped_non_finite;
        non_finite += stats.skipped_non_finite;
    }

    // Final (possibly partial) layer.
    finalize_layer(
        layer_index,
        &grid,
        &mut reference,
        &mut tracker,
        &mut timings,
        &mut outputs,
        &mut warnings,
    )?;
    timings.fusion_ms = integration_time_s * 1e3;

    let t0 = Instant::now();
    let csv_path = out_dir.join("tracks.csv");
    std::fs::write(&csv_path, tracker.history_csv())
        .map_err(|e| CliError::Io(format!("{}: {e}", csv_path.display())))?;
    outputs.push(csv_path);
    timings.io_ms += t0.elapsed().as_secs_f64() * 1e3;

    let mean_ms = integration_time_s * 1e3 / total_frames as f64;
    let manifest = RunManifest {
        command: "run".into(),
        config_echo: serde_json::to_value(cfg).expect("config serializes"),
        toolpath: toolpath_path.display().to_string(),
        streams: streams_dir.display().to_string(),
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        stats: RunStats {
            frames: total_frames,
            skipped_frames,
            points_integrated,
            non_finite_points: non_finite,
            layers: layer_index + 1,
            mean_frame_integration_ms: mean_ms,
            integration_fps: if mean_ms > 0.0 {
                1e3 / mean_ms
            } else {
                f64::INFINITY
            },
            stage_ms: timings,
        },
        warnings,
    };
    let manifest_path = out_dir.join("run_manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&manifest_path, json)
        .map_err(|e| CliError::Io(format!("{}: {e}", manifest_path.display())))?;

    Ok(RunOutcome {
        manifest_path,
        manifest,
    })
}
