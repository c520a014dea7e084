//! Command implementations behind the CLI subcommands.

use std::path::{Path, PathBuf};

use serde::Serialize;

use depomap::geom::load_calibration;
use depomap::meshing::{read_ply, write_ply, MeshQuery};
use depomap::reference::ReferenceBuilder;
use depomap::scansim::{run_simulation, VirtualProfiler};
use depomap::toolpath::parse_toolpath;

use crate::config::PipelineConfig;
use crate::CliError;

/// `simulate`: drive the deposition/scan simulator and emit stream files,
/// the pose stream and the ground-truth mesh. Output is a pure function of
/// config + seed, byte for byte.
pub fn cmd_simulate(
    cfg: &PipelineConfig,
    cfg_dir: &Path,
    toolpath_path: &Path,
    out_dir: &Path,
    seed: Option<u64>,
) -> Result<Vec<PathBuf>, CliError> {
    let toolpath = parse_toolpath(toolpath_path).map_err(|e| match e {
        depomap::toolpath::ToolpathError::Io { .. } => CliError::Io(e.to_string()),
        other => CliError::Config(other.to_string()),
    })?;
    let model = cfg.deposition_model()?;
    let calibration = load_calibration(&cfg.calibration_path(cfg_dir))
        .map_err(|e| CliError::Config(e.to_string()))?;

    let mut profilers = Vec::new();
    for p in &cfg.profilers {
        let mounting = calibration.get(&p.id).ok_or_else(|| {
            CliError::Config(format!("profiler {} has no calibration entry", p.id))
        })?;
        let mut profiler = VirtualProfiler::new(p.id, *mounting);
        profiler.points_per_frame = p.points_per_frame;
        profiler.fov_width = p.fov_mm;
        profiler.frame_rate = p.frame_rate_hz;
        profiler.noise_sigma = p.noise_sigma_mm;
        profilers.push(profiler);
    }

    let sim_cfg = cfg.simulation_config(seed);
    let outputs =
        run_simulation(&toolpath, &model, &profilers, &sim_cfg, out_dir).map_err(|e| match e {
            depomap::scansim::SimError::InvalidConfig(msg) => CliError::Config(msg),
            other => CliError::Io(other.to_string()),
        })?;

    let mut files = outputs.scan_paths;
    files.push(outputs.pose_path);
    files.push(outputs.truth_path);
    Ok(files)
}

/// `reference`: build per-layer near-net reference meshes and grids.
pub fn cmd_reference(
    cfg: &PipelineConfig,
    toolpath_path: &Path,
    out_dir: &Path,
    layer_range: Option<(u32, u32)>,
) -> Result<Vec<PathBuf>, CliError> {
    let toolpath = parse_toolpath(toolpath_path).map_err(|e| match e {
        depomap::toolpath::ToolpathError::Io { .. } => CliError::Io(e.to_string()),
        other => CliError::Config(other.to_string()),
    })?;
    if toolpath.is_empty() {
        return Err(CliError::Config("toolpath has no segments".into()));
    }
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", out_dir.display())))?;
    let model = cfg.deposition_model()?;
    let last = toolpath.layer_count() - 1;
    let (a, b) = layer_range.unwrap_or((0, last));
    if b > last {
        return Err(CliError::Config(format!(
            "layer range {a}..{b} exceeds toolpath layers 0..{last}"
        )));
    }
    let mut builder = ReferenceBuilder::new(&toolpath, &model, cfg.reference_grid_config());
    let mut outputs = Vec::new();
    for layer in 0..=b {
        let model = builder
            .advance_to_layer(layer)
            .map_err(|e| CliError::Config(e.to_string()))?;
        if layer < a {
            continue;
        }
        let mesh_path = out_dir.join(format!("reference_{layer:03}.ply"));
        write_ply(&mesh_path, model.mesh(), None).map_err(|e| CliError::Io(e.to_string()))?;
        let grid_path = out_dir.join(format!("reference_{layer:03}.grid"));
        model
            .grid()
            .save(&grid_path)
            .map_err(|e| CliError::Io(e.to_string()))?;
        outputs.push(mesh_path);
        outputs.push(grid_path);
    }
    Ok(outputs)
}

#[derive(Debug, Serialize)]
pub struct CompareSummary {
    pub vertices: usize,
    pub mean_mm: f64,
    pub rms_mm: f64,
    pub max_abs_mm: f64,
}

/// `compare`: per-vertex signed distance of mesh A against mesh B, written
/// as a deviation PLY plus a JSON summary.
pub fn cmd_compare(
    mesh_a: &Path,
    mesh_b: &Path,
    out_dir: &Path,
) -> Result<CompareSummary, CliError> {
    let a = read_ply(mesh_a).map_err(|e| CliError::Io(e.to_string()))?;
    let b = read_ply(mesh_b).map_err(|e| CliError::Io(e.to_string()))?;
    if a.is_empty() || b.is_empty() {
        return Err(CliError::Config(
            "compare requires two non-empty meshes".into(),
        ));
    }
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", out_dir.display())))?;
    let query = MeshQuery::new(&b).map_err(|e| CliError::Config(e.to_string()))?;
    let deviations: Vec<f64> = a
        .vertices
        .iter()
        .map(|v| query.signed_distance(v))
        .collect();

    let n = deviations.len() as f64;
    let mean = deviations.iter().sum::<f64>() / n;
    let rms = (deviations.iter().map(|d| d * d).sum::<f64>() / n).sqrt();
    let max_abs = deviations.iter().fold(0.0f64, |m, d| m.max(d.abs()));

    let mut mesh = a;
    mesh.scalar = Some(deviations);
    let ply_path = out_dir.join("compare.ply");
    write_ply(&ply_path, &mesh, None).map_err(|e| CliError::Io(e.to_string()))?;

    let summary = CompareSummary {
        vertices: mesh.vertices.len(),
        mean_mm: mean,
        rms_mm: rms,
        max_abs_mm: max_abs,
    };
    let json_path = out_dir.join("compare.json");
    std::fs::write(
        &json_path,
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )
    .map_err(|e| CliError::Io(format!("{}: {e}", json_path.display())))?;
    Ok(summary)
}

/// `report`: read a run output directory and print a per-layer summary.
pub fn cmd_report(out_dir: &Path) -> Result<String, CliError> {
    let mut layer_files: Vec<PathBuf> = std::fs::read_dir(out_dir)
        .map_err(|e| CliError::Io(format!("cannot read {}: {e}", out_dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with("layer_") && n.ends_with(".json"))
                .unwrap_or(false)
        })
        .collect();
    layer_files.sort();
    if layer_files.is_empty() {
        return Err(CliError::Io(format!(
            "no layer reports found in {}",
            out_dir.display()
        )));
    }

    let mut out = String::new();
    out.push_str("layer  mean_dev_mm  max_dev_mm  active_tracks  closed_tracks\n");
    for file in &layer_files {
        let text = std::fs::read_to_string(file)
            .map_err(|e| CliError::Io(format!("{}: {e}", file.display())))?;
        let report: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Io(format!("{}: {e}", file.display())))?;
        let layer = report["layer"].as_u64().unwrap_or(0);
        let mean = report["global"]["mean_dev_mm"].as_f64().unwrap_or(f64::NAN);
        let max = report["global"]["max_dev_mm"].as_f64().unwrap_or(f64::NAN);
        let active = report["tracks"].as_array().map(|a| a.len()).unwrap_or(0);
        let closed = report["closed"].as_array().map(|a| a.len()).unwrap_or(0);
        out.push_str(&format!(
            "{layer:>5}  {mean:>11.4}  {max:>10.4}  {active:>13}  {closed:>13}\n"
        ));
    }
    Ok(out)
}
