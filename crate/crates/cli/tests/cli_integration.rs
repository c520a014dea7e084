//! End-to-end checks of the command-line surface: exit codes, determinism,
//! manifest completeness, and the compare/report commands.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_depomap"))
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn read_dir_files(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
}

fn simulate_into(out: &Path, extra: &[&str]) {
    let status = bin()
        .args([
            "simulate",
            "--config",
            fixtures().join("pipeline.json").to_str().unwrap(),
            "--toolpath",
            fixtures()
                .join("square_raster_3layer.csv")
                .to_str()
                .unwrap(),
            "--out",
            out.to_str().unwrap(),
        ])
        .args(extra)
        .status()
        .unwrap();
    assert!(status.success());
}

fn run_into(streams: &Path, out: &Path) {
    let status = bin()
        .args([
            "run",
            "--config",
            fixtures().join("pipeline.json").to_str().unwrap(),
            "--toolpath",
            fixtures()
                .join("square_raster_3layer.csv")
                .to_str()
                .unwrap(),
            "--streams",
            streams.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());
}

#[test]
fn missing_toolpath_exits_3_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args([
            "simulate",
            "--config",
            fixtures().join("pipeline.json").to_str().unwrap(),
            "--toolpath",
            "/nonexistent/path.csv",
            "--out",
            dir.path().to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("/nonexistent/path.csv"), "stderr: {stderr}");
}

#[test]
fn bad_config_value_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args([
            "simulate",
            "--config",
            fixtures().join("pipeline.json").to_str().unwrap(),
            "--toolpath",
            fixtures()
                .join("square_raster_3layer.csv")
                .to_str()
                .unwrap(),
            "--out",
            dir.path().to_str().unwrap(),
            "--set",
            "voxel_size_mm=-2",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn empty_streams_exit_4() {
    let streams = tempfile::tempdir().unwrap();
    // Valid pose stream, but scan files missing entirely -> I/O error 3;
    // empty scan files -> stream integrity 4.
    std::fs::write(
        streams.path().join("poses.jsonl"),
        "{\"t_us\":0,\"r\":[1,0,0,0,1,0,0,0,1],\"t\":[0,0,0]}\n",
    )
    .unwrap();
    for id in 0..3 {
        std::fs::write(streams.path().join(format!("scan_{id:02}.jsonl")), "").unwrap();
    }
    let out_dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args([
            "run",
            "--config",
            fixtures().join("pipeline.json").to_str().unwrap(),
            "--toolpath",
            fixtures()
                .join("square_raster_3layer.csv")
                .to_str()
                .unwrap(),
            "--streams",
            streams.path().to_str().unwrap(),
            "--out",
            out_dir.path().to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn simulate_with_fixed_seed_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    simulate_into(a.path(), &["--seed", "7"]);
    simulate_into(b.path(), &["--seed", "7"]);
    assert_eq!(read_dir_files(a.path()), read_dir_files(b.path()));
    for name in read_dir_files(a.path()) {
        let fa = std::fs::read(a.path().join(&name)).unwrap();
        let fb = std::fs::read(b.path().join(&name)).unwrap();
        assert_eq!(fa, fb, "file {name} differs between seeded runs");
    }
}

#[test]
fn full_pipeline_reports_are_deterministic_and_manifested() {
    let sim = tempfile::tempdir().unwrap();
    simulate_into(sim.path(), &[]);

    let run_a = tempfile::tempdir().unwrap();
    let run_b = tempfile::tempdir().unwrap();
    run_into(sim.path(), run_a.path());
    run_into(sim.path(), run_b.path());

    // Same config + same streams: every artifact except the (timed)
    // manifest is byte-identical.
    let names = read_dir_files(run_a.path());
    assert_eq!(names, read_dir_files(run_b.path()));
    for name in &names {
        if name == "run_manifest.json" {
            continue;
        }
        let fa = std::fs::read(run_a.path().join(name)).unwrap();
        let fb = std::fs::read(run_b.path().join(name)).unwrap();
        assert_eq!(fa, fb, "artifact {name} differs between identical runs");
    }

    // Every emitted file appears in the manifest; no orphan outputs.
    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(run_a.path().join("run_manifest.json")).unwrap(),
    )
    .unwrap();
    let listed: Vec<String> = manifest["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| {
            Path::new(v.as_str().unwrap())
                .file_name()
                .unwrap()
                .to_string_lossy()
                .into_owned()
        })
        .collect();
    for name in &names {
        if name == "run_manifest.json" {
            continue;
        }
        assert!(listed.contains(name), "{name} missing from manifest");
    }
    assert_eq!(listed.len() + 1, names.len(), "orphan outputs present");
}

#[test]
fn compare_mesh_with_itself_is_zero() {
    let sim = tempfile::tempdir().unwrap();
    simulate_into(sim.path(), &[]);
    let out_dir = tempfile::tempdir().unwrap();
    let truth = sim.path().join("truth.ply");
    let out = bin()
        .args([
            "compare",
            truth.to_str().unwrap(),
            truth.to_str().unwrap(),
            "--out",
            out_dir.path().to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    let summary: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(out_dir.path().join("compare.json")).unwrap(),
    )
    .unwrap();
    assert!(summary["rms_mm"].as_f64().unwrap() < 1e-9);
}

#[test]
fn report_summarizes_layers() {
    let sim = tempfile::tempdir().unwrap();
    simulate_into(sim.path(), &[]);
    let run = tempfile::tempdir().unwrap();
    run_into(sim.path(), run.path());
    let out = bin()
        .args(["report", "--out", run.path().to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("layer"));
    assert_eq!(stdout.lines().count(), 4, "3 layers + header: {stdout}");
}

#[test]
fn layer_filter_limits_artifacts() {
    let sim = tempfile::tempdir().unwrap();
    simulate_into(sim.path(), &[]);
    let run = tempfile::tempdir().unwrap();
    let status = bin()
        .args([
            "run",
            "--config",
            fixtures().join("pipeline.json").to_str().unwrap(),
            "--toolpath",
            fixtures()
                .join("square_raster_3layer.csv")
                .to_str()
                .unwrap(),
            "--streams",
            sim.path().to_str().unwrap(),
            "--out",
            run.path().to_str().unwrap(),
            "--layers",
            "2..2",
        ])
        .status()
        .unwrap();
    assert!(status.success());
    let names = read_dir_files(run.path());
    assert!(names.iter().any(|n| n.starts_with("layer_002")));
    assert!(!names.iter().any(|n| n.starts_with("layer_000")));
    // Tracking still ran over all layers.
    assert!(names.contains(&"tracks.csv".to_string()));
}

#[test]
fn reference_command_emits_meshes_and_grids() {
    let out = tempfile::tempdir().unwrap();
    let status = bin()
        .args([
            "reference",
            "--config",
            fixtures().join("pipeline.json").to_str().unwrap(),
            "--toolpath",
            fixtures()
                .join("square_raster_3layer.csv")
                .to_str()
                .unwrap(),
            "--out",
            out.path().to_str().unwrap(),
            "--layers",
            "1..2",
        ])
        .status()
        .unwrap();
    assert!(status.success());
    let names = read_dir_files(out.path());
    assert_eq!(
        names,
        vec![
            "reference_001.grid",
            "reference_001.ply",
            "reference_002.grid",
            "reference_002.ply"
        ]
    );
}

#[test]
fn bundled_square_fixture_has_three_layers_stepping_0p8() {
    let path = fixtures().join("square_raster_3layer.csv");
    let toolpath = depomap::toolpath::parse_toolpath(&path).unwrap();
    let layers = toolpath.segment_layers(0.8).unwrap();
    assert_eq!(layers.len(), 3);
    for (i, (idx, z)) in layers.iter().enumerate() {
        assert_eq!(*idx, i as u32);
        assert!((z - i as f64 * 0.8).abs() < 1e-9, "layer {i} at z {z}");
    }
}

#[test]
fn bundled_twisted_fixture_parses_with_all_motion_types() {
    let path = fixtures().join("twisted_raster_10layer.csv");
    let toolpath = depomap::toolpath::parse_toolpath(&path).unwrap();
    assert_eq!(toolpath.layer_count(), 10);
    let kinds: std::collections::HashSet<&str> = toolpath
        .segments()
        .iter()
        .map(|s| s.kind.as_str())
        .collect();
    assert!(kinds.contains("infill") && kinds.contains("edge") && kinds.contains("skip"));
    // Edge passes carry the 35-degree spray angle at 30 mm/s; skips run at 50.
    for seg in toolpath.segments() {
        match seg.kind.as_str() {
            "edge" => {
                assert_eq!(seg.tilt_deg, 35.0);
                assert_eq!(seg.speed, 30.0);
            }
            "skip" => assert_eq!(seg.speed, 50.0),
            _ => assert_eq!(seg.tilt_deg, 0.0),
        }
    }
}

#[test]
fn reference_grids_reload_and_mesh() {
    let out = tempfile::tempdir().unwrap();
    let status = bin()
        .args([
            "reference",
            "--config",
            fixtures().join("pipeline.json").to_str().unwrap(),
            "--toolpath",
            fixtures().join("square_raster_3layer.csv").to_str().unwrap(),
            "--out",
            out.path().to_str().unwrap(),
            "--layers",
            "2..2",
        ])
        .status()
        .unwrap();
    assert!(status.success());
    let grid = depomap::fusion::SparseTsdfGrid::load(&out.path().join("reference_002.grid"))
        .expect("grid file reloads");
    assert!(grid.block_count() > 0);
    let mesh = depomap::meshing::marching_cubes(&grid.snapshot(), 0.0);
    assert!(!mesh.is_empty());
    // The reloaded field meshes to the same surface as the emitted PLY.
    let ply = depomap::meshing::read_ply(&out.path().join("reference_002.ply")).unwrap();
    assert_eq!(mesh.triangles.len(), ply.triangles.len());
}
