use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use depomap_cli::commands::{cmd_compare, cmd_reference, cmd_report, cmd_simulate};
use depomap_cli::config::PipelineConfig;
use depomap_cli::pipeline::cmd_run;
use depomap_cli::CliError;

/// Reconstruct, compare and monitor deposition builds from profiler scans.
#[derive(Parser)]
#[command(name = "depomap", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a build: emit scan streams, a pose stream and ground truth.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        toolpath: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the simulator noise seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override config values by dotted path, e.g. thresholds.delta_g_mm=1.5
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Ingest streams, fuse, compare against the reference and report.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        toolpath: PathBuf,
        /// Directory containing scan_XX.jsonl and poses.jsonl.
        #[arg(long)]
        streams: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Emit artifacts only for layers a..b (inclusive).
        #[arg(long)]
        layers: Option<String>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Build per-layer near-net reference meshes and grids.
    Reference {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        toolpath: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        layers: Option<String>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Signed-distance comparison of two meshes (A against B).
    Compare {
        mesh_a: PathBuf,
        mesh_b: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize the layer reports in a run output directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_layer_range(spec: &Option<String>) -> Result<Option<(u32, u32)>, CliError> {
    let Some(spec) = spec else { return Ok(None) };
    let (a, b) = spec
        .split_once("..")
        .ok_or_else(|| CliError::Config(format!("--layers expects a..b, got `{spec}`")))?;
    let a: u32 = a
        .parse()
        .map_err(|_| CliError::Config(format!("bad layer `{a}`")))?;
    let b: u32 = b
        .parse()
        .map_err(|_| CliError::Config(format!("bad layer `{b}`")))?;
    if b < a {
        return Err(CliError::Config(format!(
            "--layers range is empty: {a}..{b}"
        )));
    }
    Ok(Some((a, b)))
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate {
            config,
            toolpath,
            out,
            seed,
            set,
        } => {
            let (cfg, cfg_dir) = PipelineConfig::load(&config, &set)?;
            let files = cmd_simulate(&cfg, &cfg_dir, &toolpath, &out, seed)?;
            for f in files {
                println!("wrote {}", f.display());
            }
            Ok(())
        }
        Command::Run {
            config,
            toolpath,
            streams,
            out,
            layers,
            set,
        } => {
            let (cfg, cfg_dir) = PipelineConfig::load(&config, &set)?;
            let range = parse_layer_range(&layers)?;
            let outcome = cmd_run(&cfg, &cfg_dir, &toolpath, &streams, &out, range)?;
            let stats = &outcome.manifest.stats;
            println!(
                "processed {} frames over {} layers; integration {:.2} ms/frame ({:.1} frames/s)",
                stats.frames, stats.layers, stats.mean_frame_integration_ms, stats.integration_fps
            );
            for w in &outcome.manifest.warnings {
                eprintln!("warning: {w}");
            }
            println!("manifest {}", outcome.manifest_path.display());
            Ok(())
        }
        Command::Reference {
            config,
            toolpath,
            out,
            layers,
            set,
        } => {
            let (cfg, _) = PipelineConfig::load(&config, &set)?;
            let range = parse_layer_range(&layers)?;
            let files = cmd_reference(&cfg, &toolpath, &out, range)?;
            for f in files {
                println!("wrote {}", f.display());
            }
            Ok(())
        }
        Command::Compare {
            mesh_a,
            mesh_b,
            out,
        } => {
            let summary = cmd_compare(&mesh_a, &mesh_b, &out)?;
            println!(
                "{} vertices: mean {:+.4} mm, rms {:.4} mm, max |d| {:.4} mm",
                summary.vertices, summary.mean_mm, summary.rms_mm, summary.max_abs_mm
            );
            Ok(())
        }
        Command::Report { out } => {
            let table = cmd_report(&out)?;
            print!("{table}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
