//! Pipeline configuration: one JSON file carrying every knob, with
//! `--set key=value` dotted-path overrides for experiment sweeps.
//!
//! All lengths are mm, times s, rates mm/s; areas mm^2.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use depomap::fusion::FusionParams;
use depomap::geom::Point3;
use depomap::reference::{DepositionModel, DepositionModelConfig, ReferenceGridConfig};
use depomap::scansim::{FieldExtent, NozzleOccluder, RateAnomaly, SimulationConfig};
use depomap::tracking::TrackerParams;

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub voxel_size_mm: f64,
    /// Defaults to 3x the voxel size when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncation_mm: Option<f64>,
    pub layer_thickness_mm: f64,
    #[serde(default)]
    pub active_region: ActiveRegionConfig,
    #[serde(default = "default_w_max")]
    pub w_max: f64,
    #[serde(default)]
    pub thresholds: ThresholdConfig,
    #[serde(default)]
    pub tracking: TrackingConfig,
    pub deposition: DepositionModelConfig,
    #[serde(default)]
    pub field: FieldConfig,
    #[serde(default)]
    pub simulator: SimulatorConfig,
    #[serde(default = "default_nozzle")]
    pub nozzle_base_mm: [f64; 3],
    /// Scanner mounting calibration file, resolved relative to the config.
    pub calibration: PathBuf,
    pub profilers: Vec<ProfilerConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActiveRegionConfig {
    pub radius_mm: f64,
    pub w_cap: f64,
    pub conflict_threshold_mm: f64,
}

impl Default for ActiveRegionConfig {
    fn default() -> Self {
        Self {
            radius_mm: 10.0,
            w_cap: 4.0,
            conflict_threshold_mm: 0.6,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThresholdConfig {
    pub delta_g_mm: f64,
    pub delta_l: f64,
    pub a_min_mm2: f64,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self {
            delta_g_mm: 1.0,
            delta_l: 0.5,
            a_min_mm2: 10.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackingConfig {
    pub k_miss: u32,
    pub s_min_mm_per_layer: f64,
    pub trend_window: usize,
    pub full_3d_overlap: bool,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        let p = TrackerParams::default();
        Self {
            k_miss: p.k_miss,
            s_min_mm_per_layer: p.s_min,
            trend_window: p.trend_window,
            full_3d_overlap: p.full_3d_overlap,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldConfig {
    pub cell_mm: f64,
    /// [[min_x, min_y], [max_x, max_y]]
    pub extent_mm: [[f64; 2]; 2],
    /// Reference quadrature step multiplier on sigma / (2 v).
    pub quadrature_step_scale: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            cell_mm: 0.5,
            extent_mm: [[-40.0, -40.0], [40.0, 40.0]],
            quadrature_step_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulatorConfig {
    pub pose_rate_hz: f64,
    pub trigger_interval_ms: f64,
    pub seed: u64,
    pub anomalies: Vec<AnomalyConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub occluder: Option<OccluderConfig>,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        Self {
            pose_rate_hz: 100.0,
            trigger_interval_ms: 20.0,
            seed: 0,
            anomalies: Vec::new(),
            occluder: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnomalyConfig {
    pub center_xy_mm: [f64; 2],
    pub radius_mm: f64,
    pub rate_scale: f64,
    /// Inclusive layer range [first, last].
    pub layers: [u32; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OccluderConfig {
    pub radius_mm: f64,
    pub bottom_clearance_mm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfilerConfig {
    pub id: u32,
    #[serde(default = "default_points")]
    pub points_per_frame: usize,
    #[serde(default = "default_fov")]
    pub fov_mm: f64,
    #[serde(default = "default_rate")]
    pub frame_rate_hz: f64,
    #[serde(default = "default_noise")]
    pub noise_sigma_mm: f64,
}

fn default_w_max() -> f64 {
    128.0
}
fn default_nozzle() -> [f64; 3] {
    [0.0, 0.0, 30.0]
}
fn default_points() -> usize {
    640
}
fn default_fov() -> f64 {
    60.0
}
fn default_rate() -> f64 {
    10.0
}
fn default_noise() -> f64 {
    0.05
}

impl PipelineConfig {
    /// Load a config file and apply `--set key=value` overrides by dotted
    /// path, then validate.
    pub fn load(path: &Path, overrides: &[String]) -> Result<(Self, PathBuf), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", path.display())))?;
        let mut value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))?;
        for assignment in overrides {
            apply_override(&mut value, assignment)?;
        }
        let config: PipelineConfig = serde_json::from_value(value)
            .map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))?;
        config.validate()?;
        let dir = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok((config, dir))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let positive = [
            ("voxel_size_mm", self.voxel_size_mm),
            ("layer_thickness_mm", self.layer_thickness_mm),
            ("active_region.radius_mm", self.active_region.radius_mm),
            ("w_max", self.w_max),
            ("thresholds.delta_g_mm", self.thresholds.delta_g_mm),
            ("thresholds.a_min_mm2", self.thresholds.a_min_mm2),
            ("deposition.A_mm_per_s", self.deposition.a_mm_per_s),
            ("deposition.sigma_mm", self.deposition.sigma_mm),
            ("field.cell_mm", self.field.cell_mm),
            ("simulator.pose_rate_hz", self.simulator.pose_rate_hz),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CliError::Config(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        let truncation = self.truncation();
        if truncation < self.voxel_size_mm {
            return Err(CliError::Config(format!(
                "truncation_mm ({truncation}) must be >= voxel_size_mm ({})",
                self.voxel_size_mm
            )));
        }
        if !(self.thresholds.delta_l > 0.0 && self.thresholds.delta_l <= 1.0) {
            return Err(CliError::Config(format!(
                "thresholds.delta_l must be in (0, 1], got {}",
                self.thresholds.delta_l
            )));
        }
        if self.profilers.is_empty() {
            return Err(CliError::Config("at least one profiler required".into()));
        }
        for a in &self.simulator.anomalies {
            if !(a.rate_scale >= 0.0 && a.rate_scale.is_finite()) {
                return Err(CliError::Config(format!(
                    "anomaly rate_scale must be finite and >= 0, got {}",
                    a.rate_scale
                )));
            }
            if a.radius_mm <= 0.0 {
                return Err(CliError::Config(format!(
                    "anomaly radius_mm must be > 0, got {}",
                    a.radius_mm
                )));
            }
        }
        let e = self.field.extent_mm;
        if !(e[1][0] > e[0][0] && e[1][1] > e[0][1]) {
            return Err(CliError::Config(
                "field.extent_mm must span a rectangle".into(),
            ));
        }
        DepositionModel::from_config(&self.deposition)
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn truncation(&self) -> f64 {
        self.truncation_mm.unwrap_or(3.0 * self.voxel_size_mm)
    }

    pub fn fusion_params(&self) -> FusionParams {
        FusionParams {
            voxel_size: self.voxel_size_mm,
            truncation: self.truncation(),
            w_max: self.w_max,
            w_cap: self.active_region.w_cap,
            active_conflict_threshold: self.active_region.conflict_threshold_mm,
        }
    }

    pub fn field_extent(&self) -> FieldExtent {
        let e = self.field.extent_mm;
        FieldExtent {
            min: (e[0][0], e[0][1]),
            max: (e[1][0], e[1][1]),
        }
    }

    pub fn reference_grid_config(&self) -> ReferenceGridConfig {
        ReferenceGridConfig {
            cell_size: self.field.cell_mm,
            extent: self.field_extent(),
            voxel_size: self.voxel_size_mm,
            truncation: self.truncation(),
            quadrature_step_scale: self.field.quadrature_step_scale,
        }
    }

    pub fn deposition_model(&self) -> Result<DepositionModel, CliError> {
        DepositionModel::from_config(&self.deposition).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn tracker_params(&self) -> TrackerParams {
        TrackerParams {
            k_miss: self.tracking.k_miss,
            s_min: self.tracking.s_min_mm_per_layer,
            trend_window: self.tracking.trend_window,
            full_3d_overlap: self.tracking.full_3d_overlap,
        }
    }

    pub fn nozzle_base(&self) -> Point3 {
        Point3::new(
            self.nozzle_base_mm[0],
            self.nozzle_base_mm[1],
            self.nozzle_base_mm[2],
        )
    }

    pub fn simulation_config(&self, seed_override: Option<u64>) -> SimulationConfig {
        SimulationConfig {
            cell_size: self.field.cell_mm,
            extent: self.field_extent(),
            pose_rate_hz: self.simulator.pose_rate_hz,
            trigger_interval_us: (self.simulator.trigger_interval_ms * 1000.0).round() as u64,
            seed: seed_override.unwrap_or(self.simulator.seed),
            nozzle_base: self.nozzle_base(),
            anomalies: self
                .simulator
                .anomalies
                .iter()
                .map(|a| RateAnomaly {
                    center_xy: (a.center_xy_mm[0], a.center_xy_mm[1]),
                    radius: a.radius_mm,
                    scale: a.rate_scale,
                    layers: (a.layers[0], a.layers[1]),
                })
                .collect(),
            occluder: self.simulator.occluder.as_ref().map(|o| NozzleOccluder {
                radius_mm: o.radius_mm,
                bottom_clearance_mm: o.bottom_clearance_mm,
            }),
        }
    }

    /// Calibration path resolved against the config file's directory.
    pub fn calibration_path(&self, config_dir: &Path) -> PathBuf {
        if self.calibration.is_absolute() {
            self.calibration.clone()
        } else {
            config_dir.join(&self.calibration)
        }
    }
}

/// Apply one `key.path=value` override onto the raw JSON tree. The value is
/// parsed as JSON when possible, falling back to a string.
fn apply_override(root: &mut serde_json::Value, assignment: &str) -> Result<(), CliError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set expects key=value, got `{assignment}`")))?;
    let value: serde_json::Value =
        serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut cursor = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        // Numeric components index into arrays.
        if let Ok(idx) = part.parse::<usize>() {
            let arr = cursor.as_array_mut().ok_or_else(|| {
                CliError::Config(format!("--set {path}: `{part}` indexes a non-array"))
            })?;
            if idx >= arr.len() {
                return Err(CliError::Config(format!(
                    "--set {path}: index {idx} out of bounds ({} entries)",
                    arr.len()
                )));
            }
            if last {
                arr[idx] = value;
                return Ok(());
            }
            cursor = &mut arr[idx];
            continue;
        }
        let obj = cursor
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("--set {path}: `{part}` is not an object")))?;
        if last {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        // Blocks omitted from the file (serde defaults) materialize on demand.
        cursor = obj
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    Ok(())
}
