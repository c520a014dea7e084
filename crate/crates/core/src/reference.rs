//! Near-net reference model: the Gaussian deposition plume integrated over
//! the executed toolpath, producing per-layer reference height fields,
//! distance grids and meshes.
//!
//! The plume deposits height at rate `zeta(theta) * A * exp(-r^2 / (2 sigma^2))`
//! mm/s, radially symmetric about the plume center, where `A` is the peak
//! rate at perpendicular spray and `zeta` the deposition efficiency as a
//! function of spray angle. Integrating that rate along the path with a
//! midpoint rule gives the expected surface; identical voxelization and
//! meshing to the fusion path keeps discretization bias out of the
//! comparison.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::{FusionParams, SparseTsdfGrid};
use crate::meshing::{marching_cubes, MeshError, MeshQuery, TriangleMesh};
use crate::scansim::{FieldExtent, HeightField};
use crate::toolpath::{Toolpath, ToolpathError};

#[derive(Debug, Error)]
pub enum ReferenceError {
    #[error("invalid deposition model: {0}")]
    InvalidModel(String),
    #[error("layer {requested} out of range (toolpath has {available} layers)")]
    LayerOutOfRange { requested: u32, available: u32 },
    #[error("time {requested} s out of range (path duration {duration} s)")]
    TimeOutOfRange { requested: f64, duration: f64 },
    #[error(transparent)]
    Toolpath(#[from] ToolpathError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

/// Peak deposition rate (mm/s) that yields the given layer height for a
/// raster at the given traverse speed and line spacing: the cross-track sum
/// of Gaussian passes deposits `2 pi sigma^2 A / (v * spacing)` per layer.
pub fn calibrated_peak_rate(
    layer_height: f64,
    traverse_speed: f64,
    line_spacing: f64,
    sigma: f64,
) -> f64 {
    layer_height * traverse_speed * line_spacing / (2.0 * std::f64::consts::PI * sigma * sigma)
}

/// Gaussian plume parameters and the spray-angle efficiency curve.
#[derive(Debug, Clone)]
pub struct DepositionModel {
    /// Peak height growth rate at plume center, perpendicular spray (mm/s).
    a_peak: f64,
    /// Plume standard deviation (mm).
    sigma: f64,
    /// Tabulated efficiency on [0, 90] degrees, monotone non-increasing,
    /// zeta(0) = 1.
    zeta: Vec<(f64, f64)>,
}

/// JSON schema for the deposition model config block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DepositionModelConfig {
    #[serde(rename = "A_mm_per_s")]
    pub a_mm_per_s: f64,
    pub sigma_mm: f64,
    /// `[[deg, value], ...]`; omitted means the cos^2 default curve.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zeta: Option<Vec<[f64; 2]>>,
}

impl DepositionModel {
    pub fn new(a_peak: f64, sigma: f64, zeta: Vec<(f64, f64)>) -> Result<Self, ReferenceError> {
        if !(a_peak > 0.0 && a_peak.is_finite()) {
            return Err(ReferenceError::InvalidModel(format!(
                "peak rate must be positive, got {a_peak}"
            )));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(ReferenceError::InvalidModel(format!(
                "sigma must be positive, got {sigma}"
            )));
        }
        if zeta.len() < 2 {
            return Err(ReferenceError::InvalidModel(
                "zeta table needs at least two entries".into(),
            ));
        }
        if zeta[0].0.abs() > 1e-9 || (zeta[0].1 - 1.0).abs() > 1e-9 {
            return Err(ReferenceError::InvalidModel(
                "zeta table must start at (0 deg, 1.0)".into(),
            ));
        }
        let mut prev = &zeta[0];
        for entry in &zeta[1..] {
            if entry.0 <= prev.0 {
                return Err(ReferenceError::InvalidModel(
                    "zeta angles must be strictly increasing".into(),
                ));
            }
            if entry.1 > prev.1 + 1e-12 {
                return Err(ReferenceError::InvalidModel(
                    "zeta must be monotone non-increasing".into(),
                ));
            }
            if !(0.0..=1.0).contains(&entry.1) {
                return Err(ReferenceError::InvalidModel(
                    "zeta values must lie in [0, 1]".into(),
                ));
            }
            prev = entry;
        }
        if zeta.last().unwrap().0 > 90.0 + 1e-9 {
            return Err(ReferenceError::InvalidModel(
                "zeta domain is [0, 90] degrees".into(),
            ));
        }
        Ok(Self {
            a_peak,
            sigma,
            zeta,
        })
    }

    /// cos^p(theta) efficiency, tabulated at 1-degree steps.
    pub fn cosine_power(a_peak: f64, sigma: f64, p: f64) -> Result<Self, ReferenceError> {
        let table: Vec<(f64, f64)> = (0..=90)
            .map(|deg| {
                let theta = (deg as f64).to_radians();
                (deg as f64, theta.cos().max(0.0).powf(p))
            })
            .collect();
        Self::new(a_peak, sigma, table)
    }

    /// Defaults sized so a raster at 30 mm/s with 2 mm line spacing grows
    /// 0.8 mm per layer: A = 0.8488 mm/s, sigma = 3 mm, zeta = cos^2.
    pub fn default_calibrated() -> Self {
        let sigma = 3.0;
        let a = calibrated_peak_rate(0.8, 30.0, 2.0, sigma);
        Self::cosine_power(a, sigma, 2.0).expect("calibrated defaults are valid")
    }

    pub fn from_config(cfg: &DepositionModelConfig) -> Result<Self, ReferenceError> {
        match &cfg.zeta {
            Some(table) => Self::new(
                cfg.a_mm_per_s,
                cfg.sigma_mm,
                table.iter().map(|e| (e[0], e[1])).collect(),
            ),
            None => Self::cosine_power(cfg.a_mm_per_s, cfg.sigma_mm, 2.0),
        }
    }

    pub fn a_peak(&self) -> f64 {
        self.a_peak
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Efficiency at the given spray angle: linear interpolation over the
    /// table, clamped at the domain ends.
    pub fn zeta(&self, theta_deg: f64) -> f64 {
        let t = &self.zeta;
        if theta_deg <= t[0].0 {
            return t[0].1;
        }
        if theta_deg >= t[t.len() - 1].0 {
            return t[t.len() - 1].1;
        }
        let idx = t.partition_point(|e| e.0 <= theta_deg);
        let (x0, y0) = t[idx - 1];
        let (x1, y1) = t[idx];
        y0 + (y1 - y0) * (theta_deg - x0) / (x1 - x0)
    }
}

/// How far along the toolpath to integrate.
#[derive(Debug, Clone, Copy)]
pub enum RefExtent {
    /// Through the end of the given file layer index.
    Layer(u32),
    /// Through the given path time in seconds.
    Time(f64),
}

/// Discretization settings for reference construction.
#[derive(Debug, Clone)]
pub struct ReferenceGridConfig {
    /// Height field cell size (mm).
    pub cell_size: f64,
    /// XY region covered by the height field.
    pub extent: FieldExtent,
    /// Voxel size of the derived distance grid (mm); matches fusion.
    pub voxel_size: f64,
    /// Truncation distance (mm).
    pub truncation: f64,
    /// Multiplier on the quadrature step bound sigma / (2 v). At 1.0 the
    /// plume is sampled at least every sigma/2 of travel.
    pub quadrature_step_scale: f64,
}

impl ReferenceGridConfig {
    pub fn new(extent: FieldExtent) -> Self {
        Self {
            cell_size: 0.5,
            extent,
            voxel_size: 2.0,
            truncation: 6.0,
            quadrature_step_scale: 1.0,
        }
    }
}

/// Reference model at one layer/time: expected heights, the derived distance
/// grid, and its mesh.
pub struct ReferenceModel {
    pub layer: Option<u32>,
    pub time_s: f64,
    pub heights: HeightField,
    grid: SparseTsdfGrid,
    mesh: TriangleMesh,
    query: Option<MeshQuery>,
}

impl ReferenceModel {
    pub fn mesh(&self) -> &TriangleMesh {
        &self.mesh
    }

    pub fn grid(&self) -> &SparseTsdfGrid {
        &self.grid
    }

    /// Reusable signed-distance evaluator: band-limited TSDF lookups with an
    /// exact mesh-query fallback beyond the band.
    pub fn query(&self) -> ReferenceQuery<'_> {
        ReferenceQuery {
            snapshot: self.grid.snapshot(),
            mesh_query: self.query.as_ref(),
        }
    }
}

pub struct ReferenceQuery<'a> {
    snapshot: crate::fusion::GridSnapshot,
    mesh_query: Option<&'a MeshQuery>,
}

impl ReferenceQuery<'_> {
    /// Signed distance of a point against the reference surface; `None` only
    /// when the reference has no surface at all (empty mesh, out of band).
    pub fn signed_distance(&self, p: &crate::geom::Point3) -> Option<f64> {
        if let Some(d) = self.snapshot.sample_trilinear(p) {
            return Some(d);
        }
        self.mesh_query.map(|q| q.signed_distance(p))
    }
}

/// Incrementally integrates the deposition model along the toolpath.
/// Layer-by-layer advancement reuses all accumulated heights, so building
/// layer k+1 costs only the new layer's quadrature.
pub struct ReferenceBuilder<'a> {
    path: &'a Toolpath,
    model: &'a DepositionModel,
    cfg: ReferenceGridConfig,
    heights: HeightField,
    cursor_s: f64,
}

impl<'a> ReferenceBuilder<'a> {
    pub fn new(path: &'a Toolpath, model: &'a DepositionModel, cfg: ReferenceGridConfig) -> Self {
        let heights = HeightField::new(cfg.extent, cfg.cell_size);
        Self {
            path,
            model,
            cfg,
            heights,
            cursor_s: 0.0,
        }
    }

    /// Integrate through the end of `layer` and emit the model.
    pub fn advance_to_layer(&mut self, layer: u32) -> Result<ReferenceModel, ReferenceError> {
        let end = self
            .path
            .end_of_layer(layer)
            .ok_or(ReferenceError::LayerOutOfRange {
                requested: layer,
                available: self.path.layer_count(),
            })?;
        let mut model = self.advance_to_time(end)?;
        model.layer = Some(layer);
        Ok(model)
    }

    /// Integrate through path time `upto` (monotone) and emit the model.
    pub fn advance_to_time(&mut self, upto: f64) -> Result<ReferenceModel, ReferenceError> {
        let duration = self.path.total_duration();
        if upto < self.cursor_s - 1e-12 || upto > duration + 1e-9 {
            return Err(ReferenceError::TimeOutOfRange {
                requested: upto,
                duration,
            });
        }
        integrate_span(
            self.path,
            self.model,
            &mut self.heights,
            self.cursor_s,
            upto,
            self.cfg.quadrature_step_scale,
        );
        self.cursor_s = self.cursor_s.max(upto);

        let grid = heights_to_tsdf(&self.heights, self.cfg.voxel_size, self.cfg.truncation);
        let mesh = marching_cubes(&grid.snapshot(), 0.0);
        let query = MeshQuery::new(&mesh).ok();
        Ok(ReferenceModel {
            layer: None,
            time_s: self.cursor_s,
            heights: self.heights.clone(),
            grid,
            mesh,
            query,
        })
    }
}

/// One-shot reference construction; see [`ReferenceBuilder`] for the
/// incremental path.
pub fn build_reference(
    path: &Toolpath,
    model: &DepositionModel,
    upto: RefExtent,
    cfg: ReferenceGridConfig,
) -> Result<ReferenceModel, ReferenceError> {
    let mut builder = ReferenceBuilder::new(path, model, cfg);
    match upto {
        RefExtent::Layer(layer) => builder.advance_to_layer(layer),
        RefExtent::Time(t) => builder.advance_to_time(t),
    }
}

pub fn reference_mesh(model: &ReferenceModel) -> &TriangleMesh {
    model.mesh()
}

/// Midpoint-rule quadrature of the moving plume over path time (t0, t1],
/// stepped per segment at `scale * sigma / (2 v)` so the plume center moves
/// at most `scale * sigma / 2` between samples.
fn integrate_span(
    path: &Toolpath,
    model: &DepositionModel,
    heights: &mut HeightField,
    t0: f64,
    t1: f64,
    step_scale: f64,
) {
    if t1 <= t0 || path.is_empty() {
        return;
    }
    let mut seg_start = 0.0;
    for seg in path.segments() {
        let dur = seg.duration();
        let seg_end = seg_start + dur;
        let lo = seg_start.max(t0);
        let hi = seg_end.min(t1);
        if hi > lo && dur > 0.0 {
            let span = hi - lo;
            let max_step = step_scale * model.sigma() / (2.0 * seg.speed);
            let n = (span / max_step).ceil().max(1.0) as usize;
            let dt = span / n as f64;
            for i in 0..n {
                let t_mid = lo + (i as f64 + 0.5) * dt;
                let frac = (t_mid - seg_start) / dur;
                let pos = seg.start.coords + (seg.end - seg.start) * frac;
                heights.deposit_spot(model, (pos.x, pos.y), seg.tilt_deg, dt, 1.0);
            }
        }
        seg_start = seg_end;
        if seg_start >= t1 {
            break;
        }
    }
}

/// Vertical signed distance to the height surface, band-limited, observed
/// with unit weight: the reference counterpart of the fused grid, meshed by
/// the same marching cubes. Coverage extends one voxel beyond the field so
/// queries at the plate edge still interpolate.
pub fn heights_to_tsdf(heights: &HeightField, voxel_size: f64, truncation: f64) -> SparseTsdfGrid {
    let grid = SparseTsdfGrid::new(FusionParams {
        voxel_size,
        truncation,
        ..FusionParams::default()
    });
    let (min_xy, max_xy) = heights.extent();
    let ix0 = (min_xy.0 / voxel_size).floor() as i64 - 1;
    let ix1 = (max_xy.0 / voxel_size).ceil() as i64 + 1;
    let iy0 = (min_xy.1 / voxel_size).floor() as i64 - 1;
    let iy1 = (max_xy.1 / voxel_size).ceil() as i64 + 1;
    for ix in ix0..ix1 {
        for iy in iy0..iy1 {
            let cx = (ix as f64 + 0.5) * voxel_size;
            let cy = (iy as f64 + 0.5) * voxel_size;
            let h = heights.sample(cx, cy);
            let iz0 = ((h - truncation) / voxel_size).floor() as i64;
            let iz1 = ((h + truncation) / voxel_size).ceil() as i64;
            for iz in iz0..=iz1 {
                let cz = (iz as f64 + 0.5) * voxel_size;
                let d = cz - h;
                if d.abs() <= truncation {
                    grid.set_voxel([ix, iy, iz], d, 1.0);
                }
            }
        }
    }
    grid
}
