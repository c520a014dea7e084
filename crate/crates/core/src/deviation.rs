//! Deviation mapping against the near-net reference: per-vertex signed
//! distances, global/local over- and under-build classification, and
//! segmentation of connected defect regions.
//!
//! Sign convention everywhere: positive deviation means material beyond the
//! reference surface (overbuild side), negative means missing material.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Aabb;
use crate::meshing::{connected_components, mean_curvature, MeshError, TriangleMesh};
use crate::reference::ReferenceModel;

#[derive(Debug, Error)]
pub enum DeviationError {
    #[error("scanned mesh is empty")]
    EmptyScan,
    #[error("reference model has no surface")]
    EmptyReference,
    #[error("invalid threshold: {0}")]
    BadThreshold(String),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VertexClass {
    Normal,
    Overbuild,
    Underbuild,
    LocalOver,
    LocalUnder,
}

impl VertexClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Normal => "normal",
            Self::Overbuild => "overbuild",
            Self::Underbuild => "underbuild",
            Self::LocalOver => "local_over",
            Self::LocalUnder => "local_under",
        }
    }

    fn label(&self) -> u32 {
        match self {
            Self::Normal => 0,
            Self::Overbuild => 1,
            Self::Underbuild => 2,
            Self::LocalOver => 3,
            Self::LocalUnder => 4,
        }
    }
}

/// Scanned mesh with per-vertex signed deviation, class, and the normalized
/// local metric.
pub struct DeviationMap {
    pub mesh: TriangleMesh,
    /// Signed distance to the reference surface, mm.
    pub deviation: Vec<f64>,
    pub class: Vec<VertexClass>,
    /// Curvature-weighted local metric, normalized per layer to [-1, 1].
    pub local_metric: Vec<f64>,
}

impl DeviationMap {
    pub fn mean_signed_deviation(&self) -> f64 {
        if self.deviation.is_empty() {
            return 0.0;
        }
        self.deviation.iter().sum::<f64>() / self.deviation.len() as f64
    }

    pub fn mean_abs_deviation(&self) -> f64 {
        if self.deviation.is_empty() {
            return 0.0;
        }
        self.deviation.iter().map(|d| d.abs()).sum::<f64>() / self.deviation.len() as f64
    }

    pub fn max_abs_deviation(&self) -> f64 {
        self.deviation.iter().fold(0.0f64, |m, d| m.max(d.abs()))
    }
}

/// Per-vertex signed distance of the scanned mesh against the reference:
/// band-limited TSDF lookups where available, exact mesh queries beyond.
/// The scanned mesh is consumed and carried in the map with its deviation
/// scalar channel filled.
pub fn compute_deviation(
    scanned: TriangleMesh,
    reference: &ReferenceModel,
) -> Result<DeviationMap, DeviationError> {
    if scanned.is_empty() {
        return Err(DeviationError::EmptyScan);
    }
    let query = reference.query();
    let deviation: Vec<f64> = scanned
        .vertices
        .par_iter()
        .map(|v| query.signed_distance(v))
        .collect::<Option<Vec<f64>>>()
        .ok_or(DeviationError::EmptyReference)?;
    let n = scanned.vertices.len();
    let mut mesh = scanned;
    mesh.scalar = Some(deviation.clone());
    Ok(DeviationMap {
        mesh,
        deviation,
        class: vec![VertexClass::Normal; n],
        local_metric: vec![0.0; n],
    })
}

/// Classify every vertex: beyond +-delta_g is global over/underbuild; the
/// rest carry the curvature-weighted metric m = H * d, normalized by the
/// layer's max |H * d|, with |m| > delta_l flagged as local deviation.
/// Mesh-boundary vertices are excluded from local classification.
pub fn classify(map: &mut DeviationMap, delta_g: f64, delta_l: f64) -> Result<(), DeviationError> {
    if delta_g.is_nan() || delta_g <= 0.0 {
        return Err(DeviationError::BadThreshold(format!(
            "delta_g must be > 0, got {delta_g}"
        )));
    }
    if delta_l.is_nan() || delta_l <= 0.0 || delta_l > 1.0 {
        return Err(DeviationError::BadThreshold(format!(
            "delta_l must be in (0, 1], got {delta_l}"
        )));
    }

    let curvature = mean_curvature(&map.mesh);
    let n = map.mesh.vertices.len();
    let mut raw = vec![0.0f64; n];
    for i in 0..n {
        let d = map.deviation[i];
        if d > delta_g {
            map.class[i] = VertexClass::Overbuild;
        } else if d < -delta_g {
            map.class[i] = VertexClass::Underbuild;
        } else {
            map.class[i] = VertexClass::Normal;
            if curvature.reliable[i] {
                raw[i] = curvature.values[i] * d;
            }
        }
    }

    let max_raw = raw.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for m in map.local_metric.iter_mut() {
        *m = 0.0;
    }
    if max_raw > 0.0 {
        for i in 0..n {
            if map.class[i] != VertexClass::Normal {
                continue;
            }
            let m = raw[i] / max_raw;
            map.local_metric[i] = m;
            if m > delta_l {
                map.class[i] = VertexClass::LocalOver;
            } else if m < -delta_l {
                map.class[i] = VertexClass::LocalUnder;
            }
        }
    }
    Ok(())
}

/// A segmented deviation patch: edge-connected, single-class, above the
/// area floor.
#[derive(Debug, Clone)]
pub struct DefectRegion {
    pub id: u32,
    pub class: VertexClass,
    pub vertices: Vec<u32>,
    pub area_mm2: f64,
    pub bbox: Aabb,
    /// Bounding-box z extent, mm.
    pub height_mm: f64,
    pub layer: u32,
    pub peak_dev_mm: f64,
}

impl DefectRegion {
    pub fn centroid(&self, mesh: &TriangleMesh) -> crate::geom::Point3 {
        let mut acc = crate::geom::Vec3::zeros();
        for &v in &self.vertices {
            acc += mesh.vertices[v as usize].coords;
        }
        crate::geom::Point3::from(acc / self.vertices.len() as f64)
    }
}

/// Connected components per non-normal class; regions with area at or below
/// `a_min` are dropped. Area is the sum of one third of each incident
/// triangle per member vertex.
pub fn segment(map: &DeviationMap, a_min: f64, layer: u32) -> Vec<DefectRegion> {
    let labels: Vec<u32> = map.class.iter().map(|c| c.label()).collect();
    let vertex_areas = map.mesh.vertex_areas();
    let mut regions = Vec::new();
    let mut next_id = 0u32;
    for group in connected_components(&map.mesh, &labels) {
        let class = map.class[group[0] as usize];
        if class == VertexClass::Normal {
            continue;
        }
        let area: f64 = group.iter().map(|&v| vertex_areas[v as usize]).sum();
        if area <= a_min {
            continue;
        }
        let bbox = Aabb::from_points(group.iter().map(|&v| &map.mesh.vertices[v as usize]))
            .expect("non-empty group");
        let peak = group
            .iter()
            .map(|&v| map.deviation[v as usize].abs())
            .fold(0.0f64, f64::max);
        regions.push(DefectRegion {
            id: next_id,
            class,
            vertices: group,
            area_mm2: area,
            height_mm: bbox.z_extent(),
            bbox,
            layer,
            peak_dev_mm: peak,
        });
        next_id += 1;
    }
    regions
}

/// Class-coded colors for the deviation PLY: global overbuild on a red ramp,
/// global underbuild on a blue ramp, local deviations on an orange-purple
/// diverging ramp, normal in gray.
pub fn class_colors(map: &DeviationMap, delta_g: f64) -> Vec<[u8; 3]> {
    let lerp = |a: [u8; 3], b: [u8; 3], t: f64| -> [u8; 3] {
        let t = t.clamp(0.0, 1.0);
        let mix = |x: u8, y: u8| (x as f64 + (y as f64 - x as f64) * t).round() as u8;
        [mix(a[0], b[0]), mix(a[1], b[1]), mix(a[2], b[2])]
    };
    const GRAY: [u8; 3] = [200, 200, 200];
    const RED_LO: [u8; 3] = [255, 170, 170];
    const RED_HI: [u8; 3] = [210, 0, 0];
    const BLUE_LO: [u8; 3] = [170, 170, 255];
    const BLUE_HI: [u8; 3] = [0, 0, 210];
    const ORANGE: [u8; 3] = [255, 140, 0];
    const PURPLE: [u8; 3] = [128, 0, 160];

    map.class
        .iter()
        .enumerate()
        .map(|(i, class)| {
            let d = map.deviation[i];
            let m = map.local_metric[i];
            match class {
                VertexClass::Normal => GRAY,
                VertexClass::Overbuild => lerp(RED_LO, RED_HI, (d - delta_g) / (2.0 * delta_g)),
                VertexClass::Underbuild => lerp(BLUE_LO, BLUE_HI, (-d - delta_g) / (2.0 * delta_g)),
                VertexClass::LocalOver => lerp(GRAY, ORANGE, m),
                VertexClass::LocalUnder => lerp(GRAY, PURPLE, -m),
            }
        })
        .collect()
}
