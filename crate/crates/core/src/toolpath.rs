//! Deposition toolpath representation, neutral CSV parsing, layer
//! segmentation from tool-height steps, and time parameterization.
//!
//! The CSV format carries one waypoint per row:
//!
//! ```text
//! layer,seg_type,x_mm,y_mm,z_mm,speed_mm_s,tilt_deg
//! ```
//!
//! Consecutive rows within a layer form segments whose speed, tilt and type
//! come from the destination row. A blank line marks an intentional
//! discontinuity; layer changes are implicit discontinuities. The spray is
//! never shuttered, so `skip` segments still deposit — their high traverse
//! speed is what thins the deposit.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Point3;

pub const TOOLPATH_CSV_HEADER: &str = "layer,seg_type,x_mm,y_mm,z_mm,speed_mm_s,tilt_deg";

/// Segment classification, mirroring the path planner's move types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegKind {
    Infill,
    Edge,
    Skip,
    Overhang,
}

impl SegKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "infill" => Some(Self::Infill),
            "edge" => Some(Self::Edge),
            "skip" => Some(Self::Skip),
            "overhang" => Some(Self::Overhang),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Infill => "infill",
            Self::Edge => "edge",
            Self::Skip => "skip",
            Self::Overhang => "overhang",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ToolpathSegment {
    pub start: Point3,
    pub end: Point3,
    pub kind: SegKind,
    /// Traverse speed, mm/s, > 0.
    pub speed: f64,
    /// Spray angle from the surface normal, degrees, 0 = perpendicular.
    pub tilt_deg: f64,
    pub layer: u32,
}

impl ToolpathSegment {
    pub fn length(&self) -> f64 {
        (self.end - self.start).norm()
    }

    pub fn duration(&self) -> f64 {
        self.length() / self.speed
    }
}

/// Ordered deposition path. Immutable after parse.
#[derive(Debug, Clone)]
pub struct Toolpath {
    segments: Vec<ToolpathSegment>,
    /// Cumulative duration at the end of each segment, seconds.
    cumulative: Vec<f64>,
}

/// Position and deposition state at one instant of the executed path.
#[derive(Debug, Clone, Copy)]
pub struct PathSample {
    pub position: Point3,
    pub tilt_deg: f64,
    pub kind: SegKind,
    pub layer: u32,
}

#[derive(Debug, Error)]
pub enum ToolpathError {
    #[error("failed to read toolpath {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("toolpath line {line}: {msg}")]
    Schema { line: usize, msg: String },
    #[error("toolpath is empty (no segments)")]
    Empty,
    #[error("sample time {t} s outside path duration [0, {total}] s")]
    OutOfRange { t: f64, total: f64 },
}

impl Toolpath {
    pub fn new(segments: Vec<ToolpathSegment>) -> Self {
        let mut cumulative = Vec::with_capacity(segments.len());
        let mut acc = 0.0;
        for seg in &segments {
            acc += seg.duration();
            cumulative.push(acc);
        }
        Self {
            segments,
            cumulative,
        }
    }

    pub fn segments(&self) -> &[ToolpathSegment] {
        &self.segments
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn total_duration(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }

    pub fn max_speed(&self) -> f64 {
        self.segments.iter().fold(0.0f64, |m, s| m.max(s.speed))
    }

    pub fn layer_count(&self) -> u32 {
        self.segments.iter().map(|s| s.layer + 1).max().unwrap_or(0)
    }

    /// Path time at which the given file layer ends (cumulative duration of
    /// all segments with `layer <= upto`). `None` when the layer index is
    /// beyond the path.
    pub fn end_of_layer(&self, upto: u32) -> Option<f64> {
        if upto >= self.layer_count() {
            return None;
        }
        let mut t = None;
        for (seg, cum) in self.segments.iter().zip(&self.cumulative) {
            if seg.layer <= upto {
                t = Some(*cum);
            }
        }
        t
    }

    /// State of the tool at path time `t` seconds: linear interpolation along
    /// the active segment, piecewise-constant tilt/type/layer.
    pub fn sample_at(&self, t: f64) -> Result<PathSample, ToolpathError> {
        let total = self.total_duration();
        if self.segments.is_empty() {
            return Err(ToolpathError::Empty);
        }
        if !(0.0..=total).contains(&t) {
            return Err(ToolpathError::OutOfRange { t, total });
        }
        // First segment whose cumulative end time reaches t; zero-duration
        // segments are skipped past by the strict comparison.
        let idx = self.cumulative.partition_point(|&c| c < t);
        let idx = idx.min(self.segments.len() - 1);
        let seg = &self.segments[idx];
        let seg_start = if idx == 0 {
            0.0
        } else {
            self.cumulative[idx - 1]
        };
        let dur = seg.duration();
        let frac = if dur > 0.0 {
            ((t - seg_start) / dur).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let position = Point3::from(seg.start.coords + (seg.end - seg.start) * frac);
        Ok(PathSample {
            position,
            tilt_deg: seg.tilt_deg,
            kind: seg.kind,
            layer: seg.layer,
        })
    }

    /// Derive layer boundaries from tool-height changes: a new layer starts at
    /// every monotone upward step of segment z exceeding half the configured
    /// layer thickness. Returns `(layer_index, z_nominal)` with z_nominal the
    /// modal z of the layer's segments.
    pub fn segment_layers(&self, layer_thickness: f64) -> Result<Vec<(u32, f64)>, ToolpathError> {
        if self.segments.is_empty() {
            return Err(ToolpathError::Empty);
        }
        let threshold = layer_thickness * 0.5;
        let mut layers: Vec<Vec<f64>> = vec![vec![self.segments[0].end.z]];
        let mut prev_z = self.segments[0].end.z;
        for seg in &self.segments[1..] {
            let z = seg.end.z;
            if z - prev_z > threshold {
                layers.push(Vec::new());
            }
            layers.last_mut().unwrap().push(z);
            prev_z = z;
        }
        Ok(layers
            .iter()
            .enumerate()
            .map(|(i, zs)| (i as u32, modal_z(zs)))
            .collect())
    }
}

/// Most frequent z after quantization at 1e-6 mm; ties take the lowest z.
fn modal_z(zs: &[f64]) -> f64 {
    let mut counts: std::collections::BTreeMap<i64, usize> = std::collections::BTreeMap::new();
    for &z in zs {
        *counts.entry((z * 1e6).round() as i64).or_insert(0) += 1;
    }
    let mut best = (0i64, 0usize);
    for (&k, &n) in &counts {
        if n > best.1 {
            best = (k, n);
        }
    }
    best.0 as f64 * 1e-6
}

/// Parse the neutral toolpath CSV. Malformed rows are reported with their
/// 1-based line number.
pub fn parse_toolpath(path: &Path) -> Result<Toolpath, ToolpathError> {
    let text = std::fs::read_to_string(path).map_err(|source| ToolpathError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_toolpath_str(&text)
}

pub fn parse_toolpath_str(text: &str) -> Result<Toolpath, ToolpathError> {
    struct Waypoint {
        layer: u32,
        kind: SegKind,
        pos: Point3,
        speed: f64,
        tilt_deg: f64,
        chain: usize,
    }

    let mut lines = text.lines().enumerate();
    let header = lines
        .next()
        .ok_or(ToolpathError::Schema {
            line: 1,
            msg: "missing header row".into(),
        })?
        .1;
    if header.trim() != TOOLPATH_CSV_HEADER {
        return Err(ToolpathError::Schema {
            line: 1,
            msg: format!(
                "expected header `{TOOLPATH_CSV_HEADER}`, found `{}`",
                header.trim()
            ),
        });
    }

    let mut waypoints: Vec<Waypoint> = Vec::new();
    let mut chain = 0usize;
    for (idx, raw) in lines {
        let line = idx + 1;
        let row = raw.trim();
        if row.is_empty() {
            // Intentional discontinuity.
            chain += 1;
            continue;
        }
        let fields: Vec<&str> = row.split(',').map(str::trim).collect();
        if fields.len() != 7 {
            return Err(ToolpathError::Schema {
                line,
                msg: format!("expected 7 fields, found {}", fields.len()),
            });
        }
        let layer: u32 = fields[0].parse().map_err(|_| ToolpathError::Schema {
            line,
            msg: format!("invalid layer index `{}`", fields[0]),
        })?;
        let kind = SegKind::parse(fields[1]).ok_or_else(|| ToolpathError::Schema {
            line,
            msg: format!(
                "unknown seg_type `{}` (expected infill|edge|skip|overhang)",
                fields[1]
            ),
        })?;
        let mut nums = [0.0f64; 5];
        for (i, (slot, name)) in nums
            .iter_mut()
            .zip(["x_mm", "y_mm", "z_mm", "speed_mm_s", "tilt_deg"])
            .enumerate()
        {
            let v: f64 = fields[i + 2].parse().map_err(|_| ToolpathError::Schema {
                line,
                msg: format!("invalid {name} `{}`", fields[i + 2]),
            })?;
            if !v.is_finite() {
                return Err(ToolpathError::Schema {
                    line,
                    msg: format!("non-finite {name}"),
                });
            }
            *slot = v;
        }
        let [x, y, z, speed, tilt_deg] = nums;
        if speed <= 0.0 {
            return Err(ToolpathError::Schema {
                line,
                msg: format!("speed_mm_s must be > 0, found {speed}"),
            });
        }
        if !(0.0..90.0).contains(&tilt_deg) {
            return Err(ToolpathError::Schema {
                line,
                msg: format!("tilt_deg must be in [0, 90), found {tilt_deg}"),
            });
        }
        waypoints.push(Waypoint {
            layer,
            kind,
            pos: Point3::new(x, y, z),
            speed,
            tilt_deg,
            chain,
        });
    }

    let mut segments = Vec::new();
    for pair in waypoints.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        if a.chain != b.chain || a.layer != b.layer {
            continue;
        }
        segments.push(ToolpathSegment {
            start: a.pos,
            end: b.pos,
            kind: b.kind,
            speed: b.speed,
            tilt_deg: b.tilt_deg,
            layer: b.layer,
        });
    }
    Ok(Toolpath::new(segments))
}
