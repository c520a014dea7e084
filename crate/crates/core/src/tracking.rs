//! Defect tracking across layers: bounding-box association of segmented
//! regions into tracks, growth/compensation trends, and per-layer reports.

use serde::Serialize;

use crate::deviation::{DefectRegion, VertexClass};
use crate::geom::Aabb;

#[derive(Debug, Clone, Copy)]
pub struct TrackerParams {
    /// Consecutive missed layers before a track closes.
    pub k_miss: u32,
    /// Trend slope threshold, mm of peak deviation per layer.
    pub s_min: f64,
    /// Trailing entries used for the trend slope (at least 3).
    pub trend_window: usize,
    /// Match on full 3D box overlap instead of the XY footprint.
    pub full_3d_overlap: bool,
}

impl Default for TrackerParams {
    fn default() -> Self {
        Self {
            k_miss: 2,
            s_min: 0.05,
            trend_window: 3,
            full_3d_overlap: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackStatus {
    Active,
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Trend {
    Amplifying,
    Compensating,
    Stable,
    Undetermined,
}

impl Trend {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Amplifying => "amplifying",
            Self::Compensating => "compensating",
            Self::Stable => "stable",
            Self::Undetermined => "undetermined",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrackEntry {
    pub layer: u32,
    pub area_mm2: f64,
    pub height_mm: f64,
    pub peak_dev_mm: f64,
    pub bbox: Aabb,
}

/// One defect's lineage across layers.
#[derive(Debug, Clone)]
pub struct DefectTrack {
    pub id: u64,
    pub class: VertexClass,
    pub entries: Vec<TrackEntry>,
    pub status: TrackStatus,
    pub missed: u32,
}

impl DefectTrack {
    pub fn last_entry(&self) -> &TrackEntry {
        self.entries.last().expect("tracks always have an entry")
    }

    /// Least-squares slope of peak |d| against layer over the trailing
    /// window. Fewer than 3 entries cannot support a verdict.
    pub fn trend(&self, params: &TrackerParams) -> Trend {
        if self.entries.len() < 3 {
            return Trend::Undetermined;
        }
        let window = params.trend_window.max(3).min(self.entries.len());
        let tail = &self.entries[self.entries.len() - window..];
        let n = tail.len() as f64;
        let mean_x = tail.iter().map(|e| e.layer as f64).sum::<f64>() / n;
        let mean_y = tail.iter().map(|e| e.peak_dev_mm).sum::<f64>() / n;
        let mut num = 0.0;
        let mut den = 0.0;
        for e in tail {
            let dx = e.layer as f64 - mean_x;
            num += dx * (e.peak_dev_mm - mean_y);
            den += dx * dx;
        }
        if den <= 0.0 {
            return Trend::Undetermined;
        }
        let slope = num / den;
        if slope > params.s_min {
            Trend::Amplifying
        } else if slope < -params.s_min {
            Trend::Compensating
        } else {
            Trend::Stable
        }
    }
}

/// Sequential consumer of per-layer region batches. Track ids are stable for
/// the life of the run and never reused.
pub struct Tracker {
    params: TrackerParams,
    tracks: Vec<DefectTrack>,
    next_id: u64,
}

impl Tracker {
    pub fn new(params: TrackerParams) -> Self {
        Self {
            params,
            tracks: Vec::new(),
            next_id: 0,
        }
    }

    pub fn params(&self) -> &TrackerParams {
        &self.params
    }

    pub fn tracks(&self) -> &[DefectTrack] {
        &self.tracks
    }

    /// Associate one layer's regions with the active tracks: greedy
    /// one-to-one matching by descending box overlap within the same class,
    /// ties broken toward the lower track id. Unmatched regions spawn new
    /// tracks; unmatched tracks age and close after `k_miss` misses.
    pub fn associate(&mut self, regions: &[DefectRegion], layer: u32) {
        let overlap_of = |track: &DefectTrack, region: &DefectRegion| -> f64 {
            let last = &track.last_entry().bbox;
            if self.params.full_3d_overlap {
                last.overlap_volume(&region.bbox)
            } else {
                last.xy_overlap_area(&region.bbox)
            }
        };

        // (overlap, track index, region index), positive overlaps only.
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for (ti, track) in self.tracks.iter().enumerate() {
            if track.status != TrackStatus::Active {
                continue;
            }
            for (ri, region) in regions.iter().enumerate() {
                if region.class != track.class {
                    continue;
                }
                let overlap = overlap_of(track, region);
                if overlap > 0.0 {
                    candidates.push((overlap, ti, ri));
                }
            }
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(self.tracks[a.1].id.cmp(&self.tracks[b.1].id))
                .then(a.2.cmp(&b.2))
        });

        let mut track_taken = vec![false; self.tracks.len()];
        let mut region_taken = vec![false; regions.len()];
        for (_, ti, ri) in candidates {
            if track_taken[ti] || region_taken[ri] {
                continue;
            }
            track_taken[ti] = true;
            region_taken[ri] = true;
            let track = &mut self.tracks[ti];
            track.entries.push(entry_from(&regions[ri], layer));
            track.missed = 0;
        }

        for (ri, region) in regions.iter().enumerate() {
            if region_taken[ri] {
                continue;
            }
            self.tracks.push(DefectTrack {
                id: self.next_id,
                class: region.class,
                entries: vec![entry_from(region, layer)],
                status: TrackStatus::Active,
                missed: 0,
            });
            self.next_id += 1;
        }

        for track in self.tracks.iter_mut() {
            if track.status != TrackStatus::Active {
                continue;
            }
            // Tracks matched or created this layer carry an entry for it.
            if track.last_entry().layer != layer {
                track.missed += 1;
                if track.missed >= self.params.k_miss {
                    track.status = TrackStatus::Closed;
                }
            }
        }
    }

    /// Immutable per-layer report: active tracks with their latest state and
    /// trend, closed tracks retained in the history section.
    pub fn layer_report(&self, layer: u32, global: GlobalStats) -> LayerReport {
        let row = |track: &DefectTrack| -> TrackRow {
            let e = track.last_entry();
            TrackRow {
                id: track.id,
                class: track.class.as_str().to_string(),
                layer: e.layer,
                area_mm2: e.area_mm2,
                height_mm: e.height_mm,
                peak_dev_mm: e.peak_dev_mm,
                trend: track.trend(&self.params).as_str().to_string(),
                bbox: [
                    [e.bbox.min.x, e.bbox.min.y, e.bbox.min.z],
                    [e.bbox.max.x, e.bbox.max.y, e.bbox.max.z],
                ],
            }
        };
        LayerReport {
            layer,
            global,
            tracks: self
                .tracks
                .iter()
                .filter(|t| t.status == TrackStatus::Active)
                .map(row)
                .collect(),
            closed: self
                .tracks
                .iter()
                .filter(|t| t.status == TrackStatus::Closed)
                .map(row)
                .collect(),
        }
    }

    /// Cumulative CSV with one row per (track, layer), for plotting the
    /// area/height evolution curves.
    pub fn history_csv(&self) -> String {
        let mut out = String::from("track_id,class,layer,area_mm2,height_mm,peak_dev_mm\n");
        for track in &self.tracks {
            for e in &track.entries {
                out.push_str(&format!(
                    "{},{},{},{:.6},{:.6},{:.6}\n",
                    track.id,
                    track.class.as_str(),
                    e.layer,
                    e.area_mm2,
                    e.height_mm,
                    e.peak_dev_mm
                ));
            }
        }
        out
    }
}

fn entry_from(region: &DefectRegion, layer: u32) -> TrackEntry {
    TrackEntry {
        layer,
        area_mm2: region.area_mm2,
        height_mm: region.height_mm,
        peak_dev_mm: region.peak_dev_mm,
        bbox: region.bbox,
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct GlobalStats {
    pub mean_dev_mm: f64,
    pub max_dev_mm: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrackRow {
    pub id: u64,
    pub class: String,
    pub layer: u32,
    pub area_mm2: f64,
    pub height_mm: f64,
    pub peak_dev_mm: f64,
    pub trend: String,
    pub bbox: [[f64; 3]; 2],
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerReport {
    pub layer: u32,
    pub global: GlobalStats,
    pub tracks: Vec<TrackRow>,
    pub closed: Vec<TrackRow>,
}
