//! Sparse TSDF voxel grid with ray-cast projective-distance integration and
//! adaptive active/inactive weighting for growing surfaces.
//!
//! Each observed voxel stores a cumulative weighted signed distance:
//!
//! ```text
//! D_t = (W_{t-1} * D_{t-1} + w_t * d_t) / (W_{t-1} + w_t)
//! W_t = W_{t-1} + w_t
//! ```
//!
//! `d_t` is the projective signed distance along the sensor ray, positive on
//! the sensor side of the surface, truncated to ±delta. The weight `w_t`
//! depends on whether the voxel lies in the active deposition region (where
//! the surface is genuinely growing and new data must dominate) or the
//! inactive remainder (where averaging suppresses sensor noise).
//!
//! Storage is a sparse map of 8x8x8 leaf blocks; only observed blocks are
//! allocated, and ray traversal is integer stepping confined to the ±delta
//! band so the per-frame cost scales with the scanned surface, not the
//! bounding volume.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use dashmap::DashMap;
use thiserror::Error;

use crate::geom::{Point3, Vec3};

pub const BLOCK_DIM: usize = 8;
pub const BLOCK_VOLUME: usize = BLOCK_DIM * BLOCK_DIM * BLOCK_DIM;

const GRID_MAGIC: &[u8; 8] = b"TSDFGRID";
const GRID_VERSION: u32 = 1;

/// Per-voxel state: truncated signed distance (mm) and cumulative weight.
/// `w == 0` means the voxel has never been observed.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VoxelRecord {
    pub d: f64,
    pub w: f64,
}

/// Weighting regime for a voxel during integration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightRegion {
    Active,
    Inactive,
}

/// Adaptive weight as a function of projective signed distance `d`.
///
/// Inactive: 1 for d < 0, a linear ramp 1 - d/delta on [0, delta], 0 beyond.
/// Active: 1 everywhere up to and including delta, 0 beyond — the newest
/// measurement stays fully weighted throughout the truncation band so growth
/// is not averaged away.
pub fn weight_for(d: f64, region: WeightRegion, delta: f64) -> f64 {
    debug_assert!(delta > 0.0);
    match region {
        WeightRegion::Active => {
            if d > delta {
                0.0
            } else {
                1.0
            }
        }
        WeightRegion::Inactive => {
            if d < 0.0 {
                1.0
            } else if d <= delta {
                1.0 - d / delta
            } else {
                0.0
            }
        }
    }
}

/// Single application of the cumulative update equations. Pure so the
/// incremental path can be checked against batch weighted means.
pub fn fuse_record(prev: VoxelRecord, d: f64, w: f64) -> VoxelRecord {
    let w_sum = prev.w + w;
    if w_sum <= 0.0 {
        return prev;
    }
    VoxelRecord {
        d: (prev.w * prev.d + w * d) / w_sum,
        w: w_sum,
    }
}

/// Neighborhood of the current deposition spot where the surface is growing.
#[derive(Debug, Clone, Copy)]
pub struct ActiveRegion {
    pub center: Point3,
    pub radius: f64,
}

impl ActiveRegion {
    pub fn new(center: Point3, radius: f64) -> Self {
        assert!(radius > 0.0, "active region radius must be positive");
        Self { center, radius }
    }

    pub fn contains(&self, p: &Point3) -> bool {
        (p - self.center).norm() <= self.radius
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FusionParams {
    /// Voxel edge length, mm.
    pub voxel_size: f64,
    /// Truncation distance delta, mm.
    pub truncation: f64,
    /// Weight ceiling applied after every update.
    pub w_max: f64,
    /// Stale history is clamped to this weight when an active-region voxel
    /// receives a conflicting measurement.
    pub w_cap: f64,
    /// Measurement-vs-state disagreement (mm) that counts as a conflict in
    /// the active region. Sized to the layer growth scale rather than the
    /// truncation band, which tracks voxel size.
    pub active_conflict_threshold: f64,
}

impl Default for FusionParams {
    fn default() -> Self {
        let voxel_size = 2.0;
        Self {
            voxel_size,
            truncation: 3.0 * voxel_size,
            w_max: 128.0,
            w_cap: 4.0,
            active_conflict_threshold: 0.6,
        }
    }
}

impl FusionParams {
    pub fn with_voxel_size(voxel_size: f64) -> Self {
        Self {
            voxel_size,
            truncation: 3.0 * voxel_size,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
struct LeafBlock {
    voxels: Box<[VoxelRecord; BLOCK_VOLUME]>,
}

impl LeafBlock {
    fn empty() -> Self {
        Self {
            voxels: Box::new([VoxelRecord::default(); BLOCK_VOLUME]),
        }
    }
}

pub type BlockKey = [i32; 3];
pub type VoxelKey = [i64; 3];

#[inline]
fn split_key(v: VoxelKey) -> (BlockKey, usize) {
    let mut bk = [0i32; 3];
    let mut local = [0usize; 3];
    for a in 0..3 {
        let b = v[a].div_euclid(BLOCK_DIM as i64);
        bk[a] = b as i32;
        local[a] = v[a].rem_euclid(BLOCK_DIM as i64) as usize;
    }
    (bk, (local[2] * BLOCK_DIM + local[1]) * BLOCK_DIM + local[0])
}

/// Read-only view over voxel data, shared by live snapshots and reference
/// grids so meshing runs identically over both.
pub trait GridView {
    fn voxel_size(&self) -> f64;
    fn truncation(&self) -> f64;
    /// Observed voxel record at the key, `None` when unobserved.
    fn voxel(&self, key: VoxelKey) -> Option<VoxelRecord>;
    /// Keys of observed voxels, sorted, for deterministic traversal.
    fn observed_voxels(&self) -> Vec<VoxelKey>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct IntegrationStats {
    pub points: usize,
    pub skipped_non_finite: usize,
    pub voxel_updates: usize,
}

#[derive(Debug, Error)]
pub enum GridIoError {
    #[error("grid file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("grid file {path}: {msg}")]
    Format { path: String, msg: String },
}

/// Hierarchical sparse voxel grid holding per-voxel (D, W).
///
/// Interior mutability with per-block exclusive access: frames from multiple
/// scanner streams may be integrated concurrently, and snapshots are
/// copy-on-write so readers never block writers beyond block granularity.
pub struct SparseTsdfGrid {
    params: FusionParams,
    blocks: DashMap<BlockKey, Arc<LeafBlock>>,
}

impl SparseTsdfGrid {
    pub fn new(params: FusionParams) -> Self {
        assert!(params.voxel_size > 0.0);
        assert!(params.truncation >= params.voxel_size);
        Self {
            params,
            blocks: DashMap::new(),
        }
    }

    pub fn params(&self) -> &FusionParams {
        &self.params
    }

    pub fn voxel_size(&self) -> f64 {
        self.params.voxel_size
    }

    pub fn truncation(&self) -> f64 {
        self.params.truncation
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    /// Voxel index containing a world-space point. Exact integer arithmetic:
    /// voxel `i` spans `[i*h, (i+1)*h)` and has its center at `(i + 0.5) * h`.
    pub fn voxel_of(&self, p: &Point3) -> VoxelKey {
        let h = self.params.voxel_size;
        [
            (p.x / h).floor() as i64,
            (p.y / h).floor() as i64,
            (p.z / h).floor() as i64,
        ]
    }

    pub fn voxel_center(&self, key: VoxelKey) -> Point3 {
        let h = self.params.voxel_size;
        Point3::new(
            (key[0] as f64 + 0.5) * h,
            (key[1] as f64 + 0.5) * h,
            (key[2] as f64 + 0.5) * h,
        )
    }

    pub fn get(&self, key: VoxelKey) -> Option<VoxelRecord> {
        let (bk, idx) = split_key(key);
        let block = self.blocks.get(&bk)?;
        let rec = block.voxels[idx];
        (rec.w > 0.0).then_some(rec)
    }

    /// Directly set a voxel record. Used when building reference fields that
    /// share this storage and its mesh extraction path.
    pub fn set_voxel(&self, key: VoxelKey, d: f64, w: f64) {
        let (bk, idx) = split_key(key);
        let mut entry = self
            .blocks
            .entry(bk)
            .or_insert_with(|| Arc::new(LeafBlock::empty()));
        Arc::make_mut(entry.value_mut()).voxels[idx] = VoxelRecord { d, w };
    }

    /// Integrate one frame of points (work-object frame) observed from
    /// `sensor_origin`. Rays are cast from the sensor through each point;
    /// voxels whose centers project within ±delta of the hit are updated with
    /// the projective signed distance and the adaptive weight. Pass `None`
    /// for `active` to force inactive weighting everywhere.
    ///
    /// Non-finite points are skipped and counted.
    pub fn integrate_frame(
        &self,
        sensor_origin: &Point3,
        points: &[Point3],
        active: Option<&ActiveRegion>,
    ) -> IntegrationStats {
        let delta = self.params.truncation;
        let mut stats = IntegrationStats::default();
        for p in points {
            stats.points += 1;
            if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
                stats.skipped_non_finite += 1;
                continue;
            }
            let to_point = p - sensor_origin;
            let range = to_point.norm();
            if !(range.is_finite()) || range <= f64::EPSILON {
                stats.skipped_non_finite += 1;
                continue;
            }
            let dir = to_point / range;
            // Traverse the ±delta band straddling the hit.
            let band_start = Point3::from(p.coords - dir * delta);
            stats.voxel_updates +=
                self.update_along_ray(sensor_origin, &band_start, &dir, 2.0 * delta, range, active);
        }
        stats
    }

    /// Integer line stepping (Amanatides & Woo) over `length` mm starting at
    /// `start`, updating every traversed voxel. Returns the update count.
    fn update_along_ray(
        &self,
        sensor_origin: &Point3,
        start: &Point3,
        dir: &Vec3,
        length: f64,
        hit_range: f64,
        active: Option<&ActiveRegion>,
    ) -> usize {
        let h = self.params.voxel_size;
        let delta = self.params.truncation;
        let mut voxel = self.voxel_of(start);
        let mut step = [0i64; 3];
        let mut t_max = [f64::INFINITY; 3];
        let mut t_delta = [f64::INFINITY; 3];
        for a in 0..3 {
            let d = dir[a];
            if d > 0.0 {
                step[a] = 1;
                let next = (voxel[a] + 1) as f64 * h;
                t_max[a] = (next - start[a]) / d;
                t_delta[a] = h / d;
            } else if d < 0.0 {
                step[a] = -1;
                let next = voxel[a] as f64 * h;
                t_max[a] = (next - start[a]) / d;
                t_delta[a] = h / -d;
            }
        }

        let mut updates = 0;
        let mut t = 0.0;
        while t <= length {
            let center = self.voxel_center(voxel);
            let along = (center - sensor_origin).dot(dir);
            let d_proj = hit_range - along;
            if self.update_voxel(voxel, &center, d_proj, delta, active) {
                updates += 1;
            }
            let axis = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
                0
            } else if t_max[1] <= t_max[2] {
                1
            } else {
                2
            };
            t = t_max[axis];
            t_max[axis] += t_delta[axis];
            voxel[axis] += step[axis];
        }
        updates
    }

    fn update_voxel(
        &self,
        key: VoxelKey,
        center: &Point3,
        d_proj: f64,
        delta: f64,
        active: Option<&ActiveRegion>,
    ) -> bool {
        let in_active = active.is_some_and(|a| a.contains(center));
        let region = if in_active {
            WeightRegion::Active
        } else {
            WeightRegion::Inactive
        };
        let w_new = weight_for(d_proj, region, delta);
        if w_new <= 0.0 {
            return false;
        }
        let d_meas = d_proj.clamp(-delta, delta);
        let (bk, idx) = split_key(key);
        let mut entry = self
            .blocks
            .entry(bk)
            .or_insert_with(|| Arc::new(LeafBlock::empty()));
        let rec = &mut Arc::make_mut(entry.value_mut()).voxels[idx];
        if in_active
            && rec.w > 0.0
            && (d_meas - rec.d).abs() > self.params.active_conflict_threshold
        {
            // New material has invalidated what this voxel accumulated; keep
            // only a bounded memory of the past so the fresh surface can win.
            rec.w = rec.w.min(self.params.w_cap);
        }
        *rec = fuse_record(*rec, d_meas, w_new);
        rec.w = rec.w.min(self.params.w_max);
        true
    }

    /// Recenter the active region on the nozzle's surface intersection: the
    /// zero crossing of D along the vertical through the nozzle XY. Falls
    /// back to the nozzle position when no crossing has been observed yet.
    pub fn update_active_region(&self, region: &ActiveRegion, nozzle: &Point3) -> ActiveRegion {
        let surface_z = self.surface_z_under(nozzle).unwrap_or(nozzle.z);
        ActiveRegion {
            center: Point3::new(nozzle.x, nozzle.y, surface_z),
            radius: region.radius,
        }
    }

    fn surface_z_under(&self, p: &Point3) -> Option<f64> {
        let h = self.params.voxel_size;
        let delta = self.params.truncation;
        let col = self.voxel_of(p);
        let z_top = ((p.z + 2.0 * delta) / h).floor() as i64;
        let z_bottom = ((p.z - 4.0 * delta) / h).floor() as i64;
        let mut above: Option<(f64, f64)> = None;
        for zi in (z_bottom..=z_top).rev() {
            let key = [col[0], col[1], zi];
            let Some(rec) = self.get(key) else {
                above = None;
                continue;
            };
            let cz = (zi as f64 + 0.5) * h;
            if let Some((az, ad)) = above {
                if ad > 0.0 && rec.d <= 0.0 {
                    let span = ad - rec.d;
                    let frac = if span > 0.0 { ad / span } else { 0.5 };
                    return Some(az + (cz - az) * frac);
                }
            }
            above = Some((cz, rec.d));
        }
        None
    }

    /// Point-in-time consistent copy-on-write view. Subsequent integrations
    /// clone blocks before mutating them, so the view never changes.
    pub fn snapshot(&self) -> GridSnapshot {
        let mut blocks = HashMap::with_capacity(self.blocks.len());
        for entry in self.blocks.iter() {
            blocks.insert(*entry.key(), Arc::clone(entry.value()));
        }
        GridSnapshot {
            voxel_size: self.params.voxel_size,
            truncation: self.params.truncation,
            blocks,
        }
    }

    /// Persist as a versioned little-endian binary file: header then each
    /// block as key (3 x i32) plus 512 (D, W) float32 pairs, keys sorted.
    pub fn save(&self, path: &Path) -> Result<(), GridIoError> {
        let io_err = |source| GridIoError::Io {
            path: path.display().to_string(),
            source,
        };
        let file = std::fs::File::create(path).map_err(io_err)?;
        let mut w = BufWriter::new(file);
        w.write_all(GRID_MAGIC).map_err(io_err)?;
        w.write_all(&GRID_VERSION.to_le_bytes()).map_err(io_err)?;
        w.write_all(&self.params.voxel_size.to_le_bytes())
            .map_err(io_err)?;
        w.write_all(&self.params.truncation.to_le_bytes())
            .map_err(io_err)?;
        let mut keys: Vec<BlockKey> = self.blocks.iter().map(|e| *e.key()).collect();
        keys.sort_unstable();
        w.write_all(&(keys.len() as u64).to_le_bytes())
            .map_err(io_err)?;
        for key in keys {
            let block = self.blocks.get(&key).expect("block present");
            for k in key {
                w.write_all(&k.to_le_bytes()).map_err(io_err)?;
            }
            for rec in block.voxels.iter() {
                w.write_all(&(rec.d as f32).to_le_bytes()).map_err(io_err)?;
                w.write_all(&(rec.w as f32).to_le_bytes()).map_err(io_err)?;
            }
        }
        w.flush().map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self, GridIoError> {
        let io_err = |source| GridIoError::Io {
            path: path.display().to_string(),
            source,
        };
        let format_err = |msg: String| GridIoError::Format {
            path: path.display().to_string(),
            msg,
        };
        let file = std::fs::File::open(path).map_err(io_err)?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io_err)?;
        if &magic != GRID_MAGIC {
            return Err(format_err("bad magic".into()));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf).map_err(io_err)?;
        let version = u32::from_le_bytes(u32buf);
        if version != GRID_VERSION {
            return Err(format_err(format!("unsupported version {version}")));
        }
        let mut f64buf = [0u8; 8];
        r.read_exact(&mut f64buf).map_err(io_err)?;
        let voxel_size = f64::from_le_bytes(f64buf);
        r.read_exact(&mut f64buf).map_err(io_err)?;
        let truncation = f64::from_le_bytes(f64buf);
        if !(voxel_size > 0.0 && truncation >= voxel_size) {
            return Err(format_err("invalid voxel size / truncation".into()));
        }
        r.read_exact(&mut f64buf).map_err(io_err)?;
        let block_count = u64::from_le_bytes(f64buf);
        let grid = SparseTsdfGrid::new(FusionParams {
            voxel_size,
            truncation,
            ..FusionParams::default()
        });
        for _ in 0..block_count {
            let mut key = [0i32; 3];
            for k in &mut key {
                r.read_exact(&mut u32buf).map_err(io_err)?;
                *k = i32::from_le_bytes(u32buf);
            }
            let mut block = LeafBlock::empty();
            let mut pair = [0u8; 8];
            for rec in block.voxels.iter_mut() {
                r.read_exact(&mut pair).map_err(io_err)?;
                rec.d = f32::from_le_bytes(pair[0..4].try_into().unwrap()) as f64;
                rec.w = f32::from_le_bytes(pair[4..8].try_into().unwrap()) as f64;
            }
            grid.blocks.insert(key, Arc::new(block));
        }
        Ok(grid)
    }
}

/// Immutable point-in-time view of a [`SparseTsdfGrid`].
#[derive(Clone)]
pub struct GridSnapshot {
    voxel_size: f64,
    truncation: f64,
    blocks: HashMap<BlockKey, Arc<LeafBlock>>,
}

impl GridSnapshot {
    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn observed_count(&self) -> usize {
        self.blocks
            .values()
            .map(|b| b.voxels.iter().filter(|v| v.w > 0.0).count())
            .sum()
    }

    pub fn voxel_center(&self, key: VoxelKey) -> Point3 {
        let h = self.voxel_size;
        Point3::new(
            (key[0] as f64 + 0.5) * h,
            (key[1] as f64 + 0.5) * h,
            (key[2] as f64 + 0.5) * h,
        )
    }

    /// Trilinear interpolation of D between the 8 surrounding voxel centers;
    /// `None` when any corner is unobserved.
    pub fn sample_trilinear(&self, p: &Point3) -> Option<f64> {
        let h = self.voxel_size;
        let q = [p.x / h - 0.5, p.y / h - 0.5, p.z / h - 0.5];
        let base = [
            q[0].floor() as i64,
            q[1].floor() as i64,
            q[2].floor() as i64,
        ];
        let f = [
            q[0] - base[0] as f64,
            q[1] - base[1] as f64,
            q[2] - base[2] as f64,
        ];
        let mut values = [0.0f64; 8];
        for (i, value) in values.iter_mut().enumerate() {
            let key = [
                base[0] + (i & 1) as i64,
                base[1] + ((i >> 1) & 1) as i64,
                base[2] + ((i >> 2) & 1) as i64,
            ];
            *value = self.voxel(key)?.d;
        }
        let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
        let c00 = lerp(values[0], values[1], f[0]);
        let c10 = lerp(values[2], values[3], f[0]);
        let c01 = lerp(values[4], values[5], f[0]);
        let c11 = lerp(values[6], values[7], f[0]);
        let c0 = lerp(c00, c10, f[1]);
        let c1 = lerp(c01, c11, f[1]);
        Some(lerp(c0, c1, f[2]))
    }
}

impl GridView for GridSnapshot {
    fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    fn truncation(&self) -> f64 {
        self.truncation
    }

    fn voxel(&self, key: VoxelKey) -> Option<VoxelRecord> {
        let (bk, idx) = split_key(key);
        let block = self.blocks.get(&bk)?;
        let rec = block.voxels[idx];
        (rec.w > 0.0).then_some(rec)
    }

    fn observed_voxels(&self) -> Vec<VoxelKey> {
        let mut keys: Vec<BlockKey> = self.blocks.keys().copied().collect();
        keys.sort_unstable();
        let mut out = Vec::new();
        for bk in keys {
            let block = &self.blocks[&bk];
            for (idx, rec) in block.voxels.iter().enumerate() {
                if rec.w > 0.0 {
                    let x = idx % BLOCK_DIM;
                    let y = (idx / BLOCK_DIM) % BLOCK_DIM;
                    let z = idx / (BLOCK_DIM * BLOCK_DIM);
                    out.push([
                        bk[0] as i64 * BLOCK_DIM as i64 + x as i64,
                        bk[1] as i64 * BLOCK_DIM as i64 + y as i64,
                        bk[2] as i64 * BLOCK_DIM as i64 + z as i64,
                    ]);
                }
            }
        }
        out
    }
}
