//! Desk-scale stand-in for the spray cell: grows a synthetic surface by
//! Gaussian deposition along a toolpath and scans it with virtual laser line
//! profilers, emitting the same streams a real cell would.
//!
//! The simulated world uses two frames: the work object {O} is fixed to the
//! substrate and carries the height field; the base {B} holds the stationary
//! nozzle and profilers while the robot moves the substrate beneath them.

mod sim;
mod streams;

pub use sim::{
    run_simulation, NozzleOccluder, RateAnomaly, SimError, SimulationConfig, SimulationOutputs,
};
pub use streams::{
    read_pose_stream, read_scan_stream, write_jsonl, PoseSample, ProfileFrame, StreamError,
};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::geom::{Point3, RigidTransform, Vec3};
use crate::meshing::TriangleMesh;
use crate::reference::DepositionModel;

/// XY rectangle covered by a height field, mm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldExtent {
    pub min: (f64, f64),
    pub max: (f64, f64),
}

impl FieldExtent {
    pub fn centered(half_x: f64, half_y: f64) -> Self {
        Self {
            min: (-half_x, -half_y),
            max: (half_x, half_y),
        }
    }
}

/// Regular XY grid of accumulated deposition height (mm), cell centers at
/// `origin + (i + 0.5) * cell`. Heights are zero (bare substrate) outside
/// the extent.
#[derive(Debug, Clone)]
pub struct HeightField {
    origin: (f64, f64),
    cell: f64,
    nx: usize,
    ny: usize,
    data: Vec<f64>,
}

impl HeightField {
    pub fn new(extent: FieldExtent, cell: f64) -> Self {
        assert!(cell > 0.0);
        assert!(extent.max.0 > extent.min.0 && extent.max.1 > extent.min.1);
        let nx = ((extent.max.0 - extent.min.0) / cell).ceil() as usize;
        let ny = ((extent.max.1 - extent.min.1) / cell).ceil() as usize;
        Self {
            origin: extent.min,
            cell,
            nx,
            ny,
            data: vec![0.0; nx * ny],
        }
    }

    pub fn cell_size(&self) -> f64 {
        self.cell
    }

    pub fn extent(&self) -> ((f64, f64), (f64, f64)) {
        (
            self.origin,
            (
                self.origin.0 + self.nx as f64 * self.cell,
                self.origin.1 + self.ny as f64 * self.cell,
            ),
        )
    }

    pub fn cells(&self) -> &[f64] {
        &self.data
    }

    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.origin.0 + (i as f64 + 0.5) * self.cell,
            self.origin.1 + (j as f64 + 0.5) * self.cell,
        )
    }

    /// Overwrite heights from a function of cell-center position. Test and
    /// fixture helper.
    pub fn fill(&mut self, f: impl Fn(f64, f64) -> f64) {
        for j in 0..self.ny {
            for i in 0..self.nx {
                let (x, y) = self.cell_center(i, j);
                self.data[j * self.nx + i] = f(x, y);
            }
        }
    }

    /// Deposit one plume sample: cells within 4 sigma of `center` gain
    /// `scale * zeta(tilt) * A * exp(-r^2/(2 sigma^2)) * dt` of height.
    pub fn deposit_spot(
        &mut self,
        model: &DepositionModel,
        center: (f64, f64),
        tilt_deg: f64,
        dt: f64,
        scale: f64,
    ) {
        assert!(dt > 0.0, "deposition step must be positive");
        let sigma = model.sigma();
        let reach = 4.0 * sigma;
        let gain = scale * model.zeta(tilt_deg) * model.a_peak() * dt;
        let inv_two_sigma_sq = 1.0 / (2.0 * sigma * sigma);

        let i0 = (((center.0 - reach) - self.origin.0) / self.cell)
            .floor()
            .max(0.0) as usize;
        let j0 = (((center.1 - reach) - self.origin.1) / self.cell)
            .floor()
            .max(0.0) as usize;
        let i1 = ((((center.0 + reach) - self.origin.0) / self.cell).ceil() as usize).min(self.nx);
        let j1 = ((((center.1 + reach) - self.origin.1) / self.cell).ceil() as usize).min(self.ny);
        for j in j0..j1 {
            for i in i0..i1 {
                let (x, y) = self.cell_center(i, j);
                let r2 = (x - center.0).powi(2) + (y - center.1).powi(2);
                if r2 <= reach * reach {
                    self.data[j * self.nx + i] += gain * (-r2 * inv_two_sigma_sq).exp();
                }
            }
        }
    }

    /// Bilinear height at (x, y); zero outside the extent (bare substrate).
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let fx = (x - self.origin.0) / self.cell - 0.5;
        let fy = (y - self.origin.1) / self.cell - 0.5;
        let i0 = fx.floor();
        let j0 = fy.floor();
        let tx = fx - i0;
        let ty = fy - j0;
        let at = |i: i64, j: i64| -> f64 {
            if i < 0 || j < 0 || i >= self.nx as i64 || j >= self.ny as i64 {
                0.0
            } else {
                self.data[j as usize * self.nx + i as usize]
            }
        };
        let (i0, j0) = (i0 as i64, j0 as i64);
        let h00 = at(i0, j0);
        let h10 = at(i0 + 1, j0);
        let h01 = at(i0, j0 + 1);
        let h11 = at(i0 + 1, j0 + 1);
        h00 * (1.0 - tx) * (1.0 - ty)
            + h10 * tx * (1.0 - ty)
            + h01 * (1.0 - tx) * ty
            + h11 * tx * ty
    }

    pub fn max_height(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &v| m.max(v))
    }

    /// Total deposited volume, mm^3.
    pub fn volume(&self) -> f64 {
        self.data.iter().sum::<f64>() * self.cell * self.cell
    }

    pub fn mean_height_in(&self, min: (f64, f64), max: (f64, f64)) -> f64 {
        let mut sum = 0.0;
        let mut count = 0usize;
        for j in 0..self.ny {
            for i in 0..self.nx {
                let (x, y) = self.cell_center(i, j);
                if x >= min.0 && x <= max.0 && y >= min.1 && y <= max.1 {
                    sum += self.data[j * self.nx + i];
                    count += 1;
                }
            }
        }
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }

    /// Triangulate the raw surface grid. This is the ground-truth mesh
    /// export; it deliberately bypasses the voxel pipeline.
    pub fn to_mesh(&self) -> TriangleMesh {
        let mut vertices = Vec::with_capacity(self.nx * self.ny);
        for j in 0..self.ny {
            for i in 0..self.nx {
                let (x, y) = self.cell_center(i, j);
                vertices.push(Point3::new(x, y, self.data[j * self.nx + i]));
            }
        }
        let idx = |i: usize, j: usize| (j * self.nx + i) as u32;
        let mut triangles = Vec::with_capacity((self.nx - 1) * (self.ny - 1) * 2);
        for j in 0..self.ny - 1 {
            for i in 0..self.nx - 1 {
                triangles.push([idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)]);
                triangles.push([idx(i, j), idx(i + 1, j + 1), idx(i, j + 1)]);
            }
        }
        TriangleMesh::new(vertices, triangles)
    }
}

/// A stationary 2D laser line profiler. The laser plane spans the scanner's
/// X (lateral) and Z (depth) axes; samples are (x_l, z_l) pairs with z_l the
/// distance along +Z from the scanner to the surface.
#[derive(Debug, Clone)]
pub struct VirtualProfiler {
    pub id: u32,
    /// Mounting transform: scanner frame {L} into base frame {B}.
    pub mounting: RigidTransform,
    pub points_per_frame: usize,
    pub fov_width: f64,
    pub frame_rate: f64,
    pub noise_sigma: f64,
}

impl VirtualProfiler {
    pub fn new(id: u32, mounting: RigidTransform) -> Self {
        Self {
            id,
            mounting,
            points_per_frame: 640,
            fov_width: 60.0,
            frame_rate: 10.0,
            noise_sigma: 0.05,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.points_per_frame < 2 {
            return Err(format!(
                "profiler {}: points_per_frame must be >= 2",
                self.id
            ));
        }
        if self.frame_rate.is_nan() || self.frame_rate <= 0.0 {
            return Err(format!("profiler {}: frame_rate must be > 0", self.id));
        }
        if self.fov_width <= 0.0 {
            return Err(format!("profiler {}: fov_width must be > 0", self.id));
        }
        if self.noise_sigma < 0.0 {
            return Err(format!("profiler {}: noise_sigma must be >= 0", self.id));
        }
        Ok(())
    }
}

/// One laser line acquisition: samples across the FOV expressed in the
/// profiler plane, with a validity mask for misses and occlusions.
pub fn scan_frame(
    heights: &HeightField,
    profiler: &VirtualProfiler,
    pose_ob: &RigidTransform,
    t_us: u64,
    occluder: Option<&ActiveOccluder>,
    rng: &mut impl Rng,
) -> ProfileFrame {
    let n = profiler.points_per_frame;
    let chain = pose_ob.compose(&profiler.mounting);
    let inverse = chain.invert();
    let spacing = profiler.fov_width / (n as f64 - 1.0);

    let mut points = Vec::with_capacity(n);
    let mut valid = Vec::with_capacity(n);
    let h_max = heights.max_height();

    for i in 0..n {
        let x_l = -profiler.fov_width / 2.0 + i as f64 * spacing;
        let origin = chain.apply(&Point3::new(x_l, 0.0, 0.0));
        let dir = chain.apply_vec(&Vec3::new(0.0, 0.0, 1.0));
        match raycast_heightfield(heights, &origin, &dir, h_max) {
            Some(hit) => {
                let blocked = occluder.is_some_and(|o| o.blocks(&origin, &hit));
                if blocked {
                    points.push([x_l, 0.0]);
                    valid.push(false);
                } else {
                    let local = inverse.apply(&hit);
                    let mut z_l = local.z;
                    if profiler.noise_sigma > 0.0 {
                        let noise: f64 = rng.sample(StandardNormal);
                        z_l += noise * profiler.noise_sigma;
                    }
                    points.push([x_l, z_l]);
                    valid.push(true);
                }
            }
            None => {
                points.push([x_l, 0.0]);
                valid.push(false);
            }
        }
    }

    ProfileFrame {
        t_us,
        scanner_id: profiler.id,
        valid_mask: valid,
        points,
    }
}

/// March a downward ray against the bilinear height surface, then bisect the
/// bracketing interval. Returns the hit in {O}, or `None` when the ray never
/// meets the surface or lands off the substrate plate (the plate ends at the
/// field extent; beyond it there is nothing to return a signal).
fn raycast_heightfield(
    heights: &HeightField,
    origin: &Point3,
    dir: &Vec3,
    h_max: f64,
) -> Option<Point3> {
    if dir.z >= -1e-9 {
        return None;
    }
    let at = |s: f64| Point3::from(origin.coords + dir * s);
    let f = |s: f64| {
        let p = at(s);
        p.z - heights.sample(p.x, p.y)
    };
    // Skip ahead to just above the highest possible surface.
    let mut s0 = ((h_max + 0.5 - origin.z) / dir.z).max(0.0);
    let s_end = (-1.0 - origin.z) / dir.z;
    if f(s0) <= 0.0 {
        // Origin already below the surface.
        return None;
    }
    let step = heights.cell_size() / (4.0 * dir.z.abs());
    while s0 < s_end {
        let s1 = (s0 + step).min(s_end);
        if f(s1) <= 0.0 {
            // Bisect [s0, s1].
            let (mut lo, mut hi) = (s0, s1);
            for _ in 0..50 {
                let mid = 0.5 * (lo + hi);
                if f(mid) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let hit = at(0.5 * (lo + hi));
            let (min, max) = heights.extent();
            if hit.x < min.0 || hit.x > max.0 || hit.y < min.1 || hit.y > max.1 {
                return None;
            }
            return Some(hit);
        }
        if s1 >= s_end {
            break;
        }
        s0 = s1;
    }
    None
}

/// Nozzle occluder instantiated at the current nozzle position: an infinite
/// vertical cylinder starting at `bottom_z`.
#[derive(Debug, Clone, Copy)]
pub struct ActiveOccluder {
    pub center_xy: (f64, f64),
    pub radius: f64,
    pub bottom_z: f64,
}

impl ActiveOccluder {
    /// Does the segment origin -> hit pass through the cylinder?
    pub fn blocks(&self, origin: &Point3, hit: &Point3) -> bool {
        let d = hit - origin;
        let ox = origin.x - self.center_xy.0;
        let oy = origin.y - self.center_xy.1;
        // |xy(t)|^2 = r^2 over t in [0, 1].
        let a = d.x * d.x + d.y * d.y;
        let b = 2.0 * (ox * d.x + oy * d.y);
        let c = ox * ox + oy * oy - self.radius * self.radius;
        let (t0, t1) = if a < 1e-12 {
            if c > 0.0 {
                return false;
            }
            (0.0, 1.0)
        } else {
            let disc = b * b - 4.0 * a * c;
            if disc <= 0.0 {
                return false;
            }
            let sq = disc.sqrt();
            (
                ((-b - sq) / (2.0 * a)).max(0.0),
                ((-b + sq) / (2.0 * a)).min(1.0),
            )
        };
        if t0 >= t1 {
            return false;
        }
        // Blocked only where the crossing sits above the cylinder bottom.
        let z0 = origin.z + d.z * t0;
        let z1 = origin.z + d.z * t1;
        z0.max(z1) >= self.bottom_z
    }
}
