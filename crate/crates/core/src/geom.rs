//! Rigid-body geometry primitives and the transform chain that maps profiler
//! points into the work-object frame.
//!
//! All coordinates are millimetres. A scanner sample `p` acquired in profiler
//! frame `{L_j}` reaches the work-object frame `{O}` through the robot pose
//! and the fixed scanner mounting transform:
//!
//! ```text
//! p_O = T_OB * T_BL_j * p_L
//! ```
//!
//! Transforms are stored as rotation + translation (never a general 4x4), so
//! shear and scale cannot creep in over long streams.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::Deserialize;
use thiserror::Error;

/// 3D point in millimetres, in whatever frame the context declares.
pub type Point3 = nalgebra::Point3<f64>;
/// 3D displacement in millimetres.
pub type Vec3 = Vector3<f64>;

/// Entrywise tolerance for the orthonormality invariant.
pub const ORTHONORMAL_TOL: f64 = 1e-9;
/// Inputs deviating less than this are repaired by polar decomposition;
/// anything worse is rejected as not a rotation.
pub const REORTHOGONALIZE_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("rotation is not orthonormal (deviation {deviation:.3e} exceeds {limit:.1e})")]
    NotARotation { deviation: f64, limit: f64 },
    #[error("non-finite coordinate in input point {index}")]
    NonFinitePoint { index: usize },
    #[error("calibration file {path}: {source}")]
    CalibrationIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("calibration file {path}: {msg}")]
    CalibrationFormat { path: String, msg: String },
}

/// Proper rigid transform: orthonormal rotation plus translation in mm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Build from parts, enforcing the orthonormality invariant.
    ///
    /// Rotations within [`ORTHONORMAL_TOL`] are accepted as-is; deviations up
    /// to [`REORTHOGONALIZE_TOL`] (typical of numerical calibration solvers)
    /// are snapped to the nearest rotation by polar decomposition; anything
    /// worse is rejected.
    pub fn from_parts(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self, GeomError> {
        let deviation = orthonormal_deviation(&rotation);
        if deviation <= ORTHONORMAL_TOL {
            return Ok(Self {
                rotation,
                translation,
            });
        }
        if deviation < REORTHOGONALIZE_TOL {
            let repaired = polar_rotation(&rotation);
            debug_assert!(orthonormal_deviation(&repaired) <= ORTHONORMAL_TOL);
            return Ok(Self {
                rotation: repaired,
                translation,
            });
        }
        Err(GeomError::NotARotation {
            deviation,
            limit: REORTHOGONALIZE_TOL,
        })
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation about +Z by `degrees`, right-handed.
    pub fn rot_z_deg(degrees: f64) -> Self {
        let r = degrees.to_radians();
        let (s, c) = r.sin_cos();
        Self {
            rotation: Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
            translation: Vec3::zeros(),
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> Vec3 {
        self.translation
    }

    /// `self.compose(b)` applies `b` first, then `self`.
    pub fn compose(&self, b: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * b.rotation,
            translation: self.rotation * b.translation + self.translation,
        }
    }

    pub fn invert(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn apply_vec(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// Interpolate between two poses: linear translation, spherical rotation.
    pub fn interpolate(a: &RigidTransform, b: &RigidTransform, frac: f64) -> RigidTransform {
        let frac = frac.clamp(0.0, 1.0);
        let translation = a.translation + (b.translation - a.translation) * frac;
        let qa = nalgebra::UnitQuaternion::from_rotation_matrix(
            &nalgebra::Rotation3::from_matrix_unchecked(a.rotation),
        );
        let qb = nalgebra::UnitQuaternion::from_rotation_matrix(
            &nalgebra::Rotation3::from_matrix_unchecked(b.rotation),
        );
        let rotation = qa.slerp(&qb, frac).to_rotation_matrix().into_inner();
        RigidTransform::from_parts(rotation, translation)
            .expect("slerp of rotations stays orthonormal")
    }
}

fn orthonormal_deviation(r: &Matrix3<f64>) -> f64 {
    let gram = r.transpose() * r - Matrix3::identity();
    let max_entry = gram.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    max_entry.max((r.determinant() - 1.0).abs())
}

/// Nearest rotation in the Frobenius sense, via SVD polar decomposition.
fn polar_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd requested u");
    let v_t = svd.v_t.expect("svd requested v_t");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        // Flip the axis of least significance to stay in SO(3).
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * v_t;
    }
    r
}

/// Map profiler-frame points into the work-object frame:
/// `p_O = pose_ob * calib_bl * p_L`.
///
/// Length and order are preserved; non-finite inputs are rejected.
pub fn project_points(
    pose_ob: &RigidTransform,
    calib_bl: &RigidTransform,
    local_points: &[Point3],
) -> Result<Vec<Point3>, GeomError> {
    let chain = pose_ob.compose(calib_bl);
    let mut out = Vec::with_capacity(local_points.len());
    for (index, p) in local_points.iter().enumerate() {
        if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
            return Err(GeomError::NonFinitePoint { index });
        }
        out.push(chain.apply(p));
    }
    Ok(out)
}

/// Axis-aligned bounding box in mm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Point3,
    pub max: Point3,
}

impl Aabb {
    /// Box spanning the two corners; components are sorted so min <= max holds.
    pub fn new(a: Point3, b: Point3) -> Self {
        Self {
            min: Point3::new(a.x.min(b.x), a.y.min(b.y), a.z.min(b.z)),
            max: Point3::new(a.x.max(b.x), a.y.max(b.y), a.z.max(b.z)),
        }
    }

    pub fn from_points<'a, I: IntoIterator<Item = &'a Point3>>(points: I) -> Option<Self> {
        let mut it = points.into_iter();
        let first = *it.next()?;
        let mut aabb = Aabb {
            min: first,
            max: first,
        };
        for p in it {
            aabb.expand(p);
        }
        Some(aabb)
    }

    pub fn expand(&mut self, p: &Point3) {
        self.min = Point3::new(
            self.min.x.min(p.x),
            self.min.y.min(p.y),
            self.min.z.min(p.z),
        );
        self.max = Point3::new(
            self.max.x.max(p.x),
            self.max.y.max(p.y),
            self.max.z.max(p.z),
        );
    }

    pub fn center(&self) -> Point3 {
        Point3::from((self.min.coords + self.max.coords) * 0.5)
    }

    pub fn z_extent(&self) -> f64 {
        self.max.z - self.min.z
    }

    /// Area of the XY overlap between the two boxes' footprints, 0 if disjoint.
    pub fn xy_overlap_area(&self, other: &Aabb) -> f64 {
        let dx = self.max.x.min(other.max.x) - self.min.x.max(other.min.x);
        let dy = self.max.y.min(other.max.y) - self.min.y.max(other.min.y);
        if dx <= 0.0 || dy <= 0.0 {
            0.0
        } else {
            dx * dy
        }
    }

    /// Volume of the 3D intersection, 0 if disjoint.
    pub fn overlap_volume(&self, other: &Aabb) -> f64 {
        let dx = self.max.x.min(other.max.x) - self.min.x.max(other.min.x);
        let dy = self.max.y.min(other.max.y) - self.min.y.max(other.min.y);
        let dz = self.max.z.min(other.max.z) - self.min.z.max(other.min.z);
        if dx <= 0.0 || dy <= 0.0 || dz <= 0.0 {
            0.0
        } else {
            dx * dy * dz
        }
    }
}

#[derive(Deserialize)]
struct CalibrationEntry {
    id: u32,
    /// 3x3 rotation, row-major.
    rotation: [f64; 9],
    translation_mm: [f64; 3],
}

#[derive(Deserialize)]
struct CalibrationFile {
    scanners: Vec<CalibrationEntry>,
}

/// Load scanner mounting transforms (`T_BL_j`) from a calibration JSON file.
///
/// One entry per scanner id, each with a row-major 3x3 rotation and a
/// translation in mm. Near-orthonormal rotations are re-orthogonalized.
pub fn load_calibration(path: &Path) -> Result<BTreeMap<u32, RigidTransform>, GeomError> {
    let text = std::fs::read_to_string(path).map_err(|source| GeomError::CalibrationIo {
        path: path.display().to_string(),
        source,
    })?;
    let file: CalibrationFile =
        serde_json::from_str(&text).map_err(|e| GeomError::CalibrationFormat {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
    let mut map = BTreeMap::new();
    for entry in file.scanners {
        let r = Matrix3::from_row_slice(&entry.rotation);
        let t = Vec3::new(
            entry.translation_mm[0],
            entry.translation_mm[1],
            entry.translation_mm[2],
        );
        let transform = RigidTransform::from_parts(r, t).map_err(|e| match e {
            GeomError::NotARotation { deviation, limit } => GeomError::CalibrationFormat {
                path: path.display().to_string(),
                msg: format!(
                    "scanner {} rotation is not orthonormal (deviation {deviation:.3e} > {limit:.1e})",
                    entry.id
                ),
            },
            other => other,
        })?;
        if map.insert(entry.id, transform).is_some() {
            return Err(GeomError::CalibrationFormat {
                path: path.display().to_string(),
                msg: format!("duplicate scanner id {}", entry.id),
            });
        }
    }
    Ok(map)
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    fn arb_transform() -> impl Strategy<Value = RigidTransform> {
        (
            -180.0f64..180.0,
            -50.0f64..50.0,
            -50.0f64..50.0,
            -50.0f64..50.0,
            -89.0f64..89.0,
        )
            .prop_map(|(zdeg, tx, ty, tz, xdeg)| {
                let rx = xdeg.to_radians();
                let (s, c) = rx.sin_cos();
                let rot_x = Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c);
                let rz = RigidTransform::rot_z_deg(zdeg);
                let rx = RigidTransform::from_parts(rot_x, Vec3::new(tx, ty, tz)).unwrap();
                rz.compose(&rx)
            })
    }

    fn arb_point() -> impl Strategy<Value = Point3> {
        (-100.0f64..100.0, -100.0f64..100.0, -100.0f64..100.0)
            .prop_map(|(x, y, z)| Point3::new(x, y, z))
    }

    proptest! {
        #[test]
        fn project_equals_apply_of_composition(
            pose in arb_transform(),
            calib in arb_transform(),
            pts in proptest::collection::vec(arb_point(), 1..16),
        ) {
            let projected = project_points(&pose, &calib, &pts).unwrap();
            let chain = pose.compose(&calib);
            for (p, q) in pts.iter().zip(&projected) {
                let direct = chain.apply(p);
                prop_assert!((direct - q).norm() < 1e-9);
            }
        }

        #[test]
        fn projection_preserves_distances(
            pose in arb_transform(),
            calib in arb_transform(),
            a in arb_point(),
            b in arb_point(),
        ) {
            let out = project_points(&pose, &calib, &[a, b]).unwrap();
            let before = (a - b).norm();
            let after = (out[0] - out[1]).norm();
            prop_assert!((before - after).abs() < 1e-9);
        }

        #[test]
        fn compose_is_associative(
            a in arb_transform(),
            b in arb_transform(),
            c in arb_transform(),
            p in arb_point(),
        ) {
            let left = a.compose(&b).compose(&c).apply(&p);
            let right = a.compose(&b.compose(&c)).apply(&p);
            prop_assert!((left - right).norm() < 1e-9);
        }
    }
}
