//! Marching-cubes extraction of an explicit triangle mesh from a sparse
//! distance-field view.

use std::collections::HashMap;

use crate::fusion::{GridView, VoxelKey};
use crate::geom::Point3;

use super::tables::{CORNER_OFFSETS, EDGE_CORNERS, EDGE_TABLE, TRI_TABLE};
use super::TriangleMesh;

/// Extract the iso-surface `D = iso` as a triangle mesh.
///
/// Cube corners are voxel centers; vertex positions are linearly interpolated
/// along cube edges by the D values. Only cubes with all 8 corners observed
/// emit triangles, so the mesh never extrapolates into unobserved space.
/// Returns an empty mesh when the field has no sign change.
pub fn marching_cubes(view: &dyn GridView, iso: f64) -> TriangleMesh {
    let mut vertices: Vec<Point3> = Vec::new();
    let mut triangles: Vec<[u32; 3]> = Vec::new();
    // Shared vertices are looked up by canonical edge id: the lower corner
    // voxel plus the edge axis.
    let mut edge_cache: HashMap<(VoxelKey, u8), u32> = HashMap::new();

    // Every emitting cube has its minimum corner observed, so iterating the
    // observed voxels as cube bases visits each candidate cube exactly once.
    for base in view.observed_voxels() {
        let mut corner_values = [0.0f64; 8];
        let mut corner_keys = [[0i64; 3]; 8];
        let mut all_observed = true;
        for (i, offset) in CORNER_OFFSETS.iter().enumerate() {
            let key = [
                base[0] + offset[0],
                base[1] + offset[1],
                base[2] + offset[2],
            ];
            corner_keys[i] = key;
            match view.voxel(key) {
                Some(rec) => corner_values[i] = rec.d - iso,
                None => {
                    all_observed = false;
                    break;
                }
            }
        }
        if !all_observed {
            continue;
        }

        let mut cube_index = 0usize;
        for (i, v) in corner_values.iter().enumerate() {
            if *v < 0.0 {
                cube_index |= 1 << i;
            }
        }
        if EDGE_TABLE[cube_index] == 0 {
            continue;
        }

        let row = &TRI_TABLE[cube_index];
        let mut i = 0;
        while i < 16 && row[i] >= 0 {
            let mut tri = [0u32; 3];
            for (slot, &edge) in tri.iter_mut().zip(&row[i..i + 3]) {
                let edge = edge as usize;
                let (ca, cb) = EDGE_CORNERS[edge];
                let (ka, kb) = (corner_keys[ca], corner_keys[cb]);
                let cache_key = canonical_edge(ka, kb);
                *slot = *edge_cache.entry(cache_key).or_insert_with(|| {
                    let va = corner_values[ca];
                    let vb = corner_values[cb];
                    let denom = va - vb;
                    let t = if denom.abs() < 1e-300 {
                        0.5
                    } else {
                        (va / denom).clamp(0.0, 1.0)
                    };
                    let pa = center_of(view, ka);
                    let pb = center_of(view, kb);
                    let p = Point3::from(pa.coords + (pb.coords - pa.coords) * t);
                    vertices.push(p);
                    (vertices.len() - 1) as u32
                });
            }
            if tri[0] != tri[1] && tri[1] != tri[2] && tri[0] != tri[2] {
                // The table winds toward the negative side; our convention is
                // positive-outside, so emit reversed.
                triangles.push([tri[0], tri[2], tri[1]]);
            }
            i += 3;
        }
    }

    TriangleMesh::new(vertices, triangles)
}

fn center_of(view: &dyn GridView, key: VoxelKey) -> Point3 {
    let h = view.voxel_size();
    Point3::new(
        (key[0] as f64 + 0.5) * h,
        (key[1] as f64 + 0.5) * h,
        (key[2] as f64 + 0.5) * h,
    )
}

/// Edges are identified by their lower corner voxel and axis, so cubes
/// sharing an edge reuse the same vertex.
fn canonical_edge(a: VoxelKey, b: VoxelKey) -> (VoxelKey, u8) {
    for axis in 0..3 {
        if a[axis] != b[axis] {
            let lower = if a[axis] < b[axis] { a } else { b };
            return (lower, axis as u8);
        }
    }
    (a, 3)
}
