//! Triangle meshes extracted from distance fields, and the mesh queries the
//! deviation stages need: connectivity, area, discrete curvature, and signed
//! distance to a mesh.

mod marching;
mod ply;
mod sdf;
mod tables;

use std::collections::HashMap;

use thiserror::Error;

pub use marching::marching_cubes;
pub use ply::{read_ply, write_ply};
pub use sdf::{signed_distance_to_mesh, MeshQuery};

use crate::geom::{Aabb, Point3, Vec3};

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("mesh is empty")]
    EmptyMesh,
    #[error("triangle index {index} out of range ({vertices} vertices)")]
    IndexOutOfRange { index: u32, vertices: usize },
    #[error("ply file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("ply file {path}, line {line}: {msg}")]
    PlyFormat {
        path: String,
        line: usize,
        msg: String,
    },
}

/// Indexed triangle mesh with an optional per-vertex scalar channel
/// (deviation in mm, by convention). Winding is consistent with outward
/// normals: the positive side of the source field is outside the material.
#[derive(Debug, Clone, Default)]
pub struct TriangleMesh {
    pub vertices: Vec<Point3>,
    pub triangles: Vec<[u32; 3]>,
    pub scalar: Option<Vec<f64>>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Point3>, triangles: Vec<[u32; 3]>) -> Self {
        Self {
            vertices,
            triangles,
            scalar: None,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn validate(&self) -> Result<(), MeshError> {
        let n = self.vertices.len();
        for t in &self.triangles {
            for &i in t {
                if i as usize >= n {
                    return Err(MeshError::IndexOutOfRange {
                        index: i,
                        vertices: n,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn triangle_points(&self, t: usize) -> [Point3; 3] {
        let [a, b, c] = self.triangles[t];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangle_points(t);
        (b - a).cross(&(c - a)).norm() * 0.5
    }

    /// Unnormalized facet normal (length = 2x area).
    pub fn triangle_normal_raw(&self, t: usize) -> Vec3 {
        let [a, b, c] = self.triangle_points(t);
        (b - a).cross(&(c - a))
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len())
            .map(|t| self.triangle_area(t))
            .sum()
    }

    /// Area-weighted vertex normals, normalized. Degenerate stars fall back
    /// to +Z so callers never see NaN.
    pub fn vertex_normals(&self) -> Vec<Vec3> {
        let mut normals = vec![Vec3::zeros(); self.vertices.len()];
        for (t, tri) in self.triangles.iter().enumerate() {
            let n = self.triangle_normal_raw(t);
            for &i in tri {
                normals[i as usize] += n;
            }
        }
        for n in &mut normals {
            let len = n.norm();
            if len > 1e-300 {
                *n /= len;
            } else {
                *n = Vec3::new(0.0, 0.0, 1.0);
            }
        }
        normals
    }

    /// Per-vertex barycentric area: one third of each incident triangle.
    pub fn vertex_areas(&self) -> Vec<f64> {
        let mut areas = vec![0.0; self.vertices.len()];
        for (t, tri) in self.triangles.iter().enumerate() {
            let third = self.triangle_area(t) / 3.0;
            for &i in tri {
                areas[i as usize] += third;
            }
        }
        areas
    }

    pub fn bounding_box(&self) -> Option<Aabb> {
        Aabb::from_points(self.vertices.iter())
    }

    /// Undirected edge -> number of incident triangles.
    pub fn edge_use_counts(&self) -> HashMap<(u32, u32), u32> {
        let mut counts = HashMap::new();
        for tri in &self.triangles {
            for (a, b) in [(tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])] {
                *counts.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        counts
    }

    /// Vertices on an open boundary (incident to an edge used by exactly one
    /// triangle) or on a non-manifold edge.
    pub fn boundary_or_nonmanifold_vertices(&self) -> Vec<bool> {
        let mut flag = vec![false; self.vertices.len()];
        for ((a, b), count) in self.edge_use_counts() {
            if count != 2 {
                flag[a as usize] = true;
                flag[b as usize] = true;
            }
        }
        flag
    }

    /// Keep only triangles whose vertices all lie within the XY rectangle,
    /// compacting the vertex list. The scalar channel follows its vertices.
    pub fn crop_xy(&self, min: (f64, f64), max: (f64, f64)) -> TriangleMesh {
        let inside = |v: &Point3| v.x >= min.0 && v.x <= max.0 && v.y >= min.1 && v.y <= max.1;
        let mut remap: Vec<u32> = vec![u32::MAX; self.vertices.len()];
        let mut vertices = Vec::new();
        let mut scalar = self.scalar.as_ref().map(|_| Vec::new());
        let mut triangles = Vec::new();
        for tri in &self.triangles {
            if !tri.iter().all(|&i| inside(&self.vertices[i as usize])) {
                continue;
            }
            let mut mapped = [0u32; 3];
            for (slot, &i) in mapped.iter_mut().zip(tri) {
                if remap[i as usize] == u32::MAX {
                    remap[i as usize] = vertices.len() as u32;
                    vertices.push(self.vertices[i as usize]);
                    if let (Some(out), Some(src)) = (scalar.as_mut(), self.scalar.as_ref()) {
                        out.push(src[i as usize]);
                    }
                }
                *slot = remap[i as usize];
            }
            triangles.push(mapped);
        }
        TriangleMesh {
            vertices,
            triangles,
            scalar,
        }
    }
}

/// Discrete signed mean curvature per vertex (1/mm).
///
/// Half the magnitude of the cotangent-weighted position Laplacian divided by
/// the vertex's mixed Voronoi area, signed by alignment with the vertex
/// normal so a convex bump is positive. Vertices on mesh boundaries or
/// non-manifold edges get value 0 and `reliable = false`.
pub struct VertexCurvature {
    pub values: Vec<f64>,
    pub reliable: Vec<bool>,
}

pub fn mean_curvature(mesh: &TriangleMesh) -> VertexCurvature {
    let n = mesh.vertices.len();
    let mut laplacian = vec![Vec3::zeros(); n];
    let mut mixed_area = vec![0.0f64; n];

    for tri in &mesh.triangles {
        let ia = tri[0] as usize;
        let ib = tri[1] as usize;
        let ic = tri[2] as usize;
        let pa = mesh.vertices[ia];
        let pb = mesh.vertices[ib];
        let pc = mesh.vertices[ic];

        let cot_a = cotangent(&(pb - pa), &(pc - pa));
        let cot_b = cotangent(&(pa - pb), &(pc - pb));
        let cot_c = cotangent(&(pa - pc), &(pb - pc));

        // Cotangent weights: the angle opposite each edge contributes to it.
        laplacian[ia] += (pa - pb) * cot_c + (pa - pc) * cot_b;
        laplacian[ib] += (pb - pa) * cot_c + (pb - pc) * cot_a;
        laplacian[ic] += (pc - pa) * cot_b + (pc - pb) * cot_a;

        let area = (pb - pa).cross(&(pc - pa)).norm() * 0.5;
        if area <= 1e-300 {
            continue;
        }
        let obtuse_a = cot_a < 0.0;
        let obtuse_b = cot_b < 0.0;
        let obtuse_c = cot_c < 0.0;
        if !(obtuse_a || obtuse_b || obtuse_c) {
            // Voronoi-safe mixed area for non-obtuse triangles.
            let ab2 = (pb - pa).norm_squared();
            let ac2 = (pc - pa).norm_squared();
            let bc2 = (pc - pb).norm_squared();
            mixed_area[ia] += (ab2 * cot_c + ac2 * cot_b) / 8.0;
            mixed_area[ib] += (ab2 * cot_c + bc2 * cot_a) / 8.0;
            mixed_area[ic] += (ac2 * cot_b + bc2 * cot_a) / 8.0;
        } else {
            mixed_area[ia] += if obtuse_a { area / 2.0 } else { area / 4.0 };
            mixed_area[ib] += if obtuse_b { area / 2.0 } else { area / 4.0 };
            mixed_area[ic] += if obtuse_c { area / 2.0 } else { area / 4.0 };
        }
    }

    let normals = mesh.vertex_normals();
    let unreliable = mesh.boundary_or_nonmanifold_vertices();
    let mut values = vec![0.0f64; n];
    let mut reliable = vec![false; n];
    for i in 0..n {
        if unreliable[i] || mixed_area[i] <= 1e-300 {
            continue;
        }
        let k = laplacian[i] / (2.0 * mixed_area[i]);
        let magnitude = 0.5 * k.norm();
        values[i] = if k.dot(&normals[i]) >= 0.0 {
            magnitude
        } else {
            -magnitude
        };
        reliable[i] = true;
    }
    VertexCurvature { values, reliable }
}

fn cotangent(u: &Vec3, v: &Vec3) -> f64 {
    let cross = u.cross(v).norm();
    if cross <= 1e-300 {
        0.0
    } else {
        u.dot(v) / cross
    }
}

/// Maximal edge-connected groups of identically-labeled vertices, via
/// union-find over mesh edges. Groups are returned sorted by their smallest
/// vertex index; isolated vertices form singleton groups.
pub fn connected_components(mesh: &TriangleMesh, labels: &[u32]) -> Vec<Vec<u32>> {
    assert_eq!(labels.len(), mesh.vertices.len());
    let mut parent: Vec<u32> = (0..mesh.vertices.len() as u32).collect();

    fn find(parent: &mut [u32], i: u32) -> u32 {
        let mut root = i;
        while parent[root as usize] != root {
            root = parent[root as usize];
        }
        let mut cur = i;
        while parent[cur as usize] != root {
            let next = parent[cur as usize];
            parent[cur as usize] = root;
            cur = next;
        }
        root
    }

    for tri in &mesh.triangles {
        for (a, b) in [(tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])] {
            if labels[a as usize] == labels[b as usize] {
                let ra = find(&mut parent, a);
                let rb = find(&mut parent, b);
                if ra != rb {
                    parent[ra.max(rb) as usize] = ra.min(rb);
                }
            }
        }
    }

    let mut groups: std::collections::BTreeMap<u32, Vec<u32>> = std::collections::BTreeMap::new();
    for i in 0..mesh.vertices.len() as u32 {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(i);
    }
    groups.into_values().collect()
}

/// Unit sphere mesh by icosahedron subdivision. Primarily a test fixture
/// generator: the mesh is regular enough to validate curvature estimators.
pub fn icosphere(radius: f64, subdivisions: u32) -> TriangleMesh {
    let phi = (1.0 + 5.0f64.sqrt()) / 2.0;
    let mut vertices: Vec<Point3> = [
        (-1.0, phi, 0.0),
        (1.0, phi, 0.0),
        (-1.0, -phi, 0.0),
        (1.0, -phi, 0.0),
        (0.0, -1.0, phi),
        (0.0, 1.0, phi),
        (0.0, -1.0, -phi),
        (0.0, 1.0, -phi),
        (phi, 0.0, -1.0),
        (phi, 0.0, 1.0),
        (-phi, 0.0, -1.0),
        (-phi, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| {
        let v = Vec3::new(x, y, z).normalize() * radius;
        Point3::from(v)
    })
    .collect();

    let mut triangles: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];

    for _ in 0..subdivisions {
        let mut midpoints: HashMap<(u32, u32), u32> = HashMap::new();
        let mut next = Vec::with_capacity(triangles.len() * 4);
        for tri in &triangles {
            let mut mids = [0u32; 3];
            for (k, (a, b)) in [(tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])]
                .into_iter()
                .enumerate()
            {
                let key = (a.min(b), a.max(b));
                mids[k] = *midpoints.entry(key).or_insert_with(|| {
                    let m = (vertices[a as usize].coords + vertices[b as usize].coords) * 0.5;
                    vertices.push(Point3::from(m.normalize() * radius));
                    (vertices.len() - 1) as u32
                });
            }
            next.push([tri[0], mids[0], mids[2]]);
            next.push([tri[1], mids[1], mids[0]]);
            next.push([tri[2], mids[2], mids[1]]);
            next.push([mids[0], mids[1], mids[2]]);
        }
        triangles = next;
    }

    TriangleMesh::new(vertices, triangles)
}
