//! Signed distance from a query point to a triangle mesh.
//!
//! Magnitude is the distance to the nearest triangle, found through an AABB
//! tree over the triangles; the tree is an accelerator only and returns
//! exactly what a brute-force scan over all triangles returns. Sign comes
//! from the angle-weighted pseudonormal of the closest feature (face, edge or
//! vertex), negative inside the material.

use std::collections::HashMap;

use crate::geom::{Point3, Vec3};

use super::{MeshError, TriangleMesh};

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone, Copy)]
struct Node {
    min: Vec3,
    max: Vec3,
    /// Leaf: start index into `order`; inner: left child (right = left + 1 in
    /// depth-first layout is not guaranteed, so both are stored).
    left: u32,
    right: u32,
    start: u32,
    count: u32,
}

impl Node {
    fn is_leaf(&self) -> bool {
        self.count > 0
    }

    fn distance_sq_to(&self, p: &Point3) -> f64 {
        let mut d2 = 0.0;
        for a in 0..3 {
            let v = p[a];
            let lo = self.min[a];
            let hi = self.max[a];
            let d = if v < lo {
                lo - v
            } else if v > hi {
                v - hi
            } else {
                0.0
            };
            d2 += d * d;
        }
        d2
    }
}

/// Where on a triangle the closest point landed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Feature {
    Face,
    Edge(usize),
    Vertex(usize),
}

/// Accelerated signed-distance queries against a fixed mesh.
pub struct MeshQuery {
    vertices: Vec<Point3>,
    triangles: Vec<[u32; 3]>,
    face_normals: Vec<Vec3>,
    vertex_pseudonormals: Vec<Vec3>,
    edge_pseudonormals: HashMap<(u32, u32), Vec3>,
    nodes: Vec<Node>,
    order: Vec<u32>,
}

impl MeshQuery {
    pub fn new(mesh: &TriangleMesh) -> Result<Self, MeshError> {
        if mesh.is_empty() {
            return Err(MeshError::EmptyMesh);
        }
        mesh.validate()?;

        let vertices = mesh.vertices.clone();
        let triangles = mesh.triangles.clone();

        let mut face_normals = Vec::with_capacity(triangles.len());
        let mut vertex_pseudonormals = vec![Vec3::zeros(); vertices.len()];
        let mut edge_pseudonormals: HashMap<(u32, u32), Vec3> = HashMap::new();
        for tri in &triangles {
            let [a, b, c] = [
                vertices[tri[0] as usize],
                vertices[tri[1] as usize],
                vertices[tri[2] as usize],
            ];
            let raw = (b - a).cross(&(c - a));
            let norm = raw.norm();
            let n = if norm > 1e-300 {
                raw / norm
            } else {
                Vec3::zeros()
            };
            face_normals.push(n);
            // Angle-weighted accumulation at each corner.
            let corners = [a, b, c];
            for k in 0..3 {
                let p = corners[k];
                let q = corners[(k + 1) % 3];
                let r = corners[(k + 2) % 3];
                let u = q - p;
                let v = r - p;
                let denom = u.norm() * v.norm();
                if denom > 1e-300 {
                    let angle = (u.dot(&v) / denom).clamp(-1.0, 1.0).acos();
                    vertex_pseudonormals[tri[k] as usize] += n * angle;
                }
            }
            for (ia, ib) in [(tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])] {
                let key = (ia.min(ib), ia.max(ib));
                *edge_pseudonormals.entry(key).or_insert_with(Vec3::zeros) += n;
            }
        }

        let (nodes, order) = build_tree(&vertices, &triangles);

        Ok(Self {
            vertices,
            triangles,
            face_normals,
            vertex_pseudonormals,
            edge_pseudonormals,
            nodes,
            order,
        })
    }

    /// Signed distance via the AABB tree.
    pub fn signed_distance(&self, q: &Point3) -> f64 {
        let mut best = Best::none();
        let mut stack = vec![0u32];
        while let Some(id) = stack.pop() {
            let node = self.nodes[id as usize];
            if node.distance_sq_to(q) >= best.dist_sq {
                continue;
            }
            if node.is_leaf() {
                for k in node.start..node.start + node.count {
                    let t = self.order[k as usize] as usize;
                    self.consider(q, t, &mut best);
                }
            } else {
                // Visit the nearer child first for tighter pruning.
                let l = node.left;
                let r = node.right;
                let dl = self.nodes[l as usize].distance_sq_to(q);
                let dr = self.nodes[r as usize].distance_sq_to(q);
                if dl <= dr {
                    stack.push(r);
                    stack.push(l);
                } else {
                    stack.push(l);
                    stack.push(r);
                }
            }
        }
        self.finish(q, best)
    }

    /// Signed distance by scanning every triangle. Oracle for the tree path.
    pub fn signed_distance_brute(&self, q: &Point3) -> f64 {
        let mut best = Best::none();
        for t in 0..self.triangles.len() {
            self.consider(q, t, &mut best);
        }
        self.finish(q, best)
    }

    fn consider(&self, q: &Point3, t: usize, best: &mut Best) {
        let tri = self.triangles[t];
        let a = self.vertices[tri[0] as usize];
        let b = self.vertices[tri[1] as usize];
        let c = self.vertices[tri[2] as usize];
        let (point, feature) = closest_point_on_triangle(q, &a, &b, &c);
        let d2 = (q - point).norm_squared();
        if d2 < best.dist_sq {
            *best = Best {
                dist_sq: d2,
                triangle: t,
                point,
                feature,
            };
        }
    }

    fn finish(&self, q: &Point3, best: Best) -> f64 {
        let tri = self.triangles[best.triangle];
        let normal = match best.feature {
            Feature::Face => self.face_normals[best.triangle],
            Feature::Edge(e) => {
                let (ia, ib) = match e {
                    0 => (tri[0], tri[1]),
                    1 => (tri[1], tri[2]),
                    _ => (tri[2], tri[0]),
                };
                self.edge_pseudonormals[&(ia.min(ib), ia.max(ib))]
            }
            Feature::Vertex(v) => self.vertex_pseudonormals[tri[v] as usize],
        };
        let dist = best.dist_sq.sqrt();
        if (q - best.point).dot(&normal) >= 0.0 {
            dist
        } else {
            -dist
        }
    }
}

struct Best {
    dist_sq: f64,
    triangle: usize,
    point: Point3,
    feature: Feature,
}

impl Best {
    fn none() -> Self {
        Self {
            dist_sq: f64::INFINITY,
            triangle: 0,
            point: Point3::origin(),
            feature: Feature::Face,
        }
    }
}

fn build_tree(vertices: &[Point3], triangles: &[[u32; 3]]) -> (Vec<Node>, Vec<u32>) {
    let centroids: Vec<Vec3> = triangles
        .iter()
        .map(|t| {
            (vertices[t[0] as usize].coords
                + vertices[t[1] as usize].coords
                + vertices[t[2] as usize].coords)
                / 3.0
        })
        .collect();
    let mut order: Vec<u32> = (0..triangles.len() as u32).collect();
    let mut nodes = Vec::new();

    fn build(
        vertices: &[Point3],
        triangles: &[[u32; 3]],
        centroids: &[Vec3],
        order: &mut [u32],
        offset: usize,
        nodes: &mut Vec<Node>,
    ) -> u32 {
        let (min, max) = {
            let mut mn = Vec3::repeat(f64::INFINITY);
            let mut mx = Vec3::repeat(f64::NEG_INFINITY);
            for &t in order.iter() {
                for &i in &triangles[t as usize] {
                    let p = vertices[i as usize].coords;
                    mn = mn.inf(&p);
                    mx = mx.sup(&p);
                }
            }
            (mn, mx)
        };
        let id = nodes.len() as u32;
        nodes.push(Node {
            min,
            max,
            left: 0,
            right: 0,
            start: offset as u32,
            count: 0,
        });
        if order.len() <= LEAF_SIZE {
            nodes[id as usize].count = order.len() as u32;
            return id;
        }
        // Median split along the longest centroid axis.
        let mut cmin = Vec3::repeat(f64::INFINITY);
        let mut cmax = Vec3::repeat(f64::NEG_INFINITY);
        for &t in order.iter() {
            cmin = cmin.inf(&centroids[t as usize]);
            cmax = cmax.sup(&centroids[t as usize]);
        }
        let extent = cmax - cmin;
        let axis = if extent.x >= extent.y && extent.x >= extent.z {
            0
        } else if extent.y >= extent.z {
            1
        } else {
            2
        };
        let mid = order.len() / 2;
        order.select_nth_unstable_by(mid, |&a, &b| {
            centroids[a as usize][axis]
                .partial_cmp(&centroids[b as usize][axis])
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let (lo, hi) = order.split_at_mut(mid);
        let left = build(vertices, triangles, centroids, lo, offset, nodes);
        let right = build(vertices, triangles, centroids, hi, offset + mid, nodes);
        nodes[id as usize].left = left;
        nodes[id as usize].right = right;
        id
    }

    assert!(!order.is_empty(), "tree built over an empty mesh");
    build(vertices, triangles, &centroids, &mut order, 0, &mut nodes);
    (nodes, order)
}

/// Closest point on triangle (a, b, c) to `q`, with the feature it lies on
/// (Ericson, Real-Time Collision Detection, 5.1.5). Edges are numbered
/// 0: ab, 1: bc, 2: ca.
fn closest_point_on_triangle(q: &Point3, a: &Point3, b: &Point3, c: &Point3) -> (Point3, Feature) {
    let ab = b - a;
    let ac = c - a;
    let ap = q - a;

    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return (*a, Feature::Vertex(0));
    }

    let bp = q - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return (*b, Feature::Vertex(1));
    }

    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (Point3::from(a.coords + ab * v), Feature::Edge(0));
    }

    let cp = q - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return (*c, Feature::Vertex(2));
    }

    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (Point3::from(a.coords + ac * w), Feature::Edge(2));
    }

    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (Point3::from(b.coords + (c - b) * w), Feature::Edge(1));
    }

    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (Point3::from(a.coords + ab * v + ac * w), Feature::Face)
}

/// Convenience wrapper building a one-shot query structure.
pub fn signed_distance_to_mesh(q: &Point3, mesh: &TriangleMesh) -> Result<f64, MeshError> {
    Ok(MeshQuery::new(mesh)?.signed_distance(q))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meshing::icosphere;
    use approx::assert_abs_diff_eq;

    fn unit_cube() -> TriangleMesh {
        // Outward-wound unit cube.
        let v = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(1.0, 1.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
            Point3::new(0.0, 0.0, 1.0),
            Point3::new(1.0, 0.0, 1.0),
            Point3::new(1.0, 1.0, 1.0),
            Point3::new(0.0, 1.0, 1.0),
        ];
        let t = vec![
            [0, 2, 1],
            [0, 3, 2], // bottom (z=0, normal -z)
            [4, 5, 6],
            [4, 6, 7], // top
            [0, 1, 5],
            [0, 5, 4], // y=0
            [2, 3, 7],
            [2, 7, 6], // y=1
            [1, 2, 6],
            [1, 6, 5], // x=1
            [3, 0, 4],
            [3, 4, 7], // x=0
        ];
        TriangleMesh::new(v, t)
    }

    #[test]
    fn point_on_vertex_is_zero() {
        let mesh = unit_cube();
        let q = MeshQuery::new(&mesh).unwrap();
        assert_abs_diff_eq!(q.signed_distance(&Point3::new(0.0, 0.0, 0.0)), 0.0);
    }

    #[test]
    fn cube_center_is_inside() {
        let mesh = unit_cube();
        let q = MeshQuery::new(&mesh).unwrap();
        assert_abs_diff_eq!(
            q.signed_distance(&Point3::new(0.5, 0.5, 0.5)),
            -0.5,
            epsilon = 1e-12
        );
    }

    #[test]
    fn outside_faces_edges_and_corners() {
        let mesh = unit_cube();
        let q = MeshQuery::new(&mesh).unwrap();
        // Above a face.
        assert_abs_diff_eq!(
            q.signed_distance(&Point3::new(0.5, 0.5, 2.0)),
            1.0,
            epsilon = 1e-12
        );
        // Off an edge.
        let d = q.signed_distance(&Point3::new(-1.0, -1.0, 0.5));
        assert_abs_diff_eq!(d, (2.0f64).sqrt(), epsilon = 1e-12);
        // Off a corner.
        let d = q.signed_distance(&Point3::new(-1.0, -1.0, -1.0));
        assert_abs_diff_eq!(d, (3.0f64).sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn sphere_signed_distance_matches_analytic() {
        let mesh = icosphere(10.0, 3);
        let q = MeshQuery::new(&mesh).unwrap();
        assert!((q.signed_distance(&Point3::new(15.0, 0.0, 0.0)) - 5.0).abs() < 0.05);
        assert!((q.signed_distance(&Point3::new(2.0, 0.0, 0.0)) + 8.0).abs() < 0.05);
    }

    #[test]
    fn bvh_equals_brute_force_on_random_queries() {
        use rand::{Rng, SeedableRng};
        let mesh = icosphere(8.0, 2);
        let query = MeshQuery::new(&mesh).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..2000 {
            let p = Point3::new(
                rng.gen_range(-15.0..15.0),
                rng.gen_range(-15.0..15.0),
                rng.gen_range(-15.0..15.0),
            );
            let fast = query.signed_distance(&p);
            let brute = query.signed_distance_brute(&p);
            assert!(
                (fast - brute).abs() < 1e-9,
                "mismatch at {p:?}: {fast} vs {brute}"
            );
        }
    }

    #[test]
    fn empty_mesh_is_rejected() {
        let mesh = TriangleMesh::default();
        assert!(matches!(MeshQuery::new(&mesh), Err(MeshError::EmptyMesh)));
    }

    #[test]
    fn open_sheet_sign_follows_local_side() {
        // Single triangle in the z=0 plane, normal +z.
        let mesh = TriangleMesh::new(
            vec![
                Point3::new(0.0, 0.0, 0.0),
                Point3::new(2.0, 0.0, 0.0),
                Point3::new(0.0, 2.0, 0.0),
            ],
            vec![[0, 1, 2]],
        );
        let q = MeshQuery::new(&mesh).unwrap();
        assert!(q.signed_distance(&Point3::new(0.5, 0.5, 1.0)) > 0.0);
        assert!(q.signed_distance(&Point3::new(0.5, 0.5, -1.0)) < 0.0);
    }
}
