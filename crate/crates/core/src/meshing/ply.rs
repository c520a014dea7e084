//! ASCII PLY mesh I/O.
//!
//! Written files carry `x y z`, an optional `scalar_deviation` (float, mm)
//! and optional `red green blue` (uchar) per vertex, plus triangle faces.
//! The reader accepts any ASCII PLY whose vertex element contains x/y/z and
//! triangulated faces; unknown vertex properties are skipped.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::geom::Point3;

use super::{MeshError, TriangleMesh};

/// Write a mesh as ASCII PLY. `colors`, when given, must match the vertex
/// count; `mesh.scalar` is emitted as a `scalar_deviation` property.
pub fn write_ply(
    path: &Path,
    mesh: &TriangleMesh,
    colors: Option<&[[u8; 3]]>,
) -> Result<(), MeshError> {
    let io_err = |source| MeshError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(c) = colors {
        assert_eq!(c.len(), mesh.vertices.len(), "color count mismatch");
    }
    if let Some(s) = &mesh.scalar {
        assert_eq!(s.len(), mesh.vertices.len(), "scalar count mismatch");
    }
    let file = std::fs::File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "ply").map_err(io_err)?;
    writeln!(w, "format ascii 1.0").map_err(io_err)?;
    writeln!(w, "comment units mm").map_err(io_err)?;
    writeln!(w, "element vertex {}", mesh.vertices.len()).map_err(io_err)?;
    writeln!(w, "property float x").map_err(io_err)?;
    writeln!(w, "property float y").map_err(io_err)?;
    writeln!(w, "property float z").map_err(io_err)?;
    if mesh.scalar.is_some() {
        writeln!(w, "property float scalar_deviation").map_err(io_err)?;
    }
    if colors.is_some() {
        writeln!(w, "property uchar red").map_err(io_err)?;
        writeln!(w, "property uchar green").map_err(io_err)?;
        writeln!(w, "property uchar blue").map_err(io_err)?;
    }
    writeln!(w, "element face {}", mesh.triangles.len()).map_err(io_err)?;
    writeln!(w, "property list uchar int vertex_indices").map_err(io_err)?;
    writeln!(w, "end_header").map_err(io_err)?;

    for (i, v) in mesh.vertices.iter().enumerate() {
        write!(w, "{:.6} {:.6} {:.6}", v.x, v.y, v.z).map_err(io_err)?;
        if let Some(s) = &mesh.scalar {
            write!(w, " {:.6}", s[i]).map_err(io_err)?;
        }
        if let Some(c) = colors {
            write!(w, " {} {} {}", c[i][0], c[i][1], c[i][2]).map_err(io_err)?;
        }
        writeln!(w).map_err(io_err)?;
    }
    for t in &mesh.triangles {
        writeln!(w, "3 {} {} {}", t[0], t[1], t[2]).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Read an ASCII PLY triangle mesh. Restores `scalar_deviation` when present.
pub fn read_ply(path: &Path) -> Result<TriangleMesh, MeshError> {
    let io_err = |source| MeshError::Io {
        path: path.display().to_string(),
        source,
    };
    let fmt_err = |line: usize, msg: String| MeshError::PlyFormat {
        path: path.display().to_string(),
        line,
        msg,
    };
    let file = std::fs::File::open(path).map_err(io_err)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let mut next_line = |expect: &str| -> Result<(usize, String), MeshError> {
        match lines.next() {
            Some((n, Ok(l))) => Ok((n + 1, l)),
            Some((_, Err(e))) => Err(MeshError::Io {
                path: path.display().to_string(),
                source: e,
            }),
            None => Err(fmt_err(
                0,
                format!("unexpected end of file, expected {expect}"),
            )),
        }
    };

    let (n, magic) = next_line("ply magic")?;
    if magic.trim() != "ply" {
        return Err(fmt_err(n, "missing `ply` magic".into()));
    }

    let mut vertex_count = 0usize;
    let mut face_count = 0usize;
    // Vertex property names in declaration order; unknown ones are skipped
    // positionally when reading rows.
    let mut vertex_props: Vec<String> = Vec::new();
    let mut current_element: Option<String> = None;
    loop {
        let (n, line) = next_line("header")?;
        let line = line.trim().to_string();
        if line == "end_header" {
            break;
        }
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("format") => {
                if parts.next() != Some("ascii") {
                    return Err(fmt_err(n, "only ascii format supported".into()));
                }
            }
            Some("comment") | Some("obj_info") => {}
            Some("element") => {
                let name = parts
                    .next()
                    .ok_or_else(|| fmt_err(n, "element missing name".into()))?;
                let count: usize = parts
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| fmt_err(n, "element missing count".into()))?;
                match name {
                    "vertex" => vertex_count = count,
                    "face" => face_count = count,
                    _ if count != 0 => {
                        return Err(fmt_err(n, format!("unsupported element `{name}`")))
                    }
                    _ => {}
                }
                current_element = Some(name.to_string());
            }
            Some("property") => {
                if current_element.as_deref() == Some("vertex") {
                    let rest: Vec<&str> = parts.collect();
                    let prop_name = rest
                        .last()
                        .ok_or_else(|| fmt_err(n, "property missing name".into()))?;
                    if rest.first() == Some(&"list") {
                        return Err(fmt_err(n, "list property on vertex unsupported".into()));
                    }
                    vertex_props.push((*prop_name).to_string());
                }
            }
            Some(other) => return Err(fmt_err(n, format!("unknown header line `{other}`"))),
            None => {}
        }
    }

    let find = |name: &str| vertex_props.iter().position(|p| p == name);
    let (ix, iy, iz) = match (find("x"), find("y"), find("z")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(fmt_err(0, "vertex element lacks x/y/z".into())),
    };
    let iscalar = find("scalar_deviation");

    let mut vertices = Vec::with_capacity(vertex_count);
    let mut scalar = iscalar.map(|_| Vec::with_capacity(vertex_count));
    for _ in 0..vertex_count {
        let (n, line) = next_line("vertex row")?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < vertex_props.len() {
            return Err(fmt_err(
                n,
                format!(
                    "expected {} vertex fields, found {}",
                    vertex_props.len(),
                    fields.len()
                ),
            ));
        }
        let parse = |idx: usize| -> Result<f64, MeshError> {
            fields[idx]
                .parse::<f64>()
                .map_err(|_| fmt_err(n, format!("invalid number `{}`", fields[idx])))
        };
        vertices.push(Point3::new(parse(ix)?, parse(iy)?, parse(iz)?));
        if let (Some(values), Some(idx)) = (scalar.as_mut(), iscalar) {
            values.push(parse(idx)?);
        }
    }

    let mut triangles = Vec::with_capacity(face_count);
    for _ in 0..face_count {
        let (n, line) = next_line("face row")?;
        let mut it = line.split_whitespace();
        let arity: usize = it
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| fmt_err(n, "face row missing arity".into()))?;
        if arity != 3 {
            return Err(fmt_err(
                n,
                format!("only triangles supported, found {arity}-gon"),
            ));
        }
        let mut tri = [0u32; 3];
        for slot in &mut tri {
            *slot = it
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| fmt_err(n, "face row truncated".into()))?;
        }
        triangles.push(tri);
    }

    let mut mesh = TriangleMesh::new(vertices, triangles);
    mesh.scalar = scalar;
    mesh.validate()?;
    Ok(mesh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meshing::icosphere;
    use approx::assert_abs_diff_eq;

    #[test]
    fn roundtrip_with_scalar_and_colors() {
        let mut mesh = icosphere(5.0, 1);
        mesh.scalar = Some((0..mesh.vertices.len()).map(|i| i as f64 * 0.01).collect());
        let colors: Vec<[u8; 3]> = (0..mesh.vertices.len())
            .map(|i| [(i % 256) as u8, 0, 255])
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mesh.ply");
        write_ply(&path, &mesh, Some(&colors)).unwrap();
        let back = read_ply(&path).unwrap();
        assert_eq!(back.vertices.len(), mesh.vertices.len());
        assert_eq!(back.triangles, mesh.triangles);
        let s = back.scalar.unwrap();
        assert_abs_diff_eq!(s[3], 0.03, epsilon = 1e-6);
        for (a, b) in mesh.vertices.iter().zip(&back.vertices) {
            assert!((a - b).norm() < 1e-5);
        }
    }

    #[test]
    fn roundtrip_plain() {
        let mesh = icosphere(2.0, 0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plain.ply");
        write_ply(&path, &mesh, None).unwrap();
        let back = read_ply(&path).unwrap();
        assert!(back.scalar.is_none());
        assert_eq!(back.triangles.len(), 20);
    }

    #[test]
    fn rejects_non_triangle_faces() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("quad.ply");
        std::fs::write(
            &path,
            "ply\nformat ascii 1.0\nelement vertex 4\nproperty float x\nproperty float y\nproperty float z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n",
        )
        .unwrap();
        assert!(matches!(read_ply(&path), Err(MeshError::PlyFormat { .. })));
    }

    #[test]
    fn rejects_missing_file() {
        assert!(matches!(
            read_ply(Path::new("/nonexistent/mesh.ply")),
            Err(MeshError::Io { .. })
        ));
    }
}
