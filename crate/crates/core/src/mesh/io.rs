//! STL (binary and ASCII) and Wavefront OBJ readers/writers.
//!
//! Loading never trusts file-supplied normals; they are recomputed from
//! winding on demand. Vertex welding is not applied on load — STL soups stay
//! soups until [`super::weld`] is called explicitly.

use super::{MeshError, TriangleMesh};
use crate::geom::Vec3;
use std::fs;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    StlBinary,
    StlAscii,
    Obj,
}

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    /// With `true`, a degenerate triangle (repeated position or zero area)
    /// is a hard error; otherwise such triangles are dropped and counted.
    pub strict_degenerate: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            strict_degenerate: false,
        }
    }
}

/// Picks the format from the extension, sniffing STL headers to tell ASCII
/// from binary ("solid" prefix alone is not trusted).
pub fn detect_format(path: &Path, bytes: &[u8]) -> Result<MeshFormat, MeshError> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase());
    match ext.as_deref() {
        Some("obj") => Ok(MeshFormat::Obj),
        Some("stl") => {
            let head = &bytes[..bytes.len().min(512)];
            let looks_ascii = head.starts_with(b"solid")
                && std::str::from_utf8(head)
                    .map(|s| s.contains("facet") || s.trim_end() == "solid" || s.contains("endsolid"))
                    .unwrap_or(false);
            if looks_ascii {
                Ok(MeshFormat::StlAscii)
            } else {
                Ok(MeshFormat::StlBinary)
            }
        }
        _ => Err(MeshError::UnknownFormat(path.display().to_string())),
    }
}

pub fn load_mesh(path: &Path, format: Option<MeshFormat>) -> Result<TriangleMesh, MeshError> {
    load_mesh_with(path, format, LoadOptions::default()).map(|(m, _)| m)
}

/// Returns the mesh plus the number of degenerate triangles dropped.
pub fn load_mesh_with(
    path: &Path,
    format: Option<MeshFormat>,
    options: LoadOptions,
) -> Result<(TriangleMesh, usize), MeshError> {
    let bytes = fs::read(path)?;
    let format = match format {
        Some(f) => f,
        None => detect_format(path, &bytes)?,
    };
    let (vertices, triangles) = match format {
        MeshFormat::StlBinary => parse_stl_binary(&bytes)?,
        MeshFormat::StlAscii => parse_stl_ascii(&bytes)?,
        MeshFormat::Obj => parse_obj(&bytes)?,
    };
    finish_load(vertices, triangles, options)
}

fn finish_load(
    vertices: Vec<Vec3>,
    triangles: Vec<[u32; 3]>,
    options: LoadOptions,
) -> Result<(TriangleMesh, usize), MeshError> {
    if triangles.is_empty() {
        return Err(MeshError::Empty);
    }
    for (i, v) in vertices.iter().enumerate() {
        if !v.is_finite() {
            return Err(MeshError::NonFinite { index: i });
        }
    }
    let n = vertices.len();
    let mut kept = Vec::with_capacity(triangles.len());
    let mut dropped = 0usize;
    for (t, tri) in triangles.iter().enumerate() {
        for &ix in tri {
            if ix as usize >= n {
                return Err(MeshError::IndexOutOfBounds {
                    triangle: t,
                    index: ix,
                    vertex_count: n,
                });
            }
        }
        let degenerate = {
            let [a, b, c] = [
                vertices[tri[0] as usize],
                vertices[tri[1] as usize],
                vertices[tri[2] as usize],
            ];
            tri[0] == tri[1]
                || tri[1] == tri[2]
                || tri[0] == tri[2]
                || (b - a).cross(c - a).norm_squared() == 0.0
        };
        if degenerate {
            if options.strict_degenerate {
                return Err(MeshError::Degenerate { triangle: t });
            }
            dropped += 1;
        } else {
            kept.push(*tri);
        }
    }
    if kept.is_empty() {
        return Err(MeshError::Empty);
    }
    let mesh = TriangleMesh::new(vertices, kept)?;
    Ok((mesh, dropped))
}

const STL_HEADER_LEN: usize = 80;
const STL_RECORD_LEN: usize = 50; // 12 f32 + u16 attribute

fn parse_stl_binary(bytes: &[u8]) -> Result<(Vec<Vec3>, Vec<[u32; 3]>), MeshError> {
    let err = |offset: usize, message: &str| MeshError::Parse {
        format: "binary STL",
        location: format!("byte {offset}"),
        message: message.to_string(),
    };
    if bytes.len() < STL_HEADER_LEN + 4 {
        return Err(err(bytes.len(), "file shorter than the 84-byte STL prelude"));
    }
    let count = u32::from_le_bytes(bytes[STL_HEADER_LEN..STL_HEADER_LEN + 4].try_into().unwrap());
    let expected = STL_HEADER_LEN + 4 + count as usize * STL_RECORD_LEN;
    if bytes.len() < expected {
        return Err(err(
            bytes.len(),
            &format!(
                "declared {count} triangles ({expected} bytes) but file has {} bytes",
                bytes.len()
            ),
        ));
    }
    let mut vertices = Vec::with_capacity(count as usize * 3);
    let mut triangles = Vec::with_capacity(count as usize);
    for t in 0..count as usize {
        let rec = STL_HEADER_LEN + 4 + t * STL_RECORD_LEN;
        // skip the 12-byte stored normal; normals are derived from winding
        for k in 0..3 {
            let off = rec + 12 + k * 12;
            let read = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as f64;
            vertices.push(Vec3::new(read(off), read(off + 4), read(off + 8)));
        }
        let base = (t * 3) as u32;
        triangles.push([base, base + 1, base + 2]);
    }
    Ok((vertices, triangles))
}

fn parse_stl_ascii(bytes: &[u8]) -> Result<(Vec<Vec3>, Vec<[u32; 3]>), MeshError> {
    let err = |line: usize, message: String| MeshError::Parse {
        format: "ASCII STL",
        location: format!("line {line}"),
        message,
    };
    let text = std::str::from_utf8(bytes)
        .map_err(|e| err(0, format!("not valid UTF-8: {e}")))?;
    let mut vertices: Vec<Vec3> = Vec::new();
    let mut triangles: Vec<[u32; 3]> = Vec::new();
    let mut facet: Vec<Vec3> = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line_no = ln + 1;
        let line = raw.trim();
        let mut words = line.split_whitespace();
        match words.next() {
            Some("vertex") => {
                let mut coord = [0.0f64; 3];
                for c in coord.iter_mut() {
                    let w = words
                        .next()
                        .ok_or_else(|| err(line_no, "vertex needs 3 coordinates".into()))?;
                    *c = w
                        .parse::<f64>()
                        .map_err(|e| err(line_no, format!("bad coordinate {w:?}: {e}")))?;
                }
                facet.push(Vec3::new(coord[0], coord[1], coord[2]));
                if facet.len() > 3 {
                    return Err(err(line_no, "more than 3 vertices in a facet".into()));
                }
            }
            Some("endfacet") => {
                if facet.len() != 3 {
                    return Err(err(
                        line_no,
                        format!("facet closed with {} vertices", facet.len()),
                    ));
                }
                let base = vertices.len() as u32;
                vertices.extend(facet.drain(..));
                triangles.push([base, base + 1, base + 2]);
            }
            // "solid", "facet", "outer", "endloop", "endsolid", blank
            _ => {}
        }
    }
    if !facet.is_empty() {
        return Err(err(text.lines().count(), "unterminated facet".into()));
    }
    Ok((vertices, triangles))
}

fn parse_obj(bytes: &[u8]) -> Result<(Vec<Vec3>, Vec<[u32; 3]>), MeshError> {
    let err = |line: usize, message: String| MeshError::Parse {
        format: "OBJ",
        location: format!("line {line}"),
        message,
    };
    let text = std::str::from_utf8(bytes)
        .map_err(|e| err(0, format!("not valid UTF-8: {e}")))?;
    let mut vertices: Vec<Vec3> = Vec::new();
    let mut triangles: Vec<[u32; 3]> = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line_no = ln + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut words = line.split_whitespace();
        match words.next() {
            Some("v") => {
                let mut coord = [0.0f64; 3];
                for c in coord.iter_mut() {
                    let w = words
                        .next()
                        .ok_or_else(|| err(line_no, "v needs at least 3 coordinates".into()))?;
                    *c = w
                        .parse::<f64>()
                        .map_err(|e| err(line_no, format!("bad coordinate {w:?}: {e}")))?;
                }
                vertices.push(Vec3::new(coord[0], coord[1], coord[2]));
            }
            Some("f") => {
                let mut face: Vec<u32> = Vec::new();
                for w in words {
                    // forms: v, v/vt, v//vn, v/vt/vn; 1-based, negatives count
                    // from the end of the current vertex list
                    let vtok = w.split('/').next().unwrap_or("");
                    let raw_ix: i64 = vtok
                        .parse()
                        .map_err(|e| err(line_no, format!("bad face index {w:?}: {e}")))?;
                    let resolved: i64 = if raw_ix > 0 {
                        raw_ix - 1
                    } else if raw_ix < 0 {
                        vertices.len() as i64 + raw_ix
                    } else {
                        return Err(err(line_no, "face index 0 is not valid in OBJ".into()));
                    };
                    if resolved < 0 || resolved as usize >= vertices.len() {
                        return Err(err(
                            line_no,
                            format!("face index {raw_ix} out of range (have {} vertices)", vertices.len()),
                        ));
                    }
                    face.push(resolved as u32);
                }
                if face.len() < 3 {
                    return Err(err(line_no, format!("face with {} vertices", face.len())));
                }
                for k in 1..face.len() - 1 {
                    triangles.push([face[0], face[k], face[k + 1]]);
                }
            }
            _ => {} // vn, vt, o, g, s, mtllib, usemtl...
        }
    }
    Ok((vertices, triangles))
}

pub fn write_mesh(mesh: &TriangleMesh, path: &Path, format: MeshFormat) -> Result<(), MeshError> {
    let mut out: Vec<u8> = Vec::new();
    match format {
        MeshFormat::StlBinary => write_stl_binary(mesh, &mut out)?,
        MeshFormat::StlAscii => write_stl_ascii(mesh, &mut out)?,
        MeshFormat::Obj => write_obj(mesh, &mut out)?,
    }
    fs::write(path, out)?;
    Ok(())
}

fn write_stl_binary(mesh: &TriangleMesh, out: &mut Vec<u8>) -> Result<(), MeshError> {
    let count = mesh.triangle_count();
    if count > u32::MAX as usize {
        return Err(MeshError::TooManyTriangles(count));
    }
    out.extend_from_slice(&[0u8; STL_HEADER_LEN]);
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for t in 0..count {
        let n = mesh.triangle_normal(t).unwrap_or(Vec3::ZERO);
        for v in [n.x, n.y, n.z] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for p in mesh.triangle_positions(t) {
            for v in [p.x, p.y, p.z] {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out.extend_from_slice(&0u16.to_le_bytes());
    }
    Ok(())
}

fn write_stl_ascii(mesh: &TriangleMesh, out: &mut Vec<u8>) -> Result<(), MeshError> {
    writeln!(out, "solid mesh").unwrap();
    for t in 0..mesh.triangle_count() {
        let n = mesh.triangle_normal(t).unwrap_or(Vec3::ZERO);
        writeln!(out, "  facet normal {:e} {:e} {:e}", n.x as f32, n.y as f32, n.z as f32).unwrap();
        writeln!(out, "    outer loop").unwrap();
        for p in mesh.triangle_positions(t) {
            writeln!(out, "      vertex {:e} {:e} {:e}", p.x as f32, p.y as f32, p.z as f32)
                .unwrap();
        }
        writeln!(out, "    endloop").unwrap();
        writeln!(out, "  endfacet").unwrap();
    }
    writeln!(out, "endsolid mesh").unwrap();
    Ok(())
}

fn write_obj(mesh: &TriangleMesh, out: &mut Vec<u8>) -> Result<(), MeshError> {
    for v in mesh.vertices() {
        // 17 significant digits round-trips f64 exactly
        writeln!(out, "v {:.17e} {:.17e} {:.17e}", v.x, v.y, v.z).unwrap();
    }
    for tri in mesh.triangles() {
        writeln!(out, "f {} {} {}", tri[0] + 1, tri[1] + 1, tri[2] + 1).unwrap();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::primitives::{icosphere, unit_cube};
    use crate::mesh::{compute_stats, generate_augmentations, AugmentStep, AugmentationPlan, VariantSpec};
    use tempfile::tempdir;

    #[test]
    fn single_triangle_ascii_stl() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("tri.stl");
        std::fs::write(
            &path,
            "solid t\n facet normal 0 0 1\n  outer loop\n   vertex 0 0 0\n   vertex 1 0 0\n   vertex 0 1 0\n  endloop\n endfacet\nendsolid t\n",
        )
        .unwrap();
        let mesh = load_mesh(&path, None).unwrap();
        assert_eq!(mesh.vertex_count(), 3);
        assert_eq!(mesh.triangle_count(), 1);
        assert_eq!(mesh.triangle_normal(0).unwrap(), Vec3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn truncated_binary_stl_reports_offset() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("trunc.stl");
        let mut bytes = vec![1u8; 80]; // non-"solid" header
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 50]); // only one of two records
        std::fs::write(&path, &bytes).unwrap();
        let err = load_mesh(&path, None).unwrap_err();
        match err {
            MeshError::Parse { location, message, .. } => {
                assert_eq!(location, format!("byte {}", 80 + 4 + 50));
                assert!(message.contains("declared 2 triangles"), "{message}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn unit_cube_obj_watertight() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("cube.obj");
        // Hand-built cube with 1-based indices and consistent outward winding.
        let obj = "\
v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nv 0 0 1\nv 1 0 1\nv 1 1 1\nv 0 1 1\n\
f 1 3 2\nf 1 4 3\nf 5 6 7\nf 5 7 8\nf 1 2 6\nf 1 6 5\nf 4 8 7\nf 4 7 3\nf 1 5 8\nf 1 8 4\nf 2 3 7\nf 2 7 6\n";
        std::fs::write(&path, obj).unwrap();
        let mesh = load_mesh(&path, None).unwrap();
        let stats = compute_stats(&mesh);
        assert!(stats.watertight);
        assert!((stats.surface_area - 6.0).abs() < 1e-12);
    }

    #[test]
    fn obj_negative_and_slash_indices() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("neg.obj");
        std::fs::write(&path, "v 0 0 0\nv 1 0 0\nv 0 1 0\nf -3/1/1 -2//2 -1\n").unwrap();
        let mesh = load_mesh(&path, None).unwrap();
        assert_eq!(mesh.triangles()[0], [0, 1, 2]);
    }

    #[test]
    fn stl_binary_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("cube.stl");
        let cube = unit_cube();
        write_mesh(&cube, &path, MeshFormat::StlBinary).unwrap();
        let loaded = load_mesh(&path, None).unwrap();
        assert_eq!(loaded.triangle_count(), cube.triangle_count());
        let s1 = compute_stats(&cube);
        let s2 = compute_stats(&loaded);
        assert_eq!(s1.bbox, s2.bbox);
        assert!((s1.surface_area - s2.surface_area).abs() < 1e-9);
    }

    #[test]
    fn obj_round_trip_of_jittered_icosphere() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("jit.obj");
        let sphere = icosphere(2);
        let plan = AugmentationPlan {
            variants: vec![VariantSpec {
                steps: vec![AugmentStep::Jitter {
                    sigma_frac: 0.002,
                    seed: 9,
                }],
                weight: 1.0,
            }],
        };
        let jittered = generate_augmentations(&sphere, &plan)
            .pop()
            .unwrap()
            .outcome
            .unwrap();
        write_mesh(&jittered.0, &path, MeshFormat::Obj).unwrap();
        let loaded = load_mesh(&path, None).unwrap();
        let diag = jittered.0.bounding_box().diagonal();
        let max_dev = jittered
            .0
            .vertices()
            .iter()
            .zip(loaded.vertices())
            .map(|(a, b)| (*a - *b).norm())
            .fold(0.0f64, f64::max);
        assert!(max_dev < 1e-6 * diag, "max deviation {max_dev}");
    }

    #[test]
    fn ascii_stl_round_trip_f32_tolerance() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("s.stl");
        let sphere = icosphere(1);
        write_mesh(&sphere, &path, MeshFormat::StlAscii).unwrap();
        let loaded = load_mesh(&path, None).unwrap();
        assert_eq!(loaded.triangle_count(), sphere.triangle_count());
        for t in 0..sphere.triangle_count() {
            let a = sphere.triangle_positions(t);
            let b = loaded.triangle_positions(t);
            for k in 0..3 {
                assert!((a[k] - b[k]).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn degenerate_triangles_dropped_or_strict() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("degen.obj");
        std::fs::write(
            &path,
            "v 0 0 0\nv 1 0 0\nv 0 1 0\nv 2 0 0\nf 1 2 3\nf 1 2 4\n", // second face has zero area
        )
        .unwrap();
        let (mesh, dropped) = load_mesh_with(&path, None, LoadOptions::default()).unwrap();
        assert_eq!(mesh.triangle_count(), 1);
        assert_eq!(dropped, 1);
        let err = load_mesh_with(&path, None, LoadOptions { strict_degenerate: true }).unwrap_err();
        assert!(matches!(err, MeshError::Degenerate { triangle: 1 }));
    }
}
