//! Triangle mesh representation, validation, I/O, and remeshing-style
//! augmentation.
//!
//! Meshes are indexed triangle soups; nothing here assumes watertightness.
//! Per-triangle normals are always derived from winding (right-hand rule),
//! never stored, so file-supplied normals are ignored on load.

mod augment;
mod decimate;
mod io;
pub mod primitives;

pub use augment::{
    generate_augmentations, paper_shape_plan, AugmentStep, AugmentationPlan, VariantOutcome,
    VariantSpec, PAPER_SHAPE_VARIANTS,
};
pub use decimate::decimate;
pub use io::{detect_format, load_mesh, load_mesh_with, write_mesh, LoadOptions, MeshFormat};

use crate::geom::{Aabb, Vec3};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("{format} parse error at {location}: {message}")]
    Parse {
        format: &'static str,
        /// `line N` for text formats, `byte N` for binary.
        location: String,
        message: String,
    },
    #[error("mesh contains no triangles")]
    Empty,
    #[error("vertex {index} has a non-finite coordinate")]
    NonFinite { index: usize },
    #[error("triangle {triangle} references vertex {index} but the mesh has {vertex_count} vertices")]
    IndexOutOfBounds {
        triangle: usize,
        index: u32,
        vertex_count: usize,
    },
    #[error("triangle {triangle} is degenerate (repeated vertex or zero area)")]
    Degenerate { triangle: usize },
    #[error("decimation target {target} unreachable: stalled at {achieved} triangles")]
    DecimateUnreachable { target: usize, achieved: usize },
    #[error("decimation target must be at least 4, got {0}")]
    DecimateTargetTooSmall(usize),
    #[error("mesh has {0} triangles which exceeds the STL u32 count field")]
    TooManyTriangles(usize),
    #[error("unknown mesh format for path {0}")]
    UnknownFormat(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Indexed triangle mesh. Invariants (enforced by [`TriangleMesh::new`]):
/// every index is in range, no triangle repeats a vertex index, and all
/// coordinates are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    vertices: Vec<Vec3>,
    triangles: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[u32; 3]>) -> Result<Self, MeshError> {
        for (i, v) in vertices.iter().enumerate() {
            if !v.is_finite() {
                return Err(MeshError::NonFinite { index: i });
            }
        }
        let n = vertices.len();
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
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(MeshError::Degenerate { triangle: t });
            }
        }
        Ok(TriangleMesh { vertices, triangles })
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[u32; 3]] {
        &self.triangles
    }

    pub fn triangle_count(&self) -> usize {
        self.triangles.len()
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    #[inline]
    pub fn triangle_positions(&self, t: usize) -> [Vec3; 3] {
        let [a, b, c] = self.triangles[t];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    /// Unit normal from winding (right-hand rule), `None` for zero-area
    /// triangles.
    pub fn triangle_normal(&self, t: usize) -> Option<Vec3> {
        let [a, b, c] = self.triangle_positions(t);
        (b - a).cross(c - a).normalized()
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangle_positions(t);
        0.5 * (b - a).cross(c - a).norm()
    }

    pub fn bounding_box(&self) -> Aabb {
        Aabb::from_points(self.vertices.iter().copied())
    }

    /// Mutates vertex positions in place; indices untouched.
    pub fn map_vertices(&mut self, mut f: impl FnMut(usize, Vec3) -> Vec3) {
        for (i, v) in self.vertices.iter_mut().enumerate() {
            *v = f(i, *v);
        }
    }

    /// Area-weighted vertex normals (zero where all incident triangles are
    /// degenerate).
    pub fn vertex_normals(&self) -> Vec<Vec3> {
        let mut normals = vec![Vec3::ZERO; self.vertices.len()];
        for t in 0..self.triangles.len() {
            let [a, b, c] = self.triangle_positions(t);
            let n = (b - a).cross(c - a); // length = 2 * area
            for &ix in &self.triangles[t] {
                normals[ix as usize] += n;
            }
        }
        normals
            .into_iter()
            .map(|n| n.normalized().unwrap_or(Vec3::ZERO))
            .collect()
    }
}

/// Summary statistics; `watertight` requires every edge shared by exactly two
/// triangles with consistent winding and no boundary edges.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshStats {
    pub vertex_count: usize,
    pub triangle_count: usize,
    pub bbox: Aabb,
    pub surface_area: f64,
    pub watertight: bool,
    pub boundary_edge_count: usize,
}

pub fn compute_stats(mesh: &TriangleMesh) -> MeshStats {
    // Per undirected edge: traversals in canonical (min,max) direction and
    // against it. Closed 2-manifold with consistent winding means every edge
    // is traversed exactly once each way.
    let mut edges: HashMap<(u32, u32), (u32, u32)> = HashMap::new();
    for tri in mesh.triangles() {
        for k in 0..3 {
            let a = tri[k];
            let b = tri[(k + 1) % 3];
            let key = (a.min(b), a.max(b));
            let e = edges.entry(key).or_insert((0, 0));
            if a < b {
                e.0 += 1;
            } else {
                e.1 += 1;
            }
        }
    }
    let mut boundary = 0usize;
    let mut manifold_consistent = true;
    for &(fwd, rev) in edges.values() {
        let total = fwd + rev;
        if total == 1 {
            boundary += 1;
        }
        if !(fwd == 1 && rev == 1) {
            manifold_consistent = false;
        }
    }
    let surface_area: f64 = (0..mesh.triangle_count()).map(|t| mesh.triangle_area(t)).sum();
    MeshStats {
        vertex_count: mesh.vertex_count(),
        triangle_count: mesh.triangle_count(),
        bbox: mesh.bounding_box(),
        surface_area,
        watertight: boundary == 0 && manifold_consistent && !mesh.is_empty(),
        boundary_edge_count: boundary,
    }
}

/// Merges vertices closer than `tolerance` (grid quantization), drops
/// triangles that collapse, and re-orients winding consistently per connected
/// component (outward for closed components, by signed volume).
pub fn weld(mesh: &TriangleMesh, tolerance: f64) -> Result<TriangleMesh, MeshError> {
    assert!(tolerance > 0.0, "weld tolerance must be positive");
    let quant = |v: f64| (v / tolerance).round() as i64;
    let mut map: HashMap<(i64, i64, i64), u32> = HashMap::new();
    let mut new_vertices: Vec<Vec3> = Vec::new();
    let mut remap = vec![0u32; mesh.vertex_count()];
    for (i, v) in mesh.vertices().iter().enumerate() {
        let key = (quant(v.x), quant(v.y), quant(v.z));
        let ix = *map.entry(key).or_insert_with(|| {
            new_vertices.push(*v);
            (new_vertices.len() - 1) as u32
        });
        remap[i] = ix;
    }
    let mut new_triangles = Vec::with_capacity(mesh.triangle_count());
    for tri in mesh.triangles() {
        let t = [
            remap[tri[0] as usize],
            remap[tri[1] as usize],
            remap[tri[2] as usize],
        ];
        if t[0] != t[1] && t[1] != t[2] && t[0] != t[2] {
            new_triangles.push(t);
        }
    }
    let welded = TriangleMesh::new(new_vertices, new_triangles)?;
    Ok(repair_winding(&welded))
}

/// Flood-fills orientation across shared edges so neighbors wind
/// consistently; closed components with negative signed volume are flipped
/// outward.
pub fn repair_winding(mesh: &TriangleMesh) -> TriangleMesh {
    let mut triangles: Vec<[u32; 3]> = mesh.triangles().to_vec();
    let nt = triangles.len();
    // Undirected edge -> incident triangles.
    let mut edge_tris: HashMap<(u32, u32), Vec<usize>> = HashMap::new();
    for (t, tri) in triangles.iter().enumerate() {
        for k in 0..3 {
            let a = tri[k];
            let b = tri[(k + 1) % 3];
            edge_tris.entry((a.min(b), a.max(b))).or_default().push(t);
        }
    }
    let directed = |tri: &[u32; 3], a: u32, b: u32| -> bool {
        // true if tri traverses a->b in its winding order
        (0..3).any(|k| tri[k] == a && tri[(k + 1) % 3] == b)
    };
    let mut visited = vec![false; nt];
    let mut component = Vec::new();
    for seed in 0..nt {
        if visited[seed] {
            continue;
        }
        component.clear();
        visited[seed] = true;
        let mut queue = vec![seed];
        while let Some(t) = queue.pop() {
            component.push(t);
            let tri = triangles[t];
            for k in 0..3 {
                let a = tri[k];
                let b = tri[(k + 1) % 3];
                let nbrs = &edge_tris[&(a.min(b), a.max(b))];
                if nbrs.len() != 2 {
                    continue; // boundary or non-manifold: no propagation
                }
                for &u in nbrs {
                    if u == t || visited[u] {
                        continue;
                    }
                    // Consistent winding: the neighbor must traverse b->a.
                    if directed(&triangles[u], a, b) {
                        triangles[u].swap(1, 2);
                    }
                    visited[u] = true;
                    queue.push(u);
                }
            }
        }
        // Orient closed components outward via signed volume.
        let signed_volume: f64 = component
            .iter()
            .map(|&t| {
                let [p0, p1, p2] = [
                    mesh.vertices()[triangles[t][0] as usize],
                    mesh.vertices()[triangles[t][1] as usize],
                    mesh.vertices()[triangles[t][2] as usize],
                ];
                p0.dot(p1.cross(p2)) / 6.0
            })
            .sum();
        let closed = component.iter().all(|&t| {
            let tri = triangles[t];
            (0..3).all(|k| {
                let a = tri[k];
                let b = tri[(k + 1) % 3];
                edge_tris[&(a.min(b), a.max(b))].len() == 2
            })
        });
        if closed && signed_volume < 0.0 {
            for &t in &component {
                triangles[t].swap(1, 2);
            }
        }
    }
    TriangleMesh::new(mesh.vertices().to_vec(), triangles)
        .expect("winding repair preserves validity")
}

/// Midpoint 1-to-4 subdivision, `levels` times. Shared edge midpoints are
/// merged, so closed meshes stay closed. Vertex positions are not smoothed.
pub fn subdivide(mesh: &TriangleMesh, levels: u32) -> TriangleMesh {
    let mut current = mesh.clone();
    for _ in 0..levels {
        let mut vertices = current.vertices().to_vec();
        let mut midpoints: HashMap<(u32, u32), u32> = HashMap::new();
        let mut triangles = Vec::with_capacity(current.triangle_count() * 4);
        let mut midpoint = |a: u32, b: u32, vertices: &mut Vec<Vec3>| -> u32 {
            let key = (a.min(b), a.max(b));
            *midpoints.entry(key).or_insert_with(|| {
                let m = (vertices[a as usize] + vertices[b as usize]) * 0.5;
                vertices.push(m);
                (vertices.len() - 1) as u32
            })
        };
        for tri in current.triangles() {
            let [a, b, c] = *tri;
            let ab = midpoint(a, b, &mut vertices);
            let bc = midpoint(b, c, &mut vertices);
            let ca = midpoint(c, a, &mut vertices);
            triangles.push([a, ab, ca]);
            triangles.push([ab, b, bc]);
            triangles.push([ca, bc, c]);
            triangles.push([ab, bc, ca]);
        }
        current = TriangleMesh::new(vertices, triangles).expect("subdivision preserves validity");
    }
    current
}
