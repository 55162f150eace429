//! Procedural meshes used by tests and the synthetic data generator.

use super::TriangleMesh;
use crate::geom::Vec3;

/// Axis-aligned unit cube [0,1]^3, 8 vertices, 12 triangles, outward winding.
pub fn unit_cube() -> TriangleMesh {
    cuboid(Vec3::ZERO, Vec3::new(1.0, 1.0, 1.0))
}

/// Axis-aligned box between two corners, outward winding.
pub fn cuboid(min: Vec3, max: Vec3) -> TriangleMesh {
    let v = vec![
        Vec3::new(min.x, min.y, min.z), // 0
        Vec3::new(max.x, min.y, min.z), // 1
        Vec3::new(max.x, max.y, min.z), // 2
        Vec3::new(min.x, max.y, min.z), // 3
        Vec3::new(min.x, min.y, max.z), // 4
        Vec3::new(max.x, min.y, max.z), // 5
        Vec3::new(max.x, max.y, max.z), // 6
        Vec3::new(min.x, max.y, max.z), // 7
    ];
    let t = vec![
        // -z
        [0, 2, 1],
        [0, 3, 2],
        // +z
        [4, 5, 6],
        [4, 6, 7],
        // -y
        [0, 1, 5],
        [0, 5, 4],
        // +y
        [3, 7, 6],
        [3, 6, 2],
        // -x
        [0, 4, 7],
        [0, 7, 3],
        // +x
        [1, 2, 6],
        [1, 6, 5],
    ];
    TriangleMesh::new(v, t).expect("cuboid is valid")
}

/// Unit icosphere centered at the origin: icosahedron subdivided `level`
/// times with vertices projected to the unit sphere. Triangle count is
/// `20 * 4^level` (level 3 gives the 1280-face sphere used in oracles).
pub fn icosphere(level: u32) -> TriangleMesh {
    let phi = (1.0 + 5.0_f64.sqrt()) / 2.0;
    let raw = [
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
    ];
    let vertices: Vec<Vec3> = raw
        .iter()
        .map(|&(x, y, z)| Vec3::new(x, y, z).normalized().unwrap())
        .collect();
    let triangles: Vec<[u32; 3]> = vec![
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
    let mut mesh = TriangleMesh::new(vertices, triangles).expect("icosahedron is valid");
    mesh = super::subdivide(&mesh, level);
    let mut m = mesh.clone();
    m.map_vertices(|_, v| v.normalized().unwrap_or(v));
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::compute_stats;

    #[test]
    fn icosphere_face_counts() {
        assert_eq!(icosphere(0).triangle_count(), 20);
        assert_eq!(icosphere(3).triangle_count(), 1280);
    }

    #[test]
    fn icosphere_vertices_on_unit_sphere() {
        let s = icosphere(2);
        for v in s.vertices() {
            assert!((v.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cuboid_outward_volume() {
        let c = cuboid(Vec3::new(-1.0, -2.0, -3.0), Vec3::new(1.0, 2.0, 3.0));
        let vol: f64 = (0..c.triangle_count())
            .map(|t| {
                let [a, b, c] = c.triangle_positions(t);
                a.dot(b.cross(c)) / 6.0
            })
            .sum();
        assert!((vol - 48.0).abs() < 1e-12);
        assert!(compute_stats(&c).watertight);
    }
}
