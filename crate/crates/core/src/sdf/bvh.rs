//! Bounding-volume hierarchy over triangles for nearest-distance and
//! ray-crossing queries.
//!
//! Construction is a median split over the longest centroid axis with leaf
//! size 8 — fully deterministic, no surface-area heuristic.

use super::SdfError;
use crate::geom::{Aabb, Vec3};
use crate::mesh::TriangleMesh;

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
pub(crate) enum Node {
    Leaf {
        bbox: Aabb,
        /// Range into `DistanceIndex::order`.
        start: u32,
        end: u32,
    },
    Inner {
        bbox: Aabb,
        left: u32,
        right: u32,
    },
}

impl Node {
    pub(crate) fn bbox(&self) -> &Aabb {
        match self {
            Node::Leaf { bbox, .. } | Node::Inner { bbox, .. } => bbox,
        }
    }
}

/// Read-only acceleration structure; triangles are copied out of the mesh so
/// queries never touch the original index buffers.
#[derive(Debug, Clone)]
pub struct DistanceIndex {
    pub(crate) nodes: Vec<Node>,
    pub(crate) order: Vec<u32>,
    pub(crate) triangles: Vec<[Vec3; 3]>,
    pub(crate) root: u32,
}

impl DistanceIndex {
    pub fn build(mesh: &TriangleMesh) -> Result<Self, SdfError> {
        if mesh.is_empty() {
            return Err(SdfError::EmptyMesh);
        }
        let triangles: Vec<[Vec3; 3]> = (0..mesh.triangle_count())
            .map(|t| mesh.triangle_positions(t))
            .collect();
        let centroids: Vec<Vec3> = triangles
            .iter()
            .map(|t| (t[0] + t[1] + t[2]) / 3.0)
            .collect();
        let mut order: Vec<u32> = (0..triangles.len() as u32).collect();
        let mut nodes = Vec::new();
        let root = build_node(&triangles, &centroids, &mut order, 0, triangles.len(), &mut nodes);
        Ok(DistanceIndex { nodes, order, triangles, root })
    }

    pub fn triangle_count(&self) -> usize {
        self.triangles.len()
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, Node::Leaf { .. }))
            .count()
    }

    pub fn bounding_box(&self) -> Aabb {
        *self.nodes[self.root as usize].bbox()
    }

    /// Structural invariants: each triangle in exactly one leaf, every node
    /// box containing its descendants. Test support.
    pub fn validate(&self) -> bool {
        let mut seen = vec![false; self.triangles.len()];
        let mut stack = vec![self.root];
        while let Some(ix) = stack.pop() {
            match &self.nodes[ix as usize] {
                Node::Leaf { bbox, start, end } => {
                    for &t in &self.order[*start as usize..*end as usize] {
                        if seen[t as usize] {
                            return false;
                        }
                        seen[t as usize] = true;
                        for v in self.triangles[t as usize] {
                            if !bbox.contains(v) {
                                return false;
                            }
                        }
                    }
                }
                Node::Inner { bbox, left, right } => {
                    for child in [*left, *right] {
                        let cb = self.nodes[child as usize].bbox();
                        let u = bbox.union(cb);
                        if u != *bbox {
                            return false;
                        }
                    }
                    stack.push(*left);
                    stack.push(*right);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Squared distance from `p` to the nearest triangle, branch-and-bound.
    pub fn distance_squared(&self, p: Vec3) -> f64 {
        let mut best = f64::INFINITY;
        let mut stack: Vec<u32> = Vec::with_capacity(64);
        stack.push(self.root);
        while let Some(ix) = stack.pop() {
            let node = &self.nodes[ix as usize];
            if node.bbox().distance_squared(p) >= best {
                continue;
            }
            match node {
                Node::Leaf { start, end, .. } => {
                    for &t in &self.order[*start as usize..*end as usize] {
                        let tri = &self.triangles[t as usize];
                        let d = point_triangle_distance_squared(p, tri[0], tri[1], tri[2]);
                        if d < best {
                            best = d;
                        }
                    }
                }
                Node::Inner { left, right, .. } => {
                    // Visit the nearer child first for tighter pruning.
                    let dl = self.nodes[*left as usize].bbox().distance_squared(p);
                    let dr = self.nodes[*right as usize].bbox().distance_squared(p);
                    if dl <= dr {
                        stack.push(*right);
                        stack.push(*left);
                    } else {
                        stack.push(*left);
                        stack.push(*right);
                    }
                }
            }
        }
        best
    }
}

fn build_node(
    triangles: &[[Vec3; 3]],
    centroids: &[Vec3],
    order: &mut [u32],
    start: usize,
    end: usize,
    nodes: &mut Vec<Node>,
) -> u32 {
    let bbox = {
        let mut b = Aabb::empty();
        for &t in &order[start..end] {
            for v in triangles[t as usize] {
                b.expand(v);
            }
        }
        b
    };
    if end - start <= LEAF_SIZE {
        nodes.push(Node::Leaf {
            bbox,
            start: start as u32,
            end: end as u32,
        });
        return (nodes.len() - 1) as u32;
    }
    let centroid_box = Aabb::from_points(order[start..end].iter().map(|&t| centroids[t as usize]));
    let axis = centroid_box.longest_axis();
    let mid = (start + end) / 2;
    // Median split; ties broken by triangle id so the tree is unique.
    order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
        centroids[a as usize]
            .axis(axis)
            .total_cmp(&centroids[b as usize].axis(axis))
            .then(a.cmp(&b))
    });
    let left = build_node(triangles, centroids, order, start, mid, nodes);
    let right = build_node(triangles, centroids, order, mid, end, nodes);
    nodes.push(Node::Inner { bbox, left, right });
    (nodes.len() - 1) as u32
}

/// Exact squared distance from a point to a triangle, handling all face /
/// edge / vertex regions (Ericson, Real-Time Collision Detection §5.1.5).
pub fn point_triangle_distance_squared(p: Vec3, a: Vec3, b: Vec3, c: Vec3) -> f64 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;

    let d1 = ab.dot(ap);
    let d2 = ac.dot(ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return ap.norm_squared(); // vertex a
    }

    let bp = p - b;
    let d3 = ab.dot(bp);
    let d4 = ac.dot(bp);
    if d3 >= 0.0 && d4 <= d3 {
        return bp.norm_squared(); // vertex b
    }

    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (ap - ab * v).norm_squared(); // edge ab
    }

    let cp = p - c;
    let d5 = ab.dot(cp);
    let d6 = ac.dot(cp);
    if d6 >= 0.0 && d5 <= d6 {
        return cp.norm_squared(); // vertex c
    }

    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (ap - ac * w).norm_squared(); // edge ac
    }

    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        let bc = c - b;
        return (bp - bc * w).norm_squared(); // edge bc
    }

    // interior: project onto the triangle plane
    let denom = va + vb + vc;
    if denom.abs() < f64::MIN_POSITIVE {
        // degenerate sliver: fall back to the best edge distance
        let eab = {
            let t = (ap.dot(ab) / ab.norm_squared().max(f64::MIN_POSITIVE)).clamp(0.0, 1.0);
            (ap - ab * t).norm_squared()
        };
        let eac = {
            let t = (ap.dot(ac) / ac.norm_squared().max(f64::MIN_POSITIVE)).clamp(0.0, 1.0);
            (ap - ac * t).norm_squared()
        };
        return eab.min(eac);
    }
    let v = vb / denom;
    let w = vc / denom;
    let closest = a + ab * v + ac * w;
    (p - closest).norm_squared()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::primitives::{icosphere, unit_cube};
    use crate::mesh::TriangleMesh;
    use rand_chacha::rand_core::{RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force(mesh: &TriangleMesh, p: Vec3) -> f64 {
        (0..mesh.triangle_count())
            .map(|t| {
                let [a, b, c] = mesh.triangle_positions(t);
                point_triangle_distance_squared(p, a, b, c)
            })
            .fold(f64::INFINITY, f64::min)
            .sqrt()
    }

    fn rand_point(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Vec3 {
        let mut u = || (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        Vec3::new(lo + (hi - lo) * u(), lo + (hi - lo) * u(), lo + (hi - lo) * u())
    }

    #[test]
    fn single_triangle_has_one_leaf() {
        let mesh = TriangleMesh::new(
            vec![Vec3::ZERO, Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0)],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let index = DistanceIndex::build(&mesh).unwrap();
        assert_eq!(index.leaf_count(), 1);
        assert!(index.validate());
    }

    #[test]
    fn cube_index_invariants() {
        let index = DistanceIndex::build(&unit_cube()).unwrap();
        assert!(index.validate());
    }

    #[test]
    fn point_triangle_regions() {
        let a = Vec3::ZERO;
        let b = Vec3::new(1.0, 0.0, 0.0);
        let c = Vec3::new(0.0, 1.0, 0.0);
        // above the interior
        let d = point_triangle_distance_squared(Vec3::new(0.25, 0.25, 2.0), a, b, c);
        assert!((d - 4.0).abs() < 1e-12);
        // nearest to vertex b
        let d = point_triangle_distance_squared(Vec3::new(2.0, 0.0, 0.0), a, b, c);
        assert!((d - 1.0).abs() < 1e-12);
        // nearest to edge bc
        let d = point_triangle_distance_squared(Vec3::new(1.0, 1.0, 0.0), a, b, c);
        assert!((d - 0.5).abs() < 1e-12);
    }

    #[test]
    fn bvh_matches_brute_force_on_icosphere() {
        let sphere = icosphere(3);
        let index = DistanceIndex::build(&sphere).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..1000 {
            let p = rand_point(&mut rng, -2.0, 2.0);
            let fast = index.distance_squared(p).sqrt();
            let slow = brute_force(&sphere, p);
            let rel = (fast - slow).abs() / slow.max(1e-300);
            assert!(rel < 1e-9, "p={p:?} fast={fast} slow={slow}");
        }
    }
}
