//! Remeshing-style data augmentation.
//!
//! A plan is a list of variants, each a short pipeline of weld / decimate /
//! subdivide / jitter steps plus a sample weight for the training loss. The
//! bundled paper-shape preset produces exactly [`PAPER_SHAPE_VARIANTS`]
//! variants per mesh: 1 weld, 5 decimation levels, and a fixed grid of 17
//! jitter / subdivision / decimation combinations covering coarse-to-fine
//! retessellations.

use super::{decimate, subdivide, weld, MeshError, TriangleMesh};
use crate::geom::standard_normal;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One remeshing step of an augmentation variant.
#[derive(Debug, Clone, PartialEq)]
pub enum AugmentStep {
    Decimate { target_face_count: usize },
    Subdivide { levels: u32 },
    /// Normal-direction Gaussian displacement; sigma is a fraction of the
    /// bounding-box diagonal.
    Jitter { sigma_frac: f64, seed: u64 },
    Weld { tolerance: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantSpec {
    pub steps: Vec<AugmentStep>,
    /// Training-loss weight for the produced sample, in (0, 1].
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AugmentationPlan {
    pub variants: Vec<VariantSpec>,
}

/// Variant count of the paper-shape preset.
pub const PAPER_SHAPE_VARIANTS: usize = 23;

/// Fixed preset covering 1 weld + 5 decimation targets + 17 combination
/// variants. Decimation targets are fractions {0.70, 0.75, 0.80, 0.85, 0.90}
/// of the input face count (floored at 4 faces) so the five coarsening rungs
/// stay shape-preserving at any mesh scale.
pub fn paper_shape_plan(mesh: &TriangleMesh, weight: f64) -> AugmentationPlan {
    let faces = mesh.triangle_count();
    let diag = mesh.bounding_box().diagonal().max(f64::MIN_POSITIVE);
    let frac_target = |f: f64| ((faces as f64 * f).round() as usize).max(4);
    let weld_tol = 1e-6 * diag;

    let mut variants: Vec<VariantSpec> = Vec::with_capacity(PAPER_SHAPE_VARIANTS);
    let mut push = |steps: Vec<AugmentStep>| {
        variants.push(VariantSpec { steps, weight });
    };

    // 1: weld only (the manifold-repair analogue)
    push(vec![AugmentStep::Weld { tolerance: weld_tol }]);
    // 5 decimation levels
    for f in [0.70, 0.75, 0.80, 0.85, 0.90] {
        push(vec![AugmentStep::Decimate { target_face_count: frac_target(f) }]);
    }
    // 17 retessellation combinations
    push(vec![AugmentStep::Subdivide { levels: 1 }]);
    push(vec![AugmentStep::Subdivide { levels: 2 }]);
    for (i, sigma) in [0.0005, 0.001, 0.002, 0.004].iter().enumerate() {
        for seed in [1u64, 2] {
            push(vec![AugmentStep::Jitter {
                sigma_frac: *sigma,
                seed: seed + 10 * i as u64,
            }]);
        }
    }
    push(vec![
        AugmentStep::Subdivide { levels: 1 },
        AugmentStep::Jitter { sigma_frac: 0.001, seed: 101 },
    ]);
    push(vec![
        AugmentStep::Subdivide { levels: 1 },
        AugmentStep::Jitter { sigma_frac: 0.001, seed: 102 },
    ]);
    push(vec![
        AugmentStep::Jitter { sigma_frac: 0.001, seed: 103 },
        AugmentStep::Subdivide { levels: 1 },
    ]);
    push(vec![
        AugmentStep::Subdivide { levels: 1 },
        AugmentStep::Decimate { target_face_count: faces.max(4) },
    ]);
    push(vec![
        AugmentStep::Decimate { target_face_count: frac_target(0.8) },
        AugmentStep::Jitter { sigma_frac: 0.002, seed: 104 },
    ]);
    push(vec![
        AugmentStep::Jitter { sigma_frac: 0.002, seed: 105 },
        AugmentStep::Decimate { target_face_count: frac_target(0.85) },
    ]);
    push(vec![
        AugmentStep::Weld { tolerance: 2.0 * weld_tol },
        AugmentStep::Jitter { sigma_frac: 0.001, seed: 106 },
    ]);

    debug_assert_eq!(variants.len(), PAPER_SHAPE_VARIANTS);
    AugmentationPlan { variants }
}

/// Result of one variant; failures are reported per variant so the rest of
/// the family is still produced.
#[derive(Debug)]
pub struct VariantOutcome {
    pub index: usize,
    pub outcome: Result<(TriangleMesh, f64), MeshError>,
}

pub fn generate_augmentations(mesh: &TriangleMesh, plan: &AugmentationPlan) -> Vec<VariantOutcome> {
    plan.variants
        .iter()
        .enumerate()
        .map(|(index, spec)| {
            assert!(
                spec.weight > 0.0 && spec.weight <= 1.0,
                "variant weight must be in (0, 1], got {}",
                spec.weight
            );
            let outcome = apply_variant(mesh, spec).map(|m| (m, spec.weight));
            VariantOutcome { index, outcome }
        })
        .collect()
}

fn apply_variant(mesh: &TriangleMesh, spec: &VariantSpec) -> Result<TriangleMesh, MeshError> {
    let mut current = mesh.clone();
    for step in &spec.steps {
        current = match step {
            AugmentStep::Decimate { target_face_count } => decimate(&current, *target_face_count)?,
            AugmentStep::Subdivide { levels } => subdivide(&current, *levels),
            AugmentStep::Jitter { sigma_frac, seed } => jitter(&current, *sigma_frac, *seed),
            AugmentStep::Weld { tolerance } => weld(&current, *tolerance)?,
        };
    }
    Ok(current)
}

/// Displaces every vertex along its area-weighted normal by a Gaussian
/// amount with standard deviation `sigma_frac * bbox_diagonal`. Zero sigma
/// returns the mesh bit-identically.
pub fn jitter(mesh: &TriangleMesh, sigma_frac: f64, seed: u64) -> TriangleMesh {
    if sigma_frac == 0.0 {
        return mesh.clone();
    }
    let sigma = sigma_frac * mesh.bounding_box().diagonal();
    let normals = mesh.vertex_normals();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = mesh.clone();
    out.map_vertices(|i, v| {
        let amount = sigma * standard_normal(&mut rng);
        v + normals[i] * amount
    });
    out
}
