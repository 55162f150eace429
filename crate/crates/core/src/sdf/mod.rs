//! Signed distance field generation on Cartesian grids.
//!
//! Distances are exact point-to-triangle queries accelerated by a BVH; the
//! sign comes from parity voting over a fan of deterministic pseudo-random
//! rays, which tolerates the non-watertight meshes this pipeline produces.
//! Convention: negative inside the geometry, positive outside.

mod bvh;
mod generate;
mod io;
mod ray;

pub use bvh::DistanceIndex;
pub use generate::{
    build_index, estimate_sign, generate_sdf, generate_sdf_with_index, sign_votes,
    unsigned_distance, DEFAULT_SIGN_RAYS,
};
pub use io::{read_volume, read_volume_from, write_volume, write_volume_to};

use crate::geom::Vec3;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SdfError {
    #[error("mesh is empty")]
    EmptyMesh,
    #[error("grid dims must all be >= 1, got {0}x{1}x{2}")]
    BadDims(u32, u32, u32),
    #[error("grid spacing must be positive, got ({0}, {1}, {2})")]
    BadSpacing(f64, f64, f64),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported volume version {0}")]
    BadVersion(u32),
    #[error("volume payload truncated: header promises {expected} values, file has {found}")]
    Truncated { expected: usize, found: usize },
    #[error("volume dims overflow: {nx}x{ny}x{nz} with {components} components")]
    DimOverflow {
        nx: u32,
        ny: u32,
        nz: u32,
        components: u32,
    },
    #[error("component count {0} not supported (expected 1 or 3)")]
    BadComponents(u32),
    #[error("value buffer length {found} does not match grid ({expected})")]
    LengthMismatch { expected: usize, found: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Cartesian sampling grid. `origin` is the center of cell (0,0,0); cell
/// center (i,j,k) sits at `origin + (i*sx, j*sy, k*sz)`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GridSpec {
    pub dims: [u32; 3],
    pub origin: [f64; 3],
    pub spacing: [f64; 3],
}

impl GridSpec {
    pub fn new(dims: [u32; 3], origin: [f64; 3], spacing: [f64; 3]) -> Result<Self, SdfError> {
        if dims.iter().any(|&d| d < 1) {
            return Err(SdfError::BadDims(dims[0], dims[1], dims[2]));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(SdfError::BadSpacing(spacing[0], spacing[1], spacing[2]));
        }
        Ok(GridSpec { dims, origin, spacing })
    }

    /// Grid covering `[min, max]` with cell centers inset half a cell.
    pub fn from_bounds(dims: [u32; 3], min: [f64; 3], max: [f64; 3]) -> Result<Self, SdfError> {
        let mut spacing = [0.0; 3];
        let mut origin = [0.0; 3];
        for a in 0..3 {
            spacing[a] = (max[a] - min[a]) / dims[a] as f64;
            origin[a] = min[a] + 0.5 * spacing[a];
        }
        GridSpec::new(dims, origin, spacing)
    }

    pub fn cell_count(&self) -> usize {
        self.dims[0] as usize * self.dims[1] as usize * self.dims[2] as usize
    }

    #[inline]
    pub fn cell_center(&self, i: u32, j: u32, k: u32) -> Vec3 {
        Vec3::new(
            self.origin[0] + i as f64 * self.spacing[0],
            self.origin[1] + j as f64 * self.spacing[1],
            self.origin[2] + k as f64 * self.spacing[2],
        )
    }

    /// Flat index with x fastest: `i + nx*(j + ny*k)`.
    #[inline]
    pub fn flat_index(&self, i: u32, j: u32, k: u32) -> usize {
        i as usize + self.dims[0] as usize * (j as usize + self.dims[1] as usize * k as usize)
    }

    pub fn max_spacing(&self) -> f64 {
        self.spacing[0].max(self.spacing[1]).max(self.spacing[2])
    }

    pub fn bounding_diagonal(&self) -> f64 {
        let d = [
            self.dims[0] as f64 * self.spacing[0],
            self.dims[1] as f64 * self.spacing[1],
            self.dims[2] as f64 * self.spacing[2],
        ];
        (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
    }
}

/// Scalar or vector field sampled on a [`GridSpec`]; values are x-fastest,
/// component-fastest within a cell (`c + C*(i + nx*(j + ny*k))`).
#[derive(Debug, Clone, PartialEq)]
pub struct SdfVolume {
    pub grid: GridSpec,
    pub components: u32,
    pub values: Vec<f32>,
}

impl SdfVolume {
    pub fn new(grid: GridSpec, components: u32, values: Vec<f32>) -> Result<Self, SdfError> {
        if components != 1 && components != 3 {
            return Err(SdfError::BadComponents(components));
        }
        let expected = grid
            .cell_count()
            .checked_mul(components as usize)
            .ok_or(SdfError::DimOverflow {
                nx: grid.dims[0],
                ny: grid.dims[1],
                nz: grid.dims[2],
                components,
            })?;
        if values.len() != expected {
            return Err(SdfError::LengthMismatch {
                expected,
                found: values.len(),
            });
        }
        Ok(SdfVolume { grid, components, values })
    }

    #[inline]
    pub fn value(&self, i: u32, j: u32, k: u32) -> f32 {
        debug_assert_eq!(self.components, 1);
        self.values[self.grid.flat_index(i, j, k)]
    }

    #[inline]
    pub fn component(&self, c: u32, i: u32, j: u32, k: u32) -> f32 {
        self.values[c as usize + self.components as usize * self.grid.flat_index(i, j, k)]
    }
}

/// Network-input preprocessing: symmetric clamp followed by a divide.
/// `clamp = f32::INFINITY` is the documented pure-rescale sentinel.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormalizeSpec {
    pub clamp: f32,
    pub scale: f32,
}

impl NormalizeSpec {
    /// Default mapping to [-1, 1]: clamp at 8 cells of the coarsest grid
    /// axis and divide by the same band.
    pub fn for_grid(grid: &GridSpec) -> Self {
        let clamp = (8.0 * grid.max_spacing()) as f32;
        NormalizeSpec { clamp, scale: clamp }
    }

    #[inline]
    pub fn apply(&self, v: f32) -> f32 {
        v.clamp(-self.clamp, self.clamp) / self.scale
    }
}

/// `value' = clamp(value, [-clamp, clamp]) / scale`, elementwise.
pub fn normalize_sdf(vol: &SdfVolume, spec: NormalizeSpec) -> SdfVolume {
    assert!(spec.clamp > 0.0 && spec.scale > 0.0, "clamp and scale must be positive");
    SdfVolume {
        grid: vol.grid,
        components: vol.components,
        values: vol.values.iter().map(|&v| spec.apply(v)).collect(),
    }
}
