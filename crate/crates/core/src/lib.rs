//! Geometry-to-aerodynamics surrogate pipeline.
//!
//! The crate turns triangle meshes into signed distance field volumes, trains
//! a 3D U-Net (on the in-repo reverse-mode autodiff engine) to regress a drag
//! coefficient and optionally velocity fields, and probes trained models with
//! occlusion sensitivity. A synthetic parametric bluff-body generator stands
//! in for CFD data so the whole pipeline runs at desk scale.
//!
//! Module map:
//! - [`mesh`]: triangle mesh I/O, validation, welding, decimation, augmentation
//! - [`sdf`]: BVH-accelerated signed distance field generation and the SDF3 container
//! - [`autodiff`]: dense-tensor reverse-mode AD engine with all network primitives
//! - [`unet`]: encoder / SE blocks / drag head / velocity decoders
//! - [`training`]: weighted losses, Adam/NAdam, plateau decay, early stopping, checkpoints
//! - [`evaluation`]: R²/MAE/Max AE/relative-L2 metrics and occlusion sensitivity
//! - [`datagen`]: Sobol-sampled parametric bodies with closed-form drag proxy and wake field

pub mod autodiff;
pub mod datagen;
pub mod evaluation;
pub mod geom;
pub mod mesh;
pub mod sdf;
pub mod training;
pub mod unet;
