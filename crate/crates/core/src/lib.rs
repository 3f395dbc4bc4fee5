//! Articulated 3D Gaussian human avatars.
//!
//! The crate is organized bottom-up:
//!
//! - [`bodymodel`]: parametric body model (blendshapes, joint regression,
//!   forward kinematics, linear blend skinning) and its JSON asset format.
//! - [`nets`]: small multilayer perceptrons with exact backward passes.
//! - [`avatar`]: canonical Gaussians, learned skinning-weight offsets, pose
//!   refinement and canonical-to-frame articulation.
//! - [`rasterizer`]: tile-based differentiable splatting.
//! - [`densify`]: part-aware adaptive density control.
//! - [`objectives`]: confidence-weighted photometric loss, mask loss, SSIM.
//! - [`align`]: robust multi-source body-model fitting with L-BFGS.
//! - [`pipeline`]: datasets, training, evaluation, persistence.

pub mod align;
pub mod avatar;
pub mod bodymodel;
pub mod densify;
pub mod error;
pub mod imaging;
pub mod nets;
pub mod objectives;
pub mod pipeline;
pub mod rasterizer;

pub use error::{Error, Result};
