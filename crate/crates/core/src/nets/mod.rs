//! Small multilayer perceptrons with exact reverse-mode gradients, and the
//! sinusoidal positional encoding fed to the skinning-offset network.

mod encoding;
mod mlp;

pub use encoding::PosEncoding;
pub use mlp::{Activation, Layer, Mlp, MlpCache, MlpGrads};
