//! Neural fields: the base SDF network with its variance and feature heads,
//! the bias network, the color network, and positional encoding.

mod encoding;
mod mlp;
mod networks;

pub use encoding::Encoding;
pub use mlp::{Activation, Linear, Mlp};
pub use networks::{
    activate_variance, final_sdf, points_tensor, BiasNetwork, ColorNetwork, FieldConfig, Fields,
    GaussianSdfPrediction, SdfNetwork, SdfOutput, S_SCALE,
};
