//! Point supervision: the uncertainty-weighted SDF likelihood, the variance
//! filter, the bias-network loss and the naive zero-SDF baseline.

mod batch;
mod losses;

pub use batch::PointBatch;
pub use losses::{
    filter_high_fidelity, loss_bias, loss_bias_var, loss_naive_sdf, loss_naive_sdf_var, loss_usdf,
    loss_usdf_values, loss_usdf_var, BiasRouting, FilterConfig,
};

#[cfg(test)]
mod tests;
