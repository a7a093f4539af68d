//! Moving guide points onto the zero level set and scoring their surface
//! patches for photometric consistency across views.

mod patch;
mod photo;

pub use patch::{
    build_patch, loss_pc_from_scores, ncc_score, patch_offsets, project_in_bounds, project_to_surface,
    sample_intensities, tangent_frame, Patch, SurfaceProjection, MIN_GRAD_NORM,
};
pub use photo::{loss_pc_var, PcConfig, PcOutput, PcStats, ViewImages};

#[cfg(test)]
mod tests;
