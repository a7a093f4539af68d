//! Cameras, ray sampling, SDF-based opacity, front-to-back compositing and the
//! photometric and Eikonal losses.

mod camera;
mod io;
mod sampling;
mod volume;

pub use camera::{generate_rays, sphere_interval, Camera, Ray, RayBatch, Vec3};
pub use io::{ColorImage, DepthMap};
pub use sampling::{importance, sample_along_ray, stratified};
pub use volume::{
    accumulate_color, loss_eikonal, loss_eikonal_var, loss_rgb, loss_rgb_var, neus_alpha, render_rays,
    render_view, sample_rays, Accumulated, RenderConfig, RenderOutput, RenderedView, PHI_FLOOR,
};

#[cfg(test)]
mod tests;
