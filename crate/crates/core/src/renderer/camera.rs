use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Pinhole camera. Camera frame is x right, y down, z forward; pixel `(i, j)`
/// covers `[i, i+1) x [j, j+1)` with its center at `(i + 0.5, j + 0.5)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World-from-camera rotation.
    pub rotation: Matrix3<f64>,
    /// Camera center in world coordinates.
    pub center: Vec3,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        rotation: Matrix3<f64>,
        center: Vec3,
    ) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidInput(format!("focal lengths must be positive: {fx}, {fy}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput("empty image resolution".into()));
        }
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).norm();
        if ortho >= 1e-6 || (rotation.determinant() - 1.0).abs() >= 1e-6 {
            return Err(Error::InvalidInput(format!(
                "camera rotation is not a proper rotation (|RtR - I| = {ortho:.3e}, det = {:.6})",
                rotation.determinant()
            )));
        }
        if !center.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("non-finite camera center".into()));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            rotation,
            center,
        })
    }

    /// Camera at `eye` looking at `target`, with image "up" closest to `up`
    /// and a horizontal field of view `fov_x` (radians).
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, fov_x: f64, width: usize, height: usize) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-9 {
            return Err(Error::InvalidInput("up vector parallel to viewing direction".into()));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_columns(&[right, down, forward]);
        let fx = 0.5 * width as f64 / (0.5 * fov_x).tan();
        Self::new(fx, fx, 0.5 * width as f64, 0.5 * height as f64, width, height, rotation, eye)
    }

    /// Unit world-space direction through continuous pixel coordinates.
    pub fn direction(&self, u: f64, v: f64) -> Vec3 {
        let dc = Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        (self.rotation * dc).normalize()
    }

    /// Camera-frame coordinates of a world point.
    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p - self.center)
    }

    /// Continuous pixel coordinates and camera-frame depth, or `None` when the
    /// point is not strictly in front of the camera.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64, f64)> {
        let c = self.to_camera(p);
        if c.z <= 1e-9 {
            return None;
        }
        Some((self.fx * c.x / c.z + self.cx, self.fy * c.y / c.z + self.cy, c.z))
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    /// Principal viewing direction.
    pub fn forward(&self) -> Vec3 {
        self.rotation.column(2).into_owned()
    }
}

/// A ray clipped to the unit bounding sphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.dir * t
    }
}

/// Minimum near distance; avoids sampling at the camera center for cameras
/// inside the bounding sphere.
const MIN_NEAR: f64 = 1e-3;

/// Intersection interval of a ray with the sphere of the given radius at the
/// origin.
pub fn sphere_interval(origin: &Vec3, dir: &Vec3, radius: f64) -> Option<(f64, f64)> {
    let b = origin.dot(dir);
    let c = origin.norm_squared() - radius * radius;
    let disc = b * b - c;
    if disc <= 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let (t0, t1) = (-b - sq, -b + sq);
    if t1 <= MIN_NEAR {
        return None;
    }
    Some((t0.max(MIN_NEAR), t1))
}

/// Rays for the requested flat pixel indices (`j * width + i`).
#[derive(Debug, Clone, Default)]
pub struct RayBatch {
    pub rays: Vec<Ray>,
    /// Pixel index of each returned ray.
    pub pixels: Vec<usize>,
    /// Requested pixels whose rays miss the bounding sphere.
    pub missed: Vec<usize>,
}

pub fn generate_rays(cam: &Camera, pixels: &[usize]) -> Result<RayBatch> {
    let mut out = RayBatch::default();
    for &p in pixels {
        if p >= cam.num_pixels() {
            return Err(Error::InvalidInput(format!(
                "pixel index {p} outside {}x{} image",
                cam.width, cam.height
            )));
        }
        let (i, j) = (p % cam.width, p / cam.width);
        let dir = cam.direction(i as f64 + 0.5, j as f64 + 0.5);
        match sphere_interval(&cam.center, &dir, 1.0) {
            Some((near, far)) => {
                out.rays.push(Ray {
                    origin: cam.center,
                    dir,
                    near,
                    far,
                });
                out.pixels.push(p);
            }
            None => out.missed.push(p),
        }
    }
    Ok(out)
}
