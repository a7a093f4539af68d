use serde::{Deserialize, Serialize};

/// Closed-form signed distance compositions. Negative inside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Shape {
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    Box {
        center: [f64; 3],
        half: [f64; 3],
    },
    /// Ring around the z axis through `center`.
    Torus {
        center: [f64; 3],
        major: f64,
        minor: f64,
    },
    /// Polynomial smooth minimum with blend width `k`. Not an exact
    /// distance in the blend region: it lies below the plain union by at
    /// most `k / 4`, so sphere tracing stays safe.
    SmoothUnion {
        a: std::boxed::Box<Shape>,
        b: std::boxed::Box<Shape>,
        k: f64,
    },
}

fn len3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn rel(p: [f64; 3], c: [f64; 3]) -> [f64; 3] {
    [p[0] - c[0], p[1] - c[1], p[2] - c[2]]
}

impl Shape {
    pub fn sdf(&self, p: [f64; 3]) -> f64 {
        match self {
            Shape::Sphere { center, radius } => len3(rel(p, *center)) - radius,
            Shape::Box { center, half } => {
                let d = rel(p, *center);
                let q: [f64; 3] = std::array::from_fn(|k| d[k].abs() - half[k]);
                let outside = len3(q.map(|v| v.max(0.0)));
                let inside = q[0].max(q[1]).max(q[2]).min(0.0);
                outside + inside
            }
            Shape::Torus { center, major, minor } => {
                let d = rel(p, *center);
                let q = (d[0] * d[0] + d[1] * d[1]).sqrt() - major;
                (q * q + d[2] * d[2]).sqrt() - minor
            }
            Shape::SmoothUnion { a, b, k } => {
                let (da, db) = (a.sdf(p), b.sdf(p));
                let h = (0.5 + 0.5 * (db - da) / k).clamp(0.0, 1.0);
                db + (da - db) * h - k * h * (1.0 - h)
            }
        }
    }

    /// Central-difference gradient.
    pub fn gradient(&self, p: [f64; 3]) -> [f64; 3] {
        let h = 1e-6;
        std::array::from_fn(|k| {
            let mut a = p;
            let mut b = p;
            a[k] += h;
            b[k] -= h;
            (self.sdf(a) - self.sdf(b)) / (2.0 * h)
        })
    }

    /// Radius of a sphere about the origin containing the shape.
    pub fn bounding_radius(&self) -> f64 {
        match self {
            Shape::Sphere { center, radius } => len3(*center) + radius,
            Shape::Box { center, half } => len3(*center) + len3(*half),
            Shape::Torus { center, major, minor } => len3(*center) + major + minor,
            Shape::SmoothUnion { a, b, .. } => a.bounding_radius().max(b.bounding_radius()),
        }
    }

    /// Point on a primitive's surface for parameters `(s, t)` in `[0, 1)^2`;
    /// `None` for compositions. Box faces are picked by `s` in sixths.
    pub fn parametric(&self, s: f64, t: f64) -> Option<[f64; 3]> {
        use std::f64::consts::TAU;
        match self {
            Shape::Sphere { center, radius } => {
                let z = 1.0 - 2.0 * s;
                let r = (1.0 - z * z).max(0.0).sqrt();
                let phi = TAU * t;
                Some([
                    center[0] + radius * r * phi.cos(),
                    center[1] + radius * r * phi.sin(),
                    center[2] + radius * z,
                ])
            }
            Shape::Box { center, half } => {
                let face = ((s * 6.0) as usize).min(5);
                let u = (s * 6.0 - face as f64) * 2.0 - 1.0;
                let v = t * 2.0 - 1.0;
                let axis = face / 2;
                let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
                let (a1, a2) = ((axis + 1) % 3, (axis + 2) % 3);
                let mut p = *center;
                p[axis] += sign * half[axis];
                p[a1] += u * half[a1];
                p[a2] += v * half[a2];
                Some(p)
            }
            Shape::Torus { center, major, minor } => {
                let (th, ph) = (TAU * s, TAU * t);
                let ring = major + minor * ph.cos();
                Some([
                    center[0] + ring * th.cos(),
                    center[1] + ring * th.sin(),
                    center[2] + minor * ph.sin(),
                ])
            }
            Shape::SmoothUnion { .. } => None,
        }
    }
}

/// Sum of oriented sinusoids per channel; band-limited so every surface patch
/// a few pixels wide carries texture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    /// `(direction * frequency, phase, per-channel amplitude)`.
    pub waves: Vec<([f64; 3], f64, [f64; 3])>,
}

impl Texture {
    pub fn procedural(seed: u64) -> Self {
        use rand::Rng;
        let mut rng = crate::rng::stream(seed, 0x7e47);
        let waves = (0..6)
            .map(|_| {
                let d: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
                let n = len3(d).max(1e-6);
                let freq = rng.random_range(6.0..14.0);
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                let amp: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.04..0.12));
                (d.map(|v| v / n * freq), phase, amp)
            })
            .collect();
        Self { waves }
    }

    /// RGB albedo in `[0.05, 0.95]`.
    pub fn albedo(&self, p: [f64; 3]) -> [f64; 3] {
        let mut c = [0.55, 0.5, 0.45];
        for (w, phase, amp) in &self.waves {
            let s = (w[0] * p[0] + w[1] * p[1] + w[2] * p[2] + phase).sin();
            for k in 0..3 {
                c[k] += amp[k] * s;
            }
        }
        c.map(|v| v.clamp(0.05, 0.95))
    }
}

/// Analytic geometry plus surface texture, inside `[-1, 1]^3`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticScene {
    pub shape: Shape,
    pub texture: Texture,
}

impl AnalyticScene {
    pub fn sdf(&self, p: [f64; 3]) -> f64 {
        self.shape.sdf(p)
    }
}

/// Scene presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    /// Sphere of radius 0.6.
    Sphere,
    /// Sphere of radius 1 touching the bounding sphere.
    UnitSphere,
    /// Smooth union of a box, a sphere and a torus.
    Composite,
}

impl SceneKind {
    pub fn shape(self) -> Shape {
        match self {
            SceneKind::Sphere => Shape::Sphere {
                center: [0.0; 3],
                radius: 0.6,
            },
            SceneKind::UnitSphere => Shape::Sphere {
                center: [0.0; 3],
                radius: 1.0,
            },
            SceneKind::Composite => {
                let body = Shape::Box {
                    center: [-0.15, 0.0, -0.1],
                    half: [0.32, 0.28, 0.26],
                };
                let head = Shape::Sphere {
                    center: [0.25, 0.05, 0.25],
                    radius: 0.33,
                };
                let ring = Shape::Torus {
                    center: [0.0, 0.0, -0.38],
                    major: 0.5,
                    minor: 0.13,
                };
                let top = Shape::SmoothUnion {
                    a: std::boxed::Box::new(body),
                    b: std::boxed::Box::new(head),
                    k: 0.12,
                };
                Shape::SmoothUnion {
                    a: std::boxed::Box::new(top),
                    b: std::boxed::Box::new(ring),
                    k: 0.1,
                }
            }
        }
    }
}
