use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tables::TRI_TABLE;
use crate::error::{Error, Result};

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    /// The scene cube `[-1, 1]^3`.
    pub fn unit() -> Self {
        Self {
            min: [-1.0; 3],
            max: [1.0; 3],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[u32; 3]>,
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn norm(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t].map(|i| self.vertices[i as usize]);
        0.5 * norm(cross(sub(b, a), sub(c, a)))
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// `n` points distributed uniformly by area.
    pub fn sample_uniform(&self, n: usize, rng: &mut impl Rng) -> Result<Vec<[f64; 3]>> {
        if self.is_empty() {
            return Err(Error::InvalidInput("cannot sample an empty mesh".into()));
        }
        let mut cdf = Vec::with_capacity(self.triangles.len());
        let mut total = 0.0;
        for t in 0..self.triangles.len() {
            total += self.triangle_area(t);
            cdf.push(total);
        }
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let u = rng.random::<f64>() * total;
            let t = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
            let [a, b, c] = self.triangles[t].map(|i| self.vertices[i as usize]);
            let (mut r1, mut r2) = (rng.random::<f64>(), rng.random::<f64>());
            if r1 + r2 > 1.0 {
                r1 = 1.0 - r1;
                r2 = 1.0 - r2;
            }
            out.push(std::array::from_fn(|k| a[k] + r1 * (b[k] - a[k]) + r2 * (c[k] - a[k])));
        }
        Ok(out)
    }

    pub fn write_ply(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        s.push_str("ply\nformat ascii 1.0\n");
        let _ = writeln!(s, "element vertex {}", self.vertices.len());
        s.push_str("property float x\nproperty float y\nproperty float z\n");
        let _ = writeln!(s, "element face {}", self.triangles.len());
        s.push_str("property list uchar int vertex_indices\nend_header\n");
        for v in &self.vertices {
            let _ = writeln!(s, "{} {} {}", v[0] as f32, v[1] as f32, v[2] as f32);
        }
        for t in &self.triangles {
            let _ = writeln!(s, "3 {} {} {}", t[0], t[1], t[2]);
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, s)?;
        Ok(())
    }
}

const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

/// Extracts the zero level set of `field` sampled on a `resolution^3` cell
/// grid over `bounds`. Negative values are inside. `field` is called once per
/// z-slab of grid nodes, so memory stays at two slabs.
///
/// Returns an empty mesh when the field has no sign change.
pub fn marching_cubes(
    mut field: impl FnMut(&[[f64; 3]]) -> Result<Vec<f64>>,
    resolution: usize,
    bounds: &Aabb,
) -> Result<TriangleMesh> {
    if resolution < 16 {
        return Err(Error::InvalidInput(format!("marching cubes resolution {resolution} < 16")));
    }
    let n = resolution + 1;
    let step: [f64; 3] = std::array::from_fn(|k| (bounds.max[k] - bounds.min[k]) / resolution as f64);
    let node = |i: usize, j: usize, k: usize| -> [f64; 3] {
        [
            bounds.min[0] + i as f64 * step[0],
            bounds.min[1] + j as f64 * step[1],
            bounds.min[2] + k as f64 * step[2],
        ]
    };
    let mut slab = |k: usize| -> Result<Vec<f64>> {
        let pts: Vec<[f64; 3]> = (0..n * n).map(|p| node(p % n, p / n, k)).collect();
        let v = field(&pts)?;
        if v.len() != pts.len() {
            return Err(Error::Shape(format!("field returned {} values for {} nodes", v.len(), pts.len())));
        }
        if let Some(bad) = v.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite field value at {:?}", pts[bad])));
        }
        Ok(v)
    };

    let mut mesh = TriangleMesh::default();
    let mut edge_vertex: HashMap<(usize, usize), u32> = HashMap::new();
    let mut lower = slab(0)?;
    for k in 0..resolution {
        let upper = slab(k + 1)?;
        let value = |c: [usize; 3]| if c[2] == k { lower[c[1] * n + c[0]] } else { upper[c[1] * n + c[0]] };
        for j in 0..resolution {
            for i in 0..resolution {
                let corner: [[usize; 3]; 8] = CORNERS.map(|o| [i + o[0], j + o[1], k + o[2]]);
                let vals: [f64; 8] = corner.map(value);
                let mut case = 0usize;
                for (b, &v) in vals.iter().enumerate() {
                    if v < 0.0 {
                        case |= 1 << b;
                    }
                }
                if case == 0 || case == 255 {
                    continue;
                }
                let row = &TRI_TABLE[case];
                let mut ids = [0u32; 16];
                for (slot, &e) in row.iter().enumerate() {
                    if e < 0 {
                        break;
                    }
                    let [a, b] = EDGES[e as usize];
                    let (ca, cb) = (corner[a], corner[b]);
                    let lo = if (ca[0], ca[1], ca[2]) <= (cb[0], cb[1], cb[2]) { ca } else { cb };
                    let axis = (0..3).find(|&d| ca[d] != cb[d]).expect("edge spans one axis");
                    let key = ((lo[2] * n + lo[1]) * n + lo[0], axis);
                    let id = *edge_vertex.entry(key).or_insert_with(|| {
                        let (fa, fb) = (vals[a], vals[b]);
                        let t = (fa / (fa - fb)).clamp(0.0, 1.0);
                        let pa = node(ca[0], ca[1], ca[2]);
                        let pb = node(cb[0], cb[1], cb[2]);
                        mesh.vertices.push(std::array::from_fn(|d| pa[d] + t * (pb[d] - pa[d])));
                        (mesh.vertices.len() - 1) as u32
                    });
                    ids[slot] = id;
                }
                for (t, e) in ids.chunks(3).zip(row.chunks(3)) {
                    if e[0] < 0 {
                        break;
                    }
                    let t = [t[0], t[2], t[1]];
                    if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
                        continue;
                    }
                    let [a, b, c] = t.map(|x| mesh.vertices[x as usize]);
                    if norm(cross(sub(b, a), sub(c, a))) <= 1e-20 {
                        continue;
                    }
                    mesh.triangles.push(t);
                }
            }
        }
        lower = upper;
    }
    compact(&mut mesh);
    Ok(mesh)
}

/// Drops vertices that no retained triangle references.
fn compact(mesh: &mut TriangleMesh) {
    let mut remap = vec![u32::MAX; mesh.vertices.len()];
    let mut verts = Vec::with_capacity(mesh.vertices.len());
    for t in &mut mesh.triangles {
        for i in t.iter_mut() {
            let old = *i as usize;
            if remap[old] == u32::MAX {
                remap[old] = verts.len() as u32;
                verts.push(mesh.vertices[old]);
            }
            *i = remap[old];
        }
    }
    mesh.vertices = verts;
}
