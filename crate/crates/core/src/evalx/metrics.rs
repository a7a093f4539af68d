use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::renderer::DepthMap;

/// Uniform bucket grid over a point set for nearest-neighbor
/// queries.
struct NnGrid<'a> {
    points: &'a [[f64; 3]],
    origin: [f64; 3],
    cell: f64,
    dims: [usize; 3],
    start: Vec<usize>,
    order: Vec<usize>,
}

impl<'a> NnGrid<'a> {
    fn new(points: &'a [[f64; 3]]) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let ext: [f64; 3] = std::array::from_fn(|k| (hi[k] - lo[k]).max(1e-9));
        // About two points per occupied cell for surface-like sets.
        let vol = ext[0] * ext[1] * ext[2];
        let cell = (vol * 2.0 / points.len() as f64).cbrt().max(ext.iter().cloned().fold(0.0, f64::max) / 256.0);
        let dims: [usize; 3] = std::array::from_fn(|k| (ext[k] / cell).floor() as usize + 1);
        let ncell = dims[0] * dims[1] * dims[2];
        let mut count = vec![0usize; ncell + 1];
        let cells: Vec<usize> = points
            .iter()
            .map(|p| {
                let c: [usize; 3] = std::array::from_fn(|k| (((p[k] - lo[k]) / cell) as usize).min(dims[k] - 1));
                (c[2] * dims[1] + c[1]) * dims[0] + c[0]
            })
            .collect();
        for &c in &cells {
            count[c + 1] += 1;
        }
        for i in 0..ncell {
            count[i + 1] += count[i];
        }
        let mut fill = count.clone();
        let mut order = vec![0; points.len()];
        for (i, &c) in cells.iter().enumerate() {
            order[fill[c]] = i;
            fill[c] += 1;
        }
        Self {
            points,
            origin: lo,
            cell,
            dims,
            start: count,
            order,
        }
    }

    /// Distance from `q` to its nearest point. Scans cube shells of cells
    /// around `q` until the best hit is closer than any unvisited cell.
    fn nearest(&self, q: &[f64; 3]) -> f64 {
        let qc: [i64; 3] = std::array::from_fn(|k| ((q[k] - self.origin[k]) / self.cell).floor() as i64);
        let max_r = (0..3)
            .map(|k| qc[k].abs().max((qc[k] - self.dims[k] as i64 + 1).abs()))
            .max()
            .unwrap_or(0);
        let dims = self.dims.map(|d| d as i64);
        let r0 = (0..3).map(|k| (qc[k] - qc[k].clamp(0, dims[k] - 1)).abs()).max().unwrap_or(0);
        let span = |k: usize, r: i64| (qc[k] - r).max(0)..=(qc[k] + r).min(dims[k] - 1);
        let mut best2 = f64::INFINITY;
        for r in r0..=max_r {
            for cz in span(2, r) {
                for cy in span(1, r) {
                    let on_shell_yz = (cz - qc[2]).abs() == r || (cy - qc[1]).abs() == r;
                    let xs: Vec<i64> = if on_shell_yz {
                        span(0, r).collect()
                    } else {
                        [qc[0] - r, qc[0] + r].into_iter().filter(|&x| x >= 0 && x < dims[0]).collect()
                    };
                    for cx in xs {
                        let c = ((cz as usize) * self.dims[1] + cy as usize) * self.dims[0] + cx as usize;
                        for &i in &self.order[self.start[c]..self.start[c + 1]] {
                            best2 = best2.min(dist2(q, &self.points[i]));
                        }
                    }
                }
            }
            let reach = r as f64 * self.cell;
            if best2.is_finite() && best2 <= reach * reach {
                break;
            }
        }
        best2.sqrt()
    }
}

#[inline]
fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// Mean nearest-neighbor distance from each point of `a` to the set `b`.
pub fn mean_nn_distance(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidInput("chamfer distance of an empty point set".into()));
    }
    let grid = NnGrid::new(b);
    Ok(a.iter().map(|q| grid.nearest(q)).sum::<f64>() / a.len() as f64)
}

/// Symmetric Chamfer distance with unsquared Euclidean distances:
/// `(mean_a d(a, B) + mean_b d(b, A)) / 2`.
pub fn chamfer(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    let ab = mean_nn_distance(a, b)?;
    let ba = mean_nn_distance(b, a)?;
    Ok(0.5 * (ab + ba))
}

/// Quadratic-time reference implementation of [`chamfer`].
pub fn chamfer_brute_force(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidInput("chamfer distance of an empty point set".into()));
    }
    let one_way = |x: &[[f64; 3]], y: &[[f64; 3]]| {
        x.iter()
            .map(|p| y.iter().map(|q| dist2(p, q)).fold(f64::INFINITY, f64::min).sqrt())
            .sum::<f64>()
            / x.len() as f64
    };
    Ok(0.5 * (one_way(a, b) + one_way(b, a)))
}

/// ROC AUC of `score` as a detector of `label == true`, with tied scores
/// sharing their mean rank. `None` when only one class is present.
pub fn uncertainty_noise_auc(score: &[f64], label: &[bool]) -> Result<Option<f64>> {
    if score.len() != label.len() {
        return Err(Error::Shape(format!("{} scores vs {} labels", score.len(), label.len())));
    }
    if score.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidInput("NaN score".into()));
    }
    let pos = label.iter().filter(|&&l| l).count();
    let neg = label.len() - pos;
    if pos == 0 || neg == 0 {
        return Ok(None);
    }
    let mut idx: Vec<usize> = (0..score.len()).collect();
    idx.sort_by(|&i, &j| score[i].total_cmp(&score[j]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && score[idx[j + 1]] == score[idx[i]] {
            j += 1;
        }
        // Ranks are 1-based; the tie block [i, j] shares its mean rank.
        let mid = 0.5 * ((i + 1) + (j + 1)) as f64;
        rank_sum_pos += mid * idx[i..=j].iter().filter(|&&k| label[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok(Some((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n)))
}

/// Mean absolute depth difference over pixels where both maps are finite.
pub fn depth_mae(pred: &DepthMap, gt: &DepthMap) -> Result<Option<f64>> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(Error::Shape(format!(
            "depth maps {}x{} vs {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for (&a, &b) in pred.data.iter().zip(&gt.data) {
        if a.is_finite() && b.is_finite() {
            sum += (f64::from(a) - f64::from(b)).abs();
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

/// Evaluation summary written as `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub chamfer: f64,
    /// `None` when no pixel has both a predicted and a true depth.
    pub depth_mae: Option<f64>,
    /// `None` when the point labels contain a single class.
    pub auc_noise: Option<f64>,
    /// Per-term `(step, value)` series.
    pub loss_curves: BTreeMap<String, Vec<(usize, f64)>>,
    #[serde(default)]
    pub mesh_vertices: usize,
    #[serde(default)]
    pub mesh_triangles: usize,
}

impl MetricsReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        if !self.chamfer.is_finite() || self.chamfer < 0.0 {
            return Err(Error::InvalidInput(format!("invalid chamfer value {}", self.chamfer)));
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}
