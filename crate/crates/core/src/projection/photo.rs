use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::patch::{least_axis, patch_offsets, project_in_bounds, project_to_surface};
use crate::diffcore::{Grid2, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::renderer::{Camera, ColorImage, Vec3};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PcConfig {
    /// Patch side `K` (odd).
    pub patch_size: usize,
    /// Patch extent in reference-view pixels at the reference depth.
    pub patch_pixels: f64,
    /// Best source views kept per point.
    pub best_views: usize,
    /// Variance floor in the correlation denominator.
    pub eta: f64,
}

impl Default for PcConfig {
    fn default() -> Self {
        Self {
            patch_size: 5,
            patch_pixels: 4.0,
            best_views: 4,
            eta: 1e-6,
        }
    }
}

impl PcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size % 2 == 0 || self.best_views == 0 || !(self.patch_pixels > 0.0) || !(self.eta > 0.0) {
            return Err(Error::Config(format!("invalid photometric settings {self:?}")));
        }
        Ok(())
    }
}

/// Grayscale images of every view stacked vertically into one sampling grid,
/// plus the cameras.
#[derive(Debug, Clone)]
pub struct ViewImages<T> {
    pub cameras: Vec<Camera>,
    atlas: Arc<Grid2<T>>,
    luma: Vec<Grid2<f64>>,
}

impl<T: Real> ViewImages<T> {
    pub fn new(cameras: &[Camera], images: &[ColorImage]) -> Result<Self> {
        if cameras.len() != images.len() || cameras.is_empty() {
            return Err(Error::Shape(format!("{} cameras vs {} images", cameras.len(), images.len())));
        }
        let (w, h) = (images[0].width, images[0].height);
        let mut data = Vec::with_capacity(w * h * images.len());
        let mut luma = Vec::with_capacity(images.len());
        for (c, img) in cameras.iter().zip(images) {
            if img.width != w || img.height != h || c.width != w || c.height != h {
                return Err(Error::Shape("all views must share one resolution".into()));
            }
            let l = img.luma::<f64>();
            data.extend(l.data().iter().map(|&v| T::c(v)));
            luma.push(l);
        }
        Ok(Self {
            cameras: cameras.to_vec(),
            atlas: Arc::new(Grid2::new(w, h * images.len(), data)),
            luma,
        })
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn luma(&self, view: usize) -> &Grid2<f64> {
        &self.luma[view]
    }
}

/// Photometric term and its bookkeeping.
#[derive(Debug, Clone)]
pub struct PcOutput {
    /// `1 x 1` loss; a constant zero when no point could be scored.
    pub loss: Var,
    pub stats: PcStats,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PcStats {
    pub scored: usize,
    /// Points whose gradient was too short to project.
    pub degenerate: usize,
    /// Points whose reference patch left the reference image.
    pub ref_invalid: usize,
    /// Points with no valid source view.
    pub no_source: usize,
}

struct Scored {
    point: usize,
    sources: Vec<usize>,
}

/// Photometric consistency of the projected guide points. `x`, `f` and `g`
/// are the `n x 3` points, `n x 1` SDF values and `n x 3` SDF gradients on
/// the tape; `ref_views[i]` is the view point `i` came from. The projected
/// points stay differentiable; the patch frame and the best-view choice are
/// treated as constants.
pub fn loss_pc_var<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    f: Var,
    g: Var,
    ref_views: &[usize],
    views: &ViewImages<T>,
    cfg: &PcConfig,
) -> Result<PcOutput> {
    let n = tape.shape(x)[0];
    if tape.shape(x) != [n, 3] || tape.shape(f) != [n, 1] || tape.shape(g) != [n, 3] || ref_views.len() != n {
        return Err(Error::Shape(format!(
            "photometric loss inputs {:?}, {:?}, {:?}, {} views",
            tape.shape(x),
            tape.shape(f),
            tape.shape(g),
            ref_views.len()
        )));
    }
    let k2 = cfg.patch_size * cfg.patch_size;
    let (xv, fv, gv) = (tape.value(x).to_f64(), tape.value(f).to_f64(), tape.value(g).to_f64());
    let mut out = PcStats::default();
    let mut kept: Vec<Scored> = Vec::new();
    for i in 0..n {
        let xi = Vec3::new(xv[3 * i], xv[3 * i + 1], xv[3 * i + 2]);
        let gi = Vec3::new(gv[3 * i], gv[3 * i + 1], gv[3 * i + 2]);
        let Some(proj) = project_to_surface(xi, fv[i], gi) else {
            out.degenerate += 1;
            continue;
        };
        let rv = ref_views[i];
        let cam = views.cameras.get(rv).ok_or_else(|| Error::InvalidInput(format!("reference view {rv} out of range")))?;
        let Some((_, _, z)) = cam.project(&proj.t) else {
            out.ref_invalid += 1;
            continue;
        };
        let offsets = patch_offsets(&gi, cfg.patch_size, cfg.patch_pixels * z / cam.fx)?;
        let inside = |c: &Camera| offsets.iter().all(|o| project_in_bounds(c, &(proj.t + o)).is_some());
        if !inside(cam) {
            out.ref_invalid += 1;
            continue;
        }
        let sources: Vec<usize> = (0..views.len()).filter(|&v| v != rv && inside(&views.cameras[v])).collect();
        if sources.is_empty() {
            out.no_source += 1;
            continue;
        }
        kept.push(Scored {
            point: i,
            sources,
        });
    }
    out.scored = kept.len();
    if kept.is_empty() {
        let loss = tape.constant(Tensor::scalar(T::zero()));
        return Ok(PcOutput { loss, stats: out });
    }

    // Projected centers, tangent frames and patch steps for the kept points,
    // all differentiable in x, f and g.
    let idx = Arc::new(kept.iter().map(|s| s.point).collect::<Vec<_>>());
    let d = kept.len();
    let xs = tape.gather_rows(x, idx.clone());
    let fs = tape.gather_rows(f, idx.clone());
    let gs = tape.gather_rows(g, idx);
    let g2 = tape.square(gs);
    let g2 = tape.sum_cols(g2);
    let gn = tape.sqrt(g2);
    let step = tape.div(fs, gn);
    let step = tape.broadcast_col(step, 3);
    let mv = tape.mul(step, gs);
    let t = tape.sub(xs, mv);
    let gn3 = tape.broadcast_col(gn, 3);
    let normal = tape.div(gs, gn3);
    let mut axis = vec![0.0; d * 3];
    let mut ref_center = Vec::with_capacity(d * 3);
    let mut ref_forward = Vec::with_capacity(d * 3);
    let mut spacing = Vec::with_capacity(d);
    for (p, s) in kept.iter().enumerate() {
        let gi = Vec3::new(gv[3 * s.point], gv[3 * s.point + 1], gv[3 * s.point + 2]);
        axis[3 * p + least_axis(&gi)] = 1.0;
        let cam = &views.cameras[ref_views[s.point]];
        ref_center.extend_from_slice(cam.center.as_slice());
        ref_forward.extend(cam.rotation.column(2).iter());
        spacing.push(if cfg.patch_size > 1 {
            cfg.patch_pixels / (cam.fx * (cfg.patch_size - 1) as f64)
        } else {
            0.0
        });
    }
    let axis = tape.constant(Tensor::from_f64(d, 3, &axis));
    let u = cross_var(tape, normal, axis);
    let un = tape.square(u);
    let un = tape.sum_cols(un);
    let un = tape.sqrt(un);
    let un = tape.broadcast_col(un, 3);
    let u = tape.div(u, un);
    let v_axis = cross_var(tape, normal, u);
    let ref_center = tape.constant(Tensor::from_f64(d, 3, &ref_center));
    let ref_forward = tape.constant(Tensor::from_f64(d, 3, &ref_forward));
    let depth = tape.sub(t, ref_center);
    let depth = tape.mul(depth, ref_forward);
    let depth = tape.sum_cols(depth);
    let spacing = tape.constant(Tensor::from_f64(d, 1, &spacing));
    let spacing = tape.mul(depth, spacing);

    // One K x K block of rows per (point, view) pair: the reference pair
    // first, then every valid source.
    let mut pair_point = Vec::new();
    let mut pair_view = Vec::new();
    let mut ref_row = Vec::new();
    let mut src_row = Vec::new();
    let mut src_owner = Vec::new();
    for (p, s) in kept.iter().enumerate() {
        let r = pair_point.len();
        pair_point.push(p);
        pair_view.push(ref_views[s.point]);
        for &v in &s.sources {
            ref_row.push(r);
            src_row.push(pair_point.len());
            src_owner.push(p);
            pair_point.push(p);
            pair_view.push(v);
        }
    }
    let rows = pair_point.len() * k2;
    let h = views.atlas.height() / views.len();
    let half = (cfg.patch_size / 2) as f64;
    let mut rep = Vec::with_capacity(rows);
    let mut ca = Vec::with_capacity(rows);
    let mut cb = Vec::with_capacity(rows);
    let mut center = Vec::with_capacity(rows * 3);
    let mut axes = [Vec::with_capacity(rows * 3), Vec::with_capacity(rows * 3), Vec::with_capacity(rows * 3)];
    let (mut fx, mut fy, mut cx, mut cy) = (
        Vec::with_capacity(rows),
        Vec::with_capacity(rows),
        Vec::with_capacity(rows),
        Vec::with_capacity(rows),
    );
    for (&p, &v) in pair_point.iter().zip(&pair_view) {
        let cam = &views.cameras[v];
        for a in 0..cfg.patch_size {
            for b in 0..cfg.patch_size {
                rep.push(p);
                ca.push(a as f64 - half);
                cb.push(b as f64 - half);
                center.extend_from_slice(cam.center.as_slice());
                for (j, ax) in axes.iter_mut().enumerate() {
                    ax.extend(cam.rotation.column(j).iter());
                }
                fx.push(cam.fx);
                fy.push(cam.fy);
                cx.push(cam.cx);
                cy.push(cam.cy + (v * h) as f64);
            }
        }
    }
    let rep = Arc::new(rep);
    let col = |tape: &mut Tape<T>, v: &[f64]| tape.constant(Tensor::from_f64(rows, 1, v));
    let ca = col(tape, &ca);
    let cb = col(tape, &cb);
    let tp = tape.gather_rows(t, rep.clone());
    let up = tape.gather_rows(u, rep.clone());
    let vp = tape.gather_rows(v_axis, rep.clone());
    let sp = tape.gather_rows(spacing, rep);
    let sa = tape.mul(ca, sp);
    let sa = tape.broadcast_col(sa, 3);
    let sb = tape.mul(cb, sp);
    let sb = tape.broadcast_col(sb, 3);
    let ou = tape.mul(up, sa);
    let ov = tape.mul(vp, sb);
    let off = tape.add(ou, ov);
    let center = tape.constant(Tensor::from_f64(rows, 3, &center));
    let world = tape.add(tp, off);
    let rel = tape.sub(world, center);
    let cam_coord: Vec<Var> = axes
        .iter()
        .map(|a| {
            let a = tape.constant(Tensor::from_f64(rows, 3, a));
            let prod = tape.mul(rel, a);
            tape.sum_cols(prod)
        })
        .collect();
    let (fx, fy, cx, cy) = (col(tape, &fx), col(tape, &fy), col(tape, &cx), col(tape, &cy));
    let rx = tape.div(cam_coord[0], cam_coord[2]);
    let ry = tape.div(cam_coord[1], cam_coord[2]);
    let u = tape.mul(rx, fx);
    let u = tape.add(u, cx);
    let v = tape.mul(ry, fy);
    let v = tape.add(v, cy);
    let intensity = tape.bilinear(views.atlas.clone(), u, v);
    let intensity = tape.reshape(intensity, pair_point.len(), k2);

    let a = tape.gather_rows(intensity, Arc::new(ref_row));
    let b = tape.gather_rows(intensity, Arc::new(src_row));
    let score = ncc_var(tape, a, b, k2, cfg.eta);

    // Best-m selection from the forward values.
    let sv = tape.value(score).to_f64();
    let mut per_point: Vec<Vec<usize>> = vec![Vec::new(); kept.len()];
    for (s, &p) in src_owner.iter().enumerate() {
        per_point[p].push(s);
    }
    let mut w = vec![0.0; sv.len()];
    let d = kept.len() as f64;
    for list in &mut per_point {
        list.sort_by(|&i, &j| sv[j].total_cmp(&sv[i]).then(i.cmp(&j)));
        let m = cfg.best_views.min(list.len());
        for &s in &list[..m] {
            w[s] = 1.0 / (m as f64 * d);
        }
    }
    let wsum: f64 = w.iter().sum();
    let wv = tape.constant(Tensor::from_f64(w.len(), 1, &w));
    let ws = tape.mul(score, wv);
    let ws = tape.sum(ws);
    let neg = tape.neg(ws);
    let loss = tape.offset(neg, wsum);
    Ok(PcOutput { loss, stats: out })
}

/// Row-wise cross product of two `n x 3` blocks.
fn cross_var<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Var {
    let mut comp = Vec::with_capacity(3);
    for k in 0..3 {
        let (i, j) = ((k + 1) % 3, (k + 2) % 3);
        let ai = tape.slice(a, i, 1);
        let bj = tape.slice(b, j, 1);
        let aj = tape.slice(a, j, 1);
        let bi = tape.slice(b, i, 1);
        let p = tape.mul(ai, bj);
        let q = tape.mul(aj, bi);
        comp.push(tape.sub(p, q));
    }
    tape.concat(&comp)
}

/// Row-wise floored NCC of two `r x k2` intensity blocks, as `r x 1`.
fn ncc_var<T: Real>(tape: &mut Tape<T>, a: Var, b: Var, k2: usize, eta: f64) -> Var {
    let inv = 1.0 / k2 as f64;
    let centered = |tape: &mut Tape<T>, x: Var| {
        let s = tape.sum_cols(x);
        let m = tape.scale(s, inv);
        let m = tape.broadcast_col(m, k2);
        tape.sub(x, m)
    };
    let da = centered(tape, a);
    let db = centered(tape, b);
    let moment = |tape: &mut Tape<T>, x: Var, y: Var| {
        let p = tape.mul(x, y);
        let s = tape.sum_cols(p);
        tape.scale(s, inv)
    };
    let va = moment(tape, da, da);
    let vb = moment(tape, db, db);
    let cov = moment(tape, da, db);
    let va = tape.offset(va, eta);
    let vb = tape.offset(vb, eta);
    let den = tape.mul(va, vb);
    let den = tape.sqrt(den);
    tape.div(cov, den)
}
