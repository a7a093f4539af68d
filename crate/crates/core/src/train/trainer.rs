use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::seq::index::sample as sample_indices;

use super::config::{DivergenceConfig, MeshField, PointResidual, RunConfig};
use super::loss::{total_loss, LossParts, LossVars};
use crate::diffcore::checkpoint::{self, Entry};
use crate::diffcore::{lr_schedule, ParamStore, Tape, Tensor};
use crate::error::{Error, Result};
use crate::evalx::{chamfer, depth_mae, marching_cubes, surface_samples, uncertainty_noise_auc, Aabb, MetricsReport, TriangleMesh};
use crate::fields::{points_tensor, Fields};
use crate::pointguide::{filter_high_fidelity, loss_bias_var, loss_naive_sdf_var, loss_usdf_var, BiasRouting};
use crate::projection::{loss_pc_var, PcStats, ViewImages, MIN_GRAD_NORM};
use crate::renderer::{generate_rays, loss_rgb_var, render_rays, render_view};
use crate::rng::{mix_seed, stream};
use crate::scalar::Real;
use crate::scenegen::Dataset;

const PIXEL_KEY: u64 = 0x9e1;
const POINT_KEY: u64 = 0x90e;
const RAY_KEY: u64 = 0x7a4;
const EVAL_KEY: u64 = 0xe7a1;

/// Tracks the total loss against its value at a reference step.
#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceGuard {
    cfg: DivergenceConfig,
    reference: Option<f64>,
    streak: usize,
}

impl DivergenceGuard {
    pub fn new(cfg: DivergenceConfig) -> Self {
        Self {
            cfg,
            reference: None,
            streak: 0,
        }
    }

    /// The threshold uses the reference magnitude, since the uncertainty
    /// term can make the total negative.
    pub fn observe(&mut self, step: usize, loss: f64) -> Result<()> {
        if step == self.cfg.reference_step {
            self.reference = Some(loss.abs());
        }
        let Some(r) = self.reference else {
            return Ok(());
        };
        if loss > self.cfg.factor * r {
            self.streak += 1;
        } else {
            self.streak = 0;
        }
        if self.streak >= self.cfg.patience {
            return Err(Error::Diverged {
                step,
                detail: format!(
                    "total loss {loss:.6e} above {} x {r:.6e} (step-{} magnitude) for {} consecutive steps",
                    self.cfg.factor, self.cfg.reference_step, self.streak
                ),
            });
        }
        Ok(())
    }
}

/// What happened in one optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub view: usize,
    pub lr: f64,
    pub parts: LossParts,
    /// Weighted, gated sum of `parts`.
    pub total: f64,
    pub rays: usize,
    pub points: usize,
    /// Points that passed the variance filter.
    pub filtered: usize,
    pub pc: Option<PcStats>,
}

/// Optimization state of one run over one dataset.
pub struct Trainer<T: Real> {
    cfg: RunConfig,
    data: Arc<Dataset>,
    fields: Fields,
    store: ParamStore<T>,
    views: ViewImages<T>,
    subsets: Vec<Vec<usize>>,
    step: usize,
    guard: DivergenceGuard,
    curves: BTreeMap<String, Vec<(usize, f64)>>,
}

impl<T: Real> Trainer<T> {
    pub fn new(cfg: RunConfig, data: Arc<Dataset>) -> Result<Self> {
        cfg.validate()?;
        data.points.check_views(data.cameras.len())?;
        let (fields, store) = Fields::new::<T>(&cfg.fields, mix_seed(cfg.train.seed, 0xf1e1d));
        let views = ViewImages::new(&data.cameras, &data.images)?;
        // Only points inside the bounding sphere, the region rendering constrains.
        let mut subsets = data.points.view_subsets(data.cameras.len());
        for s in &mut subsets {
            s.retain(|&i| norm_sq(data.points.positions[i]) < 1.0);
        }
        let guard = DivergenceGuard::new(cfg.train.divergence);
        Ok(Self {
            cfg,
            data,
            fields,
            store,
            views,
            subsets,
            step: 0,
            guard,
            curves: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn dataset(&self) -> &Dataset {
        &self.data
    }

    pub fn fields(&self) -> &Fields {
        &self.fields
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Number of completed steps.
    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn curves(&self) -> &BTreeMap<String, Vec<(usize, f64)>> {
        &self.curves
    }

    /// Builds the loss of the current step on `tape` without updating any
    /// parameter.
    pub fn build_losses(&self, tape: &mut Tape<T>) -> Result<(LossVars, StepInfo)> {
        let tc = &self.cfg.train;
        let terms = tc.mode.terms();
        let n_views = self.data.cameras.len();
        let view = self.step % n_views;
        let step_seed = mix_seed(tc.seed, self.step as u64);
        let cam = &self.data.cameras[view];

        let mut rng = stream(step_seed, PIXEL_KEY);
        let npx = cam.num_pixels();
        let pixels = sample_indices(&mut rng, npx, tc.rays.min(npx)).into_vec();
        let batch = generate_rays(cam, &pixels)?;
        if batch.rays.is_empty() {
            return Err(Error::InvalidInput(format!("view {view}: no sampled ray meets the bounding sphere")));
        }
        let seeds: Vec<u64> = batch.pixels.iter().map(|&p| mix_seed(mix_seed(step_seed, RAY_KEY), p as u64)).collect();
        let out = render_rays(tape, &self.fields, &self.store, &batch.rays, &seeds, &self.cfg.render)?;
        let img = &self.data.images[view];
        let gt: Vec<f64> = batch.pixels.iter().flat_map(|&p| img.get(p)).collect();
        let gt = tape.constant(Tensor::from_f64(batch.pixels.len(), 3, &gt));
        let rgb = loss_rgb_var(tape, out.color, gt)?;

        let mut vars = LossVars {
            rgb,
            eik: out.eikonal,
            sdf: None,
            usdf: None,
            bias: None,
            pc: None,
        };
        let mut info = StepInfo {
            view,
            rays: batch.rays.len(),
            points: 0,
            filtered: 0,
            pc: None,
        };
        let subset = &self.subsets[view];
        if !terms.uses_points() || subset.is_empty() {
            return Ok((vars, info));
        }
        let mut rng = stream(step_seed, POINT_KEY);
        let chosen = sample_indices(&mut rng, subset.len(), tc.points.min(subset.len()));
        let pts: Vec<[f64; 3]> = chosen.iter().map(|i| self.data.points.positions[subset[i]]).collect();
        info.points = pts.len();
        let x = tape.leaf(points_tensor::<T>(&pts));
        let pred = self.fields.sdf.forward(tape, &self.store, x)?;
        if terms.sdf {
            vars.sdf = Some(loss_naive_sdf_var(tape, pred.f));
        }
        let needs_grad = terms.pc || (terms.usdf && tc.point_residual == PointResidual::GradNormalized);
        let g = if needs_grad {
            let fsum = tape.sum(pred.f);
            Some(tape.grad(fsum, &[x])?[0])
        } else {
            None
        };
        if terms.usdf {
            let r = match (tc.point_residual, g) {
                (PointResidual::GradNormalized, Some(g)) => {
                    let g2 = tape.square(g);
                    let n2 = tape.sum_cols(g2);
                    let n = tape.sqrt(n2);
                    let n = tape.clamp_min(n, MIN_GRAD_NORM);
                    tape.div(pred.f, n)
                }
                _ => pred.f,
            };
            vars.usdf = Some(loss_usdf_var(tape, r, pred.sigma2)?);
        }
        if let (true, Some(g)) = (terms.pc, g) {
            let refs = vec![view; pts.len()];
            let pc = loss_pc_var(tape, x, pred.f, g, &refs, &self.views, &tc.pc)?;
            vars.pc = Some(pc.loss);
            info.pc = Some(pc.stats);
        }
        if terms.bias {
            let s2 = tape.value(pred.sigma2).to_f64();
            let keep = filter_high_fidelity(&s2, &tc.filter, self.step);
            info.filtered = keep.len();
            let f_final = if keep.is_empty() {
                None
            } else {
                let idx = Arc::new(keep);
                let xs = tape.gather_rows(x, idx.clone());
                let fb = self.fields.bias.forward(tape, &self.store, xs)?;
                let base = tape.gather_rows(pred.f, idx);
                let base = match tc.bias_routing {
                    BiasRouting::Joint => base,
                    BiasRouting::DetachBase => {
                        let v = tape.value(base).clone();
                        tape.constant(v)
                    }
                };
                Some(tape.add(base, fb))
            };
            vars.bias = Some(loss_bias_var(tape, f_final));
        }
        Ok((vars, info))
    }

    /// One optimization step.
    pub fn step(&mut self) -> Result<StepReport> {
        let tc = self.cfg.train.clone();
        let mut tape = Tape::<T>::new();
        let (vars, info) = self.build_losses(&mut tape)?;
        let parts = vars.values(&tape);
        let total = total_loss(&parts, &tc.lambda, tc.mode)?;
        let loss = vars.total(&mut tape, &tc.lambda, tc.mode);
        let grads = tape.param_grads(loss, &self.store)?;
        let lr = lr_schedule(self.step, tc.steps, tc.lr, tc.lr_warmup, tc.lr_floor);
        self.store.optimizer_step(&grads, lr)?;
        let report = StepReport {
            step: self.step,
            view: info.view,
            lr,
            parts: parts.gated(tc.mode),
            total,
            rays: info.rays,
            points: info.points,
            filtered: info.filtered,
            pc: info.pc,
        };
        if self.step % tc.log_every == 0 || self.step + 1 == tc.steps {
            self.record(&report);
        }
        self.guard.observe(self.step, total)?;
        self.step += 1;
        Ok(report)
    }

    fn record(&mut self, r: &StepReport) {
        let terms = self.cfg.train.mode.terms();
        let enabled = [true, true, terms.sdf, terms.usdf, terms.bias, terms.pc];
        for ((name, v), on) in r.parts.named().into_iter().zip(enabled) {
            if on {
                self.curves.entry(name.to_string()).or_default().push((r.step, v));
            }
        }
        self.curves.entry("total".to_string()).or_default().push((r.step, r.total));
    }

    /// Steps until `end` completed steps (capped at the configured total),
    /// calling `each` after every step.
    pub fn run_until(&mut self, end: usize, mut each: impl FnMut(&Self, &StepReport) -> Result<()>) -> Result<()> {
        let end = end.min(self.cfg.train.steps);
        while self.step < end {
            let r = self.step()?;
            each(self, &r)?;
        }
        Ok(())
    }

    pub fn checkpoint_entries(&self) -> Vec<Entry> {
        let mut out = self.store.to_entries();
        out.push(Entry::new("train.step", vec![1], vec![self.step as f64]));
        let g = &self.guard;
        out.push(Entry::new(
            "train.guard",
            vec![2],
            vec![g.reference.unwrap_or(f64::NAN), g.streak as f64],
        ));
        for (name, series) in &self.curves {
            let flat: Vec<f64> = series.iter().flat_map(|&(s, v)| [s as f64, v]).collect();
            out.push(Entry::new(format!("curve/{name}"), vec![series.len(), 2], flat));
        }
        out
    }

    pub fn restore_entries(&mut self, entries: &[Entry]) -> Result<()> {
        self.store.load_entries(entries)?;
        let find = |name: &str| {
            entries
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing entry `{name}`")))
        };
        self.step = find("train.step")?.values[0] as usize;
        let g = &find("train.guard")?.values;
        if g.len() != 2 {
            return Err(Error::Checkpoint("malformed guard entry".into()));
        }
        self.guard.reference = (!g[0].is_nan()).then_some(g[0]);
        self.guard.streak = g[1] as usize;
        self.curves = entries
            .iter()
            .filter_map(|e| e.name.strip_prefix("curve/").map(|n| (n, e)))
            .map(|(n, e)| (n.to_string(), e.values.chunks_exact(2).map(|c| (c[0] as usize, c[1])).collect()))
            .collect();
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        checkpoint::write_file::<T>(path, &self.checkpoint_entries())
    }

    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        self.restore_entries(&checkpoint::read_file(path)?)
    }

    /// SDF used for the evaluation mesh at `points`, intersected with the
    /// bounding sphere: outside it neither rays nor guide points constrain
    /// the field.
    pub fn mesh_field_values(&self, points: &[[f64; 3]]) -> Result<Vec<f64>> {
        let mut f = self.fields.sdf.sdf_values(&self.store, points)?;
        if self.cfg.eval.mesh_field == MeshField::Final {
            let b = self.fields.bias.values(&self.store, points)?;
            for (a, b) in f.iter_mut().zip(b) {
                *a += b;
            }
        }
        for (v, p) in f.iter_mut().zip(points) {
            *v = v.max(norm_sq(*p).sqrt() - 1.0);
        }
        Ok(f)
    }

    pub fn extract_mesh(&self) -> Result<TriangleMesh> {
        marching_cubes(|p| self.mesh_field_values(p), self.cfg.eval.resolution, &Aabb::unit())
    }

    /// Mesh plus Chamfer distance against the analytic surface, depth error
    /// on evenly spaced views and the variance/noise AUC of the guide points.
    pub fn evaluate(&self) -> Result<(TriangleMesh, MetricsReport)> {
        let ec = &self.cfg.eval;
        let mesh = self.extract_mesh()?;
        if mesh.is_empty() {
            return Err(Error::InvalidInput("reconstructed field has no zero crossing in the unit cube".into()));
        }
        let seed = mix_seed(self.cfg.train.seed, EVAL_KEY);
        let scene = &self.data.scene;
        let gt = surface_samples(|p| scene.sdf(p), ec.points, 128, seed)?;
        let mut rng = stream(seed, 1);
        let ours = mesh.sample_uniform(ec.points, &mut rng)?;
        let cd = chamfer(&ours, &gt)?;

        let n_views = self.data.cameras.len();
        let mut errs = Vec::new();
        for k in 0..ec.depth_views.min(n_views) {
            let v = k * n_views / ec.depth_views.min(n_views);
            let r = render_view(&self.fields, &self.store, &self.data.cameras[v], &self.cfg.render, mix_seed(seed, v as u64), ec.render_chunk)?;
            if let Some(e) = depth_mae(&r.depth, &self.data.depths[v])? {
                errs.push(e);
            }
        }
        let depth = (!errs.is_empty()).then(|| errs.iter().sum::<f64>() / errs.len() as f64);

        let auc = match &self.data.points.gt_noise_label {
            Some(labels) => {
                let pred = self.fields.sdf.predict(&self.store, &self.data.points.positions)?;
                let score: Vec<f64> = pred.iter().map(|p| p.sigma2_act).collect();
                uncertainty_noise_auc(&score, labels)?
            }
            None => None,
        };
        let report = MetricsReport {
            chamfer: cd,
            depth_mae: depth,
            auc_noise: auc,
            loss_curves: self.curves.clone(),
            mesh_vertices: mesh.vertices.len(),
            mesh_triangles: mesh.triangles.len(),
        };
        Ok((mesh, report))
    }
}

fn norm_sq(p: [f64; 3]) -> f64 {
    p[0] * p[0] + p[1] * p[1] + p[2] * p[2]
}

/// Bookkeeping from [`Trainer::build_losses`].
#[derive(Debug, Clone, PartialEq)]
pub struct StepInfo {
    pub view: usize,
    pub rays: usize,
    pub points: usize,
    pub filtered: usize,
    pub pc: Option<PcStats>,
}
