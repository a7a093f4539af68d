use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{Mode, RunConfig};
use super::trainer::{StepReport, Trainer};
use crate::error::{Error, Result};
use crate::evalx::{MetricsReport, TriangleMesh};
use crate::scalar::Real;
use crate::scenegen::Dataset;

/// Reads the dataset directory named by the config, or generates the scene.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data {
        Some(dir) => Dataset::read(dir),
        None => Dataset::generate(&cfg.scene),
    }
}

/// Where a run writes its artifacts and whether it resumes.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    /// Echo log lines to stderr.
    pub verbose: bool,
}

pub struct RunOutcome<T: Real> {
    pub trainer: Trainer<T>,
    pub mesh: TriangleMesh,
    pub metrics: MetricsReport,
    pub seconds: f64,
}

fn log_line(r: &StepReport) -> String {
    let mut s = format!("step {:>6} view {:>3} lr {:.3e} total {:+.6e}", r.step, r.view, r.lr, r.total);
    for (name, v) in r.parts.named() {
        let _ = write!(s, " {name} {v:+.5e}");
    }
    let _ = write!(s, " rays {} points {} filtered {}", r.rays, r.points, r.filtered);
    if let Some(pc) = r.pc {
        let _ = write!(
            s,
            " pc_scored {} pc_degenerate {} pc_ref_invalid {} pc_no_source {}",
            pc.scored, pc.degenerate, pc.ref_invalid, pc.no_source
        );
    }
    s
}

/// Trains to the configured step count, writing `log.txt`, periodic
/// checkpoints, `checkpoints/final.ckpt`, `mesh.ply` and `metrics.json`
/// under `opts.out` when given.
pub fn train_and_evaluate<T: Real>(cfg: &RunConfig, data: Arc<Dataset>, opts: &RunOptions) -> Result<RunOutcome<T>> {
    let start = Instant::now();
    let mut trainer = Trainer::<T>::new(cfg.clone(), data)?;
    if let Some(ckpt) = &opts.resume {
        trainer.load_checkpoint(ckpt)?;
    }
    let mut log = match &opts.out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let f = fs::OpenOptions::new()
                .create(true)
                .append(opts.resume.is_some())
                .write(true)
                .truncate(opts.resume.is_none())
                .open(dir.join("log.txt"))?;
            Some(f)
        }
        None => None,
    };
    let every = cfg.train.checkpoint_every;
    let log_every = cfg.train.log_every;
    let steps = cfg.train.steps;
    trainer.run_until(steps, |t, r| {
        if r.step % log_every == 0 || r.step + 1 == steps {
            let line = log_line(r);
            if let Some(f) = log.as_mut() {
                writeln!(f, "{line}")?;
            }
            if opts.verbose {
                eprintln!("{line}");
            }
        }
        if let (Some(dir), true) = (&opts.out, every > 0 && (r.step + 1) % every == 0) {
            t.save_checkpoint(&dir.join(format!("checkpoints/step_{:06}.ckpt", r.step + 1)))?;
        }
        Ok(())
    })?;
    let (mesh, metrics) = trainer.evaluate()?;
    if let Some(dir) = &opts.out {
        trainer.save_checkpoint(&dir.join("checkpoints/final.ckpt"))?;
        mesh.write_ply(&dir.join("mesh.ply"))?;
        metrics.write_json(&dir.join("metrics.json"))?;
        if let Some(f) = log.as_mut() {
            writeln!(
                f,
                "eval chamfer {:.6e} depth_mae {:?} auc_noise {:?} vertices {} triangles {}",
                metrics.chamfer, metrics.depth_mae, metrics.auc_noise, metrics.mesh_vertices, metrics.mesh_triangles
            )?;
        }
    }
    Ok(RunOutcome {
        trainer,
        mesh,
        metrics,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuiteKind {
    Ablation,
    NoiseSweep,
    DensitySweep,
}

impl std::str::FromStr for SuiteKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ablation" => Ok(Self::Ablation),
            "noise_sweep" | "noise" => Ok(Self::NoiseSweep),
            "density_sweep" | "density" => Ok(Self::DensitySweep),
            _ => Err(Error::Config(format!("unknown suite `{s}` (ablation, noise_sweep, density_sweep)"))),
        }
    }
}

pub const NOISE_LEVELS: [f64; 6] = [0.0, 0.10, 0.15, 0.20, 0.25, 0.30];
pub const DENSITY_POINTS: [usize; 5] = [100_000, 40_000, 20_000, 10_000, 2_000];
/// Cloud size the density sweep downsamples from.
pub const DENSITY_SOURCE_POINTS: usize = 200_000;

/// One configuration of a suite, before seeds are applied.
#[derive(Debug, Clone)]
pub struct SuiteCase {
    pub key: String,
    pub config: RunConfig,
}

/// The configurations a suite runs, derived from `base`.
pub fn suite_cases(kind: SuiteKind, base: &RunConfig) -> Vec<SuiteCase> {
    match kind {
        SuiteKind::Ablation => Mode::ALL
            .iter()
            .map(|&m| {
                let mut c = base.clone();
                c.train.mode = m;
                SuiteCase {
                    key: m.name().to_string(),
                    config: c,
                }
            })
            .collect(),
        SuiteKind::NoiseSweep => NOISE_LEVELS
            .iter()
            .map(|&p| {
                let mut c = base.clone();
                c.data = None;
                c.scene.noise.proportion = p;
                SuiteCase {
                    key: format!("noise={:.0}%", p * 100.0),
                    config: c,
                }
            })
            .collect(),
        SuiteKind::DensitySweep => DENSITY_POINTS
            .iter()
            .map(|&n| {
                let mut c = base.clone();
                c.data = None;
                c.scene.points = DENSITY_SOURCE_POINTS;
                c.scene.downsample = DENSITY_SOURCE_POINTS / n;
                SuiteCase {
                    key: format!("points={n}"),
                    config: c,
                }
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteRun {
    pub seed: u64,
    pub chamfer: Option<f64>,
    pub depth_mae: Option<f64>,
    pub auc_noise: Option<f64>,
    pub seconds: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub key: String,
    pub mode: Mode,
    pub runs: Vec<SuiteRun>,
    /// Median Chamfer distance over the successful runs.
    pub median_chamfer: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub kind: SuiteKind,
    pub rows: Vec<SuiteRow>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

impl SuiteReport {
    pub fn row(&self, key: &str) -> Option<&SuiteRow> {
        self.rows.iter().find(|r| r.key == key)
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<16} {:<10} {:>12} {:>12} {:>10} {:>6}\n", "case", "mode", "median_cd", "depth_mae", "auc", "ok");
        for r in &self.rows {
            let ok = r.runs.iter().filter(|x| x.error.is_none()).count();
            let mean = |f: fn(&SuiteRun) -> Option<f64>| {
                let v: Vec<f64> = r.runs.iter().filter_map(f).collect();
                (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
            };
            let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.5}"));
            let _ = writeln!(
                s,
                "{:<16} {:<10} {:>12} {:>12} {:>10} {:>3}/{:<2}",
                r.key,
                r.mode.name(),
                fmt(r.median_chamfer),
                fmt(mean(|x| x.depth_mae)),
                fmt(mean(|x| x.auc_noise)),
                ok,
                r.runs.len()
            );
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("suite.json"), serde_json::to_string_pretty(self)?)?;
        fs::write(dir.join("suite.txt"), self.to_table())?;
        Ok(())
    }
}

/// Runs every case of a suite once per seed. A failing run is recorded with
/// its error and the suite moves on. Runs write their artifacts to
/// `out/<key>/seed_<seed>/` when `out` is given.
pub fn run_suite<T: Real>(
    kind: SuiteKind,
    base: &RunConfig,
    seeds: &[u64],
    out: Option<&Path>,
    mut progress: impl FnMut(&str, &SuiteRun),
) -> Result<SuiteReport> {
    base.validate()?;
    let mut rows = Vec::new();
    let mut shared: Option<Arc<Dataset>> = None;
    for case in suite_cases(kind, base) {
        // The ablation reuses one dataset; sweeps change it per case.
        let data = match (&shared, kind) {
            (Some(d), SuiteKind::Ablation) => Ok(d.clone()),
            _ => load_dataset(&case.config).map(Arc::new),
        };
        if kind == SuiteKind::Ablation {
            if let Ok(d) = &data {
                shared = Some(d.clone());
            }
        }
        let mut runs = Vec::new();
        for &seed in seeds {
            let mut cfg = case.config.clone();
            cfg.train.seed = seed;
            let opts = RunOptions {
                out: out.map(|d| d.join(sanitize(&case.key)).join(format!("seed_{seed}"))),
                ..RunOptions::default()
            };
            let start = Instant::now();
            let result = data
                .as_ref()
                .map_err(|e| Error::InvalidInput(e.to_string()))
                .and_then(|d| train_and_evaluate::<T>(&cfg, d.clone(), &opts));
            let run = match result {
                Ok(o) => SuiteRun {
                    seed,
                    chamfer: Some(o.metrics.chamfer),
                    depth_mae: o.metrics.depth_mae,
                    auc_noise: o.metrics.auc_noise,
                    seconds: o.seconds,
                    error: None,
                },
                Err(e) => SuiteRun {
                    seed,
                    chamfer: None,
                    depth_mae: None,
                    auc_noise: None,
                    seconds: start.elapsed().as_secs_f64(),
                    error: Some(e.to_string()),
                },
            };
            progress(&case.key, &run);
            runs.push(run);
        }
        let cds: Vec<f64> = runs.iter().filter_map(|r| r.chamfer).collect();
        rows.push(SuiteRow {
            key: case.key,
            mode: case.config.train.mode,
            median_chamfer: median(&cds),
            runs,
        });
    }
    let report = SuiteReport { kind, rows };
    if let Some(dir) = out {
        report.write(dir)?;
    }
    Ok(report)
}

fn sanitize(key: &str) -> String {
    key.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '_' }).collect()
}
