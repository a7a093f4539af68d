use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use sdfguide::renderer::render_view;
use sdfguide::rng::mix_seed;
use sdfguide::scenegen::Dataset;
use sdfguide::train::{load_dataset, run_suite, train_and_evaluate, Mode, RunConfig, RunOptions, SuiteKind, Trainer};
use sdfguide::{Error, Real, Result};

#[derive(Parser, Debug)]
#[command(name = "sdfguide", version, about = "Point-guided neural implicit surface reconstruction")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
    /// TOML run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in configuration used when --config is absent.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Default)]
    preset: Preset,
    /// Training seed (scene seed for gen-scene).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// base, naive_pg, model_a, model_b, model_c or full.
    #[arg(long, global = true)]
    mode: Option<String>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Total training steps.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Run in 64-bit floating point.
    #[arg(long = "f64", global = true)]
    use_f64: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Default,
    Ci,
}

#[derive(Subcommand, Debug)]
enum Verb {
    /// Render a synthetic scene and its guide points into --out.
    GenScene,
    /// Train and evaluate; writes log.txt, checkpoints, mesh.ply and metrics.json.
    Train {
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Re-evaluate a checkpoint.
    Eval {
        /// Defaults to <out>/checkpoints/final.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run an experiment suite; writes suite.json and suite.txt.
    Suite {
        #[arg(long, default_value = "ablation")]
        kind: String,
        /// Comma-separated training seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Render every view of a checkpoint to <out>/renders.
    Render {
        /// Defaults to <out>/checkpoints/final.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => match cli.preset {
            Preset::Default => RunConfig::default(),
            Preset::Ci => RunConfig::ci(),
        },
    };
    if let Some(seed) = cli.seed {
        match cli.verb {
            Verb::GenScene => cfg.scene.seed = seed,
            _ => cfg.train.seed = seed,
        }
    }
    if let Some(mode) = &cli.mode {
        cfg.train.mode = mode.parse::<Mode>()?;
    }
    if let Some(steps) = cli.steps {
        cfg.train.steps = steps;
    }
    cfg.train.f64 |= cli.use_f64;
    cfg.validate()?;
    Ok(cfg)
}

fn checkpoint_path(out: &Path, given: &Option<PathBuf>) -> PathBuf {
    given.clone().unwrap_or_else(|| out.join("checkpoints/final.ckpt"))
}

fn run<T: Real>(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let out = &cli.out;
    match &cli.verb {
        Verb::GenScene => {
            let data = Dataset::generate(&cfg.scene)?;
            data.write(out)?;
            eprintln!(
                "wrote {} views and {} points to {}",
                data.cameras.len(),
                data.points.len(),
                out.display()
            );
        }
        Verb::Train { resume } => {
            std::fs::create_dir_all(out)?;
            std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;
            let data = Arc::new(load_dataset(cfg)?);
            let opts = RunOptions {
                out: Some(out.clone()),
                resume: resume.clone(),
                verbose: true,
            };
            let o = train_and_evaluate::<T>(cfg, data, &opts)?;
            eprintln!(
                "chamfer {:.6} depth_mae {:?} auc_noise {:?} ({:.1} s)",
                o.metrics.chamfer, o.metrics.depth_mae, o.metrics.auc_noise, o.seconds
            );
        }
        Verb::Eval { checkpoint } => {
            let mut t = Trainer::<T>::new(cfg.clone(), Arc::new(load_dataset(cfg)?))?;
            t.load_checkpoint(&checkpoint_path(out, checkpoint))?;
            let (mesh, metrics) = t.evaluate()?;
            mesh.write_ply(&out.join("mesh.ply"))?;
            metrics.write_json(&out.join("metrics.json"))?;
            eprintln!(
                "chamfer {:.6} depth_mae {:?} auc_noise {:?}",
                metrics.chamfer, metrics.depth_mae, metrics.auc_noise
            );
        }
        Verb::Suite { kind, seeds } => {
            let kind: SuiteKind = kind.parse()?;
            let report = run_suite::<T>(kind, cfg, seeds, Some(out), |key, r| match &r.error {
                None => eprintln!("{key} seed {}: chamfer {:.6} ({:.1} s)", r.seed, r.chamfer.unwrap_or(f64::NAN), r.seconds),
                Some(e) => eprintln!("{key} seed {}: FAILED: {e}", r.seed),
            })?;
            print!("{}", report.to_table());
        }
        Verb::Render { checkpoint } => {
            let mut t = Trainer::<T>::new(cfg.clone(), Arc::new(load_dataset(cfg)?))?;
            t.load_checkpoint(&checkpoint_path(out, checkpoint))?;
            for (v, cam) in t.dataset().cameras.iter().enumerate() {
                let r = render_view(t.fields(), t.store(), cam, &cfg.render, mix_seed(cfg.train.seed, v as u64), cfg.eval.render_chunk)?;
                r.color.write_png(&out.join(format!("renders/view_{v:03}.png")))?;
            }
            eprintln!("rendered {} views to {}", t.dataset().cameras.len(), out.join("renders").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = load_config(&cli).and_then(|cfg| {
        if cfg.train.f64 {
            run::<f64>(&cli, &cfg)
        } else {
            run::<f32>(&cli, &cfg)
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Diverged { .. } = e {
                return ExitCode::from(3);
            }
            ExitCode::FAILURE
        }
    }
}
