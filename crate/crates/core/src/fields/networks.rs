use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::encoding::Encoding;
use super::mlp::{he_init, normal, Activation, Linear, Mlp};
use crate::diffcore::{softplus, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Architecture and initialization of the three fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldConfig {
    pub pos_bands: usize,
    pub dir_bands: usize,
    pub sdf_hidden: usize,
    pub sdf_layers: usize,
    pub fea_dim: usize,
    pub bias_hidden: usize,
    pub bias_layers: usize,
    pub color_hidden: usize,
    pub color_layers: usize,
    pub softplus_beta: f64,
    /// Radius of the sphere the SDF network starts out approximating.
    pub init_radius: f64,
    /// Variance floor added after the softplus of the variance head.
    pub sigma0_sq: f64,
    /// Multiplier on the bias network's output layer at initialization.
    pub bias_init_scale: f64,
    /// Initial bias of the raw variance head.
    pub variance_init_raw: f64,
    /// Initial value of the sharpness `s` of the logistic density.
    pub init_s: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            pos_bands: 6,
            dir_bands: 4,
            sdf_hidden: 256,
            sdf_layers: 4,
            fea_dim: 64,
            bias_hidden: 256,
            bias_layers: 2,
            color_hidden: 128,
            color_layers: 2,
            softplus_beta: 100.0,
            init_radius: 0.5,
            sigma0_sq: 1e-4,
            bias_init_scale: 0.05,
            variance_init_raw: 0.0,
            init_s: 30.0,
        }
    }
}

/// `sigma0_sq + log(1 + exp(raw))`, always strictly above `sigma0_sq`.
pub fn activate_variance(sigma2_raw: f64, sigma0_sq: f64) -> f64 {
    sigma0_sq + softplus(sigma2_raw)
}

/// Elementwise `f + f_b`.
pub fn final_sdf(base_f: &[f64], bias_f: &[f64]) -> Result<Vec<f64>> {
    if base_f.len() != bias_f.len() {
        return Err(Error::Shape(format!(
            "final_sdf: {} base values vs {} bias values",
            base_f.len(),
            bias_f.len()
        )));
    }
    Ok(base_f.iter().zip(bias_f).map(|(a, b)| a + b).collect())
}

/// Per-point Gaussian SDF prediction from the base network.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSdfPrediction {
    pub f: f64,
    pub sigma2_raw: f64,
    pub sigma2_act: f64,
    pub fea: Vec<f64>,
}

/// Tape handles for one batched SDF network evaluation.
#[derive(Debug, Clone, Copy)]
pub struct SdfOutput {
    /// `n x 1` mean SDF.
    pub f: Var,
    /// `n x 1` raw variance head.
    pub sigma2_raw: Var,
    /// `n x 1` activated variance.
    pub sigma2: Var,
    /// `n x fea_dim` feature vector.
    pub fea: Var,
}

fn check_points<T: Real>(tape: &Tape<T>, x: Var) -> Result<()> {
    let v = tape.value(x);
    if v.cols() != 3 {
        return Err(Error::Shape(format!("expected n x 3 points, got {:?}", v.shape())));
    }
    if !v.is_finite() {
        return Err(Error::InvalidInput("non-finite query coordinates".into()));
    }
    Ok(())
}

/// Base SDF network: one trunk feeding the mean SDF, the raw variance and the
/// feature heads.
#[derive(Debug, Clone, PartialEq)]
pub struct SdfNetwork {
    pub encoding: Encoding,
    pub mlp: Mlp,
    pub fea_dim: usize,
    pub sigma0_sq: f64,
}

impl SdfNetwork {
    /// Registers parameters with the geometric initialization that makes the
    /// network approximate `|x| - init_radius`.
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, cfg: &FieldConfig) -> Self {
        let encoding = Encoding::frequency(cfg.pos_bands);
        let in_dim = encoding.out_dim(3);
        let h = cfg.sdf_hidden;
        let out_dim = 2 + cfg.fea_dim;
        let mut layers = Vec::new();
        for l in 0..cfg.sdf_layers {
            let d_in = if l == 0 { in_dim } else { h };
            let std = 2f64.sqrt() / (h as f64).sqrt() * if l == 0 { FIRST_LAYER_GAIN } else { 1.0 };
            let mut w = normal(rng, 0.0, std, d_in * h);
            if l == 0 {
                // Only the raw coordinates feed the first layer at init.
                for r in 3..d_in {
                    for c in 0..h {
                        w[r * h + c] = 0.0;
                    }
                }
            }
            layers.push(Linear::register(store, &format!("sdf.l{l}"), d_in, h, w, vec![0.0; h]));
        }
        let d_in = if cfg.sdf_layers == 0 { in_dim } else { h };
        let mut w = vec![0.0; d_in * out_dim];
        let sdf_col = normal(rng, std::f64::consts::PI.sqrt() / (d_in as f64).sqrt(), 1e-4, d_in);
        let fea_cols = normal(rng, 0.0, 1.0 / (d_in as f64).sqrt(), d_in * cfg.fea_dim);
        for r in 0..d_in {
            w[r * out_dim] = sdf_col[r];
            for k in 0..cfg.fea_dim {
                w[r * out_dim + 2 + k] = fea_cols[r * cfg.fea_dim + k];
            }
        }
        let mut b = vec![0.0; out_dim];
        b[0] = -cfg.init_radius;
        b[1] = cfg.variance_init_raw;
        let head = Linear::register(store, "sdf.head", d_in, out_dim, w, b);
        layers.push(head);
        let net = Self {
            encoding,
            mlp: Mlp {
                layers,
                activation: Activation::Softplus {
                    beta: cfg.softplus_beta,
                },
            },
            fea_dim: cfg.fea_dim,
            sigma0_sq: cfg.sigma0_sq,
        };
        // With softplus activations the trunk is not positively homogeneous,
        // so the raw head is flattened near the origin. Re-anchor the SDF
        // column affinely so that f(0) = -r0 and f averages zero on the sphere.
        let probe = fibonacci_sphere(64, cfg.init_radius);
        let (Ok(g0), Ok(g1)) = (net.sdf_values(store, &[[0.0; 3]]), net.sdf_values(store, &probe)) else {
            return net;
        };
        let g0 = g0[0];
        let g1 = g1.iter().sum::<f64>() / g1.len() as f64;
        if g1 - g0 > 1e-6 {
            let a = cfg.init_radius / (g1 - g0);
            let w = store.value_mut(head.weight);
            for r in 0..d_in {
                let v = w.data()[r * out_dim];
                w.data_mut()[r * out_dim] = v * T::c(a);
            }
            let b = store.value_mut(head.bias);
            let v = b.data()[0].f64();
            b.data_mut()[0] = T::c(a * (v - g1));
        }
        net
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<SdfOutput> {
        check_points(tape, x)?;
        let enc = self.encoding.encode(tape, x);
        let out = self.mlp.forward(tape, store, enc);
        let f = tape.slice(out, 0, 1);
        let sigma2_raw = tape.slice(out, 1, 1);
        let sp = tape.softplus(sigma2_raw, 1.0);
        let sigma2 = tape.offset(sp, self.sigma0_sq);
        let fea = tape.slice(out, 2, self.fea_dim);
        Ok(SdfOutput {
            f,
            sigma2_raw,
            sigma2,
            fea,
        })
    }

    /// Mean SDF only (cheaper: skips the variance activation).
    pub fn sdf<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        check_points(tape, x)?;
        let enc = self.encoding.encode(tape, x);
        let out = self.mlp.forward(tape, store, enc);
        Ok(tape.slice(out, 0, 1))
    }

    /// Batched evaluation outside of training, chunked to bound memory.
    pub fn predict<T: Real>(&self, store: &ParamStore<T>, points: &[[f64; 3]]) -> Result<Vec<GaussianSdfPrediction>> {
        let mut out = Vec::with_capacity(points.len());
        for chunk in points.chunks(INFER_CHUNK) {
            let mut tape = Tape::new();
            let x = tape.constant(points_tensor(chunk));
            let o = self.forward(&mut tape, store, x)?;
            let (f, raw, s2, fea) = (tape.value(o.f), tape.value(o.sigma2_raw), tape.value(o.sigma2), tape.value(o.fea));
            for i in 0..chunk.len() {
                out.push(GaussianSdfPrediction {
                    f: f.at(i, 0).f64(),
                    sigma2_raw: raw.at(i, 0).f64(),
                    sigma2_act: s2.at(i, 0).f64(),
                    fea: fea.row(i).iter().map(|v| v.f64()).collect(),
                });
            }
        }
        Ok(out)
    }

    pub fn sdf_values<T: Real>(&self, store: &ParamStore<T>, points: &[[f64; 3]]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(points.len());
        for chunk in points.chunks(INFER_CHUNK) {
            let mut tape = Tape::new();
            let x = tape.constant(points_tensor(chunk));
            let f = self.sdf(&mut tape, store, x)?;
            out.extend(tape.value(f).data().iter().map(|v| v.f64()));
        }
        Ok(out)
    }

    pub fn params(&self) -> Vec<ParamId> {
        layer_params(&self.mlp)
    }
}

const INFER_CHUNK: usize = 8192;

/// Extra gain on the first trunk layer so that pre-activations at unit scale
/// sit well outside the softplus knee.
const FIRST_LAYER_GAIN: f64 = 4.0;

/// `n` near-uniform points on a sphere of the given radius.
pub(crate) fn fibonacci_sphere(n: usize, radius: f64) -> Vec<[f64; 3]> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            [radius * r * phi.cos(), radius * r * phi.sin(), radius * z]
        })
        .collect()
}

pub fn points_tensor<T: Real>(points: &[[f64; 3]]) -> Tensor<T> {
    Tensor::from_rows(points)
}

fn layer_params(mlp: &Mlp) -> Vec<ParamId> {
    mlp.layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
}

/// Correction field added to the base SDF on high-fidelity points.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasNetwork {
    pub encoding: Encoding,
    pub mlp: Mlp,
}

impl BiasNetwork {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, cfg: &FieldConfig) -> Self {
        let encoding = Encoding::frequency(cfg.pos_bands);
        let in_dim = encoding.out_dim(3);
        let h = cfg.bias_hidden;
        let mut layers = Vec::new();
        for l in 0..cfg.bias_layers {
            let d_in = if l == 0 { in_dim } else { h };
            let w = he_init(rng, d_in, h);
            layers.push(Linear::register(store, &format!("bias.l{l}"), d_in, h, w, vec![0.0; h]));
        }
        let d_in = if cfg.bias_layers == 0 { in_dim } else { h };
        let w: Vec<f64> = he_init(rng, d_in, 1)
            .into_iter()
            .map(|v| v * cfg.bias_init_scale)
            .collect();
        layers.push(Linear::register(store, "bias.head", d_in, 1, w, vec![0.0]));
        Self {
            encoding,
            mlp: Mlp {
                layers,
                activation: Activation::Softplus {
                    beta: cfg.softplus_beta,
                },
            },
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        check_points(tape, x)?;
        let enc = self.encoding.encode(tape, x);
        Ok(self.mlp.forward(tape, store, enc))
    }

    pub fn values<T: Real>(&self, store: &ParamStore<T>, points: &[[f64; 3]]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(points.len());
        for chunk in points.chunks(INFER_CHUNK) {
            let mut tape = Tape::new();
            let x = tape.constant(points_tensor(chunk));
            let f = self.forward(&mut tape, store, x)?;
            out.extend(tape.value(f).data().iter().map(|v| v.f64()));
        }
        Ok(out)
    }

    pub fn params(&self) -> Vec<ParamId> {
        layer_params(&self.mlp)
    }
}

/// Radiance conditioned on position, view direction, SDF gradient and the
/// SDF feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorNetwork {
    pub pos_encoding: Encoding,
    pub dir_encoding: Encoding,
    pub mlp: Mlp,
}

impl ColorNetwork {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, cfg: &FieldConfig) -> Self {
        let pos_encoding = Encoding::frequency(cfg.pos_bands);
        let dir_encoding = Encoding::frequency(cfg.dir_bands);
        let in_dim = pos_encoding.out_dim(3) + dir_encoding.out_dim(3) + 3 + cfg.fea_dim;
        let h = cfg.color_hidden;
        let mut layers = Vec::new();
        for l in 0..cfg.color_layers {
            let d_in = if l == 0 { in_dim } else { h };
            let w = he_init(rng, d_in, h);
            layers.push(Linear::register(store, &format!("color.l{l}"), d_in, h, w, vec![0.0; h]));
        }
        let d_in = if cfg.color_layers == 0 { in_dim } else { h };
        let w = normal(rng, 0.0, 1.0 / (d_in as f64).sqrt(), d_in * 3);
        layers.push(Linear::register(store, "color.head", d_in, 3, w, vec![0.0; 3]));
        Self {
            pos_encoding,
            dir_encoding,
            mlp: Mlp {
                layers,
                activation: Activation::Relu,
            },
        }
    }

    /// RGB in `[0, 1]` per row. `dirs` must be unit vectors (tolerance 1e-3).
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        dirs: Var,
        grad_f: Var,
        fea: Var,
    ) -> Result<Var> {
        check_points(tape, x)?;
        let d = tape.value(dirs);
        for r in 0..d.rows() {
            let n = d.row(r).iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-3 {
                return Err(Error::InvalidInput(format!("view direction {r} has norm {n}")));
            }
        }
        let px = self.pos_encoding.encode(tape, x);
        let pd = self.dir_encoding.encode(tape, dirs);
        let input = tape.concat(&[px, pd, grad_f, fea]);
        let out = self.mlp.forward(tape, store, input);
        Ok(tape.sigmoid(out))
    }

    pub fn params(&self) -> Vec<ParamId> {
        layer_params(&self.mlp)
    }
}

/// All trainable fields sharing one parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct Fields {
    pub config: FieldConfig,
    pub sdf: SdfNetwork,
    pub bias: BiasNetwork,
    pub color: ColorNetwork,
    /// Stores `ln(s) / S_SCALE` for the logistic sharpness `s`.
    pub log_s: ParamId,
}

/// `s = exp(S_SCALE * log_s)`; the scale speeds up the optimizer on `s`.
pub const S_SCALE: f64 = 10.0;

impl Fields {
    pub fn new<T: Real>(cfg: &FieldConfig, seed: u64) -> (Self, ParamStore<T>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sdf = SdfNetwork::new(&mut store, &mut rng, cfg);
        let color = ColorNetwork::new(&mut store, &mut rng, cfg);
        let bias = BiasNetwork::new(&mut store, &mut rng, cfg);
        let log_s = store.insert("render.log_s", Tensor::scalar(T::c(cfg.init_s.ln() / S_SCALE)));
        (
            Self {
                config: cfg.clone(),
                sdf,
                bias,
                color,
                log_s,
            },
            store,
        )
    }

    /// Trainable sharpness `s` as a `1 x 1` tape value.
    pub fn s<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>) -> Var {
        let v = tape.param(store, self.log_s);
        let scaled = tape.scale(v, S_SCALE);
        tape.exp(scaled)
    }

    pub fn s_value<T: Real>(&self, store: &ParamStore<T>) -> f64 {
        (S_SCALE * store.value(self.log_s).item().f64()).exp()
    }
}
