use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::fields::GaussianSdfPrediction;
use crate::scalar::Real;

/// Variance threshold selecting the points the bias network trains on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub epsilon: f64,
    /// Steps before the filter (and with it the bias loss) switches on.
    pub warmup_steps: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            epsilon: 4e-4,
            warmup_steps: 1000,
        }
    }
}

impl FilterConfig {
    /// `epsilon` must exceed the variance floor, or no point could pass.
    pub fn validate(&self, sigma0_sq: f64) -> Result<()> {
        if !(self.epsilon > sigma0_sq) {
            return Err(Error::Config(format!(
                "filter epsilon {} must exceed the variance floor {sigma0_sq}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Where the bias loss sends gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasRouting {
    /// Into both the base SDF and the bias network.
    #[default]
    Joint,
    /// Into the bias network only; the base SDF enters as a constant.
    DetachBase,
}

/// Gaussian negative log-likelihood of a zero target:
/// `mean(f^2 / (2 s) + ln(s) / 2)` with `s` the activated variance.
pub fn loss_usdf(batch: &[GaussianSdfPrediction]) -> Result<f64> {
    let f: Vec<f64> = batch.iter().map(|p| p.f).collect();
    let s: Vec<f64> = batch.iter().map(|p| p.sigma2_act).collect();
    loss_usdf_values(&f, &s)
}

pub fn loss_usdf_values(f: &[f64], sigma2: &[f64]) -> Result<f64> {
    if f.is_empty() || f.len() != sigma2.len() {
        return Err(Error::Shape(format!("usdf loss over {} means and {} variances", f.len(), sigma2.len())));
    }
    let total: f64 = f
        .iter()
        .zip(sigma2)
        .map(|(&f, &s)| f * f / (2.0 * s) + 0.5 * s.ln())
        .sum();
    Ok(total / f.len() as f64)
}

/// Tape version of [`loss_usdf`] over `n x 1` means and variances.
pub fn loss_usdf_var<T: Real>(tape: &mut Tape<T>, f: Var, sigma2: Var) -> Result<Var> {
    if tape.shape(f) != tape.shape(sigma2) || tape.shape(f)[1] != 1 || tape.shape(f)[0] == 0 {
        return Err(Error::Shape(format!("usdf loss: {:?} vs {:?}", tape.shape(f), tape.shape(sigma2))));
    }
    let f2 = tape.square(f);
    let ratio = tape.div(f2, sigma2);
    let ratio = tape.scale(ratio, 0.5);
    let log = tape.log(sigma2);
    let log = tape.scale(log, 0.5);
    let per = tape.add(ratio, log);
    Ok(tape.mean(per))
}

/// Mean absolute SDF at the guide points.
pub fn loss_naive_sdf(f: &[f64]) -> Result<f64> {
    if f.is_empty() {
        return Err(Error::InvalidInput("naive point loss over an empty batch".into()));
    }
    Ok(f.iter().map(|v| v.abs()).sum::<f64>() / f.len() as f64)
}

pub fn loss_naive_sdf_var<T: Real>(tape: &mut Tape<T>, f: Var) -> Var {
    let a = tape.abs(f);
    tape.mean(a)
}

/// Indices with activated variance strictly below `epsilon`, in input order.
/// Empty before the warmup ends.
pub fn filter_high_fidelity(sigma2: &[f64], cfg: &FilterConfig, step: usize) -> Vec<usize> {
    if step < cfg.warmup_steps {
        return Vec::new();
    }
    sigma2
        .iter()
        .enumerate()
        .filter(|(_, &s)| s < cfg.epsilon)
        .map(|(i, _)| i)
        .collect()
}

/// Mean absolute final SDF over the filtered points; `0` when none passed.
pub fn loss_bias(f_final: &[f64]) -> f64 {
    if f_final.is_empty() {
        return 0.0;
    }
    f_final.iter().map(|v| v.abs()).sum::<f64>() / f_final.len() as f64
}

/// Tape version of [`loss_bias`]; `None` stands for an empty subset and
/// yields a constant zero.
pub fn loss_bias_var<T: Real>(tape: &mut Tape<T>, f_final: Option<Var>) -> Var {
    match f_final {
        Some(f) if tape.shape(f)[0] > 0 => {
            let a = tape.abs(f);
            tape.mean(a)
        }
        _ => tape.constant(Tensor::scalar(T::zero())),
    }
}
