use serde::{Deserialize, Serialize};

use super::config::{Lambdas, Mode};
use crate::diffcore::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Fixed weight of the Eikonal term.
pub const EIKONAL_WEIGHT: f64 = 0.1;

/// Unweighted loss terms of one step. `sdf` is the naive point loss, which
/// takes the place of `usdf` in the naive modes and shares its weight.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub rgb: f64,
    pub eik: f64,
    pub sdf: f64,
    pub usdf: f64,
    pub bias: f64,
    pub pc: f64,
}

impl LossParts {
    pub fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("rgb", self.rgb),
            ("eik", self.eik),
            ("sdf", self.sdf),
            ("usdf", self.usdf),
            ("bias", self.bias),
            ("pc", self.pc),
        ]
    }

    /// Copy with the terms `mode` does not optimize set to zero.
    pub fn gated(&self, mode: Mode) -> Self {
        let t = mode.terms();
        let keep = |on: bool, v: f64| if on { v } else { 0.0 };
        Self {
            rgb: self.rgb,
            eik: self.eik,
            sdf: keep(t.sdf, self.sdf),
            usdf: keep(t.usdf, self.usdf),
            bias: keep(t.bias, self.bias),
            pc: keep(t.pc, self.pc),
        }
    }

    /// Each term multiplied by its weight, in [`LossParts::named`] order.
    pub fn weighted(&self, lambda: &Lambdas) -> [f64; 6] {
        [
            self.rgb,
            EIKONAL_WEIGHT * self.eik,
            lambda.point * self.sdf,
            lambda.point * self.usdf,
            lambda.bias * self.bias,
            lambda.pc * self.pc,
        ]
    }
}

/// `rgb + 0.1 eik + l1 (sdf + usdf) + l2 bias + l3 pc` over the terms `mode`
/// enables. A non-finite term aborts with the term's name.
pub fn total_loss(parts: &LossParts, lambda: &Lambdas, mode: Mode) -> Result<f64> {
    for (name, v) in parts.named() {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss(name));
        }
    }
    Ok(parts.gated(mode).weighted(lambda).iter().sum())
}

/// Tape-side terms of one step; `None` for terms not computed.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub rgb: Var,
    pub eik: Var,
    pub sdf: Option<Var>,
    pub usdf: Option<Var>,
    pub bias: Option<Var>,
    pub pc: Option<Var>,
}

impl LossVars {
    /// Weighted sum on the tape, same weights and gating as [`total_loss`].
    pub fn total<T: Real>(&self, tape: &mut Tape<T>, lambda: &Lambdas, mode: Mode) -> Var {
        let t = mode.terms();
        let eik = tape.scale(self.eik, EIKONAL_WEIGHT);
        let mut acc = tape.add(self.rgb, eik);
        let terms = [
            (t.sdf, self.sdf, lambda.point),
            (t.usdf, self.usdf, lambda.point),
            (t.bias, self.bias, lambda.bias),
            (t.pc, self.pc, lambda.pc),
        ];
        for (on, var, w) in terms {
            if let (true, Some(v)) = (on, var) {
                let s = tape.scale(v, w);
                acc = tape.add(acc, s);
            }
        }
        acc
    }

    pub fn values<T: Real>(&self, tape: &Tape<T>) -> LossParts {
        let get = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item().f64());
        LossParts {
            rgb: get(Some(self.rgb)),
            eik: get(Some(self.eik)),
            sdf: get(self.sdf),
            usdf: get(self.usdf),
            bias: get(self.bias),
            pc: get(self.pc),
        }
    }
}
