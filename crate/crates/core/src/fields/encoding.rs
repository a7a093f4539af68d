use crate::diffcore::{Tape, Var};
use crate::scalar::Real;

/// Sinusoidal positional encoding:
/// `[x, sin(2^0 x), cos(2^0 x), ..., sin(2^(L-1) x), cos(2^(L-1) x)]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Encoding {
    pub num_bands: usize,
    pub include_input: bool,
}

impl Encoding {
    pub fn frequency(num_bands: usize) -> Self {
        Self {
            num_bands,
            include_input: true,
        }
    }

    pub fn out_dim(&self, in_dim: usize) -> usize {
        in_dim * (usize::from(self.include_input) + 2 * self.num_bands)
    }

    pub fn encode<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Var {
        let mut parts = Vec::with_capacity(1 + 2 * self.num_bands);
        if self.include_input {
            parts.push(x);
        }
        for k in 0..self.num_bands {
            let freq = f64::from(1u32 << k);
            let scaled = if k == 0 { x } else { tape.scale(x, freq) };
            parts.push(tape.sin(scaled));
            parts.push(tape.cos(scaled));
        }
        if parts.len() == 1 {
            return parts[0];
        }
        tape.concat(&parts)
    }
}
