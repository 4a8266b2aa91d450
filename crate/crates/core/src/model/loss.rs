use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the inner (acoustic vs textual) loss.
    pub alpha: f64,
    pub batch_size: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 0.1, batch_size: 32 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(invalid(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        Ok(())
    }
}

pub const TAU_INIT: f64 = 0.07;
pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 100.0;

/// One-directional InfoNCE of `x` rows against `y` rows with `1/τ` supplied
/// as a one-element var. Rows are unit-normalized here.
pub fn info_nce_scaled(tape: &mut Tape, x: Var, y: Var, inv_tau: Var) -> Result<Var> {
    let (xs, ys) = (tape.shape(x).to_vec(), tape.shape(y).to_vec());
    if xs.len() != 2 || xs != ys {
        return Err(Error::ShapeMismatch { op: "info_nce", shapes: vec![xs, ys] });
    }
    let n = xs[0];
    let xn = tape.l2_normalize_rows(x)?;
    let yn = tape.l2_normalize_rows(y)?;
    let yt = tape.transpose(yn)?;
    let sims = tape.matmul(xn, yt)?;
    let logits = tape.mul(sims, inv_tau)?;
    let probs = tape.softmax(logits, 1)?;
    // keep only the matched entries so off-diagonal underflow never meets log
    let eye = tape.constant(Tensor::identity(n));
    let diag = tape.mul(probs, eye)?;
    let ones = tape.constant(Tensor::full(&[n, 1], 1.0));
    let matched = tape.matmul(diag, ones)?;
    let logp = tape.log(matched)?;
    let total = tape.sum(logp)?;
    tape.scale(total, -1.0 / n as f64)
}

/// InfoNCE with `τ = exp(log_tau)`.
pub fn info_nce(tape: &mut Tape, x: Var, y: Var, log_tau: Var) -> Result<Var> {
    let neg = tape.neg(log_tau)?;
    let inv_tau = tape.exp(neg)?;
    info_nce_scaled(tape, x, y, inv_tau)
}

/// InfoNCE at a fixed temperature, evaluated eagerly.
pub fn info_nce_value(x: &Tensor, y: &Tensor, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(invalid(format!("temperature {tau} must be positive")));
    }
    let mut tape = Tape::new();
    let (xv, yv) = (tape.constant(x.clone()), tape.constant(y.clone()));
    let inv = tape.constant(Tensor::scalar(1.0 / tau));
    let l = info_nce_scaled(&mut tape, xv, yv, inv)?;
    Ok(tape.value(l).item())
}

/// Loss vars of one forward pass; `inner` is absent for single-channel modes.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub final_loss: Var,
    pub inner: Option<Var>,
    pub outer: Var,
}

/// Scalar loss values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    #[serde(rename = "final")]
    pub final_loss: f64,
    pub inner: f64,
    pub outer: f64,
}

impl LossVars {
    pub fn values(&self, tape: &Tape) -> LossValues {
        LossValues {
            final_loss: tape.value(self.final_loss).item(),
            inner: self.inner.map_or(0.0, |v| tape.value(v).item()),
            outer: tape.value(self.outer).item(),
        }
    }
}

fn symmetric(tape: &mut Tape, a: Var, b: Var, log_tau: Var) -> Result<Var> {
    let ab = info_nce(tape, a, b, log_tau)?;
    let ba = info_nce(tape, b, a, log_tau)?;
    tape.add(ab, ba)
}

/// `outer = L(V→L) + L(L→V)`, `inner = L(A→T) + L(T→A)` and
/// `final = α·inner + (1−α)·outer`. Without both F_A and F_T the final loss
/// is the outer loss.
pub fn total_loss(
    tape: &mut Tape,
    f_v: Var,
    f_t: Option<Var>,
    f_a: Option<Var>,
    f_l: Var,
    cfg: &LossConfig,
    log_tau: Var,
) -> Result<LossVars> {
    cfg.validate()?;
    let outer = symmetric(tape, f_v, f_l, log_tau)?;
    let (Some(f_a), Some(f_t)) = (f_a, f_t) else {
        return Ok(LossVars { final_loss: outer, inner: None, outer });
    };
    let inner = symmetric(tape, f_a, f_t, log_tau)?;
    let wi = tape.scale(inner, cfg.alpha)?;
    let wo = tape.scale(outer, 1.0 - cfg.alpha)?;
    let final_loss = tape.add(wi, wo)?;
    Ok(LossVars { final_loss, inner: Some(inner), outer })
}
