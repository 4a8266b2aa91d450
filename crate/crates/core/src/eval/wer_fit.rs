use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const MIN_SAMPLES: usize = 30;
pub const MIN_SPREAD: f64 = 0.2;
pub const SLOPE_L2: f64 = 1e-3;
const GRAD_TOL: f64 = 1e-6;
const MAX_ITERS: usize = 500;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WerAnalysis {
    /// `(realized_wer, hit@1)` per sample.
    pub points: Vec<(f64, bool)>,
    pub intercept: f64,
    pub slope: f64,
    pub l2: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    pub config: serde_json::Value,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Mean negative log-likelihood plus `l2/2 · b²`.
fn objective(points: &[(f64, bool)], a: f64, b: f64, l2: f64) -> f64 {
    let n = points.len() as f64;
    points.iter().map(|&(w, y)| softplus(a + b * w) - if y { a + b * w } else { 0.0 }).sum::<f64>() / n
        + 0.5 * l2 * b * b
}

/// Fits `p(hit | wer) = sigmoid(a + b·wer)` by penalized maximum likelihood
/// (penalty on the slope only), using damped Newton steps until the
/// gradient norm falls below 1e-6.
pub fn wer_recall_analysis(points: &[(f64, bool)]) -> Result<WerAnalysis> {
    if points.len() < MIN_SAMPLES {
        return Err(invalid(format!("need at least {MIN_SAMPLES} samples, got {}", points.len())));
    }
    let lo = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo >= MIN_SPREAD) {
        return Err(invalid(format!("WER spread {:.3} below {MIN_SPREAD}", hi - lo)));
    }
    let n = points.len() as f64;
    let l2 = SLOPE_L2;
    let (mut a, mut b) = (0.0, 0.0);
    for iter in 0..MAX_ITERS {
        let (mut ga, mut gb, mut haa, mut hab, mut hbb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for &(w, y) in points {
            let p = sigmoid(a + b * w);
            let r = p - f64::from(u8::from(y));
            let s = p * (1.0 - p);
            ga += r / n;
            gb += r * w / n;
            haa += s / n;
            hab += s * w / n;
            hbb += s * w * w / n;
        }
        gb += l2 * b;
        hbb += l2;
        let gnorm = (ga * ga + gb * gb).sqrt();
        if gnorm < GRAD_TOL {
            return Ok(WerAnalysis {
                points: points.to_vec(),
                intercept: a,
                slope: b,
                l2,
                iterations: iter,
                grad_norm: gnorm,
                config: serde_json::Value::Null,
            });
        }
        // a tiny ridge keeps the intercept direction solvable when p saturates
        let haa = haa + 1e-12;
        let det = haa * hbb - hab * hab;
        let (mut da, mut db) = ((hbb * ga - hab * gb) / det, (haa * gb - hab * ga) / det);
        if !(da.is_finite() && db.is_finite()) || da * ga + db * gb <= 0.0 {
            da = ga;
            db = gb;
        }
        let f0 = objective(points, a, b, l2);
        let mut t = 1.0;
        while objective(points, a - t * da, b - t * db, l2) > f0 - 1e-4 * t * (da * ga + db * gb) && t > 1e-12 {
            t *= 0.5;
        }
        a -= t * da;
        b -= t * db;
    }
    Err(Error::Numeric(format!("logistic fit did not converge in {MAX_ITERS} iterations")))
}
