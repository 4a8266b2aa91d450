use crate::error::{invalid, Result};

use super::tensor::Tensor;

/// Central-difference gradient of a scalar function at `theta`.
pub fn finite_diff_grad<F>(mut f: F, theta: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(invalid(format!("finite-difference eps must be > 0, got {eps}")));
    }
    let mut probe = theta.clone();
    let mut out = Vec::with_capacity(theta.numel());
    for i in 0..theta.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((up - down) / (2.0 * eps));
    }
    Tensor::new(theta.shape().to_vec(), out)
}

/// Norm below which a gradient is treated as zero. Central differences at
/// eps around 1e-5 carry rounding noise of roughly 1e-10 per entry, so a
/// gradient that is exactly zero never measures as zero.
pub const GRAD_NOISE_FLOOR: f64 = 1e-7;

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute norm when both are below the
/// noise floor.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
    let na = a.iter().map(|p| p * p).sum::<f64>().sqrt();
    let nb = b.iter().map(|p| p * p).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < GRAD_NOISE_FLOOR {
        diff
    } else {
        diff / scale
    }
}


use super::rng::Stream;
use super::tape::{Op, PrimitiveKind, Tape};

/// A randomly drawn instance of one primitive, reduced to a scalar through a
/// fixed random weighting of its output.
#[derive(Clone, Debug)]
pub struct PrimitiveCase {
    pub op: Op,
    pub inputs: Vec<Tensor>,
    weight: Vec<f64>,
}

impl PrimitiveCase {
    pub fn random(kind: PrimitiveKind, rng: &mut Stream) -> Self {
        let dim = |rng: &mut Stream| 1 + rng.below(5);
        let r = dim(rng);
        let c = dim(rng);
        let rand_t = |rng: &mut Stream, shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), rng.normal_vec(n, 1.0)).expect("positive")
        };
        let (op, inputs) = match kind {
            PrimitiveKind::Add | PrimitiveKind::Sub | PrimitiveKind::Mul => {
                let rhs_shape = match rng.below(3) {
                    0 => vec![r, c],
                    1 => vec![1, c],
                    _ => vec![1],
                };
                let op = match kind {
                    PrimitiveKind::Add => Op::Add,
                    PrimitiveKind::Sub => Op::Sub,
                    _ => Op::Mul,
                };
                (op, vec![rand_t(rng, &[r, c]), rand_t(rng, &rhs_shape)])
            }
            PrimitiveKind::ScalarMul => (Op::ScalarMul(rng.normal()), vec![rand_t(rng, &[r, c])]),
            PrimitiveKind::MatMul => {
                let k = dim(rng);
                (Op::MatMul, vec![rand_t(rng, &[r, k]), rand_t(rng, &[k, c])])
            }
            PrimitiveKind::Transpose => (Op::Transpose, vec![rand_t(rng, &[r, c])]),
            PrimitiveKind::Concat => {
                let axis = rng.below(2);
                let parts = 2 + rng.below(2);
                let inputs = (0..parts)
                    .map(|_| {
                        let e = dim(rng);
                        if axis == 0 {
                            rand_t(rng, &[e, c])
                        } else {
                            rand_t(rng, &[r, e])
                        }
                    })
                    .collect();
                (Op::Concat { axis }, inputs)
            }
            PrimitiveKind::Slice => {
                let axis = rng.below(2);
                let t = rand_t(rng, &[r + 1, c + 1]);
                let n = t.shape()[axis];
                let start = rng.below(n);
                let end = start + 1 + rng.below(n - start);
                (Op::Slice { axis, start, end }, vec![t])
            }
            PrimitiveKind::Softmax => (Op::Softmax { axis: rng.below(2) }, vec![rand_t(rng, &[r, c])]),
            PrimitiveKind::LayerNorm => {
                let c = c + 1;
                (
                    Op::LayerNorm { eps: 1e-5 },
                    vec![rand_t(rng, &[r, c]), rand_t(rng, &[1, c]), rand_t(rng, &[1, c])],
                )
            }
            PrimitiveKind::Gelu => (Op::Gelu, vec![rand_t(rng, &[r, c])]),
            PrimitiveKind::Embedding => {
                let vocab = dim(rng);
                let ids = (0..dim(rng)).map(|_| rng.below(vocab) as u32).collect();
                (Op::Embedding { ids }, vec![rand_t(rng, &[vocab, c])])
            }
            PrimitiveKind::Mean => (Op::Mean { axis: rng.below(2) }, vec![rand_t(rng, &[r, c])]),
            PrimitiveKind::L2NormalizeRows => (Op::L2NormalizeRows, vec![rand_t(rng, &[r, c])]),
            PrimitiveKind::Log => {
                let n = r * c;
                let data = (0..n).map(|_| rng.uniform_range(0.5, 2.0)).collect();
                (Op::Log, vec![Tensor::new(vec![r, c], data).expect("positive")])
            }
            PrimitiveKind::Exp => (Op::Exp, vec![rand_t(rng, &[r, c])]),
            PrimitiveKind::Neg => (Op::Neg, vec![rand_t(rng, &[r, c])]),
            PrimitiveKind::Sum => (Op::Sum, vec![rand_t(rng, &[r, c])]),
        };
        let mut tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = tape.apply(op.clone(), &vars).expect("well-formed case");
        let weight = rng.normal_vec(tape.value(out).numel(), 1.0);
        Self { op, inputs, weight }
    }

    fn objective(&self, tape: &mut Tape, inputs: &[Tensor], requires_grad: bool) -> Result<super::Var> {
        let vars: Vec<_> = inputs
            .iter()
            .map(|t| tape.leaf(t.clone().with_requires_grad(requires_grad)))
            .collect();
        let out = tape.apply(self.op.clone(), &vars)?;
        let shape = tape.value(out).shape().to_vec();
        let w = tape.constant(Tensor::new(shape, self.weight.clone())?);
        let weighted = tape.mul(out, w)?;
        tape.sum(weighted)
    }

    pub fn value(&self, inputs: &[Tensor]) -> Result<f64> {
        let mut tape = Tape::new();
        let loss = self.objective(&mut tape, inputs, false)?;
        Ok(tape.value(loss).item())
    }

    /// Analytic gradients for every input.
    pub fn analytic(&self) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let loss = self.objective(&mut tape, &self.inputs, true)?;
        tape.backward(loss)?;
        Ok((0..self.inputs.len())
            .map(|i| tape.grad(super::Var::from_index(i)).expect("leaf").to_vec())
            .collect())
    }

    /// Worst relative error between analytic and central-difference gradients
    /// over all inputs.
    pub fn max_relative_error(&self, eps: f64) -> Result<f64> {
        let analytic = self.analytic()?;
        let mut worst: f64 = 0.0;
        for (i, grad) in analytic.iter().enumerate() {
            let numeric = finite_diff_grad(
                |probe| {
                    let mut inputs = self.inputs.clone();
                    inputs[i] = probe.clone();
                    self.value(&inputs)
                },
                &self.inputs[i],
                eps,
            )?;
            worst = worst.max(relative_error(grad, numeric.data()));
        }
        Ok(worst)
    }
}
