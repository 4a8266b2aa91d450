use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 coefficient folded into the gradient before the moment update.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-6,
        }
    }
}

/// Moment buffers, one per parameter, in the order parameters are passed
/// to [`adam_step`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step_count: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let sizes: Vec<usize> = params.into_iter().map(Tensor::numel).collect();
        Self {
            first_moment: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step_count: 0,
        }
    }
}

/// One Adam update with L2 weight decay (`grad += weight_decay * param`).
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[&[f64]],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if !(lr >= 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate {lr} must be >= 0")));
    }
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::InvalidArgument(format!(
            "adam: {} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.first_moment) {
        if p.numel() != g.len() || p.numel() != m.len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                shapes: vec![p.shape().to_vec(), vec![g.len()], vec![m.len()]],
            });
        }
    }

    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, param) in params.iter_mut().enumerate() {
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        for (j, w) in param.data_mut().iter_mut().enumerate() {
            let g = grads[i][j] + cfg.weight_decay * *w;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_step(param: f64, grad: f64, lr: f64, wd: f64) -> (f64, AdamState) {
        let mut p = Tensor::scalar(param);
        let mut state = AdamState::new([&p]);
        let cfg = AdamConfig {
            weight_decay: wd,
            ..AdamConfig::default()
        };
        adam_step(&mut [&mut p], &[&[grad]], &mut state, lr, &cfg).unwrap();
        (p.item(), state)
    }

    #[test]
    fn zero_lr_keeps_params_but_updates_moments() {
        let (p, state) = one_step(1.0, 0.5, 0.0, 0.0);
        assert_eq!(p, 1.0);
        assert!((state.first_moment[0][0] - 0.05).abs() < 1e-15);
        assert!((state.second_moment[0][0] - 0.001 * 0.25).abs() < 1e-15);
        assert_eq!(state.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = 1, v_hat = 1 after bias correction
        let (p, _) = one_step(1.0, 1.0, 0.1, 0.0);
        let expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p - expected).abs() < 1e-15);
        assert!((p - 0.9).abs() < 1e-8);
    }

    #[test]
    fn weight_decay_alone_shrinks_param() {
        // g = 1e-6; m_hat = 1e-6; v_hat = 1e-12
        let lr = 1e-3;
        let (p, _) = one_step(1.0, 0.0, lr, 1e-6);
        let expected = 1.0 - lr * 1e-6 / (1e-6 + 1e-8);
        assert!((p - expected).abs() < 1e-15, "{p} vs {expected}");
        assert!(p < 1.0);
    }

    #[test]
    fn step_count_increments() {
        let mut p = Tensor::zeros(&[2, 2]);
        let mut state = AdamState::new([&p]);
        for k in 1..=3 {
            adam_step(&mut [&mut p], &[&[0.1; 4]], &mut state, 1e-3, &AdamConfig::default()).unwrap();
            assert_eq!(state.step_count, k);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Tensor::zeros(&[3]);
        let mut state = AdamState::new([&p]);
        let err = adam_step(&mut [&mut p], &[&[0.0; 2]], &mut state, 1e-3, &AdamConfig::default());
        assert!(matches!(err, Err(Error::ShapeMismatch { .. })));
    }
}
