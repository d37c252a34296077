//! Bias-corrected Adam.

use serde::{Deserialize, Serialize};

use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 0.001, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Moment estimates for a list of parameters sharing one step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Scalar> {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())))
            .unzip();
        AdamState { config, step: 0, first_moment: m, second_moment: v }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.lr = lr;
    }
}

/// One Adam update of `params` in place. `names` label parameters in
/// errors; on error nothing is modified.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    names: &[&str],
    state: &mut AdamState<T>,
) -> Result<(), TensorError> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(TensorError::ShapeMismatch {
            op: "adam_step",
            dim: "parameter count",
            expected: state.first_moment.len(),
            found: grads.len(),
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.first_moment[i].shape() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                dim: "parameter size",
                expected: p.len(),
                found: g.len(),
            });
        }
        if !g.all_finite() {
            let name = names.get(i).map(|s| s.to_string()).unwrap_or_else(|| format!("#{i}"));
            return Err(TensorError::NonFiniteGradient { name });
        }
    }

    state.step += 1;
    let cfg = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
    let (ob1, ob2) = (T::from_f64(1.0 - cfg.beta1), T::from_f64(1.0 - cfg.beta2));
    let step_size = T::from_f64(cfg.lr / bc1);
    let inv_sqrt_bc2 = T::from_f64(1.0 / bc2.sqrt());
    let eps = T::from_f64(cfg.epsilon);

    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mv = b1 * *mv + ob1 * gv;
            *vv = b2 * *vv + ob2 * gv * gv;
            *pv -= step_size * *mv / ((*vv).sqrt() * inv_sqrt_bc2 + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Plain scalar Adam, written out from the update equations.
    fn scalar_adam(p0: f64, grads: &[f64], cfg: AdamConfig) -> f64 {
        let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
        for (i, &g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let mhat = m / (1.0 - cfg.beta1.powi(t));
            let vhat = v / (1.0 - cfg.beta2.powi(t));
            p -= cfg.lr * mhat / (vhat.sqrt() + cfg.epsilon);
        }
        p
    }

    fn run(p0: f64, grads: &[f64]) -> (f64, AdamState<f64>) {
        let mut p = Tensor::scalar(p0);
        let mut state = AdamState::new(AdamConfig::default(), [&p]);
        for &g in grads {
            let gt = Tensor::scalar(g);
            adam_step(&mut [&mut p], &[&gt], &["w"], &mut state).unwrap();
        }
        (p.data()[0], state)
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let (p, state) = run(0.75, &[0.0]);
        assert_eq!(p, 0.75);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [1e-3, 0.2, -5.0, 1e4] {
            let (p, _) = run(1.0, &[g]);
            let delta = p - 1.0;
            assert!((delta.abs() - 0.001).abs() < 1e-6, "g={g} delta={delta}");
            assert_eq!(delta.signum(), -g.signum());
        }
    }

    #[test]
    fn two_steps_match_scalar_recurrence() {
        let (p, state) = run(0.3, &[1.0, 0.5]);
        let expect = scalar_adam(0.3, &[1.0, 0.5], AdamConfig::default());
        assert!((p - expect).abs() < 1e-12, "{p} vs {expect}");
        assert_eq!(state.step, 2);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = Tensor::scalar(1.0f64);
        let mut state = AdamState::new(AdamConfig::default(), [&p]);
        let g = Tensor::scalar(f64::NAN);
        let err = adam_step(&mut [&mut p], &[&g], &["enc0.conv1.weight"], &mut state).unwrap_err();
        assert_eq!(err, TensorError::NonFiniteGradient { name: "enc0.conv1.weight".into() });
        assert_eq!(state.step, 0);
        assert_eq!(p.data()[0], 1.0);
    }

    #[test]
    fn updates_are_bitwise_deterministic() {
        let grads = [0.3, -1.2, 0.01, 4.0];
        let (a, sa) = run(0.1, &grads);
        let (b, sb) = run(0.1, &grads);
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(sa, sb);
    }
}
