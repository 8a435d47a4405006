use serde::{Deserialize, Serialize};

use super::{NnError, Result, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Plain gradient descent.
    Sgd,
    /// First/second moment estimates with bias correction.
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { kind: OptimizerKind::Adaptive, learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new() -> Self {
        Self { step: 0, first: Vec::new(), second: Vec::new() }
    }
}

impl<T: Scalar> Default for OptimizerState<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Applies one update to every parameter. Moment buffers are created on
/// the first call.
pub fn optimizer_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    state: &mut OptimizerState<T>,
    config: &OptimizerConfig,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(NnError::ShapeMismatch(format!("{} parameters but {} gradients", params.len(), grads.len())));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(NnError::ShapeMismatch(format!("parameter {:?} vs gradient {:?}", p.shape(), g.shape())));
        }
    }
    let lr = T::of(config.learning_rate);
    match config.kind {
        OptimizerKind::Sgd => {
            for (p, g) in params.iter_mut().zip(grads) {
                for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
                    *w = *w - lr * d;
                }
            }
        }
        OptimizerKind::Adaptive => {
            if state.first.is_empty() {
                state.first = params.iter().map(|p| p.zeros_like()).collect();
                state.second = params.iter().map(|p| p.zeros_like()).collect();
            }
            if state.first.len() != params.len()
                || state.first.iter().zip(params.iter()).any(|(m, p)| m.shape() != p.shape())
            {
                return Err(NnError::ShapeMismatch("optimizer state does not match parameters".into()));
            }
            state.step += 1;
            let (b1, b2) = (T::of(config.beta1), T::of(config.beta2));
            let one = T::one();
            let t = state.step as i32;
            let c1 = one - b1.powi(t);
            let c2 = one - b2.powi(t);
            let eps = T::of(config.epsilon);
            for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                let m = state.first[i].data_mut();
                let v = state.second[i].data_mut();
                for (k, (w, &d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                    m[k] = b1 * m[k] + (one - b1) * d;
                    v[k] = b2 * v[k] + (one - b2) * d * d;
                    let m_hat = m[k] / c1;
                    let v_hat = v[k] / c2;
                    *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::from_vec(&[1], vec![v]).unwrap()
    }

    #[test]
    fn sgd_step() {
        let mut p = scalar(1.0);
        let g = scalar(0.5);
        let cfg = OptimizerConfig { kind: OptimizerKind::Sgd, learning_rate: 0.1, ..Default::default() };
        optimizer_step(&mut [&mut p], &[&g], &mut OptimizerState::new(), &cfg).unwrap();
        assert!((p.data()[0] - 0.95).abs() < 1e-12);
    }

    #[test]
    fn zero_grad_is_noop() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adaptive] {
            let mut p = scalar(2.5);
            let g = scalar(0.0);
            let cfg = OptimizerConfig { kind, learning_rate: 0.1, ..Default::default() };
            optimizer_step(&mut [&mut p], &[&g], &mut OptimizerState::new(), &cfg).unwrap();
            assert_eq!(p.data()[0], 2.5);
        }
    }

    #[test]
    fn adaptive_minimizes_parabola() {
        let mut x = scalar(5.0);
        let mut state = OptimizerState::new();
        let cfg = OptimizerConfig { kind: OptimizerKind::Adaptive, learning_rate: 0.1, ..Default::default() };
        for _ in 0..500 {
            let g = scalar(2.0 * x.data()[0]);
            optimizer_step(&mut [&mut x], &[&g], &mut state, &cfg).unwrap();
        }
        assert!(x.data()[0].abs() < 0.1, "x = {}", x.data()[0]);
        assert_eq!(state.step, 500);
    }

    #[test]
    fn adaptive_matches_scalar_recurrence() {
        // Independent scalar re-derivation of the first three updates.
        let cfg = OptimizerConfig { kind: OptimizerKind::Adaptive, learning_rate: 0.05, ..Default::default() };
        let grads = [0.3, -1.2, 0.7];
        let (mut m, mut v, mut w) = (0.0f64, 0.0f64, 1.0f64);
        let mut p = scalar(1.0);
        let mut state = OptimizerState::new();
        for (t, &g) in grads.iter().enumerate() {
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t as i32 + 1));
            let vh = v / (1.0 - 0.999f64.powi(t as i32 + 1));
            w -= 0.05 * mh / (vh.sqrt() + 1e-8);
            optimizer_step(&mut [&mut p], &[&scalar(g)], &mut state, &cfg).unwrap();
            assert!((p.data()[0] - w).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch() {
        let mut p = Tensor::<f64>::zeros(&[2]);
        let g = Tensor::<f64>::zeros(&[3]);
        let r = optimizer_step(&mut [&mut p], &[&g], &mut OptimizerState::new(), &OptimizerConfig::default());
        assert!(matches!(r, Err(NnError::ShapeMismatch(_))));
    }
}
