//! Adam with bias correction. Moment state is kept per tensor, and a tensor's
//! step counter only advances when that tensor is actually updated.

use super::{cst, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
        }
    }
}

/// One Adam update of `param` in place.
pub fn adam_step<T: Real>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if param.shape() != grad.shape() || state.m.len() != param.numel() {
        return Err(Error::Shape {
            op: "adam_step",
            lhs: param.shape().to_vec(),
            rhs: grad.shape().to_vec(),
        });
    }
    state.step += 1;
    let (b1, b2) = (cst::<T>(cfg.beta1), cst::<T>(cfg.beta2));
    let one = T::one();
    let t = state.step as i32;
    let c1 = one - b1.powi(t);
    let c2 = one - b2.powi(t);
    let lr = cst::<T>(cfg.lr);
    let eps = cst::<T>(cfg.eps);
    for (((p, &g), m), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let mhat = *m / c1;
        let vhat = *v / c2;
        *p -= lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_leaves_fresh_param_unchanged() {
        let mut p = Tensor::<f64>::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(3);
        adam_step(
            &mut p,
            &Tensor::zeros(&[3]),
            &mut st,
            &AdamConfig::default(),
        )
        .unwrap();
        assert!(p.bit_eq(&before));
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_grad_decays_moments() {
        let mut p = Tensor::<f64>::zeros(&[1]);
        let mut st = AdamState::new(1);
        let cfg = AdamConfig::default();
        adam_step(&mut p, &Tensor::ones(&[1]), &mut st, &cfg).unwrap();
        let (m, v) = (st.m[0], st.v[0]);
        adam_step(&mut p, &Tensor::zeros(&[1]), &mut st, &cfg).unwrap();
        assert_eq!(st.m[0], m * 0.9);
        assert_eq!(st.v[0], v * 0.999);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = g, v_hat = g^2 at t=1, so the step is lr * g/(|g| + eps).
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        let mut p = Tensor::<f64>::from_f64(&[1], &[0.3]).unwrap();
        let mut st = AdamState::new(1);
        adam_step(&mut p, &Tensor::ones(&[1]), &mut st, &cfg).unwrap();
        let expected = 0.3 - 0.01 / (1.0 + 1e-8);
        assert!((p.item() - expected).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let mut p = Tensor::<f32>::zeros(&[2]);
        let mut st = AdamState::new(2);
        let r = adam_step(
            &mut p,
            &Tensor::zeros(&[3]),
            &mut st,
            &AdamConfig::default(),
        );
        assert!(matches!(r, Err(Error::Shape { .. })));
    }
}
