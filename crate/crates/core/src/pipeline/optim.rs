use crate::error::{KdError, Result};
use crate::numerics::{Scalar, Tensor};

/// Adam moment buffers, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S> {
    pub step: u64,
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(shapes: &[usize]) -> Self {
        Self {
            step: 0,
            m: shapes.iter().map(|&n| vec![S::zero(); n]).collect(),
            v: shapes.iter().map(|&n| vec![S::zero(); n]).collect(),
        }
    }

    pub fn for_params(params: &[Tensor<S>]) -> Self {
        Self::new(&params.iter().map(|t| t.len()).collect::<Vec<_>>())
    }
}

/// One bias-corrected Adam update. Nothing is modified when a gradient is not finite.
pub fn adam_step<S: Scalar>(
    params: &mut [Tensor<S>],
    grads: &[Vec<S>],
    state: &mut AdamState<S>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(KdError::InvalidArgument("parameter, gradient and state counts differ".into()));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || state.m[i].len() != g.len() {
            return Err(KdError::InvalidArgument(format!("tensor {i}: gradient length mismatch")));
        }
        if let Some(j) = g.iter().position(|x| !x.is_finite()) {
            return Err(KdError::Diverged(format!(
                "non-finite gradient in tensor {i} at {j} (step {})",
                state.step + 1
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (S::of(beta1), S::of(beta2));
    let c1 = S::of(1.0 - beta1.powi(t));
    let c2 = S::of(1.0 - beta2.powi(t));
    let (lr, eps) = (S::of(lr), S::of(eps));
    let one = S::one();
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *x -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn scalar(x: f64) -> Vec<Tensor<f64>> {
        vec![Tensor::new(vec![1], vec![x]).unwrap()]
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p = scalar(0.7);
        let mut st = AdamState::for_params(&p);
        for _ in 0..100 {
            adam_step(&mut p, &[vec![0.0]], &mut st, 0.1, 0.9, 0.98, 1e-8).unwrap();
        }
        assert_eq!(p[0].data()[0], 0.7);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar(0.0);
        let mut st = AdamState::for_params(&p);
        adam_step(&mut p, &[vec![1.0]], &mut st, 0.1, 0.9, 0.98, 1e-8).unwrap();
        // m_hat = 1, v_hat = 1, so the update is lr / (1 + eps)
        assert_abs_diff_eq!(p[0].data()[0], -0.1 / (1.0 + 1e-8), epsilon = 1e-15);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut p = scalar(1.0);
        let mut st = AdamState::for_params(&p);
        for step in 0..500 {
            let x = p[0].data()[0];
            let lr = 0.1 / (1.0 + step as f64 / 20.0);
            adam_step(&mut p, &[vec![2.0 * x]], &mut st, lr, 0.9, 0.98, 1e-8).unwrap();
        }
        assert!(p[0].data()[0].abs() < 1e-3, "x = {}", p[0].data()[0]);
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut p = scalar(1.0);
        let mut st = AdamState::for_params(&p);
        let err = adam_step(&mut p, &[vec![f64::NAN]], &mut st, 0.1, 0.9, 0.98, 1e-8);
        assert!(matches!(err, Err(KdError::Diverged(_))));
        assert_eq!(p[0].data()[0], 1.0);
        assert_eq!(st.step, 0);
    }
}
