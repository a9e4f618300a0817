use super::params::ParamSet;
use super::tensor::Real;
use crate::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// First and second moment accumulators, one buffer per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros: Vec<Vec<T>> = params.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect();
        AdamState {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            epsilon: ADAM_EPSILON,
        }
    }

    fn check(&self, params: &ParamSet<T>, grads: &[Vec<T>]) -> Result<()> {
        let ok = params.len() == grads.len()
            && params.len() == self.first_moment.len()
            && params
                .iter()
                .zip(grads)
                .zip(&self.first_moment)
                .zip(&self.second_moment)
                .all(|(((p, g), m), v)| {
                    let n = p.1.numel();
                    g.len() == n && m.len() == n && v.len() == n
                });
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("adam: parameter, gradient and moment shapes disagree".into()))
        }
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step<T: Real>(
    params: &mut ParamSet<T>,
    grads: &[Vec<T>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    state.check(params, grads)?;
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(state.beta1), T::of(state.beta2));
    let c1 = T::of(1.0 - state.beta1.powi(t));
    let c2 = T::of(1.0 - state.beta2.powi(t));
    let (lr, eps) = (T::of(lr), T::of(state.epsilon));
    for (((param, g), m), v) in params
        .tensors_mut()
        .zip(grads)
        .zip(&mut state.first_moment)
        .zip(&mut state.second_moment)
    {
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (T::one() - b1) * g[i];
            v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            param.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn scalar_params(v: f32) -> ParamSet<f32> {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(v)).unwrap();
        p
    }

    /// Textbook Adam for a single scalar, in f64.
    fn reference(mut p: f64, grads: &[f64], lr: f64) -> f64 {
        let (mut m, mut v) = (0.0, 0.0);
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let m_hat = m / (1.0 - 0.9f64.powi(t));
            let v_hat = v / (1.0 - 0.999f64.powi(t));
            p -= lr * m_hat / (v_hat.sqrt() + 1e-8);
        }
        p
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar_params(0.0);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &[vec![1.0]], &mut s, 0.001).unwrap();
        let w = p.get("w").unwrap().data()[0];
        assert!((w as f64 + 0.001).abs() < 1e-6, "{w}");
        assert_eq!(s.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = scalar_params(0.25);
        let mut s = AdamState::new(&p);
        for _ in 0..3 {
            adam_step(&mut p, &[vec![0.0]], &mut s, 0.001).unwrap();
        }
        assert_eq!(p.get("w").unwrap().data()[0], 0.25);
    }

    #[test]
    fn two_steps_match_reference() {
        let mut p = scalar_params(0.0);
        let mut s = AdamState::new(&p);
        for _ in 0..2 {
            adam_step(&mut p, &[vec![0.3]], &mut s, 0.001).unwrap();
        }
        let expected = reference(0.0, &[0.3, 0.3], 0.001);
        let got = p.get("w").unwrap().data()[0] as f64;
        assert!((got - expected).abs() < 1e-7, "{got} vs {expected}");
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = scalar_params(0.0);
        let mut s = AdamState::new(&p);
        assert!(adam_step(&mut p, &[vec![1.0, 2.0]], &mut s, 0.1).is_err());
    }
}
