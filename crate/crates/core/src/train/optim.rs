use kws_tensor::{Real, Tensor};

use crate::error::{KwsError, Result};
use crate::model::Parameter;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moments for a fixed parameter list.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &[Parameter<T>]) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.value.numel()]).collect();
        Self { m: zeros(), v: zeros(), step: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update. A non-finite gradient aborts the step
    /// with every parameter and moment untouched.
    pub fn step(&mut self, params: &mut [Parameter<T>], grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(KwsError::Training(format!(
                "optimizer holds {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if g.shape() != p.value.shape() {
                return Err(KwsError::Training(format!("gradient shape {:?} for `{}` {:?}", g.shape(), p.name, p.value.shape())));
            }
            if !g.all_finite() {
                return Err(KwsError::Training(format!("non-finite gradient for `{}`", p.name)));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(ADAM_BETA1), T::lit(ADAM_BETA2));
        let (c1, c2) = (T::lit(1.0 - ADAM_BETA1.powi(t)), T::lit(1.0 - ADAM_BETA2.powi(t)));
        let (lr, eps, one) = (T::lit(lr), T::lit(ADAM_EPS), T::one());
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Vec<Parameter<f64>> {
        vec![Parameter { name: "w".into(), value: Tensor::new(vec![1], vec![v]).unwrap() }]
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = scalar(0.3);
        let mut opt = Adam::new(&p);
        opt.step(&mut p, &[Tensor::zeros(vec![1])], 0.1).unwrap();
        assert_eq!(p[0].value.data(), &[0.3]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar(1.0);
        let mut opt = Adam::new(&p);
        opt.step(&mut p, &[Tensor::new(vec![1], vec![1.0]).unwrap()], 0.01).unwrap();
        assert!((p[0].value.data()[0] - 0.99).abs() < 1e-9);
    }

    #[test]
    fn identical_inputs_identical_updates() {
        let (mut a, mut b) = (scalar(0.5), scalar(0.5));
        let (mut oa, mut ob) = (Adam::new(&a), Adam::new(&b));
        for g in [0.3, -1.2, 4.0] {
            let g = [Tensor::new(vec![1], vec![g]).unwrap()];
            oa.step(&mut a, &g, 1e-2).unwrap();
            ob.step(&mut b, &g, 1e-2).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn nonfinite_gradient_aborts() {
        let mut p = scalar(0.5);
        let mut opt = Adam::new(&p);
        assert!(opt.step(&mut p, &[Tensor::new(vec![1], vec![f64::NAN]).unwrap()], 1e-2).is_err());
        assert_eq!(p[0].value.data(), &[0.5]);
        assert_eq!(opt.steps(), 0);
    }
}
