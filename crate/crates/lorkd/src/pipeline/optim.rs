//! Parameter updates: SGD with momentum, AdamW with decoupled weight decay,
//! and the constant / cosine learning-rate schedules.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Constant,
    /// Anneals to zero over `total_steps` following half a cosine wave.
    Cosine { total_steps: u64 },
}

impl Schedule {
    pub fn lr_at(&self, base_lr: f64, step: u64) -> f64 {
        match self {
            Schedule::Constant => base_lr,
            Schedule::Cosine { total_steps } => {
                if *total_steps == 0 {
                    return base_lr;
                }
                let frac = (step.min(*total_steps)) as f64 / *total_steps as f64;
                base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

fn check_alignment<T: Scalar>(op: &'static str, params: &[&mut Tensor<T>], grads: &[&Tensor<T>]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::invalid(op, format!("{} parameters against {} gradients", params.len(), grads.len())));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::shape(
                op,
                format!("parameter {i}: {:?} against gradient {:?}", p.shape(), g.shape()),
            ));
        }
    }
    Ok(())
}

/// v = momentum * v + g; p -= lr * v.
#[derive(Debug, Clone)]
pub struct SgdMomentum<T: Scalar = f32> {
    momentum: f64,
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> SgdMomentum<T> {
    pub fn new(momentum: f64) -> Self {
        SgdMomentum { momentum, velocity: Vec::new() }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>], lr: f64) -> Result<()> {
        check_alignment("sgd_momentum_step", params, grads)?;
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect::<Result<_>>()?;
        }
        if self.velocity.len() != params.len() {
            return Err(Error::invalid(
                "sgd_momentum_step",
                format!("optimizer state holds {} slots, got {} parameters", self.velocity.len(), params.len()),
            ));
        }
        let mu = T::fr(self.momentum);
        let step = T::fr(lr);
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = mu * *vv + *gv;
                *pv = *pv - step * *vv;
            }
        }
        Ok(())
    }
}

/// Decoupled-weight-decay Adam: bias-corrected moments, then
/// p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p).
#[derive(Debug, Clone)]
pub struct AdamW<T: Scalar = f32> {
    weight_decay: f64,
    t: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl<T: Scalar> AdamW<T> {
    pub fn new(weight_decay: f64) -> Self {
        AdamW { weight_decay, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>], lr: f64) -> Result<()> {
        check_alignment("adamw_step", params, grads)?;
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect::<Result<_>>()?;
            self.v = params.iter().map(|p| Tensor::zeros(p.shape())).collect::<Result<_>>()?;
        }
        if self.m.len() != params.len() {
            return Err(Error::invalid(
                "adamw_step",
                format!("optimizer state holds {} slots, got {} parameters", self.m.len(), params.len()),
            ));
        }
        self.t += 1;
        let corr1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let corr2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        let (b1, b2) = (T::fr(ADAM_BETA1), T::fr(ADAM_BETA2));
        let (c1, c2) = (T::fr(1.0 - ADAM_BETA1), T::fr(1.0 - ADAM_BETA2));
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(&mut self.v)) {
            for ((pv, gv), (mv, vv)) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut())) {
                *mv = b1 * *mv + c1 * *gv;
                *vv = b2 * *vv + c2 * *gv * *gv;
                let m_hat = mv.to_f64_lossy() / corr1;
                let v_hat = vv.to_f64_lossy() / corr2;
                let update = lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + self.weight_decay * pv.to_f64_lossy());
                *pv = *pv - T::fr(update);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_zero_decay_leaves_params_alone() {
        let mut p = Tensor::new(&[2], vec![1.0f64, -2.0]).unwrap();
        let g = Tensor::zeros(&[2]).unwrap();
        let mut sgd = SgdMomentum::new(0.9);
        sgd.step(&mut [&mut p], &[&g], 0.1).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
        let mut adam = AdamW::new(0.0);
        adam.step(&mut [&mut p], &[&g], 0.1).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
    }

    #[test]
    fn single_sgd_step_closed_form() {
        // f(w) = w^2/2 from w=1: gradient 1, lr 0.1 -> w = 0.9
        let mut w = Tensor::new(&[1], vec![1.0f64]).unwrap();
        let g = Tensor::new(&[1], vec![1.0]).unwrap();
        let mut sgd = SgdMomentum::new(0.9);
        sgd.step(&mut [&mut w], &[&g], 0.1).unwrap();
        assert!((w.data()[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut w = Tensor::new(&[1], vec![0.0f64]).unwrap();
        let g = Tensor::new(&[1], vec![1.0]).unwrap();
        let mut sgd = SgdMomentum::new(0.9);
        sgd.step(&mut [&mut w], &[&g], 1.0).unwrap();
        // v1 = 1, v2 = 1.9
        sgd.step(&mut [&mut w], &[&g], 1.0).unwrap();
        assert!((w.data()[0] + 2.9).abs() < 1e-12);
    }

    #[test]
    fn adamw_first_step_magnitude_is_lr() {
        for grad_scale in [1e-3, 1.0, 1e3] {
            let mut w = Tensor::new(&[1], vec![5.0f64]).unwrap();
            let g = Tensor::new(&[1], vec![grad_scale]).unwrap();
            let mut adam = AdamW::new(0.0);
            adam.step(&mut [&mut w], &[&g], 0.01).unwrap();
            let moved = (5.0 - w.data()[0]).abs();
            assert!((moved - 0.01).abs() < 1e-5, "grad {grad_scale}: moved {moved}");
        }
    }

    #[test]
    fn adamw_decay_shrinks_even_without_gradient() {
        let mut w = Tensor::new(&[1], vec![10.0f64]).unwrap();
        let g = Tensor::zeros(&[1]).unwrap();
        let mut adam = AdamW::new(0.01);
        adam.step(&mut [&mut w], &[&g], 0.1).unwrap();
        assert!((w.data()[0] - (10.0 - 0.1 * 0.01 * 10.0)).abs() < 1e-12);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let mut p = Tensor::<f64>::zeros(&[2]).unwrap();
        let g = Tensor::<f64>::zeros(&[3]).unwrap();
        let mut sgd = SgdMomentum::new(0.9);
        assert!(sgd.step(&mut [&mut p], &[&g], 0.1).is_err());
    }

    #[test]
    fn cosine_schedule_anneals_to_zero() {
        let s = Schedule::Cosine { total_steps: 100 };
        assert!((s.lr_at(0.1, 0) - 0.1).abs() < 1e-12);
        assert!((s.lr_at(0.1, 50) - 0.05).abs() < 1e-12);
        assert!(s.lr_at(0.1, 100) < 1e-12);
        assert_eq!(Schedule::Constant.lr_at(0.1, 77), 0.1);
    }
}
