//! Training losses, each with its analytic gradient.
//!
//! Segmentation: dice + binary cross-entropy on per-channel binary masks,
//! plus a mask-level KL transfer term against teacher probabilities.
//! Classification: per-task cross-entropy heads plus a feature-level KL
//! transfer term between softmax-normalized feature vectors. All losses are
//! in nats.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

const DICE_EPS: f64 = 1e-6;
const PROB_CLIP: f64 = 1e-7;

/// Binary ground-truth masks; entries restricted to {0, 1}.
#[derive(Debug, Clone, PartialEq)]
pub struct SegTarget<T: Scalar = f32> {
    masks: Tensor<T>,
}

impl<T: Scalar> SegTarget<T> {
    pub fn new(masks: Tensor<T>) -> Result<Self> {
        if let Some(bad) = masks.data().iter().find(|v| **v != T::zero() && **v != T::one()) {
            return Err(Error::invalid("seg_target", format!("masks must be binary, found {bad}")));
        }
        Ok(SegTarget { masks })
    }

    pub fn masks(&self) -> &Tensor<T> {
        &self.masks
    }

    pub fn cast<U: Scalar>(&self) -> SegTarget<U> {
        SegTarget { masks: self.masks.cast() }
    }
}

/// Classification ground truth: which task's head, and the label under it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClsTarget {
    pub task_id: usize,
    pub label: usize,
}

fn check_pred_range<T: Scalar>(op: &'static str, pred: &Tensor<T>) -> Result<()> {
    if let Some(bad) = pred.data().iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
        return Err(Error::invalid(op, format!("predictions must lie in [0,1], found {bad}")));
    }
    Ok(())
}

fn check_same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("prediction shape {:?} vs target shape {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Dice loss 1 - (2*sum(p*s) + eps) / (sum(p^2) + sum(s^2) + eps).
/// The shared eps makes the all-empty case come out at exactly zero.
pub fn dice_loss<T: Scalar>(pred: &Tensor<T>, target: &SegTarget<T>) -> Result<T> {
    Ok(dice_loss_with_grad(pred, target)?.0)
}

pub fn dice_loss_with_grad<T: Scalar>(pred: &Tensor<T>, target: &SegTarget<T>) -> Result<(T, Tensor<T>)> {
    check_same_shape("dice_loss", pred, target.masks())?;
    check_pred_range("dice_loss", pred)?;
    let (mut ps, mut pp, mut ss) = (0.0f64, 0.0f64, 0.0f64);
    for (&p, &s) in pred.data().iter().zip(target.masks().data()) {
        let (p, s) = (p.to_f64_lossy(), s.to_f64_lossy());
        ps += p * s;
        pp += p * p;
        ss += s * s;
    }
    let num = 2.0 * ps + DICE_EPS;
    let den = pp + ss + DICE_EPS;
    let value = 1.0 - num / den;
    let mut grad = Tensor::zeros(pred.shape())?;
    for ((g, &p), &s) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.masks().data()) {
        let (p, s) = (p.to_f64_lossy(), s.to_f64_lossy());
        *g = T::fr(-(2.0 * s * den - num * 2.0 * p) / (den * den));
    }
    Ok((T::fr(value), grad))
}

/// Standard two-term binary cross-entropy, averaged over all elements, with
/// predictions clipped into [1e-7, 1 - 1e-7].
pub fn bce_loss<T: Scalar>(pred: &Tensor<T>, target: &SegTarget<T>) -> Result<T> {
    Ok(bce_loss_with_grad(pred, target)?.0)
}

pub fn bce_loss_with_grad<T: Scalar>(pred: &Tensor<T>, target: &SegTarget<T>) -> Result<(T, Tensor<T>)> {
    check_same_shape("bce_loss", pred, target.masks())?;
    check_pred_range("bce_loss", pred)?;
    let n = pred.len() as f64;
    let mut total = 0.0f64;
    let mut grad = Tensor::zeros(pred.shape())?;
    for ((g, &p), &s) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.masks().data()) {
        let s = s.to_f64_lossy();
        let p = p.to_f64_lossy().clamp(PROB_CLIP, 1.0 - PROB_CLIP);
        total -= s * p.ln() + (1.0 - s) * (1.0 - p).ln();
        *g = T::fr(-(s / p - (1.0 - s) / (1.0 - p)) / n);
    }
    Ok((T::fr(total / n), grad))
}

/// KL divergence between row distributions over the last axis, averaged over
/// rows: mean_rows sum_y p_t * ln(p_t / p_s). Teacher zeros contribute
/// nothing; student entries are clipped to at least 1e-7 inside the log.
/// Both tensors must have rows summing to 1 within 1e-5.
pub fn kl_divergence<T: Scalar>(p_teacher: &Tensor<T>, p_student: &Tensor<T>) -> Result<T> {
    Ok(kl_divergence_with_grad(p_teacher, p_student)?.0)
}

/// Returns the KL value and its gradient with respect to the student rows.
pub fn kl_divergence_with_grad<T: Scalar>(p_teacher: &Tensor<T>, p_student: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    check_same_shape("kl_divergence", p_teacher, p_student)?;
    if p_teacher.shape().is_empty() {
        return Err(Error::shape("kl_divergence", "rank-0 tensor has no distribution axis".to_string()));
    }
    let row = *p_teacher.shape().last().expect("rank checked above");
    let rows = p_teacher.len() / row;
    for (name, t) in [("teacher", p_teacher), ("student", p_student)] {
        for (r, chunk) in t.data().chunks(row).enumerate() {
            let sum: f64 = chunk.iter().map(|v| v.to_f64_lossy()).sum();
            if (sum - 1.0).abs() > 1e-5 {
                return Err(Error::invalid(
                    "kl_divergence",
                    format!("{name} row {r} sums to {sum}, expected 1"),
                ));
            }
        }
    }
    let mut total = 0.0f64;
    let mut grad = Tensor::zeros(p_student.shape())?;
    for ((g, &pt), &ps) in grad.data_mut().iter_mut().zip(p_teacher.data()).zip(p_student.data()) {
        let pt = pt.to_f64_lossy();
        let ps = ps.to_f64_lossy().max(PROB_CLIP);
        if pt > 0.0 {
            total += pt * (pt / ps).ln();
            *g = T::fr(-pt / ps / rows as f64);
        }
    }
    Ok((T::fr(total / rows as f64), grad))
}

/// Mask-level transfer: per element, the KL between the Bernoulli pairs
/// (q, 1-q) of the teacher and (p, 1-p) of the student, averaged over all
/// elements. Gradient is with respect to the student probabilities.
pub fn mask_kl_with_grad<T: Scalar>(teacher_prob: &Tensor<T>, student_prob: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    check_same_shape("mask_kl", teacher_prob, student_prob)?;
    check_pred_range("mask_kl", teacher_prob)?;
    check_pred_range("mask_kl", student_prob)?;
    let n = student_prob.len() as f64;
    let mut total = 0.0f64;
    let mut grad = Tensor::zeros(student_prob.shape())?;
    for ((g, &q), &p) in grad.data_mut().iter_mut().zip(teacher_prob.data()).zip(student_prob.data()) {
        let q = q.to_f64_lossy();
        let p = p.to_f64_lossy().clamp(PROB_CLIP, 1.0 - PROB_CLIP);
        if q > 0.0 {
            total += q * (q / p).ln();
        }
        if q < 1.0 {
            total += (1.0 - q) * ((1.0 - q) / (1.0 - p)).ln();
        }
        *g = T::fr((-q / p + (1.0 - q) / (1.0 - p)) / n);
    }
    Ok((T::fr(total / n), grad))
}

/// Segmentation objective: bce + dice + beta * mask-level KL against the
/// teacher's probabilities. Returns the loss and its gradient with respect
/// to the student's mask probabilities. `teacher_prob` may be omitted when
/// beta is zero.
pub fn total_seg_loss<T: Scalar>(
    pred: &Tensor<T>,
    target: &SegTarget<T>,
    teacher_prob: Option<&Tensor<T>>,
    beta: f64,
) -> Result<(T, Tensor<T>)> {
    if beta < 0.0 {
        return Err(Error::invalid("total_seg_loss", format!("beta must be non-negative, got {beta}")));
    }
    let (bce, bce_grad) = bce_loss_with_grad(pred, target)?;
    let (dice, dice_grad) = dice_loss_with_grad(pred, target)?;
    let mut value = bce + dice;
    let mut grad = bce_grad.add(&dice_grad)?;
    if beta > 0.0 {
        let teacher = teacher_prob.ok_or_else(|| {
            Error::invalid("total_seg_loss", format!("beta={beta} needs teacher probabilities"))
        })?;
        let (kl, kl_grad) = mask_kl_with_grad(teacher, pred)?;
        value = value + T::fr(beta) * kl;
        grad.add_scaled(&kl_grad, T::fr(beta))?;
    }
    Ok((value, grad))
}

/// Per-sample classification objective: cross-entropy of the task head's
/// logits at temperature tau, plus beta times the KL between the teacher's
/// and the student's softmax-normalized feature vectors (student already
/// projected to the teacher's width). Returns the loss with gradients for
/// the logits and the projected feature.
pub fn total_cls_loss<T: Scalar>(
    projected_feature: &Tensor<T>,
    teacher_feature: &Tensor<T>,
    head_logits: &Tensor<T>,
    target: &ClsTarget,
    beta: f64,
    tau: f64,
) -> Result<(T, Tensor<T>, Tensor<T>)> {
    if beta < 0.0 {
        return Err(Error::invalid("total_cls_loss", format!("beta must be non-negative, got {beta}")));
    }
    if head_logits.shape().len() != 1 {
        return Err(Error::shape("total_cls_loss", format!("logits must be rank 1, got {:?}", head_logits.shape())));
    }
    let y = head_logits.shape()[0];
    if target.label >= y {
        return Err(Error::invalid(
            "total_cls_loss",
            format!("label {} out of range for a {y}-way head", target.label),
        ));
    }
    let probs = head_logits.softmax_with_temperature(tau)?;
    let py = probs.data()[target.label].to_f64_lossy().max(PROB_CLIP);
    let ce = -py.ln();
    let mut grad_logits = Tensor::zeros(&[y])?;
    for (j, g) in grad_logits.data_mut().iter_mut().enumerate() {
        let indicator = if j == target.label { 1.0 } else { 0.0 };
        *g = T::fr((probs.data()[j].to_f64_lossy() - indicator) / tau);
    }

    let mut value = T::fr(ce);
    let mut grad_feature = Tensor::zeros(projected_feature.shape())?;
    if beta > 0.0 {
        check_same_shape("total_cls_loss", projected_feature, teacher_feature)?;
        let p_t = teacher_feature.softmax_with_temperature(1.0)?;
        let p_s = projected_feature.softmax_with_temperature(1.0)?;
        let (kl, _) = kl_divergence_with_grad(&p_t, &p_s)?;
        value = value + T::fr(beta) * kl;
        // d KL / d feature = p_s - p_t, through the softmax
        for ((g, &ps), &pt) in grad_feature.data_mut().iter_mut().zip(p_s.data()).zip(p_t.data()) {
            *g = T::fr(beta * (ps.to_f64_lossy() - pt.to_f64_lossy()));
        }
    }
    Ok((value, grad_logits, grad_feature))
}
