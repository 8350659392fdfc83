//! Linear centered kernel alignment between per-task feature sets, used to
//! show that experts specialize: routing the same images through different
//! experts should drop cross-task similarity as training progresses.

use crate::eks::TaskIndexMatrix;
use crate::error::{Error, Result};
use crate::network::{ClsStudent, SegStudent};
use crate::tensor::{Scalar, Tensor};

/// Linear CKA of two feature matrices [N, D1] and [N, D2] over the same N
/// samples, accumulated in f64:
///
///   CKA = |Xc' Yc|_F^2 / (|Xc' Xc|_F * |Yc' Yc|_F)
///
/// after centering each column. Constant (zero-variance) features make the
/// denominator vanish and are reported as an error rather than a NaN.
pub fn cka_similarity<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    if x.shape().len() != 2 || y.shape().len() != 2 {
        return Err(Error::shape(
            "cka_similarity",
            format!("want rank-2 features, got {:?} and {:?}", x.shape(), y.shape()),
        ));
    }
    let n = x.shape()[0];
    if n != y.shape()[0] || n < 2 {
        return Err(Error::shape(
            "cka_similarity",
            format!("need matching sample counts of at least 2, got {} and {}", n, y.shape()[0]),
        ));
    }
    let xc = centered(x);
    let yc = centered(y);
    let dx = x.shape()[1];
    let dy = y.shape()[1];
    let cross = gram(&xc, &yc, n, dx, dy);
    let gx = gram(&xc, &xc, n, dx, dx).iter().map(|v| v * v).sum::<f64>().sqrt();
    let gy = gram(&yc, &yc, n, dy, dy).iter().map(|v| v * v).sum::<f64>().sqrt();
    if gx == 0.0 || gy == 0.0 {
        return Err(Error::invalid(
            "cka_similarity",
            "zero-variance features have no defined alignment".to_string(),
        ));
    }
    Ok(cross.iter().map(|v| v * v).sum::<f64>() / (gx * gy))
}

fn centered<T: Scalar>(x: &Tensor<T>) -> Vec<f64> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut out: Vec<f64> = x.data().iter().map(|v| v.to_f64_lossy()).collect();
    for j in 0..d {
        let mean = (0..n).map(|i| out[i * d + j]).sum::<f64>() / n as f64;
        for i in 0..n {
            out[i * d + j] -= mean;
        }
    }
    out
}

fn gram(a: &[f64], b: &[f64], n: usize, da: usize, db: usize) -> Vec<f64> {
    let mut out = vec![0.0; da * db];
    for i in 0..n {
        for p in 0..da {
            let ap = a[i * da + p];
            if ap == 0.0 {
                continue;
            }
            for q in 0..db {
                out[p * db + q] += ap * b[i * db + q];
            }
        }
    }
    out
}

/// Post-pool features of a batch routed entirely through one task's expert.
pub fn task_features_cls<T: Scalar>(net: &ClsStudent<T>, images: &Tensor<T>, task: usize) -> Result<Tensor<T>> {
    let batch = images.shape()[0];
    let tasks = TaskIndexMatrix::from_tasks(&vec![task; batch], net.task_count())?;
    Ok(net.forward(images, &tasks)?.features)
}

/// Decoder probe features of a batch routed entirely through one task's expert.
pub fn task_features_seg<T: Scalar>(net: &SegStudent<T>, images: &Tensor<T>, task: usize) -> Result<Tensor<T>> {
    let batch = images.shape()[0];
    let tasks = TaskIndexMatrix::from_tasks(&vec![task; batch], net.task_count())?;
    Ok(net.forward(images, &tasks)?.probe)
}

/// Pairwise CKA of T feature sets as a symmetric [T, T] matrix with unit
/// diagonal.
pub fn cka_matrix<T: Scalar>(features: &[Tensor<T>]) -> Result<Tensor<f64>> {
    if features.is_empty() {
        return Err(Error::invalid("cka_matrix", "no feature sets".to_string()));
    }
    let t = features.len();
    let mut out = vec![0.0; t * t];
    for i in 0..t {
        for j in i..t {
            let v = cka_similarity(&features[i], &features[j])?;
            out[i * t + j] = v;
            out[j * t + i] = v;
        }
    }
    Tensor::new(&[t, t], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::build_student_cls;
    use crate::rng::{randn_tensor, rng_from};

    #[test]
    fn identical_features_align_perfectly() {
        let x: Tensor<f64> = randn_tensor(&[12, 5], 0.0, 1.0, &mut rng_from(3)).unwrap();
        assert!((cka_similarity(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn alignment_is_symmetric_and_bounded() {
        let mut rng = rng_from(4);
        let x: Tensor<f64> = randn_tensor(&[20, 6], 0.0, 1.0, &mut rng).unwrap();
        let y: Tensor<f64> = randn_tensor(&[20, 9], 0.0, 1.0, &mut rng).unwrap();
        let a = cka_similarity(&x, &y).unwrap();
        let b = cka_similarity(&y, &x).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(a > 0.0 && a < 1.0 + 1e-12);
    }

    #[test]
    fn invariant_to_rotation_and_scale() {
        let x: Tensor<f64> = randn_tensor(&[16, 2], 0.0, 1.0, &mut rng_from(5)).unwrap();
        let (c, s) = (0.6f64.cos(), 0.6f64.sin());
        let mut rotated = vec![0.0; 32];
        for i in 0..16 {
            let (a, b) = (x.data()[i * 2], x.data()[i * 2 + 1]);
            rotated[i * 2] = 3.0 * (c * a - s * b);
            rotated[i * 2 + 1] = 3.0 * (s * a + c * b);
        }
        let y = Tensor::new(&[16, 2], rotated).unwrap();
        assert!((cka_similarity(&x, &y).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn independent_features_score_low() {
        let mut rng = rng_from(6);
        let x: Tensor<f64> = randn_tensor(&[200, 16], 0.0, 1.0, &mut rng).unwrap();
        let y: Tensor<f64> = randn_tensor(&[200, 16], 0.0, 1.0, &mut rng).unwrap();
        assert!(cka_similarity(&x, &y).unwrap() < 0.2);
    }

    #[test]
    fn constant_features_are_an_error() {
        let x = Tensor::<f64>::filled(&[8, 4], 2.5).unwrap();
        let y: Tensor<f64> = randn_tensor(&[8, 4], 0.0, 1.0, &mut rng_from(7)).unwrap();
        assert!(cka_similarity(&x, &y).is_err());
    }

    #[test]
    fn matrix_has_unit_diagonal() {
        let mut rng = rng_from(8);
        let feats: Vec<Tensor<f64>> =
            (0..3).map(|_| randn_tensor(&[15, 7], 0.0, 1.0, &mut rng).unwrap()).collect();
        let m = cka_matrix(&feats).unwrap();
        assert_eq!(m.shape(), [3, 3]);
        for t in 0..3 {
            assert!((m.at(&[t, t]) - 1.0).abs() < 1e-6);
        }
        for i in 0..3 {
            for j in 0..3 {
                assert!((m.at(&[i, j]) - m.at(&[j, i])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn inert_student_probes_match_across_tasks() {
        let net = build_student_cls::<f32>(2, &[3, 4], 4, 2, 11).unwrap();
        let images: Tensor<f32> = randn_tensor(&[6, 1, 8, 8], 0.0, 1.0, &mut rng_from(12)).unwrap();
        let f0 = task_features_cls(&net, &images, 0).unwrap();
        let f1 = task_features_cls(&net, &images, 1).unwrap();
        assert!((cka_similarity(&f0, &f1).unwrap() - 1.0).abs() < 1e-6);
    }
}
