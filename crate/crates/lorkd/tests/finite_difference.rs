//! Central-difference checks in f64 over every backward path: the plain conv
//! kernel, the single-pass mixed-task conv, each loss, and a whole
//! segmentation student end to end.

mod common;

use common::rel_err;
use lorkd::eks::{eks_backward, eks_forward, EksConvLayer, TaskIndexMatrix};
use lorkd::network::{build_student_seg, SegStudent};
use lorkd::objectives::{
    bce_loss_with_grad, dice_loss_with_grad, kl_divergence_with_grad, mask_kl_with_grad,
    total_cls_loss, total_seg_loss, ClsTarget, SegTarget,
};
use lorkd::rng::{derive_seed, randn_tensor, rng_from, uniform_tensor};
use lorkd::{conv2d, conv2d_backward, finite_diff_grad, ConvGeometry, Tensor};
use rand::Rng;

const SEEDS: u64 = 20;
const STEP: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

#[test]
fn conv2d_backward_matches_central_differences() {
    for seed in 0..SEEDS {
        let mut rng = rng_from(derive_seed(seed, 50, 0));
        let k = if rng.random_bool(0.5) { 1 } else { 3 };
        let geom = ConvGeometry::simple(
            rng.random_range(1..=3),
            rng.random_range(1..=3),
            k,
            rng.random_range(1..=2),
            rng.random_range(0..=1),
        );
        let s = rng.random_range(k.max(3)..=6);
        let input: Tensor<f64> =
            randn_tensor(&[2, geom.in_channels, s, s], 0.0, 1.0, &mut rng).unwrap();
        let weight =
            randn_tensor(&[geom.out_channels, geom.in_channels, k, k], 0.0, 0.5, &mut rng).unwrap();
        let out = conv2d(&input, &weight, &geom).unwrap();
        let proj: Tensor<f64> = randn_tensor(out.shape(), 0.0, 1.0, &mut rng).unwrap();

        let (gi, gw) = conv2d_backward(&proj, &input, &weight, &geom).unwrap();
        let fd_i = finite_diff_grad(
            &mut |x: &Tensor<f64>| Ok(dot(&conv2d(x, &weight, &geom)?, &proj)),
            &input,
            STEP,
        )
        .unwrap();
        let fd_w = finite_diff_grad(
            &mut |w: &Tensor<f64>| Ok(dot(&conv2d(&input, w, &geom)?, &proj)),
            &weight,
            STEP,
        )
        .unwrap();
        let ei = rel_err(gi.data(), fd_i.data());
        let ew = rel_err(gw.data(), fd_w.data());
        assert!(ei < TOL, "seed {seed}: input grad rel err {ei:.2e}");
        assert!(ew < TOL, "seed {seed}: weight grad rel err {ew:.2e}");
    }
}

#[test]
fn eks_backward_matches_central_differences() {
    for seed in 0..SEEDS {
        let mut rng = rng_from(derive_seed(seed, 51, 0));
        let tasks = rng.random_range(1..=3usize);
        let batch = rng.random_range(1..=4usize);
        let k = if rng.random_bool(0.5) { 1 } else { 3 };
        let geom = ConvGeometry::simple(rng.random_range(1..=3), rng.random_range(1..=3), k, 1, k / 2);
        let s = rng.random_range(k.max(3)..=5);
        let ranks = vec![2usize; tasks];
        let mut layer =
            EksConvLayer::<f64>::init(&geom, tasks, &ranks, derive_seed(seed, 51, 1), true).unwrap();
        for (t, e) in layer.experts.iter_mut().enumerate() {
            e.b_factor = randn_tensor(
                e.b_factor.shape(),
                0.0,
                0.3,
                &mut rng_from(derive_seed(seed, 51, 2 + t as u64)),
            )
            .unwrap();
        }
        let assignment: Vec<usize> = (0..batch).map(|_| rng.random_range(0..tasks)).collect();
        let m = TaskIndexMatrix::from_tasks(&assignment, tasks).unwrap();
        let input: Tensor<f64> = randn_tensor(&[batch, geom.in_channels, s, s], 0.0, 1.0, &mut rng).unwrap();
        let out = eks_forward(&layer, &input, &m).unwrap();
        let proj: Tensor<f64> = randn_tensor(out.shape(), 0.0, 1.0, &mut rng).unwrap();

        let grads = eks_backward(&layer, &input, &m, &proj).unwrap();

        let fd_input = finite_diff_grad(
            &mut |x: &Tensor<f64>| Ok(dot(&eks_forward(&layer, x, &m)?, &proj)),
            &input,
            STEP,
        )
        .unwrap();
        assert!(
            rel_err(grads.grad_input.data(), fd_input.data()) < TOL,
            "seed {seed}: grad_input"
        );

        let fd_w0 = finite_diff_grad(
            &mut |w: &Tensor<f64>| {
                let mut l = layer.clone();
                l.w0 = w.clone();
                Ok(dot(&eks_forward(&l, &input, &m)?, &proj))
            },
            &layer.w0,
            STEP,
        )
        .unwrap();
        assert!(rel_err(grads.grad_w0.data(), fd_w0.data()) < TOL, "seed {seed}: grad_w0");

        for t in 0..tasks {
            let fd_b = finite_diff_grad(
                &mut |b: &Tensor<f64>| {
                    let mut l = layer.clone();
                    l.experts[t].b_factor = b.clone();
                    Ok(dot(&eks_forward(&l, &input, &m)?, &proj))
                },
                &layer.experts[t].b_factor,
                STEP,
            )
            .unwrap();
            let fd_a = finite_diff_grad(
                &mut |a: &Tensor<f64>| {
                    let mut l = layer.clone();
                    l.experts[t].a_factor = a.clone();
                    Ok(dot(&eks_forward(&l, &input, &m)?, &proj))
                },
                &layer.experts[t].a_factor,
                STEP,
            )
            .unwrap();
            let (gb, ga) = &grads.grad_experts[t];
            if m.samples_of(t).is_empty() {
                assert!(fd_b.data().iter().all(|v| v.abs() < 1e-9), "seed {seed}: absent task {t}");
                assert!(gb.data().iter().all(|&v| v == 0.0));
            } else {
                assert!(rel_err(gb.data(), fd_b.data()) < TOL, "seed {seed}: grad_b task {t}");
                assert!(rel_err(ga.data(), fd_a.data()) < TOL, "seed {seed}: grad_a task {t}");
            }
        }

        let bias = layer.bias.clone().unwrap();
        let fd_bias = finite_diff_grad(
            &mut |b: &Tensor<f64>| {
                let mut l = layer.clone();
                l.bias = Some(b.clone());
                Ok(dot(&eks_forward(&l, &input, &m)?, &proj))
            },
            &bias,
            STEP,
        )
        .unwrap();
        assert!(
            rel_err(grads.grad_bias.as_ref().unwrap().data(), fd_bias.data()) < TOL,
            "seed {seed}: grad_bias"
        );
    }
}

/// Binary masks drawn by thresholding uniforms.
fn random_masks(shape: &[usize], seed: u64) -> SegTarget<f64> {
    let u: Tensor<f64> = uniform_tensor(shape, 0.0, 1.0, &mut rng_from(seed)).unwrap();
    let data: Vec<f64> = u.data().iter().map(|&v| if v > 0.5 { 1.0 } else { 0.0 }).collect();
    SegTarget::new(Tensor::new(shape, data).unwrap()).unwrap()
}

#[test]
fn loss_gradients_match_central_differences() {
    for seed in 0..SEEDS {
        let shape = [2usize, 3, 4];
        let base = derive_seed(seed, 52, 0);
        let pred: Tensor<f64> = uniform_tensor(&shape, 0.05, 0.95, &mut rng_from(base)).unwrap();
        let target = random_masks(&shape, derive_seed(seed, 52, 1));

        let (_, g) = dice_loss_with_grad(&pred, &target).unwrap();
        let fd = finite_diff_grad(
            &mut |p: &Tensor<f64>| Ok(dice_loss_with_grad(p, &target)?.0),
            &pred,
            STEP,
        )
        .unwrap();
        assert!(rel_err(g.data(), fd.data()) < TOL, "seed {seed}: dice");

        let (_, g) = bce_loss_with_grad(&pred, &target).unwrap();
        let fd = finite_diff_grad(
            &mut |p: &Tensor<f64>| Ok(bce_loss_with_grad(p, &target)?.0),
            &pred,
            STEP,
        )
        .unwrap();
        assert!(rel_err(g.data(), fd.data()) < TOL, "seed {seed}: bce");

        let logits_t: Tensor<f64> =
            randn_tensor(&[4, 5], 0.0, 1.0, &mut rng_from(derive_seed(seed, 52, 2))).unwrap();
        let logits_s: Tensor<f64> =
            randn_tensor(&[4, 5], 0.0, 1.0, &mut rng_from(derive_seed(seed, 52, 3))).unwrap();
        let p_t = logits_t.softmax_with_temperature(1.0).unwrap();
        let p_s = logits_s.softmax_with_temperature(1.0).unwrap();
        let (_, g) = kl_divergence_with_grad(&p_t, &p_s).unwrap();
        let fd = finite_diff_grad(
            &mut |p: &Tensor<f64>| Ok(kl_divergence_with_grad(&p_t, p)?.0),
            &p_s,
            STEP,
        )
        .unwrap();
        assert!(rel_err(g.data(), fd.data()) < TOL, "seed {seed}: kl");

        let q: Tensor<f64> =
            uniform_tensor(&shape, 0.05, 0.95, &mut rng_from(derive_seed(seed, 52, 4))).unwrap();
        let (_, g) = mask_kl_with_grad(&q, &pred).unwrap();
        let fd = finite_diff_grad(
            &mut |p: &Tensor<f64>| Ok(mask_kl_with_grad(&q, p)?.0),
            &pred,
            STEP,
        )
        .unwrap();
        assert!(rel_err(g.data(), fd.data()) < TOL, "seed {seed}: mask kl");

        let (_, g) = total_seg_loss(&pred, &target, Some(&q), 0.3).unwrap();
        let fd = finite_diff_grad(
            &mut |p: &Tensor<f64>| Ok(total_seg_loss(p, &target, Some(&q), 0.3)?.0),
            &pred,
            STEP,
        )
        .unwrap();
        assert!(rel_err(g.data(), fd.data()) < TOL, "seed {seed}: total seg");

        let feature: Tensor<f64> =
            randn_tensor(&[6], 0.0, 1.0, &mut rng_from(derive_seed(seed, 52, 5))).unwrap();
        let teacher: Tensor<f64> =
            randn_tensor(&[6], 0.0, 1.0, &mut rng_from(derive_seed(seed, 52, 6))).unwrap();
        let logits: Tensor<f64> =
            randn_tensor(&[4], 0.0, 1.5, &mut rng_from(derive_seed(seed, 52, 7))).unwrap();
        let tgt = ClsTarget { task_id: 0, label: (seed % 4) as usize };
        let (_, g_logits, g_feature) =
            total_cls_loss(&feature, &teacher, &logits, &tgt, 0.7, 2.0).unwrap();
        let fd = finite_diff_grad(
            &mut |l: &Tensor<f64>| Ok(total_cls_loss(&feature, &teacher, l, &tgt, 0.7, 2.0)?.0),
            &logits,
            STEP,
        )
        .unwrap();
        assert!(rel_err(g_logits.data(), fd.data()) < TOL, "seed {seed}: cls logits");
        let fd = finite_diff_grad(
            &mut |f: &Tensor<f64>| Ok(total_cls_loss(f, &teacher, &logits, &tgt, 0.7, 2.0)?.0),
            &feature,
            STEP,
        )
        .unwrap();
        assert!(rel_err(g_feature.data(), fd.data()) < TOL, "seed {seed}: cls feature");
    }
}

const MASK_COUNTS: [usize; 2] = [1, 2];

/// Scalar training loss of the whole seg student on a fixed two-sample batch:
/// per sample, dice + bce over its task's mask channels.
fn seg_net_loss(
    net: &SegStudent<f64>,
    input: &Tensor<f64>,
    m: &TaskIndexMatrix,
    targets: &[SegTarget<f64>],
) -> f64 {
    let fwd = net.forward(input, m).unwrap();
    let shape = fwd.probs.shape();
    let (k_max, s2) = (shape[1], shape[2] * shape[3]);
    let mut total = 0.0;
    for (b, target) in targets.iter().enumerate() {
        let k_t = MASK_COUNTS[m.task_of(b)];
        let slice =
            Tensor::new(&[k_t, shape[2], shape[3]], fwd.probs.data()[b * k_max * s2..(b * k_max + k_t) * s2].to_vec())
                .unwrap();
        total += total_seg_loss(&slice, target, None, 0.0).unwrap().0;
    }
    total
}

#[test]
fn seg_student_end_to_end_matches_central_differences() {
    for seed in 0..SEEDS {
        let mut net = build_student_seg::<f64>(2, &MASK_COUNTS, 4, 2, derive_seed(seed, 53, 0)).unwrap();
        // the fresh net's factors are zero (B) or near-zero (A), which would
        // leave their gradients down at the finite-difference noise floor;
        // redraw every factor pair at a scale that neither drowns nor
        // saturates the sigmoid head. Params per conv run
        // [w0, bias, b0, a0, b1, a1], so positions 2.. within each group of 6
        // are the factors.
        for (i, p) in net.params_mut().into_iter().enumerate() {
            if i % 6 >= 2 {
                let shape = p.shape().to_vec();
                *p = randn_tensor(&shape, 0.0, 0.1, &mut rng_from(derive_seed(seed, 53, 100 + i as u64)))
                    .unwrap();
            }
        }
        let input: Tensor<f64> =
            randn_tensor(&[2, 1, 8, 8], 0.0, 1.0, &mut rng_from(derive_seed(seed, 53, 2))).unwrap();
        let m = TaskIndexMatrix::from_tasks(&[0, 1], 2).unwrap();
        let targets = [
            random_masks(&[1, 8, 8], derive_seed(seed, 53, 3)),
            random_masks(&[2, 8, 8], derive_seed(seed, 53, 4)),
        ];

        // analytic gradients via the network backward
        let fwd = net.forward(&input, &m).unwrap();
        let shape = fwd.probs.shape().to_vec();
        let (k_max, s2) = (shape[1], shape[2] * shape[3]);
        let mut grad_probs = Tensor::<f64>::zeros(&shape).unwrap();
        for (b, target) in targets.iter().enumerate() {
            let k_t = MASK_COUNTS[m.task_of(b)];
            let slice = Tensor::new(
                &[k_t, shape[2], shape[3]],
                fwd.probs.data()[b * k_max * s2..(b * k_max + k_t) * s2].to_vec(),
            )
            .unwrap();
            let (_, g) = total_seg_loss(&slice, target, None, 0.0).unwrap();
            grad_probs.data_mut()[b * k_max * s2..(b * k_max + k_t) * s2].copy_from_slice(g.data());
        }
        let grads = net.backward(&fwd, &grad_probs).unwrap();
        let flat = grads.flatten();
        let analytic: Vec<Vec<f64>> = flat.iter().map(|t| t.data().to_vec()).collect();

        // probe the strongest coordinates of every parameter tensor, where
        // the loss signal sits well above f64 evaluation noise
        for (ti, a) in analytic.iter().enumerate() {
            let mut order: Vec<usize> = (0..a.len()).collect();
            order.sort_by(|&i, &j| a[j].abs().partial_cmp(&a[i].abs()).unwrap());
            let mut fd_sel = Vec::new();
            let mut an_sel = Vec::new();
            let h = STEP;
            for &i in order.iter().take(12) {
                let orig = net.params_mut()[ti].data()[i];
                net.params_mut()[ti].data_mut()[i] = orig + h;
                let up = seg_net_loss(&net, &input, &m, &targets);
                net.params_mut()[ti].data_mut()[i] = orig - h;
                let dn = seg_net_loss(&net, &input, &m, &targets);
                net.params_mut()[ti].data_mut()[i] = orig;
                fd_sel.push((up - dn) / (2.0 * h));
                an_sel.push(a[i]);
            }
            let e = rel_err(&an_sel, &fd_sel);
            assert!(e < TOL, "seed {seed}: tensor {ti} rel err {e:.2e}");
        }
    }
}
