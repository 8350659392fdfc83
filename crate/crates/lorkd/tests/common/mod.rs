//! Shared harness for the integration suite: random single-pass conv cases,
//! gradient comparison helpers, and the conflict-task training arms that the
//! directional tests compare.

#![allow(dead_code)] // each test binary uses its own slice of the harness

use std::sync::OnceLock;

use lorkd::eks::{eks_backward, eks_forward, naive_forward, EksConvLayer, TaskIndexMatrix};
use lorkd::lowrank::fuse_weights;
use lorkd::network::build_student_cls;
use lorkd::pipeline::{
    cka_matrix, cls_batch, cls_specs, evaluate_cls, gen_synthetic_cls, run_decomposition_cls,
    run_warmup_cls, task_features_cls, ClsSample, Mode, OptimizerKind, RankMode, ScheduleKind,
    SyntheticTaskSpec, TrainConfig,
};
use lorkd::rng::{derive_seed, randn_tensor, rng_from};
use lorkd::{conv2d_backward, ConvGeometry, Result, Tensor};
use rand::Rng;

/// One random mixed-task batch through one layer, drawn inside the
/// equivalence envelope: T in 1..=8, B in 1..=16, k in {1,3}, channels and
/// spatial extent at most 8.
pub struct EksCase {
    pub layer: EksConvLayer<f32>,
    pub m: TaskIndexMatrix,
    pub input: Tensor<f32>,
}

pub fn eks_case(seed: u64) -> EksCase {
    let mut rng = rng_from(derive_seed(seed, 40, 0));
    let tasks = rng.random_range(1..=8usize);
    let batch = rng.random_range(1..=16usize);
    let kernel = if rng.random_bool(0.5) { 1 } else { 3 };
    let c_in = rng.random_range(1..=8usize);
    let c_out = rng.random_range(1..=8usize);
    let spatial = rng.random_range(kernel.max(2)..=8usize);
    let stride = rng.random_range(1..=2usize);
    let padding = rng.random_range(0..=1usize);
    let geom = ConvGeometry::simple(c_in, c_out, kernel, stride, padding);
    let ranks: Vec<usize> = (0..tasks).map(|_| rng.random_range(2..=4)).collect();
    let with_bias = rng.random_bool(0.5);
    let mut layer =
        EksConvLayer::<f32>::init(&geom, tasks, &ranks, derive_seed(seed, 41, 0), with_bias)
            .expect("envelope geometry is valid");
    // inert-by-construction B factors would make the expert term invisible;
    // randomize them so the equivalence check exercises nonzero deltas
    for (t, e) in layer.experts.iter_mut().enumerate() {
        e.b_factor = randn_tensor(
            e.b_factor.shape(),
            0.0,
            0.2,
            &mut rng_from(derive_seed(seed, 42, t as u64)),
        )
        .expect("factor shape is valid");
    }
    if let Some(b) = &mut layer.bias {
        *b = randn_tensor(b.shape(), 0.0, 0.5, &mut rng_from(derive_seed(seed, 43, 0)))
            .expect("bias shape is valid");
    }
    let assignment: Vec<usize> = (0..batch).map(|_| rng.random_range(0..tasks)).collect();
    let m = TaskIndexMatrix::from_tasks(&assignment, tasks).expect("assignment is in range");
    let input = randn_tensor(
        &[batch, c_in, spatial, spatial],
        0.0,
        1.0,
        &mut rng_from(derive_seed(seed, 44, 0)),
    )
    .expect("input shape is valid");
    EksCase { layer, m, input }
}

/// Layer at the wall-clock reference point: square 3x3 conv, every expert
/// carrying a live delta.
pub fn timing_layer(tasks: usize, channels: usize, rank: usize, seed: u64) -> EksConvLayer<f32> {
    let geom = ConvGeometry::simple(channels, channels, 3, 1, 1);
    let ranks = vec![rank; tasks];
    let mut layer = EksConvLayer::<f32>::init(&geom, tasks, &ranks, seed, true)
        .expect("timing geometry is valid");
    for (t, e) in layer.experts.iter_mut().enumerate() {
        e.b_factor = randn_tensor(
            e.b_factor.shape(),
            0.0,
            0.02,
            &mut rng_from(derive_seed(seed, 45, t as u64)),
        )
        .expect("factor shape is valid");
    }
    layer
}

/// Max absolute gap between the single-pass and the per-task forward, in f32
/// and again with the same case cast to f64.
pub fn equivalence_errors(case: &EksCase) -> Result<(f64, f64)> {
    let a = eks_forward(&case.layer, &case.input, &case.m)?;
    let b = naive_forward(&case.layer, &case.input, &case.m)?;
    let err32 = max_abs_gap(a.data().iter().map(|v| *v as f64), b.data().iter().map(|v| *v as f64));

    let layer64 = case.layer.cast::<f64>();
    let input64 = case.input.cast::<f64>();
    let a = eks_forward(&layer64, &input64, &case.m)?;
    let b = naive_forward(&layer64, &input64, &case.m)?;
    let err64 = max_abs_gap(a.data().iter().copied(), b.data().iter().copied());
    Ok((err32, err64))
}

pub struct RoutingCheck {
    /// Every expert absent from the batch got bitwise-zero factor gradients.
    pub absent_all_zero: bool,
    /// Max |grad_w0 - sum of per-task sub-batch weight gradients|.
    pub grad_w0_err: f64,
    pub absent_tasks: usize,
}

/// Backward through the single-pass layer against an independent per-task
/// reference: each present task's sub-batch runs through a plain convolution
/// with its fused weight, and those weight gradients must sum to grad_w0.
pub fn routing_check(case: &EksCase, seed: u64) -> Result<RoutingCheck> {
    let g = &case.layer.geometry;
    let shape = case.input.shape();
    let (oh, ow) = g.output_hw(shape[2], shape[3])?;
    // std 0.1 keeps the accumulated weight-gradient entries near unit scale,
    // where the 1e-5 tolerance measures routing rather than f32 summation
    // order
    let grad_out = randn_tensor(
        &[shape[0], g.out_channels, oh, ow],
        0.0,
        0.1,
        &mut rng_from(derive_seed(seed, 45, 0)),
    )?;
    let grads = eks_backward(&case.layer, &case.input, &case.m, &grad_out)?;

    let mut absent = 0;
    let mut absent_all_zero = true;
    for t in 0..case.layer.task_count() {
        if case.m.samples_of(t).is_empty() {
            absent += 1;
            let (gb, ga) = &grads.grad_experts[t];
            if gb.data().iter().chain(ga.data()).any(|&v| v != 0.0) {
                absent_all_zero = false;
            }
        }
    }

    let mut w0_sum = Tensor::<f32>::zeros(case.layer.w0.shape())?;
    for t in 0..case.layer.task_count() {
        let idx = case.m.samples_of(t);
        if idx.is_empty() {
            continue;
        }
        let h_t = gather_samples(&case.input, &idx)?;
        let go_t = gather_samples(&grad_out, &idx)?;
        let w_t = fuse_weights(&case.layer.w0, &case.layer.experts[t])?;
        let (_, gw) = conv2d_backward(&go_t, &h_t, &w_t, g)?;
        for (dst, &s) in w0_sum.data_mut().iter_mut().zip(gw.data()) {
            *dst += s;
        }
    }
    let grad_w0_err = max_abs_gap(
        grads.grad_w0.data().iter().map(|v| *v as f64),
        w0_sum.data().iter().map(|v| *v as f64),
    );
    Ok(RoutingCheck { absent_all_zero, grad_w0_err, absent_tasks: absent })
}

/// Copy the listed samples out of a [B, ...] tensor into a new leading axis.
pub fn gather_samples<T: lorkd::Scalar>(t: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
    let shape = t.shape();
    let row = t.len() / shape[0];
    let mut out_shape = shape.to_vec();
    out_shape[0] = idx.len();
    let mut data = Vec::with_capacity(idx.len() * row);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * row..(i + 1) * row]);
    }
    Tensor::new(&out_shape, data)
}

pub fn max_abs_gap(a: impl Iterator<Item = f64>, b: impl Iterator<Item = f64>) -> f64 {
    a.zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Relative L2 gap between an analytic gradient and its finite-difference
/// probe, guarded for the all-zero case.
pub fn rel_err(analytic: &[f64], reference: &[f64]) -> f64 {
    let mut diff = 0.0;
    let mut norm = 0.0;
    for (&a, &r) in analytic.iter().zip(reference) {
        diff += (a - r) * (a - r);
        norm += r * r;
    }
    (diff / norm.max(1e-12)).sqrt()
}

// The directional toy comparison. Task 3 is held to two classes so its
// labeler collapses onto frequency and no side task hands the shared trunk
// the parity-frequency conjunction that task 2 needs; the trunk has to find
// it against three conflicting pulls while the task-2 expert gets it
// undiluted.
pub const TOY_CLASS_COUNTS: [usize; 4] = [4, 2, 2, 2];
pub const TOY_IMAGE_SIZE: usize = 8;
pub const TOY_WIDTH: usize = 8;
pub const TOY_BASE_RANK: usize = 8;
pub const TOY_WARMUP_STEPS: u64 = 20;
pub const TOY_TRAIN_STEPS: u64 = 160;
pub const TOY_TRAIN_SAMPLES: usize = 512;
pub const TOY_EVAL_SAMPLES: usize = 512;
pub const TOY_SEEDS: [u64; 3] = [11, 12, 13];

pub fn toy_specs() -> Vec<SyntheticTaskSpec> {
    cls_specs(&TOY_CLASS_COUNTS, TOY_IMAGE_SIZE, 1.0)
}

pub fn toy_config(seed: u64) -> TrainConfig {
    TrainConfig {
        task_count: TOY_CLASS_COUNTS.len(),
        mode: Mode::Cls,
        base_rank: TOY_BASE_RANK,
        beta: 0.0,
        tau: 1.0,
        learning_rate: 0.001,
        optimizer: OptimizerKind::Adamw,
        schedule: ScheduleKind::Constant,
        warmup_steps: TOY_WARMUP_STEPS,
        train_steps: TOY_TRAIN_STEPS,
        batch_size: 16,
        seed,
        rank_mode: RankMode::Balanced,
    }
}

pub struct ArmOutcome {
    pub per_task: Vec<f64>,
    pub macro_avg: f64,
    pub cka_off_diagonal: f64,
}

pub struct ToySeedOutcome {
    pub seed: u64,
    pub lorkd: ArmOutcome,
    pub mtl: ArmOutcome,
}

fn measure_arm(
    net: &lorkd::network::ClsStudent<f32>,
    eval: &[ClsSample],
) -> Result<ArmOutcome> {
    let per_task = evaluate_cls(net, eval, 16)?;
    let macro_avg = per_task.iter().sum::<f64>() / per_task.len() as f64;
    let t = TOY_CLASS_COUNTS.len();
    let (images, _, _) = cls_batch(eval, t, 0, eval.len())?;
    let features: Vec<_> =
        (0..t).map(|task| task_features_cls(net, &images, task)).collect::<Result<_>>()?;
    let m = cka_matrix(&features)?;
    let mut off = 0.0;
    for i in 0..t {
        for j in 0..t {
            if i != j {
                off += m.at(&[i, j]);
            }
        }
    }
    Ok(ArmOutcome { per_task, macro_avg, cka_off_diagonal: off / (t * t - t) as f64 })
}

/// Run both arms at one seed: the decomposition (warmup then joint training
/// with experts) and the expert-free arm, which trains the identical
/// architecture for the same total budget with experts frozen at zero,
/// leaving a plain shared trunk with per-task heads.
pub fn run_toy_seed(seed: u64) -> Result<ToySeedOutcome> {
    let specs = toy_specs();
    let t = specs.len();
    let train = gen_synthetic_cls(&specs, derive_seed(seed, 10, 0), TOY_TRAIN_SAMPLES)?;
    let eval = gen_synthetic_cls(&specs, derive_seed(seed, 10, 1), TOY_EVAL_SAMPLES)?;

    let cfg = toy_config(seed);
    let mut net = build_student_cls::<f32>(t, &TOY_CLASS_COUNTS, TOY_WIDTH, TOY_BASE_RANK, seed)?;
    run_decomposition_cls(&cfg, &mut net, None, None, &train, &eval)?;
    let lorkd = measure_arm(&net, &eval)?;

    let mut mtl_cfg = toy_config(seed);
    mtl_cfg.warmup_steps = TOY_WARMUP_STEPS + TOY_TRAIN_STEPS;
    let mut net2 = build_student_cls::<f32>(t, &TOY_CLASS_COUNTS, TOY_WIDTH, TOY_BASE_RANK, seed)?;
    run_warmup_cls(&mtl_cfg, &mut net2, &train)?;
    let mtl = measure_arm(&net2, &eval)?;

    Ok(ToySeedOutcome { seed, lorkd, mtl })
}

/// All three toy seeds, run once per process and shared between tests.
pub fn toy_outcomes() -> &'static [ToySeedOutcome] {
    static OUTCOMES: OnceLock<Vec<ToySeedOutcome>> = OnceLock::new();
    OUTCOMES.get_or_init(|| {
        TOY_SEEDS.iter().map(|&s| run_toy_seed(s).expect("toy arms train cleanly")).collect()
    })
}
