//! End-to-end training: teacher pretraining, warmup with frozen experts,
//! rank planning from warmup loss curves, joint decomposition training, and
//! evaluation. Every run is a pure function of (config, seed, data): batches
//! are cyclic windows, not resampled, and all randomness is derived.

pub mod cka;
pub mod data;
pub mod metrics;
pub mod optim;

pub use cka::{cka_matrix, cka_similarity, task_features_cls, task_features_seg};
pub use data::{
    cls_batch, cls_specs, gen_synthetic_cls, gen_synthetic_seg, seg_batch, seg_specs, ClsSample,
    GeneratorKind, SegSample, SyntheticTaskSpec,
};
pub use metrics::{argmax, evaluate_accuracy, evaluate_dsc, MetricsReport, Timing};
pub use optim::{AdamW, Schedule, SgdMomentum};

use crate::eks::TaskIndexMatrix;
use crate::error::{Error, Result};
use crate::lowrank::{measure_loss_reduction, plan_ranks, RankPlan};
use crate::network::layers::row;
use crate::network::{
    ClsGrads, ClsStudent, ClsTeacher, FusedClsNet, FusedSegNet, SegGrads, SegStudent, SegTeacher,
};
use crate::objectives::{total_cls_loss, total_seg_loss, ClsTarget, SegTarget};
use crate::rng::derive_seed;
use crate::tensor::{counters, Tensor};
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Fixed optimizer constants; only the choice of optimizer and its learning
/// rate are configurable.
pub const SGD_MOMENTUM: f64 = 0.9;
pub const ADAMW_WEIGHT_DECAY: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Seg,
    Cls,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adamw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankMode {
    Balanced,
    Imbalanced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    Cosine,
}

/// Fully resolved run hyperparameters. Field defaults live at the config
/// file layer; a TrainConfig is always complete.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub task_count: usize,
    pub mode: Mode,
    pub base_rank: usize,
    pub beta: f64,
    pub tau: f64,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub schedule: ScheduleKind,
    pub warmup_steps: u64,
    pub train_steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub rank_mode: RankMode,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.task_count == 0 {
            return Err(Error::Config("task_count must be positive".to_string()));
        }
        if self.base_rank < 2 {
            return Err(Error::Config(format!("base_rank must be at least 2, got {}", self.base_rank)));
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::Config(format!("beta must be finite and non-negative, got {}", self.beta)));
        }
        if !self.tau.is_finite() || self.tau <= 0.0 {
            return Err(Error::Config(format!("tau must be finite and positive, got {}", self.tau)));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.train_steps == 0 {
            return Err(Error::Config("train_steps must be positive".to_string()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".to_string()));
        }
        Ok(())
    }
}

/// Chronological (step, task, mean task loss in that step's batch) records.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WarmupLog {
    pub task_losses: Vec<(u64, usize, f64)>,
}

/// Everything a decomposition run produces besides the mutated net.
#[derive(Debug, Clone)]
pub struct DecompositionOutcome {
    pub report: MetricsReport,
    pub warmup: Option<WarmupLog>,
    pub rank_plan: Option<RankPlan>,
}

enum Optimizer {
    Sgd(SgdMomentum<f32>),
    Adamw(AdamW<f32>),
}

impl Optimizer {
    fn new(kind: OptimizerKind) -> Self {
        match kind {
            OptimizerKind::SgdMomentum => Optimizer::Sgd(SgdMomentum::new(SGD_MOMENTUM)),
            OptimizerKind::Adamw => Optimizer::Adamw(AdamW::new(ADAMW_WEIGHT_DECAY)),
        }
    }

    fn step(&mut self, params: &mut [&mut Tensor<f32>], grads: &[&Tensor<f32>], lr: f64) -> Result<()> {
        match self {
            Optimizer::Sgd(o) => o.step(params, grads, lr),
            Optimizer::Adamw(o) => o.step(params, grads, lr),
        }
    }
}

fn make_schedule(kind: ScheduleKind, total_steps: u64) -> Schedule {
    match kind {
        ScheduleKind::Constant => Schedule::Constant,
        ScheduleKind::Cosine => Schedule::Cosine { total_steps },
    }
}

/// Parameters the warmup phase may touch: everything except expert factors
/// (the freeze contract) and the transfer projection (which sees no
/// gradient before the joint phase and must not decay).
fn warmup_trainable(names: &[String]) -> Vec<bool> {
    names.iter().map(|n| !n.contains("expert") && !n.contains("kd_proj")).collect()
}

fn stamp_step(phase: &'static str, step: u64, e: Error) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("{phase} step {step}: {m}")),
        other => other,
    }
}

fn check_finite(what: &str, tensors: &[&Tensor<f32>]) -> Result<()> {
    for t in tensors {
        if !t.all_finite() {
            return Err(Error::NonFinite(format!("non-finite values in {what}")));
        }
    }
    Ok(())
}

fn step_masked(
    params: Vec<&mut Tensor<f32>>,
    grads: Vec<&Tensor<f32>>,
    keep: Option<&[bool]>,
    opt: &mut Optimizer,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::invalid(
            "optimizer_step",
            format!("{} parameters against {} gradients", params.len(), grads.len()),
        ));
    }
    match keep {
        None => {
            let mut ps: Vec<&mut Tensor<f32>> = params;
            opt.step(&mut ps, &grads, lr)
        }
        Some(mask) => {
            let mut ps = Vec::new();
            let mut gs = Vec::new();
            for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
                if mask[i] {
                    ps.push(p);
                    gs.push(g);
                }
            }
            opt.step(&mut ps, &gs, lr)
        }
    }
}

/// Copy channels [c0, c0+k) of sample `b` out of a [B, C, H, W] tensor.
pub fn sample_channels(x: &Tensor<f32>, b: usize, c0: usize, k: usize) -> Result<Tensor<f32>> {
    let sh = x.shape();
    if sh.len() != 4 || b >= sh[0] || c0 + k > sh[1] {
        return Err(Error::shape(
            "sample_channels",
            format!("sample {b} channels {c0}..{} of {:?}", c0 + k, sh),
        ));
    }
    let hw = sh[2] * sh[3];
    let base = (b * sh[1] + c0) * hw;
    Tensor::new(&[k, sh[2], sh[3]], x.data()[base..base + k * hw].to_vec())
}

fn scatter_channels(dst: &mut Tensor<f32>, b: usize, c0: usize, src: &Tensor<f32>, scale: f32) -> Result<()> {
    let (bsh, ssh) = (dst.shape().to_vec(), src.shape().to_vec());
    if bsh.len() != 4 || ssh.len() != 3 || ssh[1] != bsh[2] || ssh[2] != bsh[3] || c0 + ssh[0] > bsh[1] {
        return Err(Error::shape(
            "scatter_channels",
            format!("source {ssh:?} into {bsh:?} at channel {c0}"),
        ));
    }
    let hw = bsh[2] * bsh[3];
    let base = (b * bsh[1] + c0) * hw;
    for (d, s) in dst.data_mut()[base..base + src.len()].iter_mut().zip(src.data()) {
        *d = s * scale;
    }
    Ok(())
}

/// (mean batch loss, per-task mean losses for tasks present, parameter gradients)
type BatchLoss<G> = (f64, Vec<(usize, f64)>, G);

/// Batch loss and parameter gradients for the classification student.
fn cls_batch_loss(
    net: &ClsStudent<f32>,
    teacher: Option<&ClsTeacher<f32>>,
    images: &Tensor<f32>,
    tasks: &TaskIndexMatrix,
    targets: &[ClsTarget],
    beta: f64,
    tau: f64,
) -> Result<BatchLoss<ClsGrads<f32>>> {
    let fwd = net.forward(images, tasks)?;
    check_finite("student features", &[&fwd.features, &fwd.projected])?;
    let teacher_fwd = match (teacher, beta > 0.0) {
        (Some(tc), true) => {
            let tf = tc.forward(images)?;
            check_finite("teacher features", &[&tf.features])?;
            Some(tf)
        }
        (None, true) => {
            return Err(Error::invalid("cls_batch_loss", "transfer weight beta > 0 requires a teacher".to_string()))
        }
        _ => None,
    };
    let b = tasks.batch();
    let inv = 1.0 / b as f32;
    let mut grad_logits = Vec::with_capacity(b);
    let mut grad_projected = match &teacher_fwd {
        Some(_) => Some(Tensor::zeros(fwd.projected.shape())?),
        None => None,
    };
    let t_count = net.task_count();
    let (mut sums, mut counts) = (vec![0.0f64; t_count], vec![0usize; t_count]);
    let mut total = 0.0f64;
    if targets.len() != b {
        return Err(Error::invalid("cls_batch_loss", format!("{} targets for batch {b}", targets.len())));
    }
    for s in 0..b {
        if targets[s].task_id != tasks.task_of(s) {
            return Err(Error::invalid(
                "cls_batch_loss",
                format!("sample {s} target task {} disagrees with routing {}", targets[s].task_id, tasks.task_of(s)),
            ));
        }
        let proj = row(&fwd.projected, s)?;
        let teach = match &teacher_fwd {
            Some(tf) => row(&tf.features, s)?,
            None => proj.clone(),
        };
        check_finite("head logits", &[&fwd.logits[s]])?;
        let (loss, grad_l, grad_f) = total_cls_loss(&proj, &teach, &fwd.logits[s], &targets[s], beta, tau)?;
        let loss = f64::from(loss);
        total += loss;
        sums[targets[s].task_id] += loss;
        counts[targets[s].task_id] += 1;
        grad_logits.push(grad_l.scale(inv));
        if let Some(gp) = &mut grad_projected {
            let d = grad_f.len();
            for (dst, g) in gp.data_mut()[s * d..(s + 1) * d].iter_mut().zip(grad_f.data()) {
                *dst = g * inv;
            }
        }
    }
    if !total.is_finite() {
        return Err(Error::NonFinite("classification loss is not finite".to_string()));
    }
    let grads = net.backward(&fwd, &grad_logits, grad_projected.as_ref())?;
    let per_task = (0..t_count).filter(|&t| counts[t] > 0).map(|t| (t, sums[t] / counts[t] as f64)).collect();
    Ok((total / b as f64, per_task, grads))
}

/// Segmentation counterpart. A sample of task t is scored on the first K_t
/// probability channels; the remaining padded channels get zero gradient.
fn seg_batch_loss(
    net: &SegStudent<f32>,
    teacher: Option<&SegTeacher<f32>>,
    images: &Tensor<f32>,
    tasks: &TaskIndexMatrix,
    targets: &[SegTarget<f32>],
    beta: f64,
) -> Result<BatchLoss<SegGrads<f32>>> {
    let fwd = net.forward(images, tasks)?;
    check_finite("mask probabilities", &[&fwd.probs, &fwd.probe])?;
    let teacher_fwd = match (teacher, beta > 0.0) {
        (Some(tc), true) => {
            let tf = tc.forward(images)?;
            check_finite("teacher probabilities", &[&tf.probs])?;
            Some(tf)
        }
        (None, true) => {
            return Err(Error::invalid("seg_batch_loss", "transfer weight beta > 0 requires a teacher".to_string()))
        }
        _ => None,
    };
    let b = tasks.batch();
    let inv = 1.0 / b as f32;
    let mut grad_probs = Tensor::zeros(fwd.probs.shape())?;
    let t_count = net.task_count();
    let (mut sums, mut counts) = (vec![0.0f64; t_count], vec![0usize; t_count]);
    let mut total = 0.0f64;
    if targets.len() != b {
        return Err(Error::invalid("seg_batch_loss", format!("{} targets for batch {b}", targets.len())));
    }
    for (s, target) in targets.iter().enumerate() {
        let t = tasks.task_of(s);
        let k = net.mask_counts()[t];
        let pred = sample_channels(&fwd.probs, s, 0, k)?;
        let teacher_slice = match (&teacher_fwd, teacher) {
            (Some(tf), Some(tc)) => Some(sample_channels(&tf.probs, s, tc.mask_offset(t)?, k)?),
            _ => None,
        };
        let (loss, grad) = total_seg_loss(&pred, target, teacher_slice.as_ref(), beta)?;
        let loss = f64::from(loss);
        total += loss;
        sums[t] += loss;
        counts[t] += 1;
        scatter_channels(&mut grad_probs, s, 0, &grad, inv)?;
    }
    if !total.is_finite() {
        return Err(Error::NonFinite("segmentation loss is not finite".to_string()));
    }
    let grads = net.backward(&fwd, &grad_probs)?;
    let per_task = (0..t_count).filter(|&t| counts[t] > 0).map(|t| (t, sums[t] / counts[t] as f64)).collect();
    Ok((total / b as f64, per_task, grads))
}

/// Backbone-and-heads training with experts frozen. The loss is the plain
/// task loss (no transfer term); per-task batch losses are logged every
/// step to feed rank planning. Expert factors are bit-unchanged afterward.
pub fn run_warmup_cls(config: &TrainConfig, net: &mut ClsStudent<f32>, data: &[ClsSample]) -> Result<WarmupLog> {
    config.validate()?;
    if config.mode != Mode::Cls {
        return Err(Error::Config("run_warmup_cls needs mode = cls".to_string()));
    }
    if config.task_count != net.task_count() {
        return Err(Error::Config(format!(
            "config says {} tasks, net has {}",
            config.task_count,
            net.task_count()
        )));
    }
    let names: Vec<String> = net.named_params().iter().map(|(n, _)| n.clone()).collect();
    let keep = warmup_trainable(&names);
    let mut opt = Optimizer::new(config.optimizer);
    let sched = make_schedule(config.schedule, config.warmup_steps);
    let mut log = WarmupLog::default();
    for step in 0..config.warmup_steps {
        let start = (step as usize * config.batch_size) % data.len();
        let (images, tasks, targets) = cls_batch(data, config.task_count, start, config.batch_size)?;
        let (loss, per_task, grads) = cls_batch_loss(net, None, &images, &tasks, &targets, 0.0, config.tau)
            .map_err(|e| stamp_step("warmup", step, e))?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("warmup diverged at step {step}")));
        }
        for (task, l) in per_task {
            log.task_losses.push((step, task, l));
        }
        let lr = sched.lr_at(config.learning_rate, step);
        step_masked(net.params_mut(), grads.flatten(), Some(&keep), &mut opt, lr)?;
    }
    Ok(log)
}

pub fn run_warmup_seg(config: &TrainConfig, net: &mut SegStudent<f32>, data: &[SegSample]) -> Result<WarmupLog> {
    config.validate()?;
    if config.mode != Mode::Seg {
        return Err(Error::Config("run_warmup_seg needs mode = seg".to_string()));
    }
    if config.task_count != net.task_count() {
        return Err(Error::Config(format!(
            "config says {} tasks, net has {}",
            config.task_count,
            net.task_count()
        )));
    }
    let names: Vec<String> = net.named_params().iter().map(|(n, _)| n.clone()).collect();
    let keep = warmup_trainable(&names);
    let mut opt = Optimizer::new(config.optimizer);
    let sched = make_schedule(config.schedule, config.warmup_steps);
    let mut log = WarmupLog::default();
    for step in 0..config.warmup_steps {
        let start = (step as usize * config.batch_size) % data.len();
        let (images, tasks, targets) = seg_batch(data, config.task_count, start, config.batch_size)?;
        let (loss, per_task, grads) = seg_batch_loss(net, None, &images, &tasks, &targets, 0.0)
            .map_err(|e| stamp_step("warmup", step, e))?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("warmup diverged at step {step}")));
        }
        for (task, l) in per_task {
            log.task_losses.push((step, task, l));
        }
        let lr = sched.lr_at(config.learning_rate, step);
        step_masked(net.params_mut(), grads.flatten(), Some(&keep), &mut opt, lr)?;
    }
    Ok(log)
}

/// Rank plan from a warmup log. The measuring window is a tenth of the
/// shortest per-task record count, clamped to [1, 50]; a log too short to
/// measure (or empty) counts every reduction as zero, which plan_ranks
/// turns into the balanced fallback.
pub fn plan_from_log(log: &WarmupLog, task_count: usize, base_rank: usize) -> Result<RankPlan> {
    let mut counts = vec![0usize; task_count];
    for &(_, task, _) in &log.task_losses {
        if task >= task_count {
            return Err(Error::invalid(
                "plan_from_log",
                format!("log references task {task}, but only {task_count} tasks exist"),
            ));
        }
        counts[task] += 1;
    }
    let min_n = counts.iter().copied().min().unwrap_or(0);
    let reductions = if min_n < 2 {
        vec![0.0; task_count]
    } else {
        let window = (min_n / 10).clamp(1, 50).min(min_n / 2);
        measure_loss_reduction(&log.task_losses, task_count, window)?
    };
    plan_ranks(&reductions, base_rank)
}

/// Plain teacher training: cross-entropy over the unified head's global
/// labels. Returns the per-step per-task loss log.
pub fn train_teacher_cls(config: &TrainConfig, teacher: &mut ClsTeacher<f32>, data: &[ClsSample]) -> Result<WarmupLog> {
    config.validate()?;
    if config.mode != Mode::Cls {
        return Err(Error::Config("train_teacher_cls needs mode = cls".to_string()));
    }
    if config.task_count != teacher.class_counts().len() {
        return Err(Error::Config(format!(
            "config says {} tasks, teacher has {}",
            config.task_count,
            teacher.class_counts().len()
        )));
    }
    let mut opt = Optimizer::new(config.optimizer);
    let sched = make_schedule(config.schedule, config.train_steps);
    let mut log = WarmupLog::default();
    let total_classes = teacher.total_classes();
    for step in 0..config.train_steps {
        let start = (step as usize * config.batch_size) % data.len();
        let (images, _tasks, targets) = cls_batch(data, config.task_count, start, config.batch_size)?;
        let fwd = teacher.forward(&images)?;
        check_finite("teacher logits", &[&fwd.logits, &fwd.features]).map_err(|e| stamp_step("teacher", step, e))?;
        let probs = fwd.logits.softmax_with_temperature(1.0)?;
        let b = targets.len();
        let inv = 1.0 / b as f32;
        let mut grad = probs.scale(inv);
        let (mut sums, mut counts) = (vec![0.0f64; config.task_count], vec![0usize; config.task_count]);
        let mut total = 0.0f64;
        for (s, tgt) in targets.iter().enumerate() {
            let g = teacher.global_label(tgt.task_id, tgt.label)?;
            grad.data_mut()[s * total_classes + g] -= inv;
            let p = f64::from(probs.data()[s * total_classes + g]).max(1e-7);
            let loss = -p.ln();
            total += loss;
            sums[tgt.task_id] += loss;
            counts[tgt.task_id] += 1;
        }
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("teacher training diverged at step {step}")));
        }
        for t in 0..config.task_count {
            if counts[t] > 0 {
                log.task_losses.push((step, t, sums[t] / counts[t] as f64));
            }
        }
        let grads = teacher.backward(&fwd, &grad)?;
        let lr = sched.lr_at(config.learning_rate, step);
        step_masked(teacher.params_mut(), grads.flatten(), None, &mut opt, lr)?;
    }
    Ok(log)
}

/// Plain teacher training for segmentation: task loss on the task's block
/// of the unified mask head.
pub fn train_teacher_seg(config: &TrainConfig, teacher: &mut SegTeacher<f32>, data: &[SegSample]) -> Result<WarmupLog> {
    config.validate()?;
    if config.mode != Mode::Seg {
        return Err(Error::Config("train_teacher_seg needs mode = seg".to_string()));
    }
    if config.task_count != teacher.mask_counts().len() {
        return Err(Error::Config(format!(
            "config says {} tasks, teacher has {}",
            config.task_count,
            teacher.mask_counts().len()
        )));
    }
    let mut opt = Optimizer::new(config.optimizer);
    let sched = make_schedule(config.schedule, config.train_steps);
    let mut log = WarmupLog::default();
    for step in 0..config.train_steps {
        let start = (step as usize * config.batch_size) % data.len();
        let (images, tasks, targets) = seg_batch(data, config.task_count, start, config.batch_size)?;
        let fwd = teacher.forward(&images)?;
        check_finite("teacher probabilities", &[&fwd.probs]).map_err(|e| stamp_step("teacher", step, e))?;
        let b = targets.len();
        let inv = 1.0 / b as f32;
        let mut grad_probs = Tensor::zeros(fwd.probs.shape())?;
        let (mut sums, mut counts) = (vec![0.0f64; config.task_count], vec![0usize; config.task_count]);
        let mut total = 0.0f64;
        for (s, target) in targets.iter().enumerate() {
            let t = tasks.task_of(s);
            let k = teacher.mask_counts()[t];
            let off = teacher.mask_offset(t)?;
            let pred = sample_channels(&fwd.probs, s, off, k)?;
            let (loss, grad) = total_seg_loss(&pred, target, None, 0.0)?;
            let loss = f64::from(loss);
            total += loss;
            sums[t] += loss;
            counts[t] += 1;
            scatter_channels(&mut grad_probs, s, off, &grad, inv)?;
        }
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("teacher training diverged at step {step}")));
        }
        for t in 0..config.task_count {
            if counts[t] > 0 {
                log.task_losses.push((step, t, sums[t] / counts[t] as f64));
            }
        }
        let grads = teacher.backward(&fwd, &grad_probs)?;
        let lr = sched.lr_at(config.learning_rate, step);
        step_masked(teacher.params_mut(), grads.flatten(), None, &mut opt, lr)?;
    }
    Ok(log)
}

/// The full decomposition run. With `external_ranks` the experts are
/// rebuilt at the given ranks and the internal warmup is skipped (the
/// caller already warmed the net up); otherwise warmup runs here and, in
/// imbalanced mode, its log decides the ranks. The joint phase then trains
/// every parameter, and the report is computed on `eval_data`.
pub fn run_decomposition_cls(
    config: &TrainConfig,
    net: &mut ClsStudent<f32>,
    teacher: Option<&ClsTeacher<f32>>,
    external_ranks: Option<&RankPlan>,
    train_data: &[ClsSample],
    eval_data: &[ClsSample],
) -> Result<DecompositionOutcome> {
    config.validate()?;
    if config.mode != Mode::Cls {
        return Err(Error::Config("run_decomposition_cls needs mode = cls".to_string()));
    }
    if config.task_count != net.task_count() {
        return Err(Error::Config(format!(
            "config says {} tasks, net has {}",
            config.task_count,
            net.task_count()
        )));
    }
    if config.beta > 0.0 {
        let tc = teacher.ok_or_else(|| Error::Config("beta > 0 requires a teacher".to_string()))?;
        if tc.feature_dim() != 2 * net.feature_dim() {
            return Err(Error::Config(format!(
                "teacher feature dim {} does not match the transfer projection's {}",
                tc.feature_dim(),
                2 * net.feature_dim()
            )));
        }
    }
    counters::reset();
    let t0 = Instant::now();
    let (warmup, rank_plan) = match external_ranks {
        Some(plan) => {
            net.set_expert_ranks(&plan.ranks, derive_seed(config.seed, 13, 0))?;
            (None, Some(plan.clone()))
        }
        None => {
            let log = run_warmup_cls(config, net, train_data)?;
            let plan = match config.rank_mode {
                RankMode::Balanced => None,
                RankMode::Imbalanced => {
                    let plan = plan_from_log(&log, config.task_count, config.base_rank)?;
                    net.set_expert_ranks(&plan.ranks, derive_seed(config.seed, 13, 0))?;
                    Some(plan)
                }
            };
            (Some(log), plan)
        }
    };
    let warmup_seconds = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let mut opt = Optimizer::new(config.optimizer);
    let sched = make_schedule(config.schedule, config.train_steps);
    for step in 0..config.train_steps {
        let start = (step as usize * config.batch_size) % train_data.len();
        let (images, tasks, targets) = cls_batch(train_data, config.task_count, start, config.batch_size)?;
        let (loss, _, grads) = cls_batch_loss(net, teacher, &images, &tasks, &targets, config.beta, config.tau)
            .map_err(|e| stamp_step("joint", step, e))?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("joint training diverged at step {step}")));
        }
        let lr = sched.lr_at(config.learning_rate, step);
        step_masked(net.params_mut(), grads.flatten(), None, &mut opt, lr)?;
    }
    let joint_seconds = t1.elapsed().as_secs_f64();

    let t2 = Instant::now();
    let scores = evaluate_cls(net, eval_data, config.batch_size)?;
    let timing = Timing { warmup_seconds, joint_seconds, eval_seconds: t2.elapsed().as_secs_f64() };
    let fused = (0..config.task_count).map(|t| net.fused_param_count(t)).collect();
    let report = MetricsReport::new(&scores, net.param_count(), fused, counters::snapshot(), timing)?;
    Ok(DecompositionOutcome { report, warmup, rank_plan })
}

pub fn run_decomposition_seg(
    config: &TrainConfig,
    net: &mut SegStudent<f32>,
    teacher: Option<&SegTeacher<f32>>,
    external_ranks: Option<&RankPlan>,
    train_data: &[SegSample],
    eval_data: &[SegSample],
) -> Result<DecompositionOutcome> {
    config.validate()?;
    if config.mode != Mode::Seg {
        return Err(Error::Config("run_decomposition_seg needs mode = seg".to_string()));
    }
    if config.task_count != net.task_count() {
        return Err(Error::Config(format!(
            "config says {} tasks, net has {}",
            config.task_count,
            net.task_count()
        )));
    }
    if config.beta > 0.0 {
        let tc = teacher.ok_or_else(|| Error::Config("beta > 0 requires a teacher".to_string()))?;
        if tc.mask_counts() != net.mask_counts() {
            return Err(Error::Config(format!(
                "teacher mask counts {:?} do not match the student's {:?}",
                tc.mask_counts(),
                net.mask_counts()
            )));
        }
    }
    counters::reset();
    let t0 = Instant::now();
    let (warmup, rank_plan) = match external_ranks {
        Some(plan) => {
            net.set_expert_ranks(&plan.ranks, derive_seed(config.seed, 13, 0))?;
            (None, Some(plan.clone()))
        }
        None => {
            let log = run_warmup_seg(config, net, train_data)?;
            let plan = match config.rank_mode {
                RankMode::Balanced => None,
                RankMode::Imbalanced => {
                    let plan = plan_from_log(&log, config.task_count, config.base_rank)?;
                    net.set_expert_ranks(&plan.ranks, derive_seed(config.seed, 13, 0))?;
                    Some(plan)
                }
            };
            (Some(log), plan)
        }
    };
    let warmup_seconds = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let mut opt = Optimizer::new(config.optimizer);
    let sched = make_schedule(config.schedule, config.train_steps);
    for step in 0..config.train_steps {
        let start = (step as usize * config.batch_size) % train_data.len();
        let (images, tasks, targets) = seg_batch(train_data, config.task_count, start, config.batch_size)?;
        let (loss, _, grads) = seg_batch_loss(net, teacher, &images, &tasks, &targets, config.beta)
            .map_err(|e| stamp_step("joint", step, e))?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("joint training diverged at step {step}")));
        }
        let lr = sched.lr_at(config.learning_rate, step);
        step_masked(net.params_mut(), grads.flatten(), None, &mut opt, lr)?;
    }
    let joint_seconds = t1.elapsed().as_secs_f64();

    let t2 = Instant::now();
    let scores = evaluate_seg(net, eval_data, config.batch_size)?;
    let timing = Timing { warmup_seconds, joint_seconds, eval_seconds: t2.elapsed().as_secs_f64() };
    let fused = (0..config.task_count).map(|t| net.fused_param_count(t)).collect();
    let report = MetricsReport::new(&scores, net.param_count(), fused, counters::snapshot(), timing)?;
    Ok(DecompositionOutcome { report, warmup, rank_plan })
}

/// Per-task accuracy of the decomposed net, each sample routed through its
/// own task's expert and head.
pub fn evaluate_cls(net: &ClsStudent<f32>, data: &[ClsSample], batch_size: usize) -> Result<Vec<f64>> {
    if data.is_empty() || batch_size == 0 {
        return Err(Error::invalid("evaluate_cls", "empty data or zero batch".to_string()));
    }
    let t_count = net.task_count();
    let (mut hits, mut counts) = (vec![0usize; t_count], vec![0usize; t_count]);
    let mut i = 0;
    while i < data.len() {
        let n = batch_size.min(data.len() - i);
        let (images, tasks, targets) = cls_batch(&data[i..i + n], t_count, 0, n)?;
        let fwd = net.forward(&images, &tasks)?;
        for (s, tgt) in targets.iter().enumerate() {
            counts[tgt.task_id] += 1;
            if argmax(&fwd.logits[s])? == tgt.label {
                hits[tgt.task_id] += 1;
            }
        }
        i += n;
    }
    per_task_rates(&hits, &counts)
}

/// Per-task mean DSC of the decomposed net.
pub fn evaluate_seg(net: &SegStudent<f32>, data: &[SegSample], batch_size: usize) -> Result<Vec<f64>> {
    if data.is_empty() || batch_size == 0 {
        return Err(Error::invalid("evaluate_seg", "empty data or zero batch".to_string()));
    }
    let t_count = net.task_count();
    let (mut sums, mut counts) = (vec![0.0f64; t_count], vec![0usize; t_count]);
    let mut i = 0;
    while i < data.len() {
        let n = batch_size.min(data.len() - i);
        let (images, tasks, targets) = seg_batch(&data[i..i + n], t_count, 0, n)?;
        let fwd = net.forward(&images, &tasks)?;
        for (s, target) in targets.iter().enumerate() {
            let t = tasks.task_of(s);
            let pred = sample_channels(&fwd.probs, s, 0, net.mask_counts()[t])?;
            sums[t] += evaluate_dsc(&pred, target)?;
            counts[t] += 1;
        }
        i += n;
    }
    per_task_means(&sums, &counts)
}

/// Per-task accuracy of the plain teacher; predictions argmax within the
/// sample's task block of the unified head.
pub fn evaluate_teacher_cls(teacher: &ClsTeacher<f32>, data: &[ClsSample], batch_size: usize) -> Result<Vec<f64>> {
    if data.is_empty() || batch_size == 0 {
        return Err(Error::invalid("evaluate_teacher_cls", "empty data or zero batch".to_string()));
    }
    let t_count = teacher.class_counts().len();
    let (mut hits, mut counts) = (vec![0usize; t_count], vec![0usize; t_count]);
    let mut i = 0;
    while i < data.len() {
        let n = batch_size.min(data.len() - i);
        let (images, _, targets) = cls_batch(&data[i..i + n], t_count, 0, n)?;
        let fwd = teacher.forward(&images)?;
        for (s, tgt) in targets.iter().enumerate() {
            let off = teacher.global_label(tgt.task_id, 0)?;
            let y = teacher.class_counts()[tgt.task_id];
            let lrow = row(&fwd.logits, s)?;
            let block = Tensor::new(&[y], lrow.data()[off..off + y].to_vec())?;
            counts[tgt.task_id] += 1;
            if argmax(&block)? == tgt.label {
                hits[tgt.task_id] += 1;
            }
        }
        i += n;
    }
    per_task_rates(&hits, &counts)
}

/// Per-task mean DSC of the plain teacher on its unified mask head.
pub fn evaluate_teacher_seg(teacher: &SegTeacher<f32>, data: &[SegSample], batch_size: usize) -> Result<Vec<f64>> {
    if data.is_empty() || batch_size == 0 {
        return Err(Error::invalid("evaluate_teacher_seg", "empty data or zero batch".to_string()));
    }
    let t_count = teacher.mask_counts().len();
    let (mut sums, mut counts) = (vec![0.0f64; t_count], vec![0usize; t_count]);
    let mut i = 0;
    while i < data.len() {
        let n = batch_size.min(data.len() - i);
        let (images, tasks, targets) = seg_batch(&data[i..i + n], t_count, 0, n)?;
        let fwd = teacher.forward(&images)?;
        for (s, target) in targets.iter().enumerate() {
            let t = tasks.task_of(s);
            let pred = sample_channels(&fwd.probs, s, teacher.mask_offset(t)?, teacher.mask_counts()[t])?;
            sums[t] += evaluate_dsc(&pred, target)?;
            counts[t] += 1;
        }
        i += n;
    }
    per_task_means(&sums, &counts)
}

/// Accuracy of a fused single-task net on its own task's samples.
pub fn evaluate_fused_cls(net: &FusedClsNet<f32>, data: &[ClsSample], batch_size: usize) -> Result<f64> {
    let subset: Vec<&ClsSample> = data.iter().filter(|s| s.task_id == net.task_id()).collect();
    if subset.is_empty() || batch_size == 0 {
        return Err(Error::invalid(
            "evaluate_fused_cls",
            format!("no samples for task {} or zero batch", net.task_id()),
        ));
    }
    let (mut hits, mut total) = (0usize, 0usize);
    let mut i = 0;
    while i < subset.len() {
        let n = batch_size.min(subset.len() - i);
        let images = stack_images(&subset[i..i + n].iter().map(|s| &s.image).collect::<Vec<_>>())?;
        let (logits, _) = net.forward(&images)?;
        for (s, sample) in subset[i..i + n].iter().enumerate() {
            total += 1;
            if argmax(&row(&logits, s)?)? == sample.label {
                hits += 1;
            }
        }
        i += n;
    }
    Ok(hits as f64 / total as f64)
}

/// Mean DSC of a fused single-task net on its own task's samples.
pub fn evaluate_fused_seg(net: &FusedSegNet<f32>, data: &[SegSample], batch_size: usize) -> Result<f64> {
    let subset: Vec<&SegSample> = data.iter().filter(|s| s.task_id == net.task_id()).collect();
    if subset.is_empty() || batch_size == 0 {
        return Err(Error::invalid(
            "evaluate_fused_seg",
            format!("no samples for task {} or zero batch", net.task_id()),
        ));
    }
    let (mut sum, mut total) = (0.0f64, 0usize);
    let mut i = 0;
    while i < subset.len() {
        let n = batch_size.min(subset.len() - i);
        let images = stack_images(&subset[i..i + n].iter().map(|s| &s.image).collect::<Vec<_>>())?;
        let probs = net.forward(&images)?;
        for (s, sample) in subset[i..i + n].iter().enumerate() {
            let k = probs.shape()[1];
            let pred = sample_channels(&probs, s, 0, k)?;
            sum += evaluate_dsc(&pred, &sample.masks)?;
            total += 1;
        }
        i += n;
    }
    Ok(sum / total as f64)
}

fn stack_images(images: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let shape = images[0].shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * images[0].len());
    for img in images {
        if img.shape() != shape {
            return Err(Error::shape("stack_images", "inconsistent image shapes".to_string()));
        }
        data.extend_from_slice(img.data());
    }
    Tensor::new(&[images.len(), shape[0], shape[1], shape[2]], data)
}

fn per_task_rates(hits: &[usize], counts: &[usize]) -> Result<Vec<f64>> {
    hits.iter()
        .zip(counts)
        .enumerate()
        .map(|(t, (h, c))| {
            if *c == 0 {
                Err(Error::invalid("evaluate", format!("no samples for task {t}")))
            } else {
                Ok(*h as f64 / *c as f64)
            }
        })
        .collect()
}

fn per_task_means(sums: &[f64], counts: &[usize]) -> Result<Vec<f64>> {
    sums.iter()
        .zip(counts)
        .enumerate()
        .map(|(t, (s, c))| {
            if *c == 0 {
                Err(Error::invalid("evaluate", format!("no samples for task {t}")))
            } else {
                Ok(*s / *c as f64)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_student_cls, build_student_seg, build_teacher_cls, build_teacher_seg};

    fn cls_config(warmup: u64, train: u64) -> TrainConfig {
        TrainConfig {
            task_count: 2,
            mode: Mode::Cls,
            base_rank: 2,
            beta: 0.0,
            tau: 1.0,
            learning_rate: 0.05,
            optimizer: OptimizerKind::SgdMomentum,
            schedule: ScheduleKind::Constant,
            warmup_steps: warmup,
            train_steps: train,
            batch_size: 4,
            seed: 7,
            rank_mode: RankMode::Balanced,
        }
    }

    fn cls_toy() -> (Vec<ClsSample>, Vec<ClsSample>) {
        let specs = cls_specs(&[4, 2], 8, 0.0);
        (gen_synthetic_cls(&specs, 40, 16).unwrap(), gen_synthetic_cls(&specs, 41, 8).unwrap())
    }

    fn expert_bytes(net: &ClsStudent<f32>) -> Vec<f32> {
        net.named_params()
            .iter()
            .filter(|(n, _)| n.contains("expert"))
            .flat_map(|(_, p)| p.data().iter().copied())
            .collect()
    }

    #[test]
    fn warmup_trains_backbone_but_never_touches_experts() {
        let (train, _) = cls_toy();
        let mut net = build_student_cls::<f32>(2, &[4, 2], 4, 2, 1).unwrap();
        let before_experts = expert_bytes(&net);
        let before_w0 = net.blocks()[0].w0.data().to_vec();
        let before_proj = net.named_params()[net.named_params().len() - 2].1.data().to_vec();
        let log = run_warmup_cls(&cls_config(3, 1), &mut net, &train).unwrap();
        assert_eq!(expert_bytes(&net), before_experts);
        assert_ne!(net.blocks()[0].w0.data(), &before_w0[..]);
        let after_proj = net.named_params()[net.named_params().len() - 2].1.data().to_vec();
        assert_eq!(after_proj, before_proj, "transfer projection must stay frozen in warmup");
        // batch 4 round-robin covers both tasks every step
        assert_eq!(log.task_losses.len(), 6);
        assert!(log.task_losses.iter().all(|(_, _, l)| l.is_finite()));
        let json = serde_json::to_string(&log).unwrap();
        assert!(json.starts_with("{\"task_losses\":[["), "{json}");
    }

    #[test]
    fn zero_step_warmup_gives_empty_log_and_balanced_fallback() {
        let (train, _) = cls_toy();
        let mut net = build_student_cls::<f32>(2, &[4, 2], 4, 2, 1).unwrap();
        let log = run_warmup_cls(&cls_config(0, 1), &mut net, &train).unwrap();
        assert!(log.task_losses.is_empty());
        let plan = plan_from_log(&log, 2, 8).unwrap();
        assert!(plan.balanced_fallback);
        assert_eq!(plan.ranks, vec![8, 8]);
    }

    #[test]
    fn equal_reductions_reproduce_balanced_ranks() {
        let mut log = WarmupLog::default();
        for step in 0..10u64 {
            let loss = 2.0 - 0.1 * step as f64;
            log.task_losses.push((step, 0, loss));
            log.task_losses.push((step, 1, loss));
        }
        let plan = plan_from_log(&log, 2, 6).unwrap();
        assert!(!plan.balanced_fallback);
        assert_eq!(plan.ranks, vec![6, 6]);
    }

    #[test]
    fn decomposition_runs_and_reports_consistently() {
        let (train, eval) = cls_toy();
        let mut net = build_student_cls::<f32>(2, &[4, 2], 4, 2, 1).unwrap();
        let out = run_decomposition_cls(&cls_config(2, 4), &mut net, None, None, &train, &eval).unwrap();
        out.report.check_consistent().unwrap();
        assert_eq!(out.report.per_task.len(), 2);
        assert!(out.report.per_task.contains_key("task0"));
        assert_eq!(out.report.params_train, net.param_count());
        assert_eq!(out.report.params_fused_per_task.len(), 2);
        assert!(out.report.counters.conv_launches > 0);
        assert!(out.warmup.is_some());
        assert!(out.rank_plan.is_none());
    }

    #[test]
    fn identical_configs_produce_bit_identical_nets() {
        let (train, eval) = cls_toy();
        let mut a = build_student_cls::<f32>(2, &[4, 2], 4, 2, 1).unwrap();
        let mut b = build_student_cls::<f32>(2, &[4, 2], 4, 2, 1).unwrap();
        run_decomposition_cls(&cls_config(2, 3), &mut a, None, None, &train, &eval).unwrap();
        run_decomposition_cls(&cls_config(2, 3), &mut b, None, None, &train, &eval).unwrap();
        for ((na, pa), (nb, pb)) in a.named_params().iter().zip(b.named_params().iter()) {
            assert_eq!(na, nb);
            assert_eq!(pa.data(), pb.data(), "{na} diverged between identical runs");
        }
    }

    #[test]
    fn beta_without_teacher_is_rejected() {
        let (train, eval) = cls_toy();
        let mut net = build_student_cls::<f32>(2, &[4, 2], 4, 2, 1).unwrap();
        let mut config = cls_config(0, 2);
        config.beta = 1.0;
        let err = run_decomposition_cls(&config, &mut net, None, None, &train, &eval).unwrap_err();
        assert!(err.to_string().contains("teacher"), "{err}");
    }

    #[test]
    fn transfer_term_trains_against_a_teacher() {
        let (train, eval) = cls_toy();
        let mut net = build_student_cls::<f32>(2, &[4, 2], 4, 2, 1).unwrap();
        let teacher = build_teacher_cls::<f32>(&[4, 2], 8, 2).unwrap();
        let mut config = cls_config(1, 2);
        config.beta = 1.0;
        let out = run_decomposition_cls(&config, &mut net, Some(&teacher), None, &train, &eval).unwrap();
        out.report.check_consistent().unwrap();
    }

    #[test]
    fn external_rank_plan_is_applied_without_internal_warmup() {
        let (train, eval) = cls_toy();
        let mut net = build_student_cls::<f32>(2, &[4, 2], 4, 2, 1).unwrap();
        let plan = crate::lowrank::plan_ranks(&[1.0, 1.0], 4).unwrap();
        let out = run_decomposition_cls(&cls_config(5, 2), &mut net, None, Some(&plan), &train, &eval).unwrap();
        assert!(out.warmup.is_none());
        assert_eq!(net.expert_ranks(), vec![4, 4]);
        let bad = crate::lowrank::plan_ranks(&[1.0, 1.0, 1.0], 4).unwrap();
        let mut net2 = build_student_cls::<f32>(2, &[4, 2], 4, 2, 1).unwrap();
        assert!(run_decomposition_cls(&cls_config(0, 2), &mut net2, None, Some(&bad), &train, &eval).is_err());
    }

    #[test]
    fn non_finite_parameters_surface_with_step_index() {
        let (train, _) = cls_toy();
        let mut net = build_student_cls::<f32>(2, &[4, 2], 4, 2, 1).unwrap();
        let idx = net.named_params().iter().position(|(n, _)| n == "kd_proj.weight").unwrap();
        net.params_mut()[idx].data_mut()[0] = f32::NAN;
        let err = run_warmup_cls(&cls_config(2, 1), &mut net, &train).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("step 0"), "{msg}");
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn single_task_degenerates_to_plain_training() {
        let specs = cls_specs(&[4], 8, 0.0);
        let train = gen_synthetic_cls(&specs, 50, 8).unwrap();
        let mut net = build_student_cls::<f32>(1, &[4], 4, 2, 3).unwrap();
        let out = run_decomposition_cls(&cls_config_single(), &mut net, None, None, &train, &train).unwrap();
        assert_eq!(out.report.per_task.len(), 1);
    }

    fn cls_config_single() -> TrainConfig {
        let mut c = cls_config(1, 3);
        c.task_count = 1;
        c
    }

    #[test]
    fn seg_pipeline_smoke_and_freeze() {
        let specs = seg_specs(&[2, 1], 8);
        let train = gen_synthetic_seg(&specs, 60, 8).unwrap();
        let eval = gen_synthetic_seg(&specs, 61, 4).unwrap();
        let mut net = build_student_seg::<f32>(2, &[2, 1], 4, 2, 4).unwrap();
        let before: Vec<f32> = net
            .named_params()
            .iter()
            .filter(|(n, _)| n.contains("expert"))
            .flat_map(|(_, p)| p.data().iter().copied())
            .collect();
        let mut config = cls_config(2, 3);
        config.mode = Mode::Seg;
        config.optimizer = OptimizerKind::Adamw;
        config.learning_rate = 1e-4;
        let out = run_decomposition_seg(&config, &mut net, None, None, &train, &eval).unwrap();
        out.report.check_consistent().unwrap();
        assert_eq!(out.report.per_task.len(), 2);
        for v in out.report.per_task.values() {
            assert!((0.0..=1.0).contains(v));
        }
        // joint phase trains experts, so only the warmup log proves the freeze;
        // rerun warmup alone to check it
        let mut net2 = build_student_seg::<f32>(2, &[2, 1], 4, 2, 4).unwrap();
        run_warmup_seg(&config, &mut net2, &train).unwrap();
        let after: Vec<f32> = net2
            .named_params()
            .iter()
            .filter(|(n, _)| n.contains("expert"))
            .flat_map(|(_, p)| p.data().iter().copied())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn teacher_training_logs_losses_and_learns_shapes() {
        let specs = seg_specs(&[2, 1], 8);
        let data = gen_synthetic_seg(&specs, 70, 8).unwrap();
        let mut teacher = build_teacher_seg::<f32>(&[2, 1], 4, 5).unwrap();
        let mut config = cls_config(0, 3);
        config.mode = Mode::Seg;
        config.optimizer = OptimizerKind::Adamw;
        config.learning_rate = 1e-3;
        let log = train_teacher_seg(&config, &mut teacher, &data).unwrap();
        assert_eq!(log.task_losses.len(), 6);
        let scores = evaluate_teacher_seg(&teacher, &data, 4).unwrap();
        assert_eq!(scores.len(), 2);

        let cls_data = gen_synthetic_cls(&cls_specs(&[4, 2], 8, 0.0), 71, 8).unwrap();
        let mut cteacher = build_teacher_cls::<f32>(&[4, 2], 4, 6).unwrap();
        let clog = train_teacher_cls(&cls_config(0, 3), &mut cteacher, &cls_data).unwrap();
        assert_eq!(clog.task_losses.len(), 6);
        let acc = evaluate_teacher_cls(&cteacher, &cls_data, 4).unwrap();
        assert!(acc.iter().all(|a| (0.0..=1.0).contains(a)));
    }

    #[test]
    fn fused_nets_evaluate_on_their_own_task() {
        let (_, eval) = cls_toy();
        let net = build_student_cls::<f32>(2, &[4, 2], 4, 2, 1).unwrap();
        let fused = net.extract_expert(1).unwrap();
        let acc = evaluate_fused_cls(&fused, &eval, 4).unwrap();
        assert!((0.0..=1.0).contains(&acc));

        let specs = seg_specs(&[2, 1], 8);
        let seg_eval = gen_synthetic_seg(&specs, 80, 6).unwrap();
        let seg_net = build_student_seg::<f32>(2, &[2, 1], 4, 2, 4).unwrap();
        let seg_fused = seg_net.extract_expert(0).unwrap();
        let dsc = evaluate_fused_seg(&seg_fused, &seg_eval, 3).unwrap();
        assert!((0.0..=1.0).contains(&dsc));
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut c = cls_config(1, 1);
        c.tau = 0.0;
        assert!(c.validate().is_err());
        c = cls_config(1, 1);
        c.beta = -0.5;
        assert!(c.validate().is_err());
        c = cls_config(1, 1);
        c.train_steps = 0;
        assert!(c.validate().is_err());
        c = cls_config(1, 1);
        c.base_rank = 1;
        assert!(c.validate().is_err());
        assert!(cls_config(1, 1).validate().is_ok());
    }
}
