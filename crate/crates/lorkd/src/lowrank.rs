//! Per-task low-rank experts: factor pairs over conv weights, their additive
//! deltas, fusion into deployable weights, parameter accounting, and the
//! warmup-statistics rank planner.

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{ConvGeometry, Scalar, Tensor};

/// One task's factor pair on one conv layer.
///
/// For a k x k kernel: `b_factor: [C_out*k, r*k]`, `a_factor: [r*k, C_in*k]`.
/// Their product, reindexed to kernel layout, is an additive delta on the
/// dense weight; as a matrix the delta has rank at most r*k.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankPair<T: Scalar = f32> {
    pub b_factor: Tensor<T>,
    pub a_factor: Tensor<T>,
    pub rank: usize,
    pub geometry: ConvGeometry,
}

impl<T: Scalar> LowRankPair<T> {
    pub fn check(&self) -> Result<()> {
        let g = &self.geometry;
        if g.groups != 1 {
            return Err(Error::invalid(
                "lowrank",
                format!("experts require ungrouped geometry, got groups={}", g.groups),
            ));
        }
        let k = g.kernel_size;
        let b_expect = [g.out_channels * k, self.rank * k];
        let a_expect = [self.rank * k, g.in_channels * k];
        if self.b_factor.shape() != b_expect {
            return Err(Error::shape(
                "lowrank",
                format!("b_factor is {:?}, expected {:?}", self.b_factor.shape(), b_expect),
            ));
        }
        if self.a_factor.shape() != a_expect {
            return Err(Error::shape(
                "lowrank",
                format!("a_factor is {:?}, expected {:?}", self.a_factor.shape(), a_expect),
            ));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> LowRankPair<U> {
        LowRankPair {
            b_factor: self.b_factor.cast(),
            a_factor: self.a_factor.cast(),
            rank: self.rank,
            geometry: self.geometry,
        }
    }
}

/// Fresh expert: `a_factor` drawn from N(0, 0.02^2), `b_factor` all zeros, so
/// the initial delta is exactly zero and the expert is inert until trained.
pub fn init_lowrank<T: Scalar>(geometry: &ConvGeometry, rank: usize, seed: u64) -> Result<LowRankPair<T>> {
    if rank < 2 {
        return Err(Error::invalid("init_lowrank", format!("rank must be at least 2, got {rank}")));
    }
    geometry.validate()?;
    if geometry.groups != 1 {
        return Err(Error::invalid(
            "init_lowrank",
            format!("experts require ungrouped geometry, got groups={}", geometry.groups),
        ));
    }
    let k = geometry.kernel_size;
    let b_factor = Tensor::zeros(&[geometry.out_channels * k, rank * k])?;
    let a_factor = rng::randn_tensor(&[rank * k, geometry.in_channels * k], 0.0, 0.02, &mut rng::rng_from(seed))?;
    Ok(LowRankPair { b_factor, a_factor, rank, geometry: *geometry })
}

/// The expert's additive weight delta in conv layout [C_out, C_in, k, k].
///
/// delta[o, i, p, q] = (B*A)[o*k + p, i*k + q]: the product's row block index
/// is the output channel, its within-block row is the kernel row; columns
/// decompose the same way into input channel and kernel column.
pub fn expert_delta<T: Scalar>(pair: &LowRankPair<T>) -> Result<Tensor<T>> {
    pair.check()?;
    let g = &pair.geometry;
    let k = g.kernel_size;
    let ba = pair.b_factor.matmul(&pair.a_factor)?;
    let cols = g.in_channels * k;
    let mut delta = Tensor::zeros(&[g.out_channels, g.in_channels, k, k])?;
    {
        let src = ba.data();
        let dst = delta.data_mut();
        for o in 0..g.out_channels {
            for i in 0..g.in_channels {
                for p in 0..k {
                    for q in 0..k {
                        dst[((o * g.in_channels + i) * k + p) * k + q] = src[(o * k + p) * cols + i * k + q];
                    }
                }
            }
        }
    }
    Ok(delta)
}

/// Inverse reindexing of [`expert_delta`]: the delta flattened back to the
/// [C_out*k, C_in*k] product matrix. Used by gradient routing and tests.
pub fn delta_as_matrix<T: Scalar>(delta: &Tensor<T>, geometry: &ConvGeometry) -> Result<Tensor<T>> {
    let g = geometry;
    let k = g.kernel_size;
    let expect = [g.out_channels, g.in_channels, k, k];
    if delta.shape() != expect {
        return Err(Error::shape(
            "delta_as_matrix",
            format!("delta shape {:?} does not match geometry {:?}", delta.shape(), expect),
        ));
    }
    let cols = g.in_channels * k;
    let mut out = Tensor::zeros(&[g.out_channels * k, cols])?;
    {
        let src = delta.data();
        let dst = out.data_mut();
        for o in 0..g.out_channels {
            for i in 0..g.in_channels {
                for p in 0..k {
                    for q in 0..k {
                        dst[(o * k + p) * cols + i * k + q] = src[((o * g.in_channels + i) * k + p) * k + q];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Deployable weight: `w0 + expert_delta(pair)`, elementwise.
pub fn fuse_weights<T: Scalar>(w0: &Tensor<T>, pair: &LowRankPair<T>) -> Result<Tensor<T>> {
    let g = &pair.geometry;
    let expect = [g.out_channels, g.in_channels, g.kernel_size, g.kernel_size];
    if w0.shape() != expect {
        return Err(Error::shape(
            "fuse_weights",
            format!("w0 shape {:?} does not match expert geometry {:?}", w0.shape(), expect),
        ));
    }
    w0.add(&expert_delta(pair)?)
}

/// Trainable scalar count of one expert: elements of B plus elements of A.
pub fn expert_param_count(geometry: &ConvGeometry, rank: usize) -> usize {
    let k = geometry.kernel_size;
    let b = geometry.out_channels * k * rank * k;
    let a = rank * k * geometry.in_channels * k;
    b + a
}

fn is_false(b: &bool) -> bool {
    !*b
}

/// Output of the rank planner: per-task expert ranks derived from warmup
/// loss reductions.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RankPlan {
    pub base_rank: usize,
    /// Clamped (non-negative) loss reductions the plan was computed from.
    pub loss_reductions: Vec<f64>,
    pub ranks: Vec<usize>,
    /// Set when every measured reduction was zero and the plan fell back to
    /// the base rank for every task.
    #[serde(default, skip_serializing_if = "is_false")]
    pub balanced_fallback: bool,
}

/// Nearest even integer to a non-negative x; exact midpoints (odd integers)
/// round up, so 3.0 -> 4.
pub fn nearest_even(x: f64) -> usize {
    debug_assert!(x >= 0.0);
    (2.0 * (x / 2.0).round()) as usize
}

/// Allocate per-task ranks proportional to the squared normalized loss
/// reduction: rank_i = nearest_even(base * (dl_i / mean(dl))^2), clamped to
/// at least 2. Negative reductions count as zero. If every reduction is
/// zero the plan falls back to the base rank with a flag set.
pub fn plan_ranks(loss_reductions: &[f64], base_rank: usize) -> Result<RankPlan> {
    if loss_reductions.is_empty() {
        return Err(Error::invalid("plan_ranks", "need at least one task".to_string()));
    }
    if base_rank < 2 {
        return Err(Error::invalid("plan_ranks", format!("base rank must be at least 2, got {base_rank}")));
    }
    if let Some(bad) = loss_reductions.iter().find(|v| !v.is_finite()) {
        return Err(Error::invalid("plan_ranks", format!("loss reductions must be finite, got {bad}")));
    }
    let clamped: Vec<f64> = loss_reductions.iter().map(|&v| v.max(0.0)).collect();
    let avg = clamped.iter().sum::<f64>() / clamped.len() as f64;
    if avg == 0.0 {
        return Ok(RankPlan {
            base_rank,
            ranks: vec![base_rank; clamped.len()],
            loss_reductions: clamped,
            balanced_fallback: true,
        });
    }
    let ranks = clamped
        .iter()
        .map(|&dl| {
            let ratio = dl / avg;
            nearest_even(base_rank as f64 * ratio * ratio).max(2)
        })
        .collect();
    Ok(RankPlan { base_rank, loss_reductions: clamped, ranks, balanced_fallback: false })
}

/// Per-task warmup loss reduction: mean of the first `window` recorded
/// losses minus mean of the last `window`, per task. Records are
/// chronological `(step, task, loss)` triples.
pub fn measure_loss_reduction(
    records: &[(u64, usize, f64)],
    task_count: usize,
    window: usize,
) -> Result<Vec<f64>> {
    if window == 0 {
        return Err(Error::invalid("measure_loss_reduction", "window must be positive".to_string()));
    }
    let mut per_task: Vec<Vec<f64>> = vec![Vec::new(); task_count];
    for &(_, task, loss) in records {
        if task >= task_count {
            return Err(Error::invalid(
                "measure_loss_reduction",
                format!("record references task {task}, but only {task_count} tasks exist"),
            ));
        }
        per_task[task].push(loss);
    }
    let mut out = Vec::with_capacity(task_count);
    for (t, losses) in per_task.iter().enumerate() {
        if losses.len() < 2 * window {
            return Err(Error::invalid(
                "measure_loss_reduction",
                format!("task {t} has {} recorded steps, window {window} needs at least {}", losses.len(), 2 * window),
            ));
        }
        let first: f64 = losses[..window].iter().sum::<f64>() / window as f64;
        let last: f64 = losses[losses.len() - window..].iter().sum::<f64>() / window as f64;
        out.push(first - last);
    }
    Ok(out)
}
