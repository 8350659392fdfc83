//! Single-pass mixed-task convolution.
//!
//! Every sample in a batch convolves against the shared backbone weight plus
//! its own task's expert delta. Instead of looping over tasks, the layer
//! materializes one aggregated weight per sample and runs a single grouped
//! convolution with groups = batch. Gradients route structurally: an expert
//! receives contributions only from its own task's samples, the backbone
//! accumulates all of them.

use crate::error::{Error, Result};
use crate::lowrank::{delta_as_matrix, fuse_weights, LowRankPair};
use crate::tensor::{conv2d, conv2d_backward, ConvGeometry, Scalar, Tensor};

/// One-hot batch-to-task assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskIndexMatrix {
    one_hot: Tensor<f32>,
    tasks: Vec<usize>,
}

impl TaskIndexMatrix {
    pub fn from_tasks(tasks: &[usize], task_count: usize) -> Result<Self> {
        if tasks.is_empty() || task_count == 0 {
            return Err(Error::invalid("task_index_matrix", "batch and task count must be positive".to_string()));
        }
        let mut one_hot = Tensor::zeros(&[tasks.len(), task_count])?;
        for (b, &t) in tasks.iter().enumerate() {
            if t >= task_count {
                return Err(Error::invalid(
                    "task_index_matrix",
                    format!("sample {b} assigned to task {t}, but only {task_count} tasks exist"),
                ));
            }
            one_hot.set(&[b, t], 1.0);
        }
        Ok(TaskIndexMatrix { one_hot, tasks: tasks.to_vec() })
    }

    /// Validates that every row is exactly one-hot (entries 0 or 1, row sum 1).
    pub fn from_one_hot(m: &Tensor<f32>) -> Result<Self> {
        if m.shape().len() != 2 {
            return Err(Error::shape("task_index_matrix", format!("expected rank 2, got {:?}", m.shape())));
        }
        let (b, t) = (m.shape()[0], m.shape()[1]);
        let mut tasks = Vec::with_capacity(b);
        for row in 0..b {
            let mut hot: Option<usize> = None;
            for col in 0..t {
                let v = m.at(&[row, col]);
                if v == 1.0 {
                    if hot.is_some() {
                        return Err(Error::invalid("task_index_matrix", format!("row {row} has multiple ones")));
                    }
                    hot = Some(col);
                } else if v != 0.0 {
                    return Err(Error::invalid(
                        "task_index_matrix",
                        format!("row {row} contains {v}; entries must be 0 or 1"),
                    ));
                }
            }
            match hot {
                Some(col) => tasks.push(col),
                None => {
                    return Err(Error::invalid("task_index_matrix", format!("row {row} has no one")));
                }
            }
        }
        Ok(TaskIndexMatrix { one_hot: m.clone(), tasks })
    }

    pub fn batch(&self) -> usize {
        self.tasks.len()
    }

    pub fn task_count(&self) -> usize {
        self.one_hot.shape()[1]
    }

    pub fn tasks(&self) -> &[usize] {
        &self.tasks
    }

    pub fn task_of(&self, sample: usize) -> usize {
        self.tasks[sample]
    }

    pub fn one_hot(&self) -> &Tensor<f32> {
        &self.one_hot
    }

    /// Sample indices belonging to `task`, in batch order.
    pub fn samples_of(&self, task: usize) -> Vec<usize> {
        self.tasks
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == task)
            .map(|(b, _)| b)
            .collect()
    }
}

/// Shared conv weight plus one low-rank expert per task.
#[derive(Debug, Clone, PartialEq)]
pub struct EksConvLayer<T: Scalar = f32> {
    pub w0: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub experts: Vec<LowRankPair<T>>,
    pub geometry: ConvGeometry,
}

impl<T: Scalar> EksConvLayer<T> {
    /// Kaiming-style backbone init (std = sqrt(2 / fan_in)), zero bias,
    /// inert experts with per-task derived seeds.
    pub fn init(geometry: &ConvGeometry, task_count: usize, ranks: &[usize], seed: u64, with_bias: bool) -> Result<Self> {
        if ranks.len() != task_count {
            return Err(Error::invalid(
                "eks_layer",
                format!("{} ranks supplied for {task_count} tasks", ranks.len()),
            ));
        }
        geometry.validate()?;
        let g = *geometry;
        let fan_in = (g.in_channels * g.kernel_size * g.kernel_size) as f64;
        let w0 = crate::rng::randn_tensor(
            &[g.out_channels, g.in_channels, g.kernel_size, g.kernel_size],
            0.0,
            (2.0 / fan_in).sqrt(),
            &mut crate::rng::rng_from(crate::rng::derive_seed(seed, 0, u64::MAX)),
        )?;
        let bias = if with_bias { Some(Tensor::zeros(&[g.out_channels])?) } else { None };
        let experts = (0..task_count)
            .map(|t| crate::lowrank::init_lowrank(&g, ranks[t], crate::rng::derive_seed(seed, 1, t as u64)))
            .collect::<Result<Vec<_>>>()?;
        Ok(EksConvLayer { w0, bias, experts, geometry: g })
    }

    pub fn task_count(&self) -> usize {
        self.experts.len()
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.geometry;
        if g.groups != 1 {
            return Err(Error::invalid("eks_layer", format!("layer geometry must be ungrouped, got groups={}", g.groups)));
        }
        let expect = [g.out_channels, g.in_channels, g.kernel_size, g.kernel_size];
        if self.w0.shape() != expect {
            return Err(Error::shape("eks_layer", format!("w0 shape {:?}, expected {expect:?}", self.w0.shape())));
        }
        if let Some(b) = &self.bias {
            if b.shape() != [g.out_channels] {
                return Err(Error::shape("eks_layer", format!("bias shape {:?}, expected [{}]", b.shape(), g.out_channels)));
            }
        }
        if self.experts.is_empty() {
            return Err(Error::invalid("eks_layer", "layer needs at least one expert".to_string()));
        }
        for (t, e) in self.experts.iter().enumerate() {
            e.check().map_err(|err| Error::invalid("eks_layer", format!("expert {t}: {err}")))?;
            if e.geometry != *g {
                return Err(Error::invalid("eks_layer", format!("expert {t} geometry differs from layer geometry")));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> EksConvLayer<U> {
        EksConvLayer {
            w0: self.w0.cast(),
            bias: self.bias.as_ref().map(Tensor::cast),
            experts: self.experts.iter().map(LowRankPair::cast).collect(),
            geometry: self.geometry,
        }
    }
}

fn check_batch<T: Scalar>(layer: &EksConvLayer<T>, h: &Tensor<T>, m: &TaskIndexMatrix) -> Result<(usize, usize, usize, usize, usize)> {
    layer.validate()?;
    if m.task_count() != layer.task_count() {
        return Err(Error::invalid(
            "eks_forward",
            format!("task matrix has {} tasks, layer has {}", m.task_count(), layer.task_count()),
        ));
    }
    let hs = h.shape();
    if hs.len() != 4 {
        return Err(Error::shape("eks_forward", format!("input must be rank 4, got {hs:?}")));
    }
    if hs[0] != m.batch() {
        return Err(Error::shape(
            "eks_forward",
            format!("input batch {} does not match task matrix batch {}", hs[0], m.batch()),
        ));
    }
    let (oh, ow) = layer.geometry.output_hw(hs[2], hs[3])?;
    Ok((hs[0], hs[2], hs[3], oh, ow))
}

/// Per-sample aggregated weights: W'_b = w0 + delta(task of b).
/// Shape [B, C_out, C_in, k, k]. Deltas are computed once per task present
/// in the batch.
pub fn aggregate_weights<T: Scalar>(layer: &EksConvLayer<T>, m: &TaskIndexMatrix) -> Result<Tensor<T>> {
    layer.validate()?;
    if m.task_count() != layer.task_count() {
        return Err(Error::invalid(
            "aggregate_weights",
            format!("task matrix has {} tasks, layer has {}", m.task_count(), layer.task_count()),
        ));
    }
    let g = &layer.geometry;
    let wlen = layer.w0.len();
    let mut fused: Vec<Option<Tensor<T>>> = vec![None; layer.task_count()];
    let mut out = Tensor::zeros(&[m.batch(), g.out_channels, g.in_channels, g.kernel_size, g.kernel_size])?;
    for b in 0..m.batch() {
        let t = m.task_of(b);
        if fused[t].is_none() {
            fused[t] = Some(fuse_weights(&layer.w0, &layer.experts[t])?);
        }
        let src = fused[t].as_ref().expect("fused weight computed above");
        out.data_mut()[b * wlen..(b + 1) * wlen].copy_from_slice(src.data());
    }
    Ok(out)
}

fn add_bias<T: Scalar>(out: &mut Tensor<T>, bias: &Tensor<T>) {
    let shape = out.shape().to_vec();
    let (b, c, spatial) = (shape[0], shape[1], shape[2] * shape[3]);
    let data = out.data_mut();
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * spatial;
            let add = bias.data()[ci];
            for v in &mut data[base..base + spatial] {
                *v = *v + add;
            }
        }
    }
}

/// Mixed-task forward in one kernel launch: the batch reshapes to a single
/// sample of B*C_in channels, the aggregated weights to B*C_out filters, and
/// one grouped convolution with groups = B computes every sample against its
/// own weight.
pub fn eks_forward<T: Scalar>(layer: &EksConvLayer<T>, h: &Tensor<T>, m: &TaskIndexMatrix) -> Result<Tensor<T>> {
    let (b, hh, ww, _, _) = check_batch(layer, h, m)?;
    let g = &layer.geometry;
    let agg = aggregate_weights(layer, m)?;
    let grouped = ConvGeometry {
        in_channels: b * g.in_channels,
        out_channels: b * g.out_channels,
        kernel_size: g.kernel_size,
        stride: g.stride,
        padding: g.padding,
        groups: b,
    };
    let h_flat = h.reshape(&[1, b * g.in_channels, hh, ww])?;
    let w_flat = agg.reshape(&[b * g.out_channels, g.in_channels, g.kernel_size, g.kernel_size])?;
    let out_flat = conv2d(&h_flat, &w_flat, &grouped)?;
    let (oh, ow) = (out_flat.shape()[2], out_flat.shape()[3]);
    let mut out = out_flat.reshape(&[b, g.out_channels, oh, ow])?;
    if let Some(bias) = &layer.bias {
        add_bias(&mut out, bias);
    }
    Ok(out)
}

/// Reference forward: one plain convolution per task present in the batch,
/// each over that task's sub-batch with the fused weight, scattered back to
/// the original sample positions. The oracle the grouped path is checked
/// against.
pub fn naive_forward<T: Scalar>(layer: &EksConvLayer<T>, h: &Tensor<T>, m: &TaskIndexMatrix) -> Result<Tensor<T>> {
    let (b, hh, ww, oh, ow) = check_batch(layer, h, m)?;
    let g = &layer.geometry;
    let in_sample = g.in_channels * hh * ww;
    let out_sample = g.out_channels * oh * ow;
    let mut out = Tensor::zeros(&[b, g.out_channels, oh, ow])?;
    for t in 0..layer.task_count() {
        let samples = m.samples_of(t);
        if samples.is_empty() {
            continue;
        }
        let mut sub = Tensor::zeros(&[samples.len(), g.in_channels, hh, ww])?;
        for (j, &bi) in samples.iter().enumerate() {
            sub.data_mut()[j * in_sample..(j + 1) * in_sample]
                .copy_from_slice(&h.data()[bi * in_sample..(bi + 1) * in_sample]);
        }
        let fused = fuse_weights(&layer.w0, &layer.experts[t])?;
        let sub_out = conv2d(&sub, &fused, g)?;
        for (j, &bi) in samples.iter().enumerate() {
            out.data_mut()[bi * out_sample..(bi + 1) * out_sample]
                .copy_from_slice(&sub_out.data()[j * out_sample..(j + 1) * out_sample]);
        }
    }
    if let Some(bias) = &layer.bias {
        add_bias(&mut out, bias);
    }
    Ok(out)
}

/// Gradients of a scalar loss through [`eks_forward`].
#[derive(Debug, Clone)]
pub struct EksGradients<T: Scalar = f32> {
    pub grad_input: Tensor<T>,
    /// Sum of per-sample weight gradients over the whole batch.
    pub grad_w0: Tensor<T>,
    /// Per task: (grad of B, grad of A). Tasks absent from the batch hold
    /// exactly-zero tensors; no arithmetic is spent on them.
    pub grad_experts: Vec<(Tensor<T>, Tensor<T>)>,
    pub grad_bias: Option<Tensor<T>>,
}

/// Backward pass with routed gradients. The per-sample weight gradients from
/// the grouped convolution split by task: the backbone takes their total, and
/// each present task's sum chains through its factor pair:
/// grad_B = S_t * A^T and grad_A = B^T * S_t with S_t the task's weight
/// gradient in matrix layout.
pub fn eks_backward<T: Scalar>(
    layer: &EksConvLayer<T>,
    h: &Tensor<T>,
    m: &TaskIndexMatrix,
    grad_out: &Tensor<T>,
) -> Result<EksGradients<T>> {
    let (b, hh, ww, oh, ow) = check_batch(layer, h, m)?;
    let g = &layer.geometry;
    let expect = [b, g.out_channels, oh, ow];
    if grad_out.shape() != expect {
        return Err(Error::shape(
            "eks_backward",
            format!("grad_out shape {:?} does not match forward output {expect:?}", grad_out.shape()),
        ));
    }

    let agg = aggregate_weights(layer, m)?;
    let grouped = ConvGeometry {
        in_channels: b * g.in_channels,
        out_channels: b * g.out_channels,
        kernel_size: g.kernel_size,
        stride: g.stride,
        padding: g.padding,
        groups: b,
    };
    let h_flat = h.reshape(&[1, b * g.in_channels, hh, ww])?;
    let w_flat = agg.reshape(&[b * g.out_channels, g.in_channels, g.kernel_size, g.kernel_size])?;
    let go_flat = grad_out.reshape(&[1, b * g.out_channels, oh, ow])?;
    let (gi_flat, gw_flat) = conv2d_backward(&go_flat, &h_flat, &w_flat, &grouped)?;
    let grad_input = gi_flat.reshape(&[b, g.in_channels, hh, ww])?;

    // split the per-sample weight gradients: total for the backbone,
    // per-task sums for the experts
    let wlen = layer.w0.len();
    let mut grad_w0 = Tensor::zeros(layer.w0.shape())?;
    let mut task_sums: Vec<Option<Tensor<T>>> = vec![None; layer.task_count()];
    for bi in 0..b {
        let sample = &gw_flat.data()[bi * wlen..(bi + 1) * wlen];
        for (dst, &s) in grad_w0.data_mut().iter_mut().zip(sample) {
            *dst = *dst + s;
        }
        let t = m.task_of(bi);
        let sum = task_sums[t].get_or_insert_with(|| Tensor::zeros(layer.w0.shape()).expect("w0 shape is valid"));
        for (dst, &s) in sum.data_mut().iter_mut().zip(sample) {
            *dst = *dst + s;
        }
    }

    let mut grad_experts = Vec::with_capacity(layer.task_count());
    for (t, pair) in layer.experts.iter().enumerate() {
        match &task_sums[t] {
            Some(s) => {
                let s_mat = delta_as_matrix(s, g)?;
                let grad_b = s_mat.matmul(&pair.a_factor.transpose2d()?)?;
                let grad_a = pair.b_factor.transpose2d()?.matmul(&s_mat)?;
                grad_experts.push((grad_b, grad_a));
            }
            None => {
                grad_experts.push((
                    Tensor::zeros(pair.b_factor.shape())?,
                    Tensor::zeros(pair.a_factor.shape())?,
                ));
            }
        }
    }

    let grad_bias = match &layer.bias {
        Some(_) => {
            let mut gb = Tensor::zeros(&[g.out_channels])?;
            let spatial = oh * ow;
            for bi in 0..b {
                for c in 0..g.out_channels {
                    let base = (bi * g.out_channels + c) * spatial;
                    let mut acc = T::zero();
                    for &v in &grad_out.data()[base..base + spatial] {
                        acc = acc + v;
                    }
                    gb.data_mut()[c] = gb.data_mut()[c] + acc;
                }
            }
            Some(gb)
        }
        None => None,
    };

    Ok(EksGradients { grad_input, grad_w0, grad_experts, grad_bias })
}

/// Analytic multiply-add costs of processing one mixed-task batch through one
/// layer, under the convention that a conv is a d x d matmul over a sequence
/// of length l (2 flops per multiply-add).
///
/// Single-pass route: fuse every present expert once (T * 2*r*d^2) then one
/// batched convolution (2*b*l*d^2). Broadcast-every-position route: the
/// low-rank product is applied at every sequence position (2*r*b*l*d^2).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CostEstimate {
    pub eks_flops: u128,
    pub flora_flops: u128,
    pub eks_cheaper: bool,
}

pub fn cost_estimate(tasks: u64, batch: u64, seq_len: u64, dim: u64, rank: u64) -> Result<CostEstimate> {
    if batch == 0 || seq_len == 0 || dim == 0 || rank == 0 {
        return Err(Error::invalid(
            "cost_estimate",
            format!("batch, seq_len, dim and rank must be positive, got b={batch} l={seq_len} d={dim} r={rank}"),
        ));
    }
    const C2: u128 = 2;
    let (t, b, l, d, r) = (tasks as u128, batch as u128, seq_len as u128, dim as u128, rank as u128);
    let d2 = d * d;
    let eks_flops = t * C2 * r * d2 + C2 * b * l * d2;
    let flora_flops = C2 * r * b * l * d2;
    // eks <= flora  <=>  T*r + b*l <= r*b*l  (divide by c2*d^2)
    let eks_cheaper = t * r + b * l <= r * b * l;
    Ok(CostEstimate { eks_flops, flora_flops, eks_cheaper })
}
