//! Classification nets: the decomposed student (EKS conv stack, per-task
//! linear heads, a projection for feature transfer), the plain unified-head
//! teacher, and the fused per-task deployment net.

use crate::eks::{eks_forward, eks_backward, EksConvLayer, EksGradients, TaskIndexMatrix};
use crate::error::{Error, Result};
use crate::lowrank::{fuse_weights, init_lowrank};
use crate::network::layers::{global_avg_pool, global_avg_pool_backward, relu, relu_backward, row, Linear, PlainConvLayer};
use crate::network::{check_lowrank_budget, LayerKind, LayerSpec};
use crate::rng::derive_seed;
use crate::tensor::{ConvGeometry, Scalar, Tensor};

/// Four 3x3 blocks, stride 2 on the second and fourth: widths
/// w, 2w, 4w, 4w over 32x32 -> 32 -> 16 -> 16 -> 8.
pub(crate) fn cls_geometries(width: usize) -> [ConvGeometry; 4] {
    let g = |ci: usize, co: usize, stride: usize| ConvGeometry {
        in_channels: ci,
        out_channels: co,
        kernel_size: 3,
        stride,
        padding: 1,
        groups: 1,
    };
    [g(1, width, 1), g(width, 2 * width, 2), g(2 * width, 4 * width, 1), g(4 * width, 4 * width, 2)]
}

/// Decomposed classification student: shared backbone with one low-rank
/// expert per task on every conv, one linear head per task, and a trainable
/// projection to the teacher's feature width for the transfer term.
#[derive(Debug, Clone)]
pub struct ClsStudent<T: Scalar = f32> {
    blocks: Vec<EksConvLayer<T>>,
    heads: Vec<Linear<T>>,
    kd_proj: Linear<T>,
    class_counts: Vec<usize>,
    width: usize,
}

pub fn build_student_cls<T: Scalar>(
    task_count: usize,
    class_counts: &[usize],
    width: usize,
    base_rank: usize,
    seed: u64,
) -> Result<ClsStudent<T>> {
    if task_count == 0 {
        return Err(Error::invalid("build_student_cls", "task_count must be at least 1".to_string()));
    }
    if class_counts.len() != task_count {
        return Err(Error::invalid(
            "build_student_cls",
            format!("{} class counts for {task_count} tasks", class_counts.len()),
        ));
    }
    if let Some(y) = class_counts.iter().find(|y| **y < 2) {
        return Err(Error::invalid("build_student_cls", format!("a {y}-way head is not a classification task")));
    }
    if width < 4 {
        return Err(Error::invalid("build_student_cls", format!("width {width} below minimum 4")));
    }
    let geoms = cls_geometries(width);
    check_lowrank_budget("build_student_cls", &geoms, base_rank)?;
    let ranks = vec![base_rank; task_count];
    let blocks = geoms
        .iter()
        .enumerate()
        .map(|(i, g)| EksConvLayer::init(g, task_count, &ranks, derive_seed(seed, 2, i as u64), true))
        .collect::<Result<Vec<_>>>()?;
    let feat = 4 * width;
    let heads = class_counts
        .iter()
        .enumerate()
        .map(|(t, y)| Linear::init(feat, *y, 0.01, derive_seed(seed, 3, t as u64)))
        .collect::<Result<Vec<_>>>()?;
    // teacher convention is twice the student width, so its feature is 8w
    let kd_proj = Linear::init(feat, 2 * feat, (1.0 / feat as f64).sqrt(), derive_seed(seed, 4, 0))?;
    Ok(ClsStudent { blocks, heads, kd_proj, class_counts: class_counts.to_vec(), width })
}

/// Cached activations from one decomposed forward pass.
#[derive(Debug, Clone)]
pub struct ClsForward<T: Scalar = f32> {
    /// Post-pool penultimate features, [B, 4w]. The similarity probe.
    pub features: Tensor<T>,
    /// Per-sample logits from the sample's task head.
    pub logits: Vec<Tensor<T>>,
    /// Features pushed through the transfer projection, [B, 8w].
    pub projected: Tensor<T>,
    input: Tensor<T>,
    block_outputs: Vec<Tensor<T>>,
    tasks: TaskIndexMatrix,
}

/// Gradients for every parameter of the student, in parameter order.
#[derive(Debug, Clone)]
pub struct ClsGrads<T: Scalar = f32> {
    pub blocks: Vec<EksGradients<T>>,
    pub heads: Vec<(Tensor<T>, Tensor<T>)>,
    pub kd_proj: (Tensor<T>, Tensor<T>),
}

impl<T: Scalar> ClsGrads<T> {
    /// Flat view aligned with `ClsStudent::params_mut`.
    pub fn flatten(&self) -> Vec<&Tensor<T>> {
        let mut v = Vec::new();
        for b in &self.blocks {
            v.push(&b.grad_w0);
            v.push(b.grad_bias.as_ref().expect("student blocks carry biases"));
            for (gb, ga) in &b.grad_experts {
                v.push(gb);
                v.push(ga);
            }
        }
        for (gw, gb) in &self.heads {
            v.push(gw);
            v.push(gb);
        }
        v.push(&self.kd_proj.0);
        v.push(&self.kd_proj.1);
        v
    }
}

impl<T: Scalar> ClsStudent<T> {
    pub fn task_count(&self) -> usize {
        self.heads.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    pub fn blocks(&self) -> &[EksConvLayer<T>] {
        &self.blocks
    }

    pub fn feature_dim(&self) -> usize {
        4 * self.width
    }

    /// Per-task expert rank, identical on every block.
    pub fn expert_ranks(&self) -> Vec<usize> {
        self.blocks[0].experts.iter().map(|e| e.rank).collect()
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut v = Vec::new();
        for b in &self.blocks {
            v.push(LayerSpec::conv(LayerKind::EksConv, b.geometry));
            v.push(LayerSpec::plain(LayerKind::Relu));
        }
        v.push(LayerSpec::plain(LayerKind::GlobalAvgPool));
        v.push(LayerSpec::plain(LayerKind::LinearHead));
        v
    }

    pub fn forward(&self, input: &Tensor<T>, tasks: &TaskIndexMatrix) -> Result<ClsForward<T>> {
        if input.shape().len() != 4 || input.shape()[1] != 1 {
            return Err(Error::shape("cls_forward", format!("want [B,1,H,W], got {:?}", input.shape())));
        }
        if tasks.batch() != input.shape()[0] || tasks.task_count() != self.task_count() {
            return Err(Error::shape(
                "cls_forward",
                format!(
                    "task matrix {}x{} against batch {} and {} tasks",
                    tasks.batch(),
                    tasks.task_count(),
                    input.shape()[0],
                    self.task_count()
                ),
            ));
        }
        let mut block_outputs: Vec<Tensor<T>> = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let h = if i == 0 { input } else { &block_outputs[i - 1] };
            let z = eks_forward(block, h, tasks)?;
            block_outputs.push(relu(&z));
        }
        let features = global_avg_pool(block_outputs.last().expect("student has blocks"))?;
        let mut logits = Vec::with_capacity(tasks.batch());
        for b in 0..tasks.batch() {
            let head = &self.heads[tasks.task_of(b)];
            logits.push(head.forward_vec(&row(&features, b)?)?);
        }
        let projected = self.kd_proj.forward(&features)?;
        Ok(ClsForward { features, logits, projected, input: input.clone(), block_outputs, tasks: tasks.clone() })
    }

    /// Backward from per-sample logit gradients and (optionally) gradients on
    /// the projected features. Heads of tasks absent from the batch get
    /// exactly-zero gradients.
    pub fn backward(
        &self,
        fwd: &ClsForward<T>,
        grad_logits: &[Tensor<T>],
        grad_projected: Option<&Tensor<T>>,
    ) -> Result<ClsGrads<T>> {
        let batch = fwd.tasks.batch();
        if grad_logits.len() != batch {
            return Err(Error::shape(
                "cls_backward",
                format!("{} logit gradients for batch {batch}", grad_logits.len()),
            ));
        }
        let feat_dim = self.feature_dim();
        let mut grad_feat = Tensor::zeros(&[batch, feat_dim])?;
        let mut head_grads: Vec<(Tensor<T>, Tensor<T>)> = self
            .heads
            .iter()
            .map(|h| Ok((Tensor::zeros(h.weight.shape())?, Tensor::zeros(h.bias.shape())?)))
            .collect::<Result<_>>()?;
        for (b, gy) in grad_logits.iter().enumerate() {
            let t = fwd.tasks.task_of(b);
            let head = &self.heads[t];
            if gy.shape() != [head.out_dim()] {
                return Err(Error::shape(
                    "cls_backward",
                    format!("sample {b}: logit gradient {:?} for a {}-way head", gy.shape(), head.out_dim()),
                ));
            }
            let (gw, gb) = &mut head_grads[t];
            for o in 0..head.out_dim() {
                let g = gy.data()[o];
                gb.data_mut()[o] = gb.data()[o] + g;
                for i in 0..feat_dim {
                    let widx = o * feat_dim + i;
                    gw.data_mut()[widx] = gw.data()[widx] + g * fwd.features.at(&[b, i]);
                    let fidx = b * feat_dim + i;
                    grad_feat.data_mut()[fidx] = grad_feat.data()[fidx] + g * head.weight.data()[widx];
                }
            }
        }
        let kd_grads = match grad_projected {
            Some(gp) => {
                let (gx, gw, gb) = self.kd_proj.backward(&fwd.features, gp)?;
                grad_feat.add_scaled(&gx, T::one())?;
                (gw, gb)
            }
            None => (Tensor::zeros(self.kd_proj.weight.shape())?, Tensor::zeros(self.kd_proj.bias.shape())?),
        };
        let last = fwd.block_outputs.last().expect("student has blocks");
        let mut grad = global_avg_pool_backward(&grad_feat, last.shape()[2], last.shape()[3])?;
        let mut block_grads = Vec::with_capacity(self.blocks.len());
        for i in (0..self.blocks.len()).rev() {
            let gz = relu_backward(&fwd.block_outputs[i], &grad);
            let h = if i == 0 { &fwd.input } else { &fwd.block_outputs[i - 1] };
            let e = eks_backward(&self.blocks[i], h, &fwd.tasks, &gz)?;
            grad = e.grad_input.clone();
            block_grads.push(e);
        }
        block_grads.reverse();
        Ok(ClsGrads { blocks: block_grads, heads: head_grads, kd_proj: kd_grads })
    }

    /// Merge task `task_id`'s experts into the backbone and keep only its
    /// head; the transfer projection is a training aid and is dropped.
    pub fn extract_expert(&self, task_id: usize) -> Result<FusedClsNet<T>> {
        if task_id >= self.task_count() {
            return Err(Error::invalid(
                "extract_expert",
                format!("task {task_id} out of range for {} tasks", self.task_count()),
            ));
        }
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                let fused = fuse_weights(&b.w0, &b.experts[task_id])?;
                PlainConvLayer::from_parts(fused, b.bias.clone().expect("student blocks carry biases"), b.geometry)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FusedClsNet { blocks, head: self.heads[task_id].clone(), task_id, width: self.width })
    }

    /// Re-draw every expert at the given per-task ranks (backbone, heads,
    /// and projection untouched). Used when rank planning assigns uneven
    /// capacity after warmup.
    pub fn set_expert_ranks(&mut self, ranks: &[usize], seed: u64) -> Result<()> {
        if ranks.len() != self.task_count() {
            return Err(Error::invalid(
                "set_expert_ranks",
                format!("{} ranks for {} tasks", ranks.len(), self.task_count()),
            ));
        }
        let geoms: Vec<ConvGeometry> = self.blocks.iter().map(|b| b.geometry).collect();
        for r in ranks {
            check_lowrank_budget("set_expert_ranks", &geoms, *r)?;
        }
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.experts = ranks
                .iter()
                .enumerate()
                .map(|(t, r)| init_lowrank(&block.geometry, *r, derive_seed(seed, 100 + i as u64, t as u64)))
                .collect::<Result<Vec<_>>>()?;
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Parameter count of the fused net for one task: backbone plus that
    /// task's head, experts merged away.
    pub fn fused_param_count(&self, task_id: usize) -> usize {
        let backbone: usize = self
            .blocks
            .iter()
            .map(|b| b.w0.len() + b.bias.as_ref().map_or(0, |x| x.len()))
            .sum();
        backbone + self.heads[task_id].param_count()
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            v.push((format!("block{i}.w0"), &b.w0));
            v.push((format!("block{i}.bias"), b.bias.as_ref().expect("student blocks carry biases")));
            for (t, e) in b.experts.iter().enumerate() {
                v.push((format!("block{i}.expert{t}.b"), &e.b_factor));
                v.push((format!("block{i}.expert{t}.a"), &e.a_factor));
            }
        }
        for (t, h) in self.heads.iter().enumerate() {
            v.push((format!("head{t}.weight"), &h.weight));
            v.push((format!("head{t}.bias"), &h.bias));
        }
        v.push(("kd_proj.weight".to_string(), &self.kd_proj.weight));
        v.push(("kd_proj.bias".to_string(), &self.kd_proj.bias));
        v
    }

    /// Mutable parameter views in the same order as `named_params`.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = Vec::new();
        for b in &mut self.blocks {
            v.push(&mut b.w0);
            v.push(b.bias.as_mut().expect("student blocks carry biases"));
            for e in &mut b.experts {
                v.push(&mut e.b_factor);
                v.push(&mut e.a_factor);
            }
        }
        for h in &mut self.heads {
            v.push(&mut h.weight);
            v.push(&mut h.bias);
        }
        v.push(&mut self.kd_proj.weight);
        v.push(&mut self.kd_proj.bias);
        v
    }

    pub fn cast<U: Scalar>(&self) -> ClsStudent<U> {
        ClsStudent {
            blocks: self.blocks.iter().map(|b| b.cast()).collect(),
            heads: self.heads.iter().map(|h| h.cast()).collect(),
            kd_proj: self.kd_proj.cast(),
            class_counts: self.class_counts.clone(),
            width: self.width,
        }
    }
}

/// Deployment net for one task: plain convs with the expert merged in.
#[derive(Debug, Clone)]
pub struct FusedClsNet<T: Scalar = f32> {
    blocks: Vec<PlainConvLayer<T>>,
    head: Linear<T>,
    task_id: usize,
    width: usize,
}

impl<T: Scalar> FusedClsNet<T> {
    pub fn task_id(&self) -> usize {
        self.task_id
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn class_count(&self) -> usize {
        self.head.out_dim()
    }

    pub fn from_parts(blocks: Vec<PlainConvLayer<T>>, head: Linear<T>, task_id: usize, width: usize) -> Result<Self> {
        if blocks.len() != 4 {
            return Err(Error::invalid("fused_cls", format!("{} blocks, expected 4", blocks.len())));
        }
        Ok(FusedClsNet { blocks, head, task_id, width })
    }

    /// Returns (per-sample logits [B, Y], penultimate features [B, 4w]).
    pub fn forward(&self, input: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut h = input.clone();
        for b in &self.blocks {
            h = relu(&b.forward(&h)?);
        }
        let features = global_avg_pool(&h)?;
        let logits = self.head.forward(&features)?;
        Ok((logits, features))
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(|b| b.param_count()).sum::<usize>() + self.head.param_count()
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            v.push((format!("block{i}.weight"), &b.weight));
            v.push((format!("block{i}.bias"), &b.bias));
        }
        v.push(("head.weight".to_string(), &self.head.weight));
        v.push(("head.bias".to_string(), &self.head.bias));
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = Vec::new();
        for b in &mut self.blocks {
            v.push(&mut b.weight);
            v.push(&mut b.bias);
        }
        v.push(&mut self.head.weight);
        v.push(&mut self.head.bias);
        v
    }

    pub fn geometries(&self) -> Vec<ConvGeometry> {
        self.blocks.iter().map(|b| b.geometry).collect()
    }
}

/// Plain teacher with a unified head over all tasks' classes; class c of
/// task t sits at global index offset(t) + c.
#[derive(Debug, Clone)]
pub struct ClsTeacher<T: Scalar = f32> {
    blocks: Vec<PlainConvLayer<T>>,
    head: Linear<T>,
    class_counts: Vec<usize>,
    width: usize,
}

pub fn build_teacher_cls<T: Scalar>(class_counts: &[usize], width: usize, seed: u64) -> Result<ClsTeacher<T>> {
    if class_counts.is_empty() || class_counts.iter().any(|y| *y < 2) {
        return Err(Error::invalid("build_teacher_cls", format!("bad class counts {class_counts:?}")));
    }
    if width < 4 {
        return Err(Error::invalid("build_teacher_cls", format!("width {width} below minimum 4")));
    }
    let blocks = cls_geometries(width)
        .iter()
        .enumerate()
        .map(|(i, g)| PlainConvLayer::init(g, derive_seed(seed, 5, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let total: usize = class_counts.iter().sum();
    let head = Linear::init(4 * width, total, 0.01, derive_seed(seed, 6, 0))?;
    Ok(ClsTeacher { blocks, head, class_counts: class_counts.to_vec(), width })
}

#[derive(Debug, Clone)]
pub struct TeacherClsForward<T: Scalar = f32> {
    /// Penultimate features, [B, 4w]. The transfer source.
    pub features: Tensor<T>,
    /// Unified logits, [B, sum of class counts].
    pub logits: Tensor<T>,
    input: Tensor<T>,
    block_outputs: Vec<Tensor<T>>,
}

#[derive(Debug, Clone)]
pub struct TeacherClsGrads<T: Scalar = f32> {
    pub blocks: Vec<(Tensor<T>, Tensor<T>)>,
    pub head: (Tensor<T>, Tensor<T>),
}

impl<T: Scalar> TeacherClsGrads<T> {
    pub fn flatten(&self) -> Vec<&Tensor<T>> {
        let mut v = Vec::new();
        for (gw, gb) in &self.blocks {
            v.push(gw);
            v.push(gb);
        }
        v.push(&self.head.0);
        v.push(&self.head.1);
        v
    }
}

impl<T: Scalar> ClsTeacher<T> {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    pub fn feature_dim(&self) -> usize {
        4 * self.width
    }

    pub fn total_classes(&self) -> usize {
        self.class_counts.iter().sum()
    }

    /// Global index of `label` under task `t`'s block of the unified head.
    pub fn global_label(&self, task: usize, label: usize) -> Result<usize> {
        if task >= self.class_counts.len() || label >= self.class_counts[task] {
            return Err(Error::invalid(
                "global_label",
                format!("task {task} / label {label} outside {:?}", self.class_counts),
            ));
        }
        Ok(self.class_counts[..task].iter().sum::<usize>() + label)
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<TeacherClsForward<T>> {
        if input.shape().len() != 4 || input.shape()[1] != 1 {
            return Err(Error::shape("teacher_forward", format!("want [B,1,H,W], got {:?}", input.shape())));
        }
        let mut block_outputs: Vec<Tensor<T>> = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let h = if i == 0 { input } else { &block_outputs[i - 1] };
            block_outputs.push(relu(&block.forward(h)?));
        }
        let features = global_avg_pool(block_outputs.last().expect("teacher has blocks"))?;
        let logits = self.head.forward(&features)?;
        Ok(TeacherClsForward { features, logits, input: input.clone(), block_outputs })
    }

    pub fn backward(&self, fwd: &TeacherClsForward<T>, grad_logits: &Tensor<T>) -> Result<TeacherClsGrads<T>> {
        let (grad_feat, ghw, ghb) = self.head.backward(&fwd.features, grad_logits)?;
        let last = fwd.block_outputs.last().expect("teacher has blocks");
        let mut grad = global_avg_pool_backward(&grad_feat, last.shape()[2], last.shape()[3])?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for i in (0..self.blocks.len()).rev() {
            let gz = relu_backward(&fwd.block_outputs[i], &grad);
            let h = if i == 0 { &fwd.input } else { &fwd.block_outputs[i - 1] };
            let (gi, gw, gb) = self.blocks[i].backward(h, &gz)?;
            grad = gi;
            blocks.push((gw, gb));
        }
        blocks.reverse();
        Ok(TeacherClsGrads { blocks, head: (ghw, ghb) })
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(|b| b.param_count()).sum::<usize>() + self.head.param_count()
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            v.push((format!("block{i}.weight"), &b.weight));
            v.push((format!("block{i}.bias"), &b.bias));
        }
        v.push(("head.weight".to_string(), &self.head.weight));
        v.push(("head.bias".to_string(), &self.head.bias));
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = Vec::new();
        for b in &mut self.blocks {
            v.push(&mut b.weight);
            v.push(&mut b.bias);
        }
        v.push(&mut self.head.weight);
        v.push(&mut self.head.bias);
        v
    }

    pub fn cast<U: Scalar>(&self) -> ClsTeacher<U> {
        ClsTeacher {
            blocks: self.blocks.iter().map(|b| b.cast()).collect(),
            head: self.head.cast(),
            class_counts: self.class_counts.clone(),
            width: self.width,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_from, uniform_tensor};

    fn toy_tasks(batch: usize, task_count: usize) -> TaskIndexMatrix {
        let tasks: Vec<usize> = (0..batch).map(|b| b % task_count).collect();
        TaskIndexMatrix::from_tasks(&tasks, task_count).unwrap()
    }

    fn randomize_experts(net: &mut ClsStudent<f32>, seed: u64) {
        let mut rng = rng_from(seed);
        let names: Vec<String> = net.named_params().iter().map(|(n, _)| n.clone()).collect();
        for (name, p) in names.iter().zip(net.params_mut()) {
            if name.contains("expert") {
                *p = uniform_tensor(p.shape(), -0.3, 0.3, &mut rng).unwrap();
            }
        }
    }

    #[test]
    fn same_seed_builds_identical_students() {
        let a: ClsStudent = build_student_cls(3, &[4, 2, 2], 4, 4, 7).unwrap();
        let b: ClsStudent = build_student_cls(3, &[4, 2, 2], 4, 4, 7).unwrap();
        for ((na, pa), (nb, pb)) in a.named_params().iter().zip(b.named_params()) {
            assert_eq!(na, &nb);
            assert_eq!(pa.data(), pb.data(), "{na}");
        }
    }

    #[test]
    fn inert_experts_match_backbone_only_net() {
        let net: ClsStudent = build_student_cls(2, &[3, 2], 4, 4, 11).unwrap();
        let x = uniform_tensor(&[4, 1, 16, 16], -1.0, 1.0, &mut rng_from(1)).unwrap();
        let m = toy_tasks(4, 2);
        let fwd = net.forward(&x, &m).unwrap();
        // experts are inert at init, so the fused net is exactly the backbone
        for task in 0..2 {
            let fused = net.extract_expert(task).unwrap();
            let (logits, feats) = fused.forward(&x).unwrap();
            assert!(feats.max_abs_diff(&fwd.features).unwrap() <= 1e-6);
            for b in 0..4 {
                if m.task_of(b) == task {
                    let r = crate::network::layers::row(&logits, b).unwrap();
                    assert!(r.max_abs_diff(&fwd.logits[b]).unwrap() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn inert_features_ignore_task_labels() {
        let net: ClsStudent = build_student_cls(3, &[2, 2, 2], 4, 4, 13).unwrap();
        let x = uniform_tensor(&[3, 1, 8, 8], -1.0, 1.0, &mut rng_from(2)).unwrap();
        let all_zero = TaskIndexMatrix::from_tasks(&[0, 0, 0], 3).unwrap();
        let mixed = TaskIndexMatrix::from_tasks(&[0, 1, 2], 3).unwrap();
        let fa = net.forward(&x, &all_zero).unwrap();
        let fb = net.forward(&x, &mixed).unwrap();
        assert_eq!(fa.features.data(), fb.features.data());
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let (width, t, rank) = (4usize, 3usize, 4usize);
        let net: ClsStudent = build_student_cls(t, &[4, 2, 2], width, rank, 17).unwrap();
        let geoms = cls_geometries(width);
        let dense: usize = geoms.iter().map(|g| g.dense_param_count() + g.out_channels).sum();
        let experts: usize =
            geoms.iter().map(|g| crate::lowrank::expert_param_count(g, rank)).sum::<usize>() * t;
        let heads: usize = [4, 2, 2].iter().map(|y| (4 * width + 1) * y).sum();
        let kd = (4 * width) * (8 * width) + 8 * width;
        assert_eq!(net.param_count(), dense + experts + heads + kd);
        assert_eq!(net.fused_param_count(0), dense + (4 * width + 1) * 4);
    }

    #[test]
    fn extraction_matches_constant_task_forward() {
        let mut net: ClsStudent = build_student_cls(3, &[4, 2, 2], 4, 4, 19).unwrap();
        randomize_experts(&mut net, 23);
        let x = uniform_tensor(&[5, 1, 12, 12], -1.0, 1.0, &mut rng_from(3)).unwrap();
        for task in 0..3 {
            let m = TaskIndexMatrix::from_tasks(&[task; 5], 3).unwrap();
            let fwd = net.forward(&x, &m).unwrap();
            let fused = net.extract_expert(task).unwrap();
            let (logits, feats) = fused.forward(&x).unwrap();
            assert!(feats.max_abs_diff(&fwd.features).unwrap() <= 1e-5);
            for b in 0..5 {
                let r = crate::network::layers::row(&logits, b).unwrap();
                assert!(r.max_abs_diff(&fwd.logits[b]).unwrap() <= 1e-5);
            }
            assert!(fused.param_count() < net.param_count());
            assert_eq!(fused.param_count(), net.fused_param_count(task));
        }
    }

    #[test]
    fn foreign_expert_edits_leave_other_tasks_untouched() {
        let mut net: ClsStudent = build_student_cls(2, &[2, 2], 4, 4, 29).unwrap();
        randomize_experts(&mut net, 31);
        let x = uniform_tensor(&[4, 1, 8, 8], -1.0, 1.0, &mut rng_from(4)).unwrap();
        let m = toy_tasks(4, 2);
        let before = net.forward(&x, &m).unwrap();
        // wreck task 1's experts everywhere
        let names: Vec<String> = net.named_params().iter().map(|(n, _)| n.clone()).collect();
        for (name, p) in names.iter().zip(net.params_mut()) {
            if name.contains("expert1") {
                *p = Tensor::filled(p.shape(), 9.0).unwrap();
            }
        }
        let after = net.forward(&x, &m).unwrap();
        for b in 0..4 {
            if m.task_of(b) == 0 {
                assert_eq!(before.logits[b].data(), after.logits[b].data());
            } else {
                assert!(before.logits[b].max_abs_diff(&after.logits[b]).unwrap() > 0.0);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences_on_sampled_coordinates() {
        let mut net: ClsStudent<f64> = build_student_cls(2, &[3, 2], 4, 4, 37).unwrap();
        randomize_experts_f64(&mut net, 41);
        let x = uniform_tensor(&[2, 1, 8, 8], -1.0, 1.0, &mut rng_from(5)).unwrap();
        let m = toy_tasks(2, 2);
        // loss: sum of squared logits and squared projections, halved
        let loss = |net: &ClsStudent<f64>| -> f64 {
            let f = net.forward(&x, &m).unwrap();
            let a: f64 = f.logits.iter().flat_map(|l| l.data()).map(|v| v * v / 2.0).sum();
            let b: f64 = f.projected.data().iter().map(|v| v * v / 2.0).sum();
            a + b
        };
        let fwd = net.forward(&x, &m).unwrap();
        let grads = net.backward(&fwd, &fwd.logits, Some(&fwd.projected)).unwrap();
        let flat: Vec<Tensor<f64>> = grads.flatten().into_iter().cloned().collect();
        let names: Vec<String> = net.named_params().iter().map(|(n, _)| n.clone()).collect();
        let step = 1e-5;
        for (pi, name) in names.iter().enumerate() {
            for ci in [0usize, 7] {
                let (analytic, len) = {
                    let g = &flat[pi];
                    if ci >= g.len() {
                        continue;
                    }
                    (g.data()[ci], g.len())
                };
                assert!(ci < len);
                let base = {
                    let p = &mut net.params_mut()[pi];
                    let old = p.data()[ci];
                    p.data_mut()[ci] = old + step;
                    old
                };
                let up = loss(&net);
                net.params_mut()[pi].data_mut()[ci] = base - step;
                let down = loss(&net);
                net.params_mut()[pi].data_mut()[ci] = base;
                let fd = (up - down) / (2.0 * step);
                let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
                assert!(rel < 1e-4, "{name}[{ci}]: analytic {analytic} vs fd {fd}");
            }
        }
    }

    fn randomize_experts_f64(net: &mut ClsStudent<f64>, seed: u64) {
        let mut rng = rng_from(seed);
        let names: Vec<String> = net.named_params().iter().map(|(n, _)| n.clone()).collect();
        for (name, p) in names.iter().zip(net.params_mut()) {
            if name.contains("expert") {
                *p = uniform_tensor(p.shape(), -0.3, 0.3, &mut rng).unwrap();
            }
        }
    }

    #[test]
    fn teacher_outranks_student_backbone() {
        let student: ClsStudent = build_student_cls(2, &[3, 2], 4, 4, 43).unwrap();
        let teacher: ClsTeacher = build_teacher_cls(&[3, 2], 8, 43).unwrap();
        let backbone = student.fused_param_count(0);
        assert!(teacher.param_count() > backbone);
        assert_eq!(teacher.feature_dim(), 2 * student.feature_dim());
    }

    #[test]
    fn teacher_global_labels_are_offset_blocks() {
        let teacher: ClsTeacher = build_teacher_cls(&[4, 2, 3], 4, 47).unwrap();
        assert_eq!(teacher.global_label(0, 3).unwrap(), 3);
        assert_eq!(teacher.global_label(1, 0).unwrap(), 4);
        assert_eq!(teacher.global_label(2, 2).unwrap(), 8);
        assert!(teacher.global_label(1, 2).is_err());
        assert_eq!(teacher.total_classes(), 9);
    }

    #[test]
    fn teacher_backward_matches_finite_differences() {
        let teacher: ClsTeacher<f64> = build_teacher_cls(&[2, 2], 4, 53).unwrap();
        let x = uniform_tensor(&[2, 1, 8, 8], -1.0, 1.0, &mut rng_from(6)).unwrap();
        let fwd = teacher.forward(&x).unwrap();
        let grads = teacher.backward(&fwd, &fwd.logits).unwrap();
        let flat: Vec<Tensor<f64>> = grads.flatten().into_iter().cloned().collect();
        let loss = |t: &ClsTeacher<f64>| -> f64 {
            t.forward(&x).unwrap().logits.data().iter().map(|v| v * v / 2.0).sum()
        };
        let mut teacher = teacher;
        let step = 1e-5;
        for pi in 0..flat.len() {
            let ci = flat[pi].len() / 2;
            let analytic = flat[pi].data()[ci];
            let old = teacher.params_mut()[pi].data()[ci];
            teacher.params_mut()[pi].data_mut()[ci] = old + step;
            let up = loss(&teacher);
            teacher.params_mut()[pi].data_mut()[ci] = old - step;
            let down = loss(&teacher);
            teacher.params_mut()[pi].data_mut()[ci] = old;
            let fd = (up - down) / (2.0 * step);
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
            assert!(rel < 1e-4, "param {pi}: {analytic} vs {fd}");
        }
    }

    #[test]
    fn rank_rebuild_respects_budget_and_resets_experts() {
        let mut net: ClsStudent = build_student_cls(2, &[2, 2], 8, 8, 59).unwrap();
        net.set_expert_ranks(&[10, 4], 61).unwrap();
        assert_eq!(net.expert_ranks(), vec![10, 4]);
        // every expert starts inert again after a rebuild
        for b in net.blocks() {
            for e in &b.experts {
                assert!(e.b_factor.data().iter().all(|v| *v == 0.0));
            }
        }
        assert!(net.set_expert_ranks(&[40, 4], 61).is_err());
    }

    #[test]
    fn layer_specs_compose() {
        let net: ClsStudent = build_student_cls(2, &[2, 2], 4, 4, 67).unwrap();
        crate::network::validate_layer_specs(&net.layer_specs(), 1).unwrap();
    }

    #[test]
    fn bad_build_arguments_are_rejected() {
        assert!(build_student_cls::<f32>(0, &[], 4, 4, 1).is_err());
        assert!(build_student_cls::<f32>(2, &[4], 4, 4, 1).is_err());
        assert!(build_student_cls::<f32>(1, &[1], 4, 4, 1).is_err());
        assert!(build_student_cls::<f32>(1, &[4], 2, 4, 1).is_err());
        assert!(build_student_cls::<f32>(1, &[4], 4, 99, 1).is_err());
    }
}
