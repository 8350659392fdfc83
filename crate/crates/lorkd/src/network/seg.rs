//! Segmentation nets: a small encoder-decoder student with EKS convs in
//! every conv slot, additive skip connections, and a per-task 1x1 head over
//! the first K_t of K_max sigmoid mask channels; plus the plain teacher and
//! the fused per-task net.

use crate::eks::{eks_backward, eks_forward, EksConvLayer, EksGradients, TaskIndexMatrix};
use crate::error::{Error, Result};
use crate::lowrank::{fuse_weights, init_lowrank};
use crate::network::layers::{
    global_avg_pool, relu, relu_backward, sigmoid, sigmoid_backward, upsample_nearest2, upsample_nearest2_backward,
    PlainConvLayer,
};
use crate::network::{check_lowrank_budget, LayerKind, LayerSpec};
use crate::rng::derive_seed;
use crate::tensor::{ConvGeometry, Scalar, Tensor};

pub(crate) const SLOTS: [&str; 6] = ["enc1", "down1", "down2", "up1", "up2", "head"];

/// Two stride-2 encoder stages, two nearest-neighbor upsampling decoder
/// stages with additive skips, and a 1x1 mask head.
pub(crate) fn seg_geometries(width: usize, k_max: usize) -> [ConvGeometry; 6] {
    let g = |ci: usize, co: usize, k: usize, stride: usize, padding: usize| ConvGeometry {
        in_channels: ci,
        out_channels: co,
        kernel_size: k,
        stride,
        padding,
        groups: 1,
    };
    [
        g(1, width, 3, 1, 1),
        g(width, 2 * width, 3, 2, 1),
        g(2 * width, 4 * width, 3, 2, 1),
        g(4 * width, 2 * width, 3, 1, 1),
        g(2 * width, width, 3, 1, 1),
        g(width, k_max, 1, 1, 0),
    ]
}

fn check_seg_args(op: &'static str, task_count: usize, mask_counts: &[usize], width: usize) -> Result<usize> {
    if task_count == 0 {
        return Err(Error::invalid(op, "task_count must be at least 1".to_string()));
    }
    if mask_counts.len() != task_count {
        return Err(Error::invalid(op, format!("{} mask counts for {task_count} tasks", mask_counts.len())));
    }
    if mask_counts.contains(&0) {
        return Err(Error::invalid(op, format!("zero mask channels in {mask_counts:?}")));
    }
    if width < 4 {
        return Err(Error::invalid(op, format!("width {width} below minimum 4")));
    }
    Ok(*mask_counts.iter().max().expect("non-empty"))
}

fn check_seg_input<T: Scalar>(op: &'static str, input: &Tensor<T>) -> Result<()> {
    let s = input.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::shape(op, format!("want [B,1,H,W], got {s:?}")));
    }
    if !s[2].is_multiple_of(4) || !s[3].is_multiple_of(4) || s[2] < 4 || s[3] < 4 {
        return Err(Error::shape(
            op,
            format!("spatial dims must be multiples of 4 so skip shapes match, got {}x{}", s[2], s[3]),
        ));
    }
    Ok(())
}

/// Decomposed segmentation student. All tasks share the decoder; task
/// identity enters only through the experts and the head channel slice.
#[derive(Debug, Clone)]
pub struct SegStudent<T: Scalar = f32> {
    convs: Vec<EksConvLayer<T>>,
    mask_counts: Vec<usize>,
    width: usize,
}

pub fn build_student_seg<T: Scalar>(
    task_count: usize,
    mask_counts: &[usize],
    width: usize,
    base_rank: usize,
    seed: u64,
) -> Result<SegStudent<T>> {
    let k_max = check_seg_args("build_student_seg", task_count, mask_counts, width)?;
    let geoms = seg_geometries(width, k_max);
    check_lowrank_budget("build_student_seg", &geoms, base_rank)?;
    let ranks = vec![base_rank; task_count];
    let convs = geoms
        .iter()
        .enumerate()
        .map(|(i, g)| EksConvLayer::init(g, task_count, &ranks, derive_seed(seed, 7, i as u64), true))
        .collect::<Result<Vec<_>>>()?;
    Ok(SegStudent { convs, mask_counts: mask_counts.to_vec(), width })
}

#[derive(Debug, Clone)]
pub struct SegForward<T: Scalar = f32> {
    /// Sigmoid mask probabilities, [B, K_max, H, W]; a sample of task t is
    /// scored on the first K_t channels.
    pub probs: Tensor<T>,
    /// Spatial mean of the pre-head activation, [B, w]. The similarity probe.
    pub probe: Tensor<T>,
    input: Tensor<T>,
    e1: Tensor<T>,
    d1: Tensor<T>,
    d2: Tensor<T>,
    u1up: Tensor<T>,
    u1: Tensor<T>,
    u2up: Tensor<T>,
    u2: Tensor<T>,
    tasks: TaskIndexMatrix,
}

#[derive(Debug, Clone)]
pub struct SegGrads<T: Scalar = f32> {
    /// One entry per conv slot, in `enc1, down1, down2, up1, up2, head` order.
    pub convs: Vec<EksGradients<T>>,
}

impl<T: Scalar> SegGrads<T> {
    /// Flat view aligned with `SegStudent::params_mut`.
    pub fn flatten(&self) -> Vec<&Tensor<T>> {
        let mut v = Vec::new();
        for g in &self.convs {
            v.push(&g.grad_w0);
            v.push(g.grad_bias.as_ref().expect("student convs carry biases"));
            for (gb, ga) in &g.grad_experts {
                v.push(gb);
                v.push(ga);
            }
        }
        v
    }
}

impl<T: Scalar> SegStudent<T> {
    pub fn task_count(&self) -> usize {
        self.mask_counts.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn mask_counts(&self) -> &[usize] {
        &self.mask_counts
    }

    pub fn k_max(&self) -> usize {
        *self.mask_counts.iter().max().expect("non-empty")
    }

    pub fn convs(&self) -> &[EksConvLayer<T>] {
        &self.convs
    }

    pub fn expert_ranks(&self) -> Vec<usize> {
        self.convs[0].experts.iter().map(|e| e.rank).collect()
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let g = |i: usize| self.convs[i].geometry;
        vec![
            LayerSpec::conv(LayerKind::EksConv, g(0)),
            LayerSpec::plain(LayerKind::Relu),
            LayerSpec::conv(LayerKind::EksConv, g(1)),
            LayerSpec::plain(LayerKind::Relu),
            LayerSpec::conv(LayerKind::EksConv, g(2)),
            LayerSpec::plain(LayerKind::Relu),
            LayerSpec::plain(LayerKind::Upsample),
            LayerSpec::conv(LayerKind::EksConv, g(3)),
            LayerSpec::plain(LayerKind::Relu),
            LayerSpec::plain(LayerKind::Upsample),
            LayerSpec::conv(LayerKind::EksConv, g(4)),
            LayerSpec::plain(LayerKind::Relu),
            LayerSpec::conv(LayerKind::EksConv, g(5)),
            LayerSpec::plain(LayerKind::Sigmoid),
        ]
    }

    pub fn forward(&self, input: &Tensor<T>, tasks: &TaskIndexMatrix) -> Result<SegForward<T>> {
        check_seg_input("seg_forward", input)?;
        if tasks.batch() != input.shape()[0] || tasks.task_count() != self.task_count() {
            return Err(Error::shape(
                "seg_forward",
                format!(
                    "task matrix {}x{} against batch {} and {} tasks",
                    tasks.batch(),
                    tasks.task_count(),
                    input.shape()[0],
                    self.task_count()
                ),
            ));
        }
        let e1 = relu(&eks_forward(&self.convs[0], input, tasks)?);
        let d1 = relu(&eks_forward(&self.convs[1], &e1, tasks)?);
        let d2 = relu(&eks_forward(&self.convs[2], &d1, tasks)?);
        let u1up = upsample_nearest2(&d2)?;
        let u1 = relu(&eks_forward(&self.convs[3], &u1up, tasks)?.add(&d1)?);
        let u2up = upsample_nearest2(&u1)?;
        let u2 = relu(&eks_forward(&self.convs[4], &u2up, tasks)?.add(&e1)?);
        let probe = global_avg_pool(&u2)?;
        let probs = sigmoid(&eks_forward(&self.convs[5], &u2, tasks)?);
        Ok(SegForward {
            probs,
            probe,
            input: input.clone(),
            e1,
            d1,
            d2,
            u1up,
            u1,
            u2up,
            u2,
            tasks: tasks.clone(),
        })
    }

    /// Backward from gradients on the mask probabilities. Unused channels
    /// (beyond a sample's K_t) must carry zeros in `grad_probs`.
    pub fn backward(&self, fwd: &SegForward<T>, grad_probs: &Tensor<T>) -> Result<SegGrads<T>> {
        if grad_probs.shape() != fwd.probs.shape() {
            return Err(Error::shape(
                "seg_backward",
                format!("gradient {:?} against probabilities {:?}", grad_probs.shape(), fwd.probs.shape()),
            ));
        }
        let m = &fwd.tasks;
        let g_hz = sigmoid_backward(&fwd.probs, grad_probs);
        let eg_head = eks_backward(&self.convs[5], &fwd.u2, m, &g_hz)?;
        let g_u2z = relu_backward(&fwd.u2, &eg_head.grad_input);
        let eg_up2 = eks_backward(&self.convs[4], &fwd.u2up, m, &g_u2z)?;
        // the add-skip duplicates the gradient to both branches
        let g_u1 = upsample_nearest2_backward(&eg_up2.grad_input)?;
        let g_u1z = relu_backward(&fwd.u1, &g_u1);
        let eg_up1 = eks_backward(&self.convs[3], &fwd.u1up, m, &g_u1z)?;
        let g_d2 = upsample_nearest2_backward(&eg_up1.grad_input)?;
        let g_d2z = relu_backward(&fwd.d2, &g_d2);
        let eg_down2 = eks_backward(&self.convs[2], &fwd.d1, m, &g_d2z)?;
        let g_d1 = eg_down2.grad_input.add(&g_u1z)?;
        let g_d1z = relu_backward(&fwd.d1, &g_d1);
        let eg_down1 = eks_backward(&self.convs[1], &fwd.e1, m, &g_d1z)?;
        let g_e1 = eg_down1.grad_input.add(&g_u2z)?;
        let g_e1z = relu_backward(&fwd.e1, &g_e1);
        let eg_enc1 = eks_backward(&self.convs[0], &fwd.input, m, &g_e1z)?;
        Ok(SegGrads { convs: vec![eg_enc1, eg_down1, eg_down2, eg_up1, eg_up2, eg_head] })
    }

    /// Merge task `task_id`'s experts into every conv and slice the head to
    /// its first K_t output channels.
    pub fn extract_expert(&self, task_id: usize) -> Result<FusedSegNet<T>> {
        if task_id >= self.task_count() {
            return Err(Error::invalid(
                "extract_expert",
                format!("task {task_id} out of range for {} tasks", self.task_count()),
            ));
        }
        let mut fused = Vec::with_capacity(6);
        for layer in &self.convs {
            let w = fuse_weights(&layer.w0, &layer.experts[task_id])?;
            fused.push((w, layer.bias.clone().expect("student convs carry biases"), layer.geometry));
        }
        let (head_w, head_b, head_g) = fused.pop().expect("six slots");
        let k = self.mask_counts[task_id];
        let w_in = head_g.in_channels;
        let sliced_w = Tensor::new(&[k, w_in, 1, 1], head_w.data()[..k * w_in].to_vec())?;
        let sliced_b = Tensor::new(&[k], head_b.data()[..k].to_vec())?;
        let head = PlainConvLayer::from_parts(sliced_w, sliced_b, ConvGeometry { out_channels: k, ..head_g })?;
        let convs = fused
            .into_iter()
            .map(|(w, b, g)| PlainConvLayer::from_parts(w, b, g))
            .collect::<Result<Vec<_>>>()?;
        FusedSegNet::from_parts(convs, head, task_id, self.width)
    }

    /// Re-draw every expert at the given per-task ranks; backbone untouched.
    pub fn set_expert_ranks(&mut self, ranks: &[usize], seed: u64) -> Result<()> {
        if ranks.len() != self.task_count() {
            return Err(Error::invalid(
                "set_expert_ranks",
                format!("{} ranks for {} tasks", ranks.len(), self.task_count()),
            ));
        }
        let geoms: Vec<ConvGeometry> = self.convs.iter().map(|c| c.geometry).collect();
        for r in ranks {
            check_lowrank_budget("set_expert_ranks", &geoms, *r)?;
        }
        for (i, conv) in self.convs.iter_mut().enumerate() {
            conv.experts = ranks
                .iter()
                .enumerate()
                .map(|(t, r)| init_lowrank(&conv.geometry, *r, derive_seed(seed, 200 + i as u64, t as u64)))
                .collect::<Result<Vec<_>>>()?;
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Fused parameter count for one task: dense convs, biases, and the
    /// K_t-row head slice.
    pub fn fused_param_count(&self, task_id: usize) -> usize {
        let body: usize = self.convs[..5]
            .iter()
            .map(|c| c.w0.len() + c.bias.as_ref().map_or(0, |b| b.len()))
            .sum();
        let k = self.mask_counts[task_id];
        body + k * self.width + k
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = Vec::new();
        for (slot, c) in SLOTS.iter().zip(&self.convs) {
            v.push((format!("{slot}.w0"), &c.w0));
            v.push((format!("{slot}.bias"), c.bias.as_ref().expect("student convs carry biases")));
            for (t, e) in c.experts.iter().enumerate() {
                v.push((format!("{slot}.expert{t}.b"), &e.b_factor));
                v.push((format!("{slot}.expert{t}.a"), &e.a_factor));
            }
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = Vec::new();
        for c in &mut self.convs {
            v.push(&mut c.w0);
            v.push(c.bias.as_mut().expect("student convs carry biases"));
            for e in &mut c.experts {
                v.push(&mut e.b_factor);
                v.push(&mut e.a_factor);
            }
        }
        v
    }

    pub fn cast<U: Scalar>(&self) -> SegStudent<U> {
        SegStudent {
            convs: self.convs.iter().map(|c| c.cast()).collect(),
            mask_counts: self.mask_counts.clone(),
            width: self.width,
        }
    }
}

/// Deployment net for one segmentation task.
#[derive(Debug, Clone)]
pub struct FusedSegNet<T: Scalar = f32> {
    convs: Vec<PlainConvLayer<T>>,
    head: PlainConvLayer<T>,
    task_id: usize,
    width: usize,
}

impl<T: Scalar> FusedSegNet<T> {
    pub fn from_parts(convs: Vec<PlainConvLayer<T>>, head: PlainConvLayer<T>, task_id: usize, width: usize) -> Result<Self> {
        if convs.len() != 5 {
            return Err(Error::invalid("fused_seg", format!("{} body convs, expected 5", convs.len())));
        }
        Ok(FusedSegNet { convs, head, task_id, width })
    }

    pub fn task_id(&self) -> usize {
        self.task_id
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn mask_count(&self) -> usize {
        self.head.geometry.out_channels
    }

    /// Mask probabilities [B, K_t, H, W].
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        check_seg_input("fused_seg_forward", input)?;
        let e1 = relu(&self.convs[0].forward(input)?);
        let d1 = relu(&self.convs[1].forward(&e1)?);
        let d2 = relu(&self.convs[2].forward(&d1)?);
        let u1 = relu(&self.convs[3].forward(&upsample_nearest2(&d2)?)?.add(&d1)?);
        let u2 = relu(&self.convs[4].forward(&upsample_nearest2(&u1)?)?.add(&e1)?);
        Ok(sigmoid(&self.head.forward(&u2)?))
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(|c| c.param_count()).sum::<usize>() + self.head.param_count()
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = Vec::new();
        for (slot, c) in SLOTS[..5].iter().zip(&self.convs) {
            v.push((format!("{slot}.weight"), &c.weight));
            v.push((format!("{slot}.bias"), &c.bias));
        }
        v.push(("head.weight".to_string(), &self.head.weight));
        v.push(("head.bias".to_string(), &self.head.bias));
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = Vec::new();
        for c in &mut self.convs {
            v.push(&mut c.weight);
            v.push(&mut c.bias);
        }
        v.push(&mut self.head.weight);
        v.push(&mut self.head.bias);
        v
    }
}

/// Plain teacher over all tasks' mask channels at once; task t's masks live
/// at channels offset(t) .. offset(t) + K_t.
#[derive(Debug, Clone)]
pub struct SegTeacher<T: Scalar = f32> {
    convs: Vec<PlainConvLayer<T>>,
    mask_counts: Vec<usize>,
    width: usize,
}

pub fn build_teacher_seg<T: Scalar>(mask_counts: &[usize], width: usize, seed: u64) -> Result<SegTeacher<T>> {
    let task_count = mask_counts.len();
    check_seg_args("build_teacher_seg", task_count.max(1), mask_counts, width)?;
    let total: usize = mask_counts.iter().sum();
    let geoms = seg_geometries(width, total);
    let convs = geoms
        .iter()
        .enumerate()
        .map(|(i, g)| PlainConvLayer::init(g, derive_seed(seed, 8, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SegTeacher { convs, mask_counts: mask_counts.to_vec(), width })
}

#[derive(Debug, Clone)]
pub struct TeacherSegForward<T: Scalar = f32> {
    /// Sigmoid probabilities over all tasks' channels, [B, sum K_t, H, W].
    pub probs: Tensor<T>,
    input: Tensor<T>,
    e1: Tensor<T>,
    d1: Tensor<T>,
    d2: Tensor<T>,
    u1up: Tensor<T>,
    u1: Tensor<T>,
    u2up: Tensor<T>,
    u2: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct TeacherSegGrads<T: Scalar = f32> {
    pub convs: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> TeacherSegGrads<T> {
    pub fn flatten(&self) -> Vec<&Tensor<T>> {
        let mut v = Vec::new();
        for (gw, gb) in &self.convs {
            v.push(gw);
            v.push(gb);
        }
        v
    }
}

impl<T: Scalar> SegTeacher<T> {
    pub fn task_count(&self) -> usize {
        self.mask_counts.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn mask_counts(&self) -> &[usize] {
        &self.mask_counts
    }

    pub fn total_masks(&self) -> usize {
        self.mask_counts.iter().sum()
    }

    /// First channel of task `t`'s block in the unified head.
    pub fn mask_offset(&self, task: usize) -> Result<usize> {
        if task >= self.mask_counts.len() {
            return Err(Error::invalid("mask_offset", format!("task {task} of {}", self.mask_counts.len())));
        }
        Ok(self.mask_counts[..task].iter().sum())
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<TeacherSegForward<T>> {
        check_seg_input("teacher_seg_forward", input)?;
        let e1 = relu(&self.convs[0].forward(input)?);
        let d1 = relu(&self.convs[1].forward(&e1)?);
        let d2 = relu(&self.convs[2].forward(&d1)?);
        let u1up = upsample_nearest2(&d2)?;
        let u1 = relu(&self.convs[3].forward(&u1up)?.add(&d1)?);
        let u2up = upsample_nearest2(&u1)?;
        let u2 = relu(&self.convs[4].forward(&u2up)?.add(&e1)?);
        let probs = sigmoid(&self.convs[5].forward(&u2)?);
        Ok(TeacherSegForward { probs, input: input.clone(), e1, d1, d2, u1up, u1, u2up, u2 })
    }

    pub fn backward(&self, fwd: &TeacherSegForward<T>, grad_probs: &Tensor<T>) -> Result<TeacherSegGrads<T>> {
        if grad_probs.shape() != fwd.probs.shape() {
            return Err(Error::shape(
                "teacher_seg_backward",
                format!("gradient {:?} against probabilities {:?}", grad_probs.shape(), fwd.probs.shape()),
            ));
        }
        let g_hz = sigmoid_backward(&fwd.probs, grad_probs);
        let (gi_head, gw5, gb5) = self.convs[5].backward(&fwd.u2, &g_hz)?;
        let g_u2z = relu_backward(&fwd.u2, &gi_head);
        let (gi_up2, gw4, gb4) = self.convs[4].backward(&fwd.u2up, &g_u2z)?;
        let g_u1 = upsample_nearest2_backward(&gi_up2)?;
        let g_u1z = relu_backward(&fwd.u1, &g_u1);
        let (gi_up1, gw3, gb3) = self.convs[3].backward(&fwd.u1up, &g_u1z)?;
        let g_d2 = upsample_nearest2_backward(&gi_up1)?;
        let g_d2z = relu_backward(&fwd.d2, &g_d2);
        let (gi_down2, gw2, gb2) = self.convs[2].backward(&fwd.d1, &g_d2z)?;
        let g_d1 = gi_down2.add(&g_u1z)?;
        let g_d1z = relu_backward(&fwd.d1, &g_d1);
        let (gi_down1, gw1, gb1) = self.convs[1].backward(&fwd.e1, &g_d1z)?;
        let g_e1 = gi_down1.add(&g_u2z)?;
        let g_e1z = relu_backward(&fwd.e1, &g_e1);
        let (_, gw0, gb0) = self.convs[0].backward(&fwd.input, &g_e1z)?;
        Ok(TeacherSegGrads {
            convs: vec![(gw0, gb0), (gw1, gb1), (gw2, gb2), (gw3, gb3), (gw4, gb4), (gw5, gb5)],
        })
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(|c| c.param_count()).sum()
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        SLOTS
            .iter()
            .zip(&self.convs)
            .flat_map(|(slot, c)| [(format!("{slot}.weight"), &c.weight), (format!("{slot}.bias"), &c.bias)])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = Vec::new();
        for c in &mut self.convs {
            v.push(&mut c.weight);
            v.push(&mut c.bias);
        }
        v
    }

    pub fn cast<U: Scalar>(&self) -> SegTeacher<U> {
        SegTeacher {
            convs: self.convs.iter().map(|c| c.cast()).collect(),
            mask_counts: self.mask_counts.clone(),
            width: self.width,
        }
    }
}
