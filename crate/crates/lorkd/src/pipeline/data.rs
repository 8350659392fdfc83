//! Synthetic multi-task data. Classification tasks are oriented gratings
//! whose labelings can be made to conflict across tasks; segmentation tasks
//! are exact rasterized shape families. Every sample is a pure function of
//! (seed, index), and sample index i belongs to task i mod T so any
//! contiguous window is task-stratified.

use crate::eks::TaskIndexMatrix;
use crate::error::{Error, Result};
use crate::objectives::{ClsTarget, SegTarget};
use crate::rng::{derive_seed, rng_from};
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    ShapeSeg,
    PatternCls,
}

/// One task's data recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub task_id: usize,
    pub kind: GeneratorKind,
    pub image_size: usize,
    /// Classes for pattern_cls, mask channels for shape_seg.
    pub label_count: usize,
    /// In [0, 1]: probability that a sample is labeled by this task's own
    /// labeler instead of the shared one. At 1 the tasks disagree about
    /// identical textures; at 0 every task labels by orientation alone.
    pub conflict_coupling: f64,
}

impl SyntheticTaskSpec {
    pub fn validate(&self, kind: GeneratorKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::invalid("task_spec", format!("task {}: generator kind mismatch", self.task_id)));
        }
        if self.image_size < 8 || !self.image_size.is_multiple_of(4) {
            return Err(Error::invalid(
                "task_spec",
                format!("task {}: image_size {} must be a multiple of 4, at least 8", self.task_id, self.image_size),
            ));
        }
        let min_labels = match kind {
            GeneratorKind::PatternCls => 2,
            GeneratorKind::ShapeSeg => 1,
        };
        if self.label_count < min_labels {
            return Err(Error::invalid(
                "task_spec",
                format!("task {}: label_count {} below {min_labels}", self.task_id, self.label_count),
            ));
        }
        if !(0.0..=1.0).contains(&self.conflict_coupling) {
            return Err(Error::invalid(
                "task_spec",
                format!("task {}: conflict_coupling {} outside [0,1]", self.task_id, self.conflict_coupling),
            ));
        }
        Ok(())
    }
}

pub(crate) fn check_specs(op: &'static str, specs: &[SyntheticTaskSpec], kind: GeneratorKind) -> Result<usize> {
    if specs.is_empty() {
        return Err(Error::invalid(op, "no task specs".to_string()));
    }
    let size = specs[0].image_size;
    for (i, s) in specs.iter().enumerate() {
        s.validate(kind)?;
        if s.task_id != i {
            return Err(Error::invalid(op, format!("spec {i} carries task_id {}", s.task_id)));
        }
        if s.image_size != size {
            return Err(Error::invalid(op, "tasks must share one image size".to_string()));
        }
    }
    Ok(size)
}

#[derive(Debug, Clone)]
pub struct ClsSample {
    /// Grayscale image, [1, S, S].
    pub image: Tensor<f32>,
    pub task_id: usize,
    pub label: usize,
    /// Generating factors, kept for diagnostics.
    pub orientation: usize,
    pub frequency: usize,
}

#[derive(Debug, Clone)]
pub struct SegSample {
    pub image: Tensor<f32>,
    pub task_id: usize,
    /// Binary masks, [K_t, S, S], exact shape rasterizations.
    pub masks: SegTarget<f32>,
}

/// The shared labeling every task uses when its coupling coin says
/// "agree": class by orientation.
pub fn base_label(orientation: usize, label_count: usize) -> usize {
    orientation % label_count
}

/// Task-specific labelings of the same two factors. Task 1 keys on
/// frequency, task 2 on the parity-frequency XOR, task 3 on the joint
/// factor; all collide with the orientation labeling on purpose.
pub fn distinct_label(task_id: usize, orientation: usize, frequency: usize, label_count: usize) -> usize {
    match task_id % 4 {
        0 => orientation % label_count,
        1 => frequency % label_count,
        2 => ((orientation % 2) ^ frequency) % label_count,
        _ => (2 * orientation + frequency) % label_count,
    }
}

const ORIENTATIONS: usize = 4;
const FREQUENCIES: usize = 2;
const NOISE_STD: f64 = 0.05;

/// Deterministic oriented-grating classification set; sample i serves task
/// i mod T.
pub fn gen_synthetic_cls(specs: &[SyntheticTaskSpec], seed: u64, count: usize) -> Result<Vec<ClsSample>> {
    let size = check_specs("gen_synthetic_cls", specs, GeneratorKind::PatternCls)?;
    let noise = Normal::new(0.0, NOISE_STD).expect("fixed std");
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let task_id = i % specs.len();
        let spec = &specs[task_id];
        let mut rng = rng_from(derive_seed(seed, 11, i as u64));
        let orientation = rng.random_range(0..ORIENTATIONS);
        let frequency = rng.random_range(0..FREQUENCIES);
        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let coin: f64 = rng.random();
        let label = if coin < spec.conflict_coupling {
            distinct_label(task_id, orientation, frequency, spec.label_count)
        } else {
            base_label(orientation, spec.label_count)
        };
        let angle = orientation as f64 * std::f64::consts::FRAC_PI_4;
        let cycles = if frequency == 0 { 2.0 } else { 4.0 };
        let (ca, sa) = (angle.cos(), angle.sin());
        let mut data = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let u = (x as f64 * ca + y as f64 * sa) / size as f64;
                let v = 0.5 * (std::f64::consts::TAU * cycles * u + phase).sin() + noise.sample(&mut rng);
                data.push(v as f32);
            }
        }
        out.push(ClsSample {
            image: Tensor::new(&[1, size, size], data)?,
            task_id,
            label,
            orientation,
            frequency,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
enum ShapeFamily {
    Circle,
    Square,
    Bar,
    Cross,
}

impl ShapeFamily {
    fn of_task(task_id: usize) -> Self {
        match task_id % 4 {
            0 => ShapeFamily::Circle,
            1 => ShapeFamily::Square,
            2 => ShapeFamily::Bar,
            _ => ShapeFamily::Cross,
        }
    }

    fn covers(self, dx: i64, dy: i64, s: i64) -> bool {
        match self {
            ShapeFamily::Circle => dx * dx + dy * dy <= s * s,
            ShapeFamily::Square => dx.abs() <= s && dy.abs() <= s,
            ShapeFamily::Bar => dx.abs() <= 1 && dy.abs() <= s,
            ShapeFamily::Cross => (dx.abs() <= 1 && dy.abs() <= s) || (dy.abs() <= 1 && dx.abs() <= s),
        }
    }
}

/// Deterministic shape-family segmentation set with exact masks; sample i
/// serves task i mod T.
pub fn gen_synthetic_seg(specs: &[SyntheticTaskSpec], seed: u64, count: usize) -> Result<Vec<SegSample>> {
    let size = check_specs("gen_synthetic_seg", specs, GeneratorKind::ShapeSeg)?;
    let noise = Normal::new(0.0, NOISE_STD).expect("fixed std");
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let task_id = i % specs.len();
        let spec = &specs[task_id];
        let family = ShapeFamily::of_task(task_id);
        let mut rng = rng_from(derive_seed(seed, 12, i as u64));
        let k = spec.label_count;
        let mut image = vec![0.0f32; size * size];
        let mut masks = vec![0.0f32; k * size * size];
        for c in 0..k {
            let cx = rng.random_range(size / 4..3 * size / 4) as i64;
            let cy = rng.random_range(size / 4..3 * size / 4) as i64;
            let s = rng.random_range(2..(size / 8).max(3)) as i64;
            let intensity: f64 = rng.random_range(0.5..1.0);
            for y in 0..size {
                for x in 0..size {
                    if family.covers(x as i64 - cx, y as i64 - cy, s) {
                        masks[(c * size + y) * size + x] = 1.0;
                        image[y * size + x] += intensity as f32;
                    }
                }
            }
        }
        for v in &mut image {
            *v += noise.sample(&mut rng) as f32;
        }
        out.push(SegSample {
            image: Tensor::new(&[1, size, size], image)?,
            task_id,
            masks: SegTarget::new(Tensor::new(&[k, size, size], masks)?)?,
        });
    }
    Ok(out)
}

/// Stack a contiguous (cyclic) window of samples into a batch.
pub fn cls_batch(
    data: &[ClsSample],
    task_count: usize,
    start: usize,
    batch: usize,
) -> Result<(Tensor<f32>, TaskIndexMatrix, Vec<ClsTarget>)> {
    if data.is_empty() || batch == 0 {
        return Err(Error::invalid("cls_batch", "empty data or zero batch".to_string()));
    }
    let shape = data[0].image.shape().to_vec();
    let mut stacked = Vec::with_capacity(batch * data[0].image.len());
    let mut tasks = Vec::with_capacity(batch);
    let mut targets = Vec::with_capacity(batch);
    for i in 0..batch {
        let s = &data[(start + i) % data.len()];
        if s.image.shape() != shape {
            return Err(Error::shape("cls_batch", "inconsistent image shapes".to_string()));
        }
        stacked.extend_from_slice(s.image.data());
        tasks.push(s.task_id);
        targets.push(ClsTarget { task_id: s.task_id, label: s.label });
    }
    let images = Tensor::new(&[batch, shape[0], shape[1], shape[2]], stacked)?;
    Ok((images, TaskIndexMatrix::from_tasks(&tasks, task_count)?, targets))
}

/// Segmentation counterpart of `cls_batch`; targets stay per-sample because
/// mask channel counts differ across tasks.
pub fn seg_batch(
    data: &[SegSample],
    task_count: usize,
    start: usize,
    batch: usize,
) -> Result<(Tensor<f32>, TaskIndexMatrix, Vec<SegTarget<f32>>)> {
    if data.is_empty() || batch == 0 {
        return Err(Error::invalid("seg_batch", "empty data or zero batch".to_string()));
    }
    let shape = data[0].image.shape().to_vec();
    let mut stacked = Vec::with_capacity(batch * data[0].image.len());
    let mut tasks = Vec::with_capacity(batch);
    let mut targets = Vec::with_capacity(batch);
    for i in 0..batch {
        let s = &data[(start + i) % data.len()];
        if s.image.shape() != shape {
            return Err(Error::shape("seg_batch", "inconsistent image shapes".to_string()));
        }
        stacked.extend_from_slice(s.image.data());
        tasks.push(s.task_id);
        targets.push(s.masks.clone());
    }
    let images = Tensor::new(&[batch, shape[0], shape[1], shape[2]], stacked)?;
    Ok((images, TaskIndexMatrix::from_tasks(&tasks, task_count)?, targets))
}

/// Convenience builders for uniform task specs.
pub fn cls_specs(class_counts: &[usize], image_size: usize, conflict_coupling: f64) -> Vec<SyntheticTaskSpec> {
    class_counts
        .iter()
        .enumerate()
        .map(|(task_id, y)| SyntheticTaskSpec {
            task_id,
            kind: GeneratorKind::PatternCls,
            image_size,
            label_count: *y,
            conflict_coupling,
        })
        .collect()
}

pub fn seg_specs(mask_counts: &[usize], image_size: usize) -> Vec<SyntheticTaskSpec> {
    mask_counts
        .iter()
        .enumerate()
        .map(|(task_id, k)| SyntheticTaskSpec {
            task_id,
            kind: GeneratorKind::ShapeSeg,
            image_size,
            label_count: *k,
            conflict_coupling: 0.0,
        })
        .collect()
}
