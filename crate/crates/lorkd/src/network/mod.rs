//! Network builders: decomposed students (EKS conv stacks with per-task
//! experts), plain teacher networks standing in for large pretrained models,
//! and fused single-task extraction.
//!
//! No batch normalization anywhere: batch statistics would couple samples of
//! different tasks inside a mixed batch and break exact routing soundness.
//! Blocks are conv + bias + relu.

pub mod cls;
pub mod layers;
pub mod seg;

pub use cls::{build_student_cls, build_teacher_cls, ClsForward, ClsGrads, ClsStudent, ClsTeacher, FusedClsNet, TeacherClsForward};
pub use layers::{Linear, PlainConvLayer};
pub use seg::{build_student_seg, build_teacher_seg, FusedSegNet, SegForward, SegGrads, SegStudent, SegTeacher, TeacherSegForward};

use crate::error::{Error, Result};
use crate::lowrank::expert_param_count;
use crate::tensor::ConvGeometry;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    EksConv,
    PlainConv,
    Relu,
    Upsample,
    GlobalAvgPool,
    LinearHead,
    Sigmoid,
}

/// Descriptive entry in a net's layer listing; used to check that
/// consecutive shapes compose and to render architectures in reports.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub geometry: Option<ConvGeometry>,
}

impl LayerSpec {
    pub fn conv(kind: LayerKind, geometry: ConvGeometry) -> Self {
        LayerSpec { kind, geometry: Some(geometry) }
    }

    pub fn plain(kind: LayerKind) -> Self {
        LayerSpec { kind, geometry: None }
    }
}

/// Channel-chaining check over a layer listing: every conv must consume the
/// channel count the previous conv produced.
pub fn validate_layer_specs(specs: &[LayerSpec], input_channels: usize) -> Result<()> {
    let mut channels = input_channels;
    for (i, spec) in specs.iter().enumerate() {
        if let Some(g) = spec.geometry {
            if g.in_channels != channels {
                return Err(Error::shape(
                    "layer_specs",
                    format!("layer {i} expects {} input channels, previous stage produces {channels}", g.in_channels),
                ));
            }
            channels = g.out_channels;
        }
    }
    Ok(())
}

/// The point of the low-rank parameterization is to be smaller than dense
/// task-specific weights. Checked per task across the whole net (a stem with
/// one input channel can never win locally, but the net as a whole must).
pub(crate) fn check_lowrank_budget(op: &'static str, geoms: &[ConvGeometry], rank: usize) -> Result<()> {
    let dense: usize = geoms.iter().map(|g| g.dense_param_count()).sum();
    let expert: usize = geoms.iter().map(|g| expert_param_count(g, rank)).sum();
    if expert >= dense {
        return Err(Error::invalid(
            op,
            format!("rank {rank} costs {expert} parameters per task, not below the {dense} dense parameters"),
        ));
    }
    Ok(())
}
