//! Artifact plumbing: checkpoint container, run configuration schema, and
//! report serialization.

pub mod checkpoint;
pub mod config;
pub mod report;

pub use checkpoint::{
    load_fused_cls, load_fused_seg, load_student_cls, load_student_seg, load_teacher_cls,
    load_teacher_seg, read_kind, save_fused_cls, save_fused_seg, save_student_cls,
    save_student_seg, save_teacher_cls, save_teacher_seg, CheckpointKind, CheckpointMeta,
    TensorEntry,
};
pub use config::{load_config, ConfigFile, ResolvedConfig};
pub use report::{read_json, write_json, Provenance, RunReport};
