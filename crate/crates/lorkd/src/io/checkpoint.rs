//! Single-file checkpoint container: a fixed header, a JSON manifest
//! describing every tensor, and a raw little-endian f32 payload. The format
//! is self-describing: loading rebuilds the net from the manifest alone.
//!
//! Layout: magic "LRKD" (4 bytes) | version u32 LE | meta_len u64 LE |
//! metadata JSON (meta_len bytes) | payload. Tensor data is row-major,
//! packed contiguously in manifest order.

use crate::error::{Error, Result};
use crate::network::seg::{seg_geometries, SLOTS};
use crate::network::{
    build_student_cls, build_student_seg, build_teacher_cls, build_teacher_seg, ClsStudent,
    ClsTeacher, FusedClsNet, FusedSegNet, Linear, PlainConvLayer, SegStudent, SegTeacher,
};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

const MAGIC: [u8; 4] = *b"LRKD";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    DecomposedCls,
    DecomposedSeg,
    TeacherCls,
    TeacherSeg,
    FusedCls,
    FusedSeg,
}

impl std::fmt::Display for CheckpointKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            CheckpointKind::DecomposedCls => "decomposed_cls",
            CheckpointKind::DecomposedSeg => "decomposed_seg",
            CheckpointKind::TeacherCls => "teacher_cls",
            CheckpointKind::TeacherSeg => "teacher_seg",
            CheckpointKind::FusedCls => "fused_cls",
            CheckpointKind::FusedSeg => "fused_seg",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
}

/// The JSON manifest. Architecture fields are present where they apply:
/// class/mask counts for anything with heads over tasks, ranks for
/// decomposed students, task_id for fused nets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub width: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_counts: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_counts: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ranks: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_id: Option<usize>,
    pub tensors: Vec<TensorEntry>,
}

/// Write bytes to a temp file in the target directory, then rename into
/// place, so readers never observe a half-written file.
pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn build_payload(named: &[(String, &crate::tensor::Tensor<f32>)]) -> (Vec<TensorEntry>, Vec<u8>) {
    let mut entries = Vec::with_capacity(named.len());
    let mut payload = Vec::new();
    for (name, t) in named {
        entries.push(TensorEntry {
            name: name.clone(),
            dtype: "f32".to_string(),
            shape: t.shape().to_vec(),
            byte_offset: payload.len() as u64,
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    (entries, payload)
}

fn write_container(path: &Path, meta: &CheckpointMeta, payload: &[u8]) -> Result<()> {
    let meta_json = serde_json::to_vec(meta)?;
    let mut bytes = Vec::with_capacity(16 + meta_json.len() + payload.len());
    bytes.extend_from_slice(&MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&meta_json);
    bytes.extend_from_slice(payload);
    atomic_write(path, &bytes)
}

struct RawCheckpoint {
    meta: CheckpointMeta,
    payload: Vec<u8>,
}

fn read_container(path: &Path) -> Result<RawCheckpoint> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 16 {
        return Err(Error::Checkpoint(format!(
            "file is {} bytes, the header alone needs 16",
            bytes.len()
        )));
    }
    if bytes[0..4] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic at byte 0: expected \"LRKD\", found {:?}",
            &bytes[0..4]
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} at byte 4, this build reads version {VERSION}"
        )));
    }
    let meta_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if 16usize.checked_add(meta_len).is_none_or(|end| end > bytes.len()) {
        return Err(Error::Checkpoint(format!(
            "metadata of {meta_len} bytes at byte 16 runs past the end of the {}-byte file",
            bytes.len()
        )));
    }
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[16..16 + meta_len])
        .map_err(|e| Error::Checkpoint(format!("metadata at byte 16 is not valid: {e}")))?;
    if meta.format_version != VERSION {
        return Err(Error::Checkpoint(format!(
            "manifest format_version {} disagrees with header version {VERSION}",
            meta.format_version
        )));
    }
    let payload = bytes[16 + meta_len..].to_vec();
    validate_entries(&meta.tensors, payload.len(), 16 + meta_len)?;
    Ok(RawCheckpoint { meta, payload })
}

fn entry_bytes(e: &TensorEntry) -> usize {
    e.shape.iter().product::<usize>() * 4
}

fn validate_entries(entries: &[TensorEntry], payload_len: usize, payload_start: usize) -> Result<()> {
    let mut expected = 0u64;
    let mut seen = std::collections::HashSet::new();
    for e in entries {
        if !seen.insert(e.name.as_str()) {
            return Err(Error::Checkpoint(format!("duplicate tensor name {}", e.name)));
        }
        if e.dtype != "f32" {
            return Err(Error::Checkpoint(format!("tensor {} has dtype {}, only f32 is defined", e.name, e.dtype)));
        }
        if e.byte_offset != expected {
            return Err(Error::Checkpoint(format!(
                "tensor {} at offset {} overlaps or leaves a gap, expected offset {expected}",
                e.name, e.byte_offset
            )));
        }
        let end = expected + entry_bytes(e) as u64;
        if end > payload_len as u64 {
            return Err(Error::Checkpoint(format!(
                "payload truncated: tensor {} needs bytes {}..{} but the file ends at byte {}",
                e.name,
                payload_start as u64 + expected,
                payload_start as u64 + end,
                payload_start + payload_len
            )));
        }
        expected = end;
    }
    if expected != payload_len as u64 {
        return Err(Error::Checkpoint(format!(
            "payload holds {payload_len} bytes but the manifest accounts for {expected}"
        )));
    }
    Ok(())
}

fn tensor_at(payload: &[u8], e: &TensorEntry) -> Result<crate::tensor::Tensor<f32>> {
    let start = e.byte_offset as usize;
    let data: Vec<f32> = payload[start..start + entry_bytes(e)]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    crate::tensor::Tensor::new(&e.shape, data)
}

/// Index the manifest by name for by-name consumption; loading must use
/// every tensor exactly once.
struct TensorStore<'a> {
    entries: BTreeMap<&'a str, &'a TensorEntry>,
    payload: &'a [u8],
}

impl<'a> TensorStore<'a> {
    fn new(raw: &'a RawCheckpoint) -> Self {
        TensorStore {
            entries: raw.meta.tensors.iter().map(|e| (e.name.as_str(), e)).collect(),
            payload: &raw.payload,
        }
    }

    fn take(&mut self, name: &str) -> Result<crate::tensor::Tensor<f32>> {
        let entry = self
            .entries
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} is missing from the checkpoint")))?;
        tensor_at(self.payload, entry)
    }

    fn take_into(&mut self, name: &str, dst: &mut crate::tensor::Tensor<f32>) -> Result<()> {
        let t = self.take(name)?;
        if t.shape() != dst.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?}, the net wants {:?}",
                t.shape(),
                dst.shape()
            )));
        }
        *dst = t;
        Ok(())
    }

    fn finish(self) -> Result<()> {
        if let Some(name) = self.entries.keys().next() {
            return Err(Error::Checkpoint(format!("checkpoint carries a tensor the net has no place for: {name}")));
        }
        Ok(())
    }
}

fn expect_kind(meta: &CheckpointMeta, want: CheckpointKind) -> Result<()> {
    if meta.kind != want {
        return Err(Error::Checkpoint(format!("checkpoint is {}, expected {}", meta.kind, want)));
    }
    Ok(())
}

fn require<T: Clone>(field: &Option<T>, name: &str) -> Result<T> {
    field.clone().ok_or_else(|| Error::Checkpoint(format!("manifest lacks the {name} field")))
}

/// Overwrite every parameter of a rebuilt net from the store, by name.
fn fill_named(
    names: &[String],
    params: Vec<&mut crate::tensor::Tensor<f32>>,
    store: &mut TensorStore<'_>,
) -> Result<()> {
    for (name, param) in names.iter().zip(params) {
        store.take_into(name, param)?;
    }
    Ok(())
}

pub fn read_kind(path: &Path) -> Result<CheckpointKind> {
    Ok(read_container(path)?.meta.kind)
}

pub fn save_student_cls(net: &ClsStudent<f32>, path: &Path) -> Result<()> {
    let (tensors, payload) = build_payload(&net.named_params());
    let meta = CheckpointMeta {
        format_version: VERSION,
        kind: CheckpointKind::DecomposedCls,
        width: net.width(),
        class_counts: Some(net.class_counts().to_vec()),
        mask_counts: None,
        ranks: Some(net.expert_ranks()),
        task_id: None,
        tensors,
    };
    write_container(path, &meta, &payload)
}

pub fn load_student_cls(path: &Path) -> Result<ClsStudent<f32>> {
    let raw = read_container(path)?;
    expect_kind(&raw.meta, CheckpointKind::DecomposedCls)?;
    let class_counts = require(&raw.meta.class_counts, "class_counts")?;
    let ranks = require(&raw.meta.ranks, "ranks")?;
    let mut net = build_student_cls::<f32>(class_counts.len(), &class_counts, raw.meta.width, 2, 0)?;
    net.set_expert_ranks(&ranks, 0)?;
    let names: Vec<String> = net.named_params().iter().map(|(n, _)| n.clone()).collect();
    let mut store = TensorStore::new(&raw);
    fill_named(&names, net.params_mut(), &mut store)?;
    store.finish()?;
    Ok(net)
}

pub fn save_student_seg(net: &SegStudent<f32>, path: &Path) -> Result<()> {
    let (tensors, payload) = build_payload(&net.named_params());
    let meta = CheckpointMeta {
        format_version: VERSION,
        kind: CheckpointKind::DecomposedSeg,
        width: net.width(),
        class_counts: None,
        mask_counts: Some(net.mask_counts().to_vec()),
        ranks: Some(net.expert_ranks()),
        task_id: None,
        tensors,
    };
    write_container(path, &meta, &payload)
}

pub fn load_student_seg(path: &Path) -> Result<SegStudent<f32>> {
    let raw = read_container(path)?;
    expect_kind(&raw.meta, CheckpointKind::DecomposedSeg)?;
    let mask_counts = require(&raw.meta.mask_counts, "mask_counts")?;
    let ranks = require(&raw.meta.ranks, "ranks")?;
    let mut net = build_student_seg::<f32>(mask_counts.len(), &mask_counts, raw.meta.width, 2, 0)?;
    net.set_expert_ranks(&ranks, 0)?;
    let names: Vec<String> = net.named_params().iter().map(|(n, _)| n.clone()).collect();
    let mut store = TensorStore::new(&raw);
    fill_named(&names, net.params_mut(), &mut store)?;
    store.finish()?;
    Ok(net)
}

pub fn save_teacher_cls(net: &ClsTeacher<f32>, path: &Path) -> Result<()> {
    let (tensors, payload) = build_payload(&net.named_params());
    let meta = CheckpointMeta {
        format_version: VERSION,
        kind: CheckpointKind::TeacherCls,
        width: net.width(),
        class_counts: Some(net.class_counts().to_vec()),
        mask_counts: None,
        ranks: None,
        task_id: None,
        tensors,
    };
    write_container(path, &meta, &payload)
}

pub fn load_teacher_cls(path: &Path) -> Result<ClsTeacher<f32>> {
    let raw = read_container(path)?;
    expect_kind(&raw.meta, CheckpointKind::TeacherCls)?;
    let class_counts = require(&raw.meta.class_counts, "class_counts")?;
    let mut net = build_teacher_cls::<f32>(&class_counts, raw.meta.width, 0)?;
    let names: Vec<String> = net.named_params().iter().map(|(n, _)| n.clone()).collect();
    let mut store = TensorStore::new(&raw);
    fill_named(&names, net.params_mut(), &mut store)?;
    store.finish()?;
    Ok(net)
}

pub fn save_teacher_seg(net: &SegTeacher<f32>, path: &Path) -> Result<()> {
    let (tensors, payload) = build_payload(&net.named_params());
    let meta = CheckpointMeta {
        format_version: VERSION,
        kind: CheckpointKind::TeacherSeg,
        width: net.width(),
        class_counts: None,
        mask_counts: Some(net.mask_counts().to_vec()),
        ranks: None,
        task_id: None,
        tensors,
    };
    write_container(path, &meta, &payload)
}

pub fn load_teacher_seg(path: &Path) -> Result<SegTeacher<f32>> {
    let raw = read_container(path)?;
    expect_kind(&raw.meta, CheckpointKind::TeacherSeg)?;
    let mask_counts = require(&raw.meta.mask_counts, "mask_counts")?;
    let mut net = build_teacher_seg::<f32>(&mask_counts, raw.meta.width, 0)?;
    let names: Vec<String> = net.named_params().iter().map(|(n, _)| n.clone()).collect();
    let mut store = TensorStore::new(&raw);
    fill_named(&names, net.params_mut(), &mut store)?;
    store.finish()?;
    Ok(net)
}

pub fn save_fused_cls(net: &FusedClsNet<f32>, path: &Path) -> Result<()> {
    let (tensors, payload) = build_payload(&net.named_params());
    let meta = CheckpointMeta {
        format_version: VERSION,
        kind: CheckpointKind::FusedCls,
        width: net.width(),
        class_counts: None,
        mask_counts: None,
        ranks: None,
        task_id: Some(net.task_id()),
        tensors,
    };
    write_container(path, &meta, &payload)
}

pub fn load_fused_cls(path: &Path) -> Result<FusedClsNet<f32>> {
    let raw = read_container(path)?;
    expect_kind(&raw.meta, CheckpointKind::FusedCls)?;
    let task_id = require(&raw.meta.task_id, "task_id")?;
    let width = raw.meta.width;
    let geoms = crate::network::cls::cls_geometries(width);
    let mut store = TensorStore::new(&raw);
    let mut blocks = Vec::with_capacity(4);
    for (i, g) in geoms.iter().enumerate() {
        let w = store.take(&format!("block{i}.weight"))?;
        let b = store.take(&format!("block{i}.bias"))?;
        blocks.push(PlainConvLayer::from_parts(w, b, *g)?);
    }
    let hw = store.take("head.weight")?;
    let hb = store.take("head.bias")?;
    if hw.shape().len() != 2 || hw.shape()[1] != 4 * width || hb.shape() != [hw.shape()[0]] {
        return Err(Error::Checkpoint(format!(
            "head tensors {:?} / {:?} do not form a head over {}-dim features",
            hw.shape(),
            hb.shape(),
            4 * width
        )));
    }
    store.finish()?;
    FusedClsNet::from_parts(blocks, Linear { weight: hw, bias: hb }, task_id, width)
}

pub fn save_fused_seg(net: &FusedSegNet<f32>, path: &Path) -> Result<()> {
    let (tensors, payload) = build_payload(&net.named_params());
    let meta = CheckpointMeta {
        format_version: VERSION,
        kind: CheckpointKind::FusedSeg,
        width: net.width(),
        class_counts: None,
        mask_counts: None,
        ranks: None,
        task_id: Some(net.task_id()),
        tensors,
    };
    write_container(path, &meta, &payload)
}

pub fn load_fused_seg(path: &Path) -> Result<FusedSegNet<f32>> {
    let raw = read_container(path)?;
    expect_kind(&raw.meta, CheckpointKind::FusedSeg)?;
    let task_id = require(&raw.meta.task_id, "task_id")?;
    let width = raw.meta.width;
    let mut store = TensorStore::new(&raw);
    let head_w = store.take("head.weight")?;
    if head_w.shape().len() != 4 {
        return Err(Error::Checkpoint(format!("head.weight has shape {:?}, want a 1x1 conv", head_w.shape())));
    }
    let k = head_w.shape()[0];
    let geoms = seg_geometries(width, k);
    let mut convs = Vec::with_capacity(5);
    for (slot, g) in SLOTS[..5].iter().zip(&geoms[..5]) {
        let w = store.take(&format!("{slot}.weight"))?;
        let b = store.take(&format!("{slot}.bias"))?;
        convs.push(PlainConvLayer::from_parts(w, b, *g)?);
    }
    let head_b = store.take("head.bias")?;
    let head = PlainConvLayer::from_parts(head_w, head_b, geoms[5])?;
    store.finish()?;
    FusedSegNet::from_parts(convs, head, task_id, width)
}
