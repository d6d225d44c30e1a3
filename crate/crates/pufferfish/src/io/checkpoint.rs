//! Binary checkpoint format.
//!
//! ```text
//! offset 0   magic "PUFF1" (5 bytes) + 3 zero bytes
//! offset 8   u64 LE manifest byte length L
//! offset 16  manifest JSON (UTF-8), L bytes
//!            zero padding to the next 64-byte boundary = payload base
//! payload    raw little-endian IEEE-754 f32 blobs, one per tensor,
//!            each starting 64-byte aligned
//! ```
//!
//! Manifest tensor offsets are relative to the payload base, strictly
//! increasing and non-overlapping. Saving a loaded checkpoint reproduces
//! the file byte for byte: f32 -> f64 -> f32 round-trips exactly and the
//! manifest serialization order is fixed.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factorize::FactorizationPlan;
use crate::layers::{LayerKind, RankMode};
use crate::numerics::Tensor;
use crate::zoo::{build_model, ArchMode, ModelGraph};

pub const MAGIC: &[u8; 5] = b"PUFF1";
const ALIGN: u64 = 64;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    byte_len: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    arch_id: String,
    mode: String,
    plan: Option<FactorizationPlan>,
    epoch: u64,
    tensors: Vec<TensorEntry>,
}

fn align_up(v: u64) -> u64 {
    v.div_ceil(ALIGN) * ALIGN
}

/// Checkpoint tensor name for a layer parameter. Factorized conv/FC factors
/// surface as `<layer>_u.weight` / `<layer>_v.weight`; everything else is
/// `<layer>.<param>`.
pub fn tensor_name(layer_name: &str, kind: &LayerKind, rank: RankMode, param: &str) -> String {
    let conv_or_fc = matches!(kind, LayerKind::Conv2d { .. } | LayerKind::Fc { .. });
    if conv_or_fc && matches!(rank, RankMode::Factorized(_)) && (param == "u" || param == "v") {
        format!("{layer_name}_{param}.weight")
    } else {
        format!("{layer_name}.{param}")
    }
}

/// Deterministic (tensor name, layer index, param index) enumeration.
fn enumerate_tensors(model: &ModelGraph) -> Vec<(String, usize, usize)> {
    let mut out = Vec::new();
    for (li, layer) in model.layers.iter().enumerate() {
        for (pi, (pname, _)) in layer.state.params.iter().enumerate() {
            out.push((
                tensor_name(&layer.spec.name, &layer.spec.kind, layer.spec.rank_mode, pname),
                li,
                pi,
            ));
        }
    }
    out
}

pub fn save_checkpoint(model: &ModelGraph, path: &Path, epoch: u64) -> Result<()> {
    if !model.is_initialized() {
        return Err(Error::State("cannot checkpoint uninitialized parameters".into()));
    }
    let names = enumerate_tensors(model);
    let mut tensors = Vec::with_capacity(names.len());
    let mut offset = 0u64;
    for (name, li, pi) in &names {
        let t = &model.layers[*li].state.params[*pi].1;
        let byte_len = 4 * t.len() as u64;
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f32".to_string(),
            offset,
            byte_len,
        });
        offset = align_up(offset + byte_len);
    }
    let manifest = Manifest {
        format_version: 1,
        arch_id: model.arch_id.clone(),
        mode: match model.mode {
            ArchMode::Vanilla => "vanilla".into(),
            ArchMode::Hybrid => "hybrid".into(),
        },
        plan: model.plan.clone(),
        epoch,
        tensors,
    };
    let manifest_json = serde_json::to_vec(&manifest)?;
    let payload_base = align_up(16 + manifest_json.len() as u64);
    let payload_len = manifest
        .tensors
        .last()
        .map(|t| t.offset + t.byte_len)
        .unwrap_or(0);
    let mut bytes = vec![0u8; (payload_base + payload_len) as usize];
    bytes[0..5].copy_from_slice(MAGIC);
    bytes[8..16].copy_from_slice(&(manifest_json.len() as u64).to_le_bytes());
    bytes[16..16 + manifest_json.len()].copy_from_slice(&manifest_json);
    for (entry, (_, li, pi)) in manifest.tensors.iter().zip(&names) {
        let t = &model.layers[*li].state.params[*pi].1;
        let start = (payload_base + entry.offset) as usize;
        for (i, &v) in t.data().iter().enumerate() {
            bytes[start + 4 * i..start + 4 * i + 4].copy_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelGraph, u64)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 {
        return Err(Error::Truncated("missing header".into()));
    }
    if &bytes[0..5] != MAGIC {
        return Err(Error::BadMagic);
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + manifest_len {
        return Err(Error::Truncated(format!(
            "manifest needs {} bytes, file has {}",
            manifest_len,
            bytes.len() - 16
        )));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[16..16 + manifest_len])?;
    if manifest.format_version != 1 {
        return Err(Error::ManifestMismatch(format!(
            "unsupported format_version {}",
            manifest.format_version
        )));
    }
    let payload_base = align_up(16 + manifest_len as u64);

    let mode: ArchMode = manifest.mode.parse()?;
    let mut model = build_model(&manifest.arch_id, mode, manifest.plan.as_ref())?;
    // allocate parameter slots so the name lookup below has somewhere to land
    model.init_params(0);

    let mut prev_end = 0u64;
    for entry in &manifest.tensors {
        if entry.dtype != "f32" {
            return Err(Error::ManifestMismatch(format!(
                "tensor `{}` has dtype {}",
                entry.name, entry.dtype
            )));
        }
        let numel: usize = entry.shape.iter().product();
        if entry.byte_len != 4 * numel as u64 {
            return Err(Error::ManifestMismatch(format!(
                "tensor `{}`: byte_len {} vs shape {:?}",
                entry.name, entry.byte_len, entry.shape
            )));
        }
        if entry.offset < prev_end {
            return Err(Error::ManifestMismatch(format!(
                "tensor `{}` overlaps its predecessor",
                entry.name
            )));
        }
        prev_end = entry.offset + entry.byte_len;
        if payload_base + prev_end > bytes.len() as u64 {
            return Err(Error::Truncated(format!(
                "tensor `{}` extends past end of file",
                entry.name
            )));
        }
    }

    let names = enumerate_tensors(&model);
    if names.len() != manifest.tensors.len() {
        return Err(Error::ManifestMismatch(format!(
            "manifest holds {} tensors, architecture defines {}",
            manifest.tensors.len(),
            names.len()
        )));
    }
    for entry in &manifest.tensors {
        let Some((_, li, pi)) = names.iter().find(|(n, _, _)| *n == entry.name) else {
            return Err(Error::ManifestMismatch(format!(
                "unexpected tensor `{}`",
                entry.name
            )));
        };
        let slot = &mut model.layers[*li].state.params[*pi].1;
        if slot.shape() != entry.shape.as_slice() {
            return Err(Error::ManifestMismatch(format!(
                "tensor `{}`: shape {:?} vs expected {:?}",
                entry.name,
                entry.shape,
                slot.shape()
            )));
        }
        let start = (payload_base + entry.offset) as usize;
        let mut data = Vec::with_capacity(slot.len());
        for i in 0..slot.len() {
            let b: [u8; 4] = bytes[start + 4 * i..start + 4 * i + 4].try_into().unwrap();
            data.push(f32::from_le_bytes(b) as f64);
        }
        *slot = Tensor::new(entry.shape.clone(), data)?;
    }
    Ok((model, manifest.epoch))
}
