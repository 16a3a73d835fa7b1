//! Binary checkpoints of a model state.
//!
//! Layout: the 8-byte magic, a little-endian `u32` manifest length, the JSON
//! manifest, then every tensor's elements in little-endian order. The manifest
//! records each tensor's name, shape and byte range plus a SHA-256 of the
//! payload.

use std::ops::Range;
use std::path::Path;

use cmn_core::model::Phase;
use cmn_core::nn::{init_params, Parameters};
use cmn_core::{rng, CmnState, Dtype, ModelConfig, NetworkParams, NetworkSpec, Scalar, Tensor, TransferLink};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};
use crate::io::write_atomic;

pub const MAGIC: &[u8; 8] = b"CMNCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
    /// Length in bytes.
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub dtype: Dtype,
    pub config_digest: Option<String>,
    /// Run seed the state was trained with.
    pub seed: Option<u64>,
    pub model: ModelConfig,
    pub task_index: usize,
    pub phase: Phase,
    pub class_offsets: Vec<Range<usize>>,
    pub long: Option<NetworkSpec>,
    pub short: Option<NetworkSpec>,
    pub snapshot: Option<NetworkSpec>,
    pub links: usize,
    pub tensors: Vec<TensorEntry>,
    pub payload_len: usize,
    pub payload_sha256: String,
}

fn named<T: Scalar>(state: &CmnState<T>) -> Vec<(String, &Tensor<T>)> {
    let mut out = Vec::new();
    for (prefix, net) in [("long", &state.long), ("short", &state.short), ("snapshot", &state.snapshot)] {
        if let Some(n) = net {
            out.extend(n.named_tensors().into_iter().map(|(k, t)| (format!("{prefix}.{k}"), t)));
        }
    }
    out.extend(
        state
            .links
            .as_slice()
            .named_tensors()
            .into_iter()
            .map(|(k, t)| (format!("links.{k}"), t)),
    );
    out
}

fn sha(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Serializes `state` into the checkpoint format.
pub fn encode<T: Scalar>(state: &CmnState<T>, config_digest: Option<String>, seed: Option<u64>) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in named(state) {
        let offset = payload.len();
        for &v in t.data() {
            v.write_le(&mut payload);
        }
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
            len: payload.len() - offset,
        });
    }
    let manifest = Manifest {
        schema_version: CHECKPOINT_VERSION,
        dtype: T::DTYPE,
        config_digest,
        seed,
        model: state.config.clone(),
        task_index: state.task_index,
        phase: state.phase,
        class_offsets: state.class_offsets.clone(),
        long: state.long.as_ref().map(|n| n.spec.clone()),
        short: state.short.as_ref().map(|n| n.spec.clone()),
        snapshot: state.snapshot.as_ref().map(|n| n.spec.clone()),
        links: state.links.len(),
        tensors,
        payload_len: payload.len(),
        payload_sha256: sha(&payload),
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| CliError::Inconsistent(e.to_string()))?;
    let len = u32::try_from(json.len()).map_err(|_| CliError::Inconsistent("manifest too large".into()))?;
    let mut out = Vec::with_capacity(MAGIC.len() + 4 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn save<T: Scalar>(path: &Path, state: &CmnState<T>, config_digest: Option<String>, seed: Option<u64>) -> Result<()> {
    write_atomic(path, &encode(state, config_digest, seed)?)
}

/// Splits a checkpoint into its manifest and verified payload.
pub fn decode_manifest<'a>(path: &Path, bytes: &'a [u8]) -> Result<(Manifest, &'a [u8])> {
    let bad = |reason: String| CliError::Integrity {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() < len {
        return Err(bad(format!("manifest truncated: {len} bytes declared, {} present", body.len())));
    }
    let value: serde_json::Value =
        serde_json::from_slice(&body[..len]).map_err(|e| bad(format!("manifest is not JSON: {e}")))?;
    let found = value.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != CHECKPOINT_VERSION {
        return Err(CliError::Version {
            path: path.to_path_buf(),
            found,
            expected: CHECKPOINT_VERSION,
        });
    }
    let manifest: Manifest = serde_json::from_value(value).map_err(|e| bad(format!("malformed manifest: {e}")))?;
    let payload = &body[len..];
    if payload.len() != manifest.payload_len {
        return Err(bad(format!(
            "payload is {} bytes, manifest declares {}",
            payload.len(),
            manifest.payload_len
        )));
    }
    if sha(payload) != manifest.payload_sha256 {
        return Err(bad("payload checksum mismatch".into()));
    }
    Ok((manifest, payload))
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(decode_manifest(path, &bytes)?.0)
}

/// Empty state with the manifest's structure; every tensor is overwritten.
fn template<T: Scalar>(m: &Manifest) -> cmn_core::Result<CmnState<T>> {
    let net = |spec: &Option<NetworkSpec>| -> cmn_core::Result<Option<NetworkParams<T>>> {
        spec.as_ref().map(|s| init_params::<T>(s, m.model.init, 0)).transpose()
    };
    let mut state = CmnState::<T>::new(m.model.clone())?;
    state.long = net(&m.long)?;
    state.short = net(&m.short)?;
    state.snapshot = net(&m.snapshot)?;
    if m.links > 0 {
        let (Some(long), Some(short)) = (&m.long, &m.short) else {
            return Err(cmn_core::Error::InvalidArgument("transfer links without both networks".into()));
        };
        state.links = TransferLink::for_networks(m.model.strategy, long, short, m.model.embedding, &mut rng::stream(0, &[]))?;
    }
    state.task_index = m.task_index;
    state.phase = m.phase;
    state.class_offsets = m.class_offsets.clone();
    Ok(state)
}

/// Rebuilds a state from checkpoint bytes. Nothing is returned unless every
/// check passes.
pub fn decode<T: Scalar>(path: &Path, bytes: &[u8]) -> Result<(Manifest, CmnState<T>)> {
    let (manifest, payload) = decode_manifest(path, bytes)?;
    let bad = |reason: String| CliError::Integrity {
        path: path.to_path_buf(),
        reason,
    };
    if manifest.dtype != T::DTYPE {
        return Err(bad(format!("checkpoint holds {} tensors, {} requested", manifest.dtype, T::DTYPE)));
    }
    let mut state = template::<T>(&manifest).map_err(|e| bad(format!("inconsistent structure: {e}")))?;
    if state.links.len() != manifest.links {
        return Err(bad(format!("{} links declared, structure implies {}", manifest.links, state.links.len())));
    }
    let expected: Vec<(String, Vec<usize>)> = named(&state)
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    if expected.len() != manifest.tensors.len() {
        return Err(bad(format!("{} tensors stored, {} expected", manifest.tensors.len(), expected.len())));
    }
    let width = T::DTYPE.size_of();
    let mut loaded = Vec::with_capacity(expected.len());
    for ((name, shape), entry) in expected.iter().zip(&manifest.tensors) {
        if *name != entry.name || *shape != entry.shape {
            return Err(bad(format!(
                "tensor `{}` {:?} where `{name}` {shape:?} was expected",
                entry.name, entry.shape
            )));
        }
        let numel: usize = shape.iter().product();
        let end = entry.offset.checked_add(entry.len).filter(|&e| e <= payload.len());
        if entry.len != numel * width || end.is_none() {
            return Err(bad(format!("tensor `{name}` has an invalid byte range")));
        }
        let data: Vec<T> = payload[entry.offset..entry.offset + entry.len]
            .chunks_exact(width)
            .map(T::read_le)
            .collect();
        loaded.push(Tensor::new(shape.clone(), data).map_err(|e| bad(e.to_string()))?);
    }
    let mut slots: Vec<&mut Tensor<T>> = Vec::new();
    if let Some(n) = state.long.as_mut() {
        slots.extend(n.tensors_mut());
    }
    if let Some(n) = state.short.as_mut() {
        slots.extend(n.tensors_mut());
    }
    if let Some(n) = state.snapshot.as_mut() {
        slots.extend(n.tensors_mut());
    }
    slots.extend(state.links.as_mut_slice().tensors_mut());
    for (slot, t) in slots.into_iter().zip(loaded) {
        *slot = t;
    }
    Ok((manifest, state))
}

pub fn load<T: Scalar>(path: &Path) -> Result<(Manifest, CmnState<T>)> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(path, &bytes)
}

/// Flat `(name, values)` view, for comparing states.
pub fn flatten<T: Scalar>(state: &CmnState<T>) -> Vec<(String, Vec<usize>, Vec<T>)> {
    named(state)
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec(), t.data().to_vec()))
        .collect()
}
