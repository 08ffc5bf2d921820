//! Checkpoint archive and small file helpers shared by training, tuning and
//! the experiment runner.
//!
//! Archive layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "CRISCKPT"
//! version      u32
//! meta_len     u64
//! meta         meta_len bytes of JSON (configs, epoch, history, array index)
//! arrays       f64 values of every indexed array, in index order
//! digest       32 bytes  SHA-256 of everything above
//! ```
//!
//! Arrays are parameters (`param`), batch-norm buffers (`buffer`) and Adam
//! moments (`adam_m`, `adam_v`). Values are widened to `f64`, which is
//! lossless for `f32` models.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use cris_autograd::{Real, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::optim::{Adam, Moments};
use crate::training::{ModelConfig, SegModel, TrainConfig, TrainHistory, TrainState};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CRISCKPT";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const HEADER_LEN: usize = 8 + 4 + 8;

/// First and second Adam moments of one parameter as they are decoded.
type PartialMoments<T> = (Option<(Tensor<T>, u64)>, Option<Tensor<T>>);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum ArrayKind {
    Param,
    Buffer,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    kind: ArrayKind,
    shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    adam_step: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Meta {
    format_version: u32,
    model: ModelConfig,
    train: TrainConfig,
    next_epoch: usize,
    history: TrainHistory,
    manifest_hash: Option<String>,
    arrays: Vec<ArrayEntry>,
}

/// Checkpoint metadata visible without rebuilding the model.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointInfo {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub next_epoch: usize,
    pub manifest_hash: Option<String>,
}

fn integrity(path: &Path, reason: impl Into<String>) -> Error {
    Error::Integrity {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Encodes a training state into archive bytes.
pub fn encode_checkpoint<T: Real>(state: &TrainState<T>, manifest_hash: Option<&str>) -> Result<Vec<u8>> {
    let mut arrays = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    let mut push = |name: &str, kind, t: &Tensor<T>, adam_step| {
        arrays.push(ArrayEntry {
            name: name.to_string(),
            kind,
            shape: t.shape().to_vec(),
            adam_step,
        });
        values.extend(t.data().iter().map(|v| v.as_f64()));
    };
    for store in state.model.stores() {
        for (name, t) in store.params() {
            push(name, ArrayKind::Param, t, None);
        }
        for (name, t) in store.buffers() {
            push(name, ArrayKind::Buffer, t, None);
        }
    }
    for (name, m) in state.optimizer.state() {
        push(name, ArrayKind::AdamM, &m.m, Some(m.step));
        push(name, ArrayKind::AdamV, &m.v, None);
    }
    let meta = Meta {
        format_version: FORMAT_VERSION,
        model: state.model.config(),
        train: state.config.clone(),
        next_epoch: state.next_epoch,
        history: state.history.clone(),
        manifest_hash: manifest_hash.map(str::to_string),
        arrays,
    };
    let meta = serde_json::to_vec(&meta).map_err(|e| Error::parse("checkpoint meta", e))?;
    let mut out = Vec::with_capacity(HEADER_LEN + meta.len() + 8 * values.len() + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

fn decode_meta<'a>(bytes: &'a [u8], path: &Path) -> Result<(Meta, &'a [u8])> {
    if bytes.len() < HEADER_LEN + DIGEST_LEN {
        return Err(integrity(path, format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(integrity(path, "bad magic"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(integrity(path, "digest mismatch"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            expected: FORMAT_VERSION,
            found: version,
        });
    }
    let meta_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let rest = &body[HEADER_LEN..];
    if meta_len > rest.len() {
        return Err(integrity(path, "metadata length exceeds file"));
    }
    let meta: Meta = serde_json::from_slice(&rest[..meta_len]).map_err(|e| integrity(path, format!("metadata: {e}")))?;
    if meta.format_version != version {
        return Err(integrity(path, "header and metadata versions disagree"));
    }
    Ok((meta, &rest[meta_len..]))
}

/// Decodes archive bytes; `path` is only used in error messages.
pub fn decode_checkpoint<T: Real>(bytes: &[u8], path: &Path) -> Result<(TrainState<T>, Option<String>)> {
    let (meta, mut payload) = decode_meta(bytes, path)?;
    let expected: usize = meta.arrays.iter().map(|a| a.shape.iter().product::<usize>()).sum();
    if payload.len() != 8 * expected {
        return Err(integrity(path, format!("payload holds {} bytes, index needs {}", payload.len(), 8 * expected)));
    }
    let mut params = BTreeMap::new();
    let mut buffers = BTreeMap::new();
    let mut moments: BTreeMap<String, PartialMoments<T>> = BTreeMap::new();
    for a in &meta.arrays {
        let n: usize = a.shape.iter().product();
        let (chunk, tail) = payload.split_at(8 * n);
        payload = tail;
        let data = chunk
            .chunks_exact(8)
            .map(|b| T::lit(f64::from_le_bytes(b.try_into().expect("8 bytes"))))
            .collect();
        let t = Tensor::from_vec(&a.shape, data);
        match a.kind {
            ArrayKind::Param => {
                params.insert(a.name.clone(), t);
            }
            ArrayKind::Buffer => {
                buffers.insert(a.name.clone(), t);
            }
            ArrayKind::AdamM => {
                let step = a.adam_step.ok_or_else(|| integrity(path, format!("no step for {}", a.name)))?;
                moments.entry(a.name.clone()).or_default().0 = Some((t, step));
            }
            ArrayKind::AdamV => moments.entry(a.name.clone()).or_default().1 = Some(t),
        }
    }

    let mut model = SegModel::<T>::build(&meta.model)?;
    let mut seen = 0;
    let mut seen_buffers = 0;
    for store in model.stores_mut() {
        let names: Vec<String> = store.params().keys().cloned().collect();
        for name in names {
            let t = params
                .remove(&name)
                .ok_or_else(|| Error::ConfigMismatch(format!("missing parameter {name}")))?;
            if Some(t.shape()) != store.param(&name).map(Tensor::shape) {
                return Err(Error::ConfigMismatch(format!("shape of {name}")));
            }
            store.insert_param(name, t);
            seen += 1;
        }
        let names: Vec<String> = store.buffers().keys().cloned().collect();
        for name in names {
            let t = buffers
                .remove(&name)
                .ok_or_else(|| Error::ConfigMismatch(format!("missing buffer {name}")))?;
            if Some(t.shape()) != store.buffer(&name).map(Tensor::shape) {
                return Err(Error::ConfigMismatch(format!("shape of {name}")));
            }
            store.insert_buffer(name, t);
            seen_buffers += 1;
        }
    }
    if let Some(name) = params.keys().chain(buffers.keys()).next() {
        return Err(Error::ConfigMismatch(format!("unexpected array {name}")));
    }
    debug_assert!(seen > 0 || seen_buffers > 0);

    let t = &meta.train;
    let mut optimizer = Adam::new(t.learning_rate, t.adam_betas, t.adam_eps);
    for (name, pair) in moments {
        match pair {
            (Some((m, step)), Some(v)) => optimizer.insert_state(name, Moments { m, v, step }),
            _ => return Err(integrity(path, format!("incomplete optimizer state for {name}"))),
        }
    }
    let state = TrainState {
        model,
        optimizer,
        next_epoch: meta.next_epoch,
        history: meta.history,
        config: meta.train,
    };
    Ok((state, meta.manifest_hash))
}

/// Writes `bytes` to `path` via a sibling temp file and a rename, reading
/// the temp file back first so a short write never replaces a good file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let file_name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp: PathBuf = dir.join(format!(".{file_name}.tmp"));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    let back = fs::read(&tmp).map_err(|e| Error::io(&tmp, e))?;
    if Sha256::digest(&back) != Sha256::digest(bytes) {
        let _ = fs::remove_file(&tmp);
        return Err(integrity(path, "verify-after-write failed"));
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint<T: Real>(state: &TrainState<T>, manifest_hash: Option<&str>, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(state, manifest_hash)?;
    atomic_write(path, &bytes)?;
    // Decoding the written file proves it can be restored.
    let (meta, _) = decode_meta(&fs::read(path).map_err(|e| Error::io(path, e))?, path)?;
    debug_assert_eq!(meta.next_epoch, state.next_epoch);
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(TrainState<T>, Option<String>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

/// Loads a checkpoint and insists it was written for `expected`.
pub fn load_checkpoint_for<T: Real>(path: &Path, expected: &ModelConfig) -> Result<(TrainState<T>, Option<String>)> {
    let info = checkpoint_info(path)?;
    if &info.model != expected {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint holds {:?}, expected {:?}",
            info.model, expected
        )));
    }
    load_checkpoint(path)
}

pub fn checkpoint_info(path: &Path) -> Result<CheckpointInfo> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (meta, _) = decode_meta(&bytes, path)?;
    Ok(CheckpointInfo {
        model: meta.model,
        train: meta.train,
        next_epoch: meta.next_epoch,
        manifest_hash: meta.manifest_hash,
    })
}

/// Pretty JSON written atomically.
pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::parse("json output", e))?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

pub fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, BackboneKind};
    use crate::refinement::RefinementConfig;
    use crate::training::Strategy;

    fn state() -> TrainState<f32> {
        let cfg = ModelConfig::Refined {
            backbone: BackboneConfig::new(BackboneKind::Unet).with_depth(2).with_base_channels(4).with_seed(3),
            refinement: RefinementConfig {
                expand_channels: 4,
                ..RefinementConfig::default()
            },
        };
        let mut s = TrainState::fresh(SegModel::build(&cfg).unwrap(), &TrainConfig::new(Strategy::Cris));
        let name = s.model.stores()[0].params().keys().next().unwrap().clone();
        let shape = s.model.stores()[0].params()[&name].shape().to_vec();
        let n: usize = shape.iter().product();
        s.optimizer.insert_state(
            name,
            Moments {
                m: Tensor::from_vec(&shape, (0..n).map(|i| i as f32 * 0.1).collect()),
                v: Tensor::from_vec(&shape, (0..n).map(|i| i as f32 * 0.01).collect()),
                step: 7,
            },
        );
        s.next_epoch = 4;
        s
    }

    #[test]
    fn round_trip_is_exact() {
        let s = state();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        save_checkpoint(&s, Some("abc"), &p).unwrap();
        let (back, tag) = load_checkpoint::<f32>(&p).unwrap();
        assert_eq!(back, s);
        assert_eq!(tag.as_deref(), Some("abc"));
        assert_eq!(checkpoint_info(&p).unwrap().next_epoch, 4);
    }

    #[test]
    fn corruption_is_detected() {
        let s = state();
        let bytes = encode_checkpoint(&s, None).unwrap();
        let p = Path::new("x.ckpt");
        for cut in [0, 10, bytes.len() / 2, bytes.len() - 1] {
            let err = decode_checkpoint::<f32>(&bytes[..cut], p).unwrap_err();
            assert!(matches!(err, Error::Integrity { .. }), "{cut}: {err}");
        }
        let mut flipped = bytes.clone();
        flipped[bytes.len() / 2] ^= 1;
        assert!(matches!(decode_checkpoint::<f32>(&flipped, p), Err(Error::Integrity { .. })));
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = encode_checkpoint(&state(), None).unwrap();
        bytes[8..12].copy_from_slice(&9u32.to_le_bytes());
        let n = bytes.len() - DIGEST_LEN;
        let digest = Sha256::digest(&bytes[..n]);
        bytes[n..].copy_from_slice(&digest);
        assert!(matches!(
            decode_checkpoint::<f32>(&bytes, Path::new("x")),
            Err(Error::VersionMismatch { expected: 1, found: 9 })
        ));
    }

    #[test]
    fn wrong_architecture() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        save_checkpoint(&state(), None, &p).unwrap();
        let other = ModelConfig::Plain {
            backbone: BackboneConfig::new(BackboneKind::Segnet).with_depth(2),
        };
        assert!(matches!(load_checkpoint_for::<f32>(&p, &other), Err(Error::ConfigMismatch(_))));
        assert!(matches!(load_checkpoint::<f32>(&dir.path().join("none")), Err(Error::Io { .. })));
    }
}
