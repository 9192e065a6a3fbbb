use std::path::Path;

use crate::error::CheckpointError;
use crate::model::{ModelConfig, ParameterStore, Partition};
use crate::numerics::Tensor;
use crate::{Error, Result};

/// Checkpoint binary layout, version 1:
///
/// ```text
/// magic      7 bytes        "ABNET1\0"
/// version    u32 LE
/// conf_len   u32 LE         followed by conf_len bytes of UTF-8 config
/// n_tensors  u32 LE
/// per tensor:
///   name_len u32 LE         followed by name_len bytes of UTF-8 name
///   partition u8            0 = frozen, 1 = trainable
///   rank     u32 LE
///   extents  rank × u32 LE
///   values   Πextents × f32 LE (IEEE-754)
/// ```
pub const FORMAT_VERSION: u32 = 1;

const MAGIC: &[u8; 7] = b"ABNET1\0";
const MAX_NAME: u32 = 4096;
const MAX_RANK: u32 = 8;
const MAX_TENSORS: u32 = 1 << 20;

pub fn save_checkpoint(store: &ParameterStore<f32>, config_text: &str, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(config_text.len() as u32).to_le_bytes());
    buf.extend_from_slice(config_text.as_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, tensor, partition) in store.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(match partition {
            Partition::Frozen => 0,
            Partition::Trainable => 1,
        });
        buf.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &extent in tensor.shape() {
            buf.extend_from_slice(&(extent as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, context: &'static str) -> std::result::Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.data.len() {
            return Err(CheckpointError::Truncated {
                context,
                needed: self.pos + n - self.data.len(),
            });
        }
        let slice = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self, context: &'static str) -> std::result::Result<u32, CheckpointError> {
        let b = self.take(4, context)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn byte(&mut self, context: &'static str) -> std::result::Result<u8, CheckpointError> {
        Ok(self.take(1, context)?[0])
    }
}

/// Load a checkpoint, returning the store and the embedded config text.
pub fn load_checkpoint(path: &Path) -> Result<(ParameterStore<f32>, String)> {
    let data = std::fs::read(path)?;
    let mut cur = Cursor {
        data: &data,
        pos: 0,
    };

    let magic = cur.take(MAGIC.len(), "magic")?;
    if magic != MAGIC {
        return Err(CheckpointError::MagicMismatch.into());
    }
    let version = cur.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version).into());
    }
    let conf_len = cur.u32("config length")?;
    let conf_bytes = cur.take(conf_len as usize, "config text")?;
    let config_text = String::from_utf8(conf_bytes.to_vec()).map_err(|e| {
        Error::from(CheckpointError::Malformed {
            context: "config text",
            detail: e.to_string(),
        })
    })?;

    let n_tensors = cur.u32("tensor count")?;
    if n_tensors > MAX_TENSORS {
        return Err(CheckpointError::Malformed {
            context: "tensor count",
            detail: format!("{n_tensors} exceeds limit {MAX_TENSORS}"),
        }
        .into());
    }
    let mut store = ParameterStore::new();
    for _ in 0..n_tensors {
        let name_len = cur.u32("name length")?;
        if name_len > MAX_NAME {
            return Err(CheckpointError::Malformed {
                context: "name length",
                detail: format!("{name_len} exceeds limit {MAX_NAME}"),
            }
            .into());
        }
        let name_bytes = cur.take(name_len as usize, "name")?;
        let name = String::from_utf8(name_bytes.to_vec()).map_err(|e| {
            Error::from(CheckpointError::Malformed {
                context: "name",
                detail: e.to_string(),
            })
        })?;
        let partition = match cur.byte("partition")? {
            0 => Partition::Frozen,
            1 => Partition::Trainable,
            other => {
                return Err(CheckpointError::Malformed {
                    context: "partition",
                    detail: format!("byte {other} is neither 0 nor 1"),
                }
                .into())
            }
        };
        let rank = cur.u32("rank")?;
        if rank > MAX_RANK {
            return Err(CheckpointError::Malformed {
                context: "rank",
                detail: format!("{rank} exceeds limit {MAX_RANK}"),
            }
            .into());
        }
        let mut extents = Vec::with_capacity(rank as usize);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let e = cur.u32("extent")?;
            numel = numel.saturating_mul(u64::from(e));
            extents.push(e as usize);
        }
        // An extent corrupted upward manifests as truncation; corrupted
        // downward, as trailing bytes or a tensor-count mismatch later.
        let expected = numel as usize;
        let raw = cur.take(expected * 4, "tensor values")?;
        let mut values = Vec::with_capacity(expected);
        for chunk in raw.chunks_exact(4) {
            values.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        if values.len() != expected {
            return Err(CheckpointError::ExtentMismatch {
                name,
                extents,
                got: values.len(),
            }
            .into());
        }
        let tensor = Tensor::new(extents.clone(), values).map_err(|_| {
            Error::from(CheckpointError::ExtentMismatch {
                name: name.clone(),
                extents,
                got: 0,
            })
        })?;
        store.insert(name, tensor, partition);
    }
    if cur.pos != data.len() {
        return Err(CheckpointError::TrailingBytes(data.len() - cur.pos).into());
    }
    Ok((store, config_text))
}

/// Load a checkpoint whose config text is a model configuration.
pub fn load_model_checkpoint(path: &Path) -> Result<(ParameterStore<f32>, ModelConfig)> {
    let (store, text) = load_checkpoint(path)?;
    let config = ModelConfig::from_config_text(&text)?;
    Ok((store, config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn sample_store() -> ParameterStore<f32> {
        let mut store = ParameterStore::new();
        store.insert(
            "enc.1.w",
            Tensor::matrix(2, 3, vec![1.0, -2.5, 0.0, f32::MIN_POSITIVE, 3.25, -0.125]).unwrap(),
            Partition::Frozen,
        );
        store.insert(
            "enc.1.adapter.w1",
            Tensor::vector(&[0.5f32, -0.5]),
            Partition::Trainable,
        );
        store.insert("scalar", Tensor::scalar(7.75f32), Partition::Trainable);
        store
    }

    #[test]
    fn roundtrip_is_bit_identical_and_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let store = sample_store();
        let cfg = ModelConfig::desk_default(30, 30).to_config_text();
        save_checkpoint(&store, &cfg, &p1).unwrap();
        let (loaded, text) = load_checkpoint(&p1).unwrap();
        assert_eq!(text, cfg);
        for (name, tensor, partition) in store.iter() {
            let re = loaded.get(name).unwrap();
            assert_eq!(re.shape(), tensor.shape());
            for (a, b) in re.data().iter().zip(tensor.data()) {
                assert_eq!(a.to_bits(), b.to_bits(), "tensor {name}");
            }
            assert_eq!(loaded.partition(name).unwrap(), partition);
        }
        // save → load → save is byte-identical.
        save_checkpoint(&loaded, &text, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn magic_mismatch_is_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTABNETxxxxxxxxxxxxxxxx").unwrap();
        match load_checkpoint(&path) {
            Err(Error::Checkpoint(CheckpointError::MagicMismatch)) => {}
            other => panic!("expected magic mismatch, got {other:?}"),
        }
    }

    #[test]
    fn truncation_is_detected_not_crashed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        save_checkpoint(&sample_store(), "x = 1\n", &path).unwrap();
        let full = std::fs::read(&path).unwrap();
        for cut in [full.len() - 1, full.len() - 7, 20, 8] {
            std::fs::write(&path, &full[..cut]).unwrap();
            match load_checkpoint(&path) {
                Err(Error::Checkpoint(CheckpointError::Truncated { .. })) => {}
                other => panic!("cut at {cut}: expected truncation, got {other:?}"),
            }
        }
    }

    #[test]
    fn every_flipped_length_field_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.ckpt");
        save_checkpoint(&sample_store(), "x = 1\n", &path).unwrap();
        let full = std::fs::read(&path).unwrap();
        // Corrupt each 32-bit length-bearing field by adding 1: version,
        // config length, tensor count, then each name length / rank /
        // extent in sequence.
        let mut length_offsets = vec![7usize, 11];
        {
            // Walk the layout to find the per-tensor length fields.
            let conf_len = u32::from_le_bytes(full[11..15].try_into().unwrap()) as usize;
            let mut pos = 15 + conf_len;
            length_offsets.push(pos); // tensor count
            pos += 4;
            for _ in 0..3 {
                length_offsets.push(pos); // name length
                let name_len =
                    u32::from_le_bytes(full[pos..pos + 4].try_into().unwrap()) as usize;
                pos += 4 + name_len + 1;
                length_offsets.push(pos); // rank
                let rank = u32::from_le_bytes(full[pos..pos + 4].try_into().unwrap()) as usize;
                pos += 4;
                let mut numel = 1usize;
                for _ in 0..rank {
                    length_offsets.push(pos); // extent
                    numel *= u32::from_le_bytes(full[pos..pos + 4].try_into().unwrap()) as usize;
                    pos += 4;
                }
                pos += 4 * numel;
            }
        }
        for &off in &length_offsets {
            let mut corrupted = full.clone();
            let old = u32::from_le_bytes(corrupted[off..off + 4].try_into().unwrap());
            corrupted[off..off + 4].copy_from_slice(&(old + 1).to_le_bytes());
            std::fs::write(&path, &corrupted).unwrap();
            assert!(
                load_checkpoint(&path).is_err(),
                "corruption at offset {off} went undetected"
            );
        }
    }

    #[test]
    fn trailing_bytes_are_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        save_checkpoint(&sample_store(), "x = 1\n", &path).unwrap();
        let mut full = std::fs::read(&path).unwrap();
        full.push(0);
        std::fs::write(&path, &full).unwrap();
        match load_checkpoint(&path) {
            Err(Error::Checkpoint(CheckpointError::TrailingBytes(1))) => {}
            other => panic!("expected trailing bytes, got {other:?}"),
        }
    }
}
