//! HVCK checkpoint format: training counters, the exact RNG state, a config
//! echo, and every named array (parameters and optimizer state) as raw
//! little-endian values. Saves are atomic (temp file + rename) and loads
//! re-validate structure byte by byte; a round trip is bit-identical.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::scalar::{Dtype, Scalar};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"HVCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not an HVCK checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("checkpoint dtype tag {got} does not match requested element type {want}")]
    DtypeMismatch { want: u8, got: u8 },
    #[error("unknown dtype tag {0}")]
    UnknownDtype(u8),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("checkpoint field {field} is malformed: {reason}")]
    Malformed { field: &'static str, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub step: u64,
    pub epoch: u64,
    /// ChaCha8 seed and stream position of the training RNG; restoring both
    /// resumes the exact random sequence.
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    /// Canonical config text of the model this state belongs to.
    pub config_text: String,
    /// Named arrays: parameters by plain name, optimizer moments prefixed
    /// (`m.`, `v.`, `vel.`), in a fixed order.
    pub arrays: Vec<(String, Vec<usize>, Vec<T>)>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn get(&self, name: &str) -> Option<(&[usize], &[T])> {
        self.arrays
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, shape, data)| (shape.as_slice(), data.as_slice()))
    }

    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(T::DTYPE.tag());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.rng_seed);
        out.extend_from_slice(&self.rng_word_pos.to_le_bytes());
        out.extend_from_slice(&(self.config_text.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_text.as_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, shape, data) in &self.arrays {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(shape.len() as u8);
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&((data.len() * T::DTYPE.byte_width()) as u64).to_le_bytes());
            for &v in data {
                v.write_le(&mut out);
            }
        }
        out
    }

    /// Atomic save: the file at `path` is either the old content or the
    /// complete new checkpoint, never a partial write.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = File::create(&tmp)?;
            f.write_all(&self.encode())?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let buf = std::fs::read(path)?;
        let mut cur = Cursor { buf: &buf, pos: 0 };
        if cur.take(4)? != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::BadVersion(version));
        }
        let tag = cur.take(1)?[0];
        if Dtype::from_tag(tag).is_none() {
            return Err(CheckpointError::UnknownDtype(tag));
        }
        if tag != T::DTYPE.tag() {
            return Err(CheckpointError::DtypeMismatch { want: T::DTYPE.tag(), got: tag });
        }
        let step = u64::from_le_bytes(cur.take(8)?.try_into().unwrap());
        let epoch = u64::from_le_bytes(cur.take(8)?.try_into().unwrap());
        let rng_seed: [u8; 32] = cur.take(32)?.try_into().unwrap();
        let rng_word_pos = u128::from_le_bytes(cur.take(16)?.try_into().unwrap());
        let cfg_len = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
        let config_text = String::from_utf8(cur.take(cfg_len)?.to_vec()).map_err(|e| {
            CheckpointError::Malformed { field: "config", reason: e.to_string() }
        })?;
        let count = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u16::from_le_bytes(cur.take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec()).map_err(|e| {
                CheckpointError::Malformed { field: "array name", reason: e.to_string() }
            })?;
            let ndim = cur.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize);
            }
            let byte_len = u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize;
            let width = T::DTYPE.byte_width();
            let numel: usize = shape.iter().product();
            if byte_len != numel * width {
                return Err(CheckpointError::Malformed {
                    field: "array data",
                    reason: format!(
                        "`{name}` shape {shape:?} implies {} bytes, header says {byte_len}",
                        numel * width
                    ),
                });
            }
            let raw = cur.take(byte_len)?;
            let data = raw.chunks_exact(width).map(T::read_le).collect();
            arrays.push((name, shape, data));
        }
        if cur.pos != buf.len() {
            return Err(CheckpointError::Malformed {
                field: "trailer",
                reason: format!("{} bytes of trailing garbage", buf.len() - cur.pos),
            });
        }
        Ok(Checkpoint { step, epoch, rng_seed, rng_word_pos, config_text, arrays })
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Truncated("record body"));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint<f32> {
        Checkpoint {
            step: 1234,
            epoch: 7,
            rng_seed: [9; 32],
            rng_word_pos: 0x0123_4567_89AB_CDEF_0011_2233_4455_6677,
            config_text: "img_size = 32\n".into(),
            arrays: vec![
                ("embed.w".into(), vec![2, 3], vec![1.0, -2.5, f32::MIN_POSITIVE, 0.0, -0.0, 3.25]),
                ("m.embed.w".into(), vec![2, 3], vec![0.5; 6]),
            ],
        }
    }

    #[test]
    fn save_load_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.hvck");
        let ck = sample();
        ck.save(&path).unwrap();
        let loaded = Checkpoint::<f32>::load(&path).unwrap();
        assert_eq!(ck, loaded);
        // Re-saving the loaded state produces identical bytes.
        let path2 = dir.path().join("b.hvck");
        loaded.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
        // No temp file left behind.
        assert!(!dir.path().join("a.tmp").exists());
    }

    #[test]
    fn dtype_and_magic_are_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.hvck");
        sample().save(&path).unwrap();
        assert!(matches!(
            Checkpoint::<f64>::load(&path),
            Err(CheckpointError::DtypeMismatch { want: 2, got: 1 })
        ));
        std::fs::write(&path, b"no").unwrap();
        assert!(matches!(Checkpoint::<f32>::load(&path), Err(CheckpointError::Truncated(_))));
        std::fs::write(&path, vec![0u8; 100]).unwrap();
        assert!(matches!(Checkpoint::<f32>::load(&path), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn truncation_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.hvck");
        sample().save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        assert!(Checkpoint::<f32>::load(&path).is_err());
    }

    #[test]
    fn trailing_garbage_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.hvck");
        sample().save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            Checkpoint::<f32>::load(&path),
            Err(CheckpointError::Malformed { field: "trailer", .. })
        ));
    }
}
