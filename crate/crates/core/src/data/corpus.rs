//! HVC1 image corpus: a flat binary file of fixed-size u8 images with
//! optional u16 labels and per-channel normalization statistics in the
//! header. Records are fixed-width, so any image is one `read_exact_at`
//! away; the loader never maps or buffers the whole file.

use std::fs::File;
use std::io::Write;
use std::os::unix::fs::FileExt;
use std::path::Path;

use thiserror::Error;

use crate::scalar::Scalar;

pub const CORPUS_MAGIC: [u8; 4] = *b"HVC1";
pub const CORPUS_VERSION: u32 = 1;
/// magic + version + count + h + w + c + label flag + mean[3] + std[3]
pub const HEADER_BYTES: usize = 4 + 6 * 4 + 6 * 4;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not an HVC1 corpus (bad magic)")]
    BadMagic,
    #[error("unsupported corpus version {0}")]
    BadVersion(u32),
    #[error("corpus file is {got} bytes, header implies {want}")]
    WrongSize { want: u64, got: u64 },
    #[error("record {index} out of range (corpus has {count})")]
    OutOfRange { index: usize, count: usize },
    #[error("writer closed after {got} records, header promised {want}")]
    ShortWrite { want: usize, got: usize },
    #[error("corpus geometry is degenerate: {0}")]
    BadGeometry(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusHeader {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub labeled: bool,
    /// Per-channel mean/std of the pixel values on the 0..1 scale; the
    /// loader hands out `(px/255 - mean) / std`.
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl CorpusHeader {
    pub fn pixel_bytes(&self) -> usize {
        self.channels * self.height * self.width
    }

    fn record_bytes(&self) -> usize {
        self.pixel_bytes() + if self.labeled { 2 } else { 0 }
    }

    fn validate(&self) -> Result<(), CorpusError> {
        if self.count == 0 || self.height == 0 || self.width == 0 || self.channels != 3 {
            return Err(CorpusError::BadGeometry(format!(
                "count={} h={} w={} c={} (need count>0 and exactly 3 channels)",
                self.count, self.height, self.width, self.channels
            )));
        }
        if self.std.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(CorpusError::BadGeometry(format!("non-positive std {:?}", self.std)));
        }
        Ok(())
    }

    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_BYTES);
        out.extend_from_slice(&CORPUS_MAGIC);
        for v in [
            CORPUS_VERSION,
            self.count as u32,
            self.height as u32,
            self.width as u32,
            self.channels as u32,
            self.labeled as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.mean.iter().chain(&self.std) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    fn decode(buf: &[u8; HEADER_BYTES]) -> Result<Self, CorpusError> {
        if buf[..4] != CORPUS_MAGIC {
            return Err(CorpusError::BadMagic);
        }
        let u32_at = |i: usize| u32::from_le_bytes(buf[i..i + 4].try_into().unwrap());
        let f32_at = |i: usize| f32::from_le_bytes(buf[i..i + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != CORPUS_VERSION {
            return Err(CorpusError::BadVersion(version));
        }
        let header = CorpusHeader {
            count: u32_at(8) as usize,
            height: u32_at(12) as usize,
            width: u32_at(16) as usize,
            channels: u32_at(20) as usize,
            labeled: u32_at(24) != 0,
            mean: [f32_at(28), f32_at(32), f32_at(36)],
            std: [f32_at(40), f32_at(44), f32_at(48)],
        };
        header.validate()?;
        Ok(header)
    }
}

/// Sequential corpus writer; the record count is fixed up front.
pub struct CorpusWriter {
    file: File,
    header: CorpusHeader,
    written: usize,
}

impl CorpusWriter {
    pub fn create(path: &Path, header: CorpusHeader) -> Result<Self, CorpusError> {
        header.validate()?;
        let mut file = File::create(path)?;
        file.write_all(&header.encode())?;
        Ok(CorpusWriter { file, header, written: 0 })
    }

    pub fn push(&mut self, pixels: &[u8], label: Option<u16>) -> Result<(), CorpusError> {
        assert_eq!(pixels.len(), self.header.pixel_bytes(), "pixel buffer size");
        assert_eq!(label.is_some(), self.header.labeled, "label presence matches header");
        self.file.write_all(pixels)?;
        if let Some(l) = label {
            self.file.write_all(&l.to_le_bytes())?;
        }
        self.written += 1;
        Ok(())
    }

    pub fn finish(self) -> Result<(), CorpusError> {
        if self.written != self.header.count {
            return Err(CorpusError::ShortWrite {
                want: self.header.count,
                got: self.written,
            });
        }
        self.file.sync_all()?;
        Ok(())
    }
}

/// Read handle; `get*` calls are independent and positioned, so shared use
/// across threads needs no seeking discipline.
pub struct Corpus {
    file: File,
    header: CorpusHeader,
}

impl Corpus {
    pub fn open(path: &Path) -> Result<Self, CorpusError> {
        let file = File::open(path)?;
        let mut buf = [0u8; HEADER_BYTES];
        file.read_exact_at(&mut buf, 0)?;
        let header = CorpusHeader::decode(&buf)?;
        let want = HEADER_BYTES as u64 + (header.count * header.record_bytes()) as u64;
        let got = file.metadata()?.len();
        if want != got {
            return Err(CorpusError::WrongSize { want, got });
        }
        Ok(Corpus { file, header })
    }

    pub fn header(&self) -> &CorpusHeader {
        &self.header
    }

    pub fn len(&self) -> usize {
        self.header.count
    }

    pub fn is_empty(&self) -> bool {
        self.header.count == 0
    }

    pub fn get_raw(&self, index: usize) -> Result<(Vec<u8>, Option<u16>), CorpusError> {
        if index >= self.header.count {
            return Err(CorpusError::OutOfRange { index, count: self.header.count });
        }
        let rec = self.header.record_bytes();
        let mut buf = vec![0u8; rec];
        self.file
            .read_exact_at(&mut buf, (HEADER_BYTES + index * rec) as u64)?;
        let label = self.header.labeled.then(|| {
            u16::from_le_bytes([buf[rec - 2], buf[rec - 1]])
        });
        buf.truncate(self.header.pixel_bytes());
        Ok((buf, label))
    }

    /// One image as `(px/255 - mean[c]) / std[c]`, channel-major `(c, y, x)`.
    pub fn get_normalized<T: Scalar>(
        &self,
        index: usize,
    ) -> Result<(Vec<T>, Option<u16>), CorpusError> {
        let (raw, label) = self.get_raw(index)?;
        Ok((self.normalize(&raw), label))
    }

    /// Normalize an externally supplied raw image with this corpus's stats
    /// (used after augmentation on raw pixels).
    pub fn normalize<T: Scalar>(&self, raw: &[u8]) -> Vec<T> {
        assert_eq!(raw.len(), self.header.pixel_bytes());
        let plane = self.header.height * self.header.width;
        raw.iter()
            .enumerate()
            .map(|(i, &px)| {
                let c = i / plane;
                T::from_f64(
                    (px as f64 / 255.0 - self.header.mean[c] as f64) / self.header.std[c] as f64,
                )
            })
            .collect()
    }
}
