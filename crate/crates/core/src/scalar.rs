//! Element type abstraction: the whole pipeline is generic over `f32`
//! (default) and `f64` (gradient-check and high-precision oracle mode).

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

/// Array dtype tag as persisted in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn byte_width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(Dtype::F32),
            2 => Some(Dtype::F64),
            _ => None,
        }
    }
}

/// Floating-point element of the tensor machinery.
///
/// `from_f64`/`to_f64` are used at precision boundaries (RNG draws, schedule
/// math, metrics); inner loops stay in `Self`.
pub trait Scalar:
    Float + Sum + Default + Debug + Display + Send + Sync + 'static
{
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// Exact little-endian encoding; must round-trip bit-for-bit.
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn le_round_trip_is_bit_exact() {
        let vals = [0.0f32, -0.0, 1.5, f32::MIN_POSITIVE, -123.456, f32::NAN];
        for v in vals {
            let mut buf = Vec::new();
            v.write_le(&mut buf);
            let back = f32::read_le(&buf);
            assert_eq!(v.to_bits(), back.to_bits());
        }
        let mut buf = Vec::new();
        (-std::f64::consts::PI).write_le(&mut buf);
        assert_eq!(f64::read_le(&buf).to_bits(), (-std::f64::consts::PI).to_bits());
    }

    #[test]
    fn dtype_tags_round_trip() {
        for d in [Dtype::F32, Dtype::F64] {
            assert_eq!(Dtype::from_tag(d.tag()), Some(d));
        }
        assert_eq!(Dtype::from_tag(0), None);
    }
}
