//! Dense row-major tensors and the `MRT1` binary container.
//!
//! Layout of an `MRT1` file, all integers little-endian:
//!
//! ```text
//! magic "MRT1" | dtype u8 (0 = REAL32, 1 = FIX16) | frac_bits u8 | rank u16
//! | rank x extent u32 | payload (REAL32: f32 bits, FIX16: i16 two's complement)
//! ```

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MeritError, Result};

pub const MAGIC: &[u8; 4] = b"MRT1";
pub const DEFAULT_FRAC_BITS: u8 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DType {
    Real32,
    Fix16 { frac_bits: u8 },
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::Real32 => 0,
            DType::Fix16 { .. } => 1,
        }
    }

    pub fn frac_bits(self) -> u8 {
        match self {
            DType::Real32 => 0,
            DType::Fix16 { frac_bits } => frac_bits,
        }
    }

    /// Storage size of one element in bytes.
    pub fn word_bytes(self) -> usize {
        match self {
            DType::Real32 => 4,
            DType::Fix16 { .. } => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::Real32 => "REAL32",
            DType::Fix16 { .. } => "FIX16",
        }
    }
}

/// One stored element, tagged by representation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Scalar {
    Real(f32),
    /// Raw two's-complement fixed-point word.
    Fixed(i16),
}

#[derive(Clone, Debug, PartialEq)]
enum Storage {
    Real32(Vec<f32>),
    Fix16(Vec<i16>),
}

/// Element types a tensor payload can be borrowed as.
pub trait Element: Copy + Send + Sync + 'static {
    fn slice(t: &Tensor) -> Option<&[Self]>;
    fn build(shape: Vec<usize>, dtype: DType, data: Vec<Self>) -> Result<Tensor>;
}

impl Element for f32 {
    fn slice(t: &Tensor) -> Option<&[f32]> {
        match &t.data {
            Storage::Real32(v) => Some(v),
            Storage::Fix16(_) => None,
        }
    }

    fn build(shape: Vec<usize>, _dtype: DType, data: Vec<f32>) -> Result<Tensor> {
        Tensor::from_f32(shape, data)
    }
}

impl Element for i16 {
    fn slice(t: &Tensor) -> Option<&[i16]> {
        match &t.data {
            Storage::Fix16(v) => Some(v),
            Storage::Real32(_) => None,
        }
    }

    fn build(shape: Vec<usize>, dtype: DType, data: Vec<i16>) -> Result<Tensor> {
        Tensor::from_fix16(shape, dtype.frac_bits(), data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    dtype: DType,
    data: Storage,
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() {
        return Err(MeritError::ShapeMismatch("rank must be at least 1".into()));
    }
    if shape.contains(&0) {
        return Err(MeritError::ShapeMismatch(format!("zero extent in {shape:?}")));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(MeritError::ShapeMismatch(format!("shape {shape:?} holds {n} elements, data has {len}")));
    }
    Ok(())
}

/// Round to nearest (ties away from zero) and saturate into i16.
pub fn quantize(value: f64, frac_bits: u8) -> i16 {
    let scaled = (value * f64::from(1u32 << frac_bits)).round();
    scaled.clamp(f64::from(i16::MIN), f64::from(i16::MAX)) as i16
}

pub fn dequantize(raw: i16, frac_bits: u8) -> f64 {
    f64::from(raw) / f64::from(1u32 << frac_bits)
}

impl Tensor {
    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        check_shape(&shape, data.len())?;
        Ok(Tensor { shape, dtype: DType::Real32, data: Storage::Real32(data) })
    }

    pub fn from_fix16(shape: Vec<usize>, frac_bits: u8, raw: Vec<i16>) -> Result<Self> {
        if frac_bits > 15 {
            return Err(MeritError::BadParams(format!("frac_bits {frac_bits} > 15")));
        }
        check_shape(&shape, raw.len())?;
        Ok(Tensor { shape, dtype: DType::Fix16 { frac_bits }, data: Storage::Fix16(raw) })
    }

    /// Builds a tensor of `dtype` from real values, quantizing for FIX16.
    pub fn from_values(shape: Vec<usize>, dtype: DType, values: &[f64]) -> Result<Self> {
        match dtype {
            DType::Real32 => Self::from_f32(shape, values.iter().map(|&v| v as f32).collect()),
            DType::Fix16 { frac_bits } => {
                Self::from_fix16(shape, frac_bits, values.iter().map(|&v| quantize(v, frac_bits)).collect())
            }
        }
    }

    pub fn zeros(shape: Vec<usize>, dtype: DType) -> Result<Self> {
        let n = shape.iter().product();
        match dtype {
            DType::Real32 => Self::from_f32(shape, vec![0.0; n]),
            DType::Fix16 { frac_bits } => Self::from_fix16(shape, frac_bits, vec![0; n]),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn len(&self) -> usize {
        match &self.data {
            Storage::Real32(v) => v.len(),
            Storage::Fix16(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_slice<T: Element>(&self) -> Option<&[T]> {
        T::slice(self)
    }

    /// Row-major offset of `idx`.
    pub fn offset(&self, idx: &[usize]) -> Result<usize> {
        row_major_offset(&self.shape, idx).ok_or_else(|| MeritError::OutOfRange {
            index: idx.iter().map(|&i| i as i64).collect(),
            shape: self.shape.clone(),
        })
    }

    pub fn at(&self, idx: &[usize]) -> Result<Scalar> {
        let off = self.offset(idx)?;
        Ok(self.scalar_at_offset(off))
    }

    pub fn scalar_at_offset(&self, off: usize) -> Scalar {
        match &self.data {
            Storage::Real32(v) => Scalar::Real(v[off]),
            Storage::Fix16(v) => Scalar::Fixed(v[off]),
        }
    }

    /// Element value as a real number (FIX16 is dequantized).
    pub fn value(&self, idx: &[usize]) -> Result<f64> {
        let off = self.offset(idx)?;
        Ok(self.value_at_offset(off))
    }

    pub fn value_at_offset(&self, off: usize) -> f64 {
        match &self.data {
            Storage::Real32(v) => f64::from(v[off]),
            Storage::Fix16(v) => dequantize(v[off], self.dtype.frac_bits()),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.value_at_offset(i)).collect()
    }

    /// Same payload, new shape with the same element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        check_shape(&shape, self.len())?;
        Ok(Tensor { shape, dtype: self.dtype, data: self.data.clone() })
    }

    /// Bitwise equality of payloads (distinguishes -0.0 and NaN payloads).
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        if self.shape != other.shape || self.dtype != other.dtype {
            return false;
        }
        match (&self.data, &other.data) {
            (Storage::Real32(a), Storage::Real32(b)) => a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
            (Storage::Fix16(a), Storage::Fix16(b)) => a == b,
            _ => false,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.rank() + self.len() * self.dtype.word_bytes());
        out.extend_from_slice(MAGIC);
        out.push(self.dtype.code());
        out.push(self.dtype.frac_bits());
        out.extend_from_slice(&(self.rank() as u16).to_le_bytes());
        for &e in &self.shape {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        match &self.data {
            Storage::Real32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Storage::Fix16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Tensor> {
        let truncated = |expected: usize| MeritError::TruncatedPayload { expected, found: bytes.len() };
        if bytes.len() < 4 {
            return Err(truncated(8));
        }
        if &bytes[..4] != MAGIC {
            return Err(MeritError::BadMagic);
        }
        if bytes.len() < 8 {
            return Err(truncated(8));
        }
        let frac_bits = bytes[5];
        let dtype = match bytes[4] {
            0 => DType::Real32,
            1 => DType::Fix16 { frac_bits },
            other => return Err(MeritError::UnknownDtype(other)),
        };
        let rank = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
        let header = 8 + 4 * rank;
        if bytes.len() < header {
            return Err(truncated(header));
        }
        let shape: Vec<usize> =
            bytes[8..header].chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize).collect();
        if rank == 0 || shape.contains(&0) {
            return Err(MeritError::ShapeMismatch(format!("invalid shape {shape:?}")));
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| MeritError::ShapeMismatch("element count overflows".into()))?;
        let expected = header + count * dtype.word_bytes();
        if bytes.len() < expected {
            return Err(truncated(expected));
        }
        if bytes.len() > expected {
            return Err(MeritError::ShapeMismatch(format!("{} trailing bytes after payload", bytes.len() - expected)));
        }
        let payload = &bytes[header..];
        match dtype {
            DType::Real32 => Tensor::from_f32(
                shape,
                payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect(),
            ),
            DType::Fix16 { frac_bits } => Tensor::from_fix16(
                shape,
                frac_bits,
                payload.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]])).collect(),
            ),
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Tensor> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Tensor::from_bytes(&bytes)
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Tensor> {
        Tensor::read_from(File::open(path)?)
    }
}

pub fn row_major_offset(shape: &[usize], idx: &[usize]) -> Option<usize> {
    if idx.len() != shape.len() {
        return None;
    }
    let mut off = 0usize;
    for (&i, &e) in idx.iter().zip(shape) {
        if i >= e {
            return None;
        }
        off = off * e + i;
    }
    Some(off)
}

/// Inverse of [`row_major_offset`]; writes the multi-index into `out`.
pub fn unravel(shape: &[usize], mut flat: usize, out: &mut [usize]) {
    for (o, &e) in out.iter_mut().zip(shape).rev() {
        *o = flat % e;
        flat /= e;
    }
}

/// Row-major enumeration of every index in a shape. An empty shape
/// yields exactly one (empty) index.
#[derive(Clone, Debug)]
pub struct NdRange {
    shape: Vec<usize>,
    next: Option<Vec<usize>>,
}

impl NdRange {
    pub fn new(shape: &[usize]) -> Self {
        let next = if shape.contains(&0) { None } else { Some(vec![0; shape.len()]) };
        NdRange { shape: shape.to_vec(), next }
    }
}

impl Iterator for NdRange {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let current = self.next.take()?;
        let mut succ = current.clone();
        let mut carried = true;
        for d in (0..succ.len()).rev() {
            succ[d] += 1;
            if succ[d] < self.shape[d] {
                carried = false;
                break;
            }
            succ[d] = 0;
        }
        if !carried {
            self.next = Some(succ);
        }
        Some(current)
    }
}

pub fn ndrange(shape: &[usize]) -> NdRange {
    NdRange::new(shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn at_is_row_major() {
        let t = Tensor::from_f32(vec![2, 3], vec![0., 1., 2., 3., 4., 5.]).unwrap();
        assert_eq!(t.at(&[1, 0]).unwrap(), Scalar::Real(3.0));
        let c = Tensor::from_f32(vec![4], vec![7.; 4]).unwrap();
        assert_eq!(c.at(&[2]).unwrap(), Scalar::Real(7.0));
        let l = Tensor::from_f32(vec![2, 2], vec![1., 2., 3., 4.]).unwrap();
        assert_eq!(l.at(&[1, 1]).unwrap(), Scalar::Real(4.0));
    }

    #[test]
    fn at_out_of_range() {
        let t = Tensor::zeros(vec![2, 3], DType::Real32).unwrap();
        let err = t.at(&[0, 3]).unwrap_err();
        assert_eq!(err.code(), "OUT_OF_RANGE");
        assert_eq!(t.at(&[0]).unwrap_err().code(), "OUT_OF_RANGE");
    }

    #[test]
    fn identity_round_trip() {
        let mut data = vec![0f32; 9];
        for i in 0..3 {
            data[i * 4] = 1.0;
        }
        let t = Tensor::from_f32(vec![3, 3], data).unwrap();
        let back = Tensor::from_bytes(&t.to_bytes()).unwrap();
        assert!(back.bit_eq(&t));
    }

    #[test]
    fn fix16_encoding() {
        let t = Tensor::from_values(vec![1], DType::Fix16 { frac_bits: 8 }, &[1.5]).unwrap();
        let bytes = t.to_bytes();
        assert_eq!(&bytes[bytes.len() - 2..], &[0x80, 0x01]);
        let back = Tensor::from_bytes(&bytes).unwrap();
        assert_eq!(back.value(&[0]).unwrap(), 1.5);
        assert_eq!(back.at(&[0]).unwrap(), Scalar::Fixed(0x0180));
    }

    #[test]
    fn io_errors() {
        let t = Tensor::zeros(vec![2, 2], DType::Real32).unwrap();
        let mut bytes = t.to_bytes();
        bytes.pop();
        assert_eq!(Tensor::from_bytes(&bytes).unwrap_err().code(), "TRUNCATED_PAYLOAD");

        let mut bad = t.to_bytes();
        bad[0] = b'X';
        assert_eq!(Tensor::from_bytes(&bad).unwrap_err().code(), "BAD_MAGIC");

        let mut dt = t.to_bytes();
        dt[4] = 7;
        assert_eq!(Tensor::from_bytes(&dt).unwrap_err().code(), "UNKNOWN_DTYPE");

        assert_eq!(Tensor::from_bytes(b"MR").unwrap_err().code(), "TRUNCATED_PAYLOAD");
    }

    #[test]
    fn quantize_saturates() {
        assert_eq!(quantize(1000.0, 8), i16::MAX);
        assert_eq!(quantize(-1000.0, 8), i16::MIN);
        assert_eq!(quantize(-0.5, 8), -128);
    }

    #[test]
    fn invalid_shapes_rejected() {
        assert!(Tensor::from_f32(vec![], vec![]).is_err());
        assert!(Tensor::from_f32(vec![2, 0], vec![]).is_err());
        assert!(Tensor::from_f32(vec![2, 2], vec![1.0]).is_err());
    }

    #[test]
    fn ndrange_visits_each_offset_once_in_order() {
        let shape = [2, 3, 4];
        let t = Tensor::zeros(shape.to_vec(), DType::Real32).unwrap();
        let offsets: Vec<usize> = ndrange(&shape).map(|i| t.offset(&i).unwrap()).collect();
        assert_eq!(offsets, (0..24).collect::<Vec<_>>());
        assert_eq!(ndrange(&[]).count(), 1);
    }
}
