//! Binary tensor container.
//!
//! ```text
//! "DAST"           4 bytes
//! version          u16 LE (currently 1)
//! dtype            u8   (0 = f32, 1 = f64, 2 = u8)
//! rank             u8
//! extents          rank x u64 LE
//! payload          product(extents) elements, row-major, LE
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

pub const MAGIC: &[u8; 4] = b"DAST";
pub const VERSION: u16 = 1;

/// Scalar types that can be stored in a container.
pub trait Element: Copy + 'static {
    const DTYPE: DType;
    fn put(self, out: &mut Vec<u8>);
    fn get(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get(b: &[u8]) -> Self {
        f32::from_le_bytes(b.try_into().expect("4 bytes"))
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get(b: &[u8]) -> Self {
        f64::from_le_bytes(b.try_into().expect("8 bytes"))
    }
}

impl Element for u8 {
    const DTYPE: DType = DType::U8;
    fn put(self, out: &mut Vec<u8>) {
        out.push(self);
    }
    fn get(b: &[u8]) -> Self {
        b[0]
    }
}

/// A decoded container of any element type.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U8(Tensor<u8>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
            AnyTensor::U8(_) => DType::U8,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
            AnyTensor::U8(t) => t.shape(),
        }
    }

    /// Values widened to `f64`.
    pub fn to_f64(&self) -> Tensor<f64> {
        match self {
            AnyTensor::F32(t) => t.map(f64::from),
            AnyTensor::F64(t) => t.clone(),
            AnyTensor::U8(t) => t.map(f64::from),
        }
    }

    /// Values as `f32`; `f64` payloads are rounded.
    pub fn to_f32(&self) -> Tensor<f32> {
        match self {
            AnyTensor::F32(t) => t.clone(),
            AnyTensor::F64(t) => t.map(|v| v as f32),
            AnyTensor::U8(t) => t.map(f32::from),
        }
    }
}

pub fn encode<T: Element>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let rank =
        u8::try_from(t.rank()).map_err(|_| Error::Format(format!("rank {} does not fit the header", t.rank())))?;
    let mut out = Vec::with_capacity(8 + 8 * t.rank() + t.numel() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::DTYPE.code());
    out.push(rank);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.put(&mut out);
    }
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    let end = pos
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format(format!("truncated container: missing {what}")))?;
    let s = &bytes[*pos..end];
    *pos = end;
    Ok(s)
}

fn decode_payload<T: Element>(shape: Vec<usize>, payload: &[u8]) -> Result<Tensor<T>> {
    let size = T::DTYPE.size();
    Tensor::new(shape, payload.chunks_exact(size).map(T::get).collect())
}

pub fn decode(bytes: &[u8]) -> Result<AnyTensor> {
    let mut pos = 0;
    if take(bytes, &mut pos, 4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, not a DAST container".into()));
    }
    let version = u16::from_le_bytes(take(bytes, &mut pos, 2, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let code = take(bytes, &mut pos, 1, "dtype")?[0];
    let dtype = DType::from_code(code).ok_or_else(|| Error::Format(format!("unknown dtype code {code}")))?;
    let rank = take(bytes, &mut pos, 1, "rank")?[0] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let e = u64::from_le_bytes(take(bytes, &mut pos, 8, "extent")?.try_into().unwrap());
        shape.push(usize::try_from(e).map_err(|_| Error::Format(format!("extent {e} too large")))?);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .and_then(|n| n.checked_mul(dtype.size()))
        .ok_or_else(|| Error::Format(format!("shape {shape:?} overflows")))?;
    let payload = take(bytes, &mut pos, numel, "payload")?;
    if pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after payload",
            bytes.len() - pos
        )));
    }
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(decode_payload(shape, payload)?),
        DType::F64 => AnyTensor::F64(decode_payload(shape, payload)?),
        DType::U8 => AnyTensor::U8(decode_payload(shape, payload)?),
    })
}

pub fn save_tensor<T: Element>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(t)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_any(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Loads a container whose element type must be `T`.
pub fn load_tensor<T: Element>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let any = load_any(path)?;
    let found = any.dtype();
    let mismatch = || {
        Error::Format(format!(
            "{}: expected {:?} payload, found {found:?}",
            path.display(),
            T::DTYPE
        ))
    };
    // downcast through the matching variant
    let boxed: Box<dyn std::any::Any> = match any {
        AnyTensor::F32(t) => Box::new(t),
        AnyTensor::F64(t) => Box::new(t),
        AnyTensor::U8(t) => Box::new(t),
    };
    boxed.downcast::<Tensor<T>>().map(|b| *b).map_err(|_| mismatch())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2], vec![1u8, 2]).unwrap();
        let b = encode(&t).unwrap();
        assert_eq!(&b[..4], b"DAST");
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(b[6], 2);
        assert_eq!(b[7], 1);
        assert_eq!(&b[8..16], &2u64.to_le_bytes());
        assert_eq!(&b[16..], &[1, 2]);
    }

    #[test]
    fn scalar_round_trip() {
        let t = Tensor::scalar(-3.5f64);
        let b = encode(&t).unwrap();
        assert_eq!(b.len(), 8 + 8);
        assert_eq!(decode(&b).unwrap(), AnyTensor::F64(t));
    }

    #[test]
    fn large_f32_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.dast");
        let t = Tensor::from_fn(vec![12, 10_000], |i| ((i as f32) * 0.618).sin() * 1e3);
        save_tensor(&path, &t).unwrap();
        let back: Tensor<f32> = load_tensor(&path).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert!(back
            .data()
            .iter()
            .zip(t.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let t = Tensor::from_fn(vec![3, 2], |i| i as f32);
        let good = encode(&t).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode(&bad_magic), Err(Error::Format(m)) if m.contains("magic")));

        let truncated = &good[..good.len() - 1];
        assert!(matches!(decode(truncated), Err(Error::Format(m)) if m.contains("truncated")));

        let mut trailing = good.clone();
        trailing.push(0);
        assert!(decode(&trailing).is_err());

        let mut bad_dtype = good.clone();
        bad_dtype[6] = 9;
        assert!(decode(&bad_dtype).is_err());

        let mut bad_version = good;
        bad_version[4] = 2;
        assert!(decode(&bad_version).is_err());
        assert!(decode(b"DA").is_err());
    }

    #[test]
    fn dtype_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.dast");
        save_tensor(&path, &Tensor::from_fn(vec![4], |i| i as f64)).unwrap();
        assert!(load_tensor::<f32>(&path).is_err());
        assert!(load_tensor::<f64>(&path).is_ok());
        assert!(matches!(
            load_any(dir.path().join("missing.dast")),
            Err(Error::Io { .. })
        ));
    }

    fn shape() -> impl Strategy<Value = Vec<usize>> {
        prop::collection::vec(0usize..5, 0..=4)
    }

    proptest! {
        #[test]
        fn round_trip_all_dtypes(s in shape(), seed in any::<u64>()) {
            let n: usize = s.iter().product();
            let f = Tensor::from_fn(s.clone(), |i| f32::from_bits((seed as u32).wrapping_add((i as u32).wrapping_mul(2654435761)) & 0x7f7f_ffff));
            let d = Tensor::from_fn(s.clone(), |i| (seed as f64 + i as f64).sqrt() * -1.5);
            let u = Tensor::from_fn(s.clone(), |i| (seed as usize).wrapping_add(i) as u8);
            prop_assert_eq!(decode(&encode(&f).unwrap()).unwrap(), AnyTensor::F32(f));
            prop_assert_eq!(decode(&encode(&d).unwrap()).unwrap(), AnyTensor::F64(d));
            let bytes = encode(&u).unwrap();
            prop_assert_eq!(bytes.len(), 8 + 8 * s.len() + n);
            prop_assert_eq!(decode(&bytes).unwrap(), AnyTensor::U8(u));
        }
    }
}
