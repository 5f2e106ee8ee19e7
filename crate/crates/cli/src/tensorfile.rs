//! The `SATT` tensor file: a fixed little-endian header followed by the raw
//! row-major payload.
//!
//! ```text
//! magic   "SATT"            4 bytes
//! version u16 = 1
//! dtype   u8                0 = f64, 1 = u8
//! ndim    u8
//! dims    ndim x u32
//! payload prod(dims) x dtype size
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use satskip_core::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"SATT";
pub const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Dtype {
    F64 = 0,
    U8 = 1,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::U8 => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F64),
            1 => Ok(Dtype::U8),
            other => Err(Error::UnsupportedDtype(other)),
        }
    }
}

fn header(shape: &[usize], dtype: Dtype) -> Result<Vec<u8>> {
    let ndim = u8::try_from(shape.len()).map_err(|_| Error::Format(format!("{} axes", shape.len())))?;
    let mut out = Vec::with_capacity(8 + 4 * shape.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype as u8);
    out.push(ndim);
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    Ok(out)
}

pub fn encode(t: &Tensor) -> Result<Vec<u8>> {
    let mut out = header(t.shape(), Dtype::F64)?;
    out.reserve(8 * t.len());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// 8-bit encoding; every value must be an integer in `0..=255`.
pub fn encode_u8(t: &Tensor) -> Result<Vec<u8>> {
    let mut out = header(t.shape(), Dtype::U8)?;
    for &v in t.data() {
        if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
            return Err(Error::Format(format!("value {v} does not fit in u8")));
        }
        out.push(v as u8);
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let have = self.buf.len() - self.pos;
        if have < n {
            return Err(Error::Truncated {
                expected: self.pos + n,
                found: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Decodes one tensor from the start of `bytes`, returning it together
/// with the number of bytes consumed.
pub fn decode_prefix(bytes: &[u8]) -> Result<(Tensor, usize)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::BadMagic(magic.try_into().expect("4 bytes")));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dtype = Dtype::from_code(r.u8()?)?;
    let ndim = r.u8()? as usize;
    let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    let payload = r.take(n * dtype.size())?;
    let data = match dtype {
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
        Dtype::U8 => payload.iter().map(|&b| f64::from(b)).collect(),
    };
    Ok((Tensor::new(shape, data)?, r.pos))
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let (t, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(Error::TrailingBytes(bytes.len() - used));
    }
    Ok(t)
}

/// Writes through a temporary file in the destination directory and
/// renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let io = |e| Error::io(path, e);
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    write_atomic(path, &encode(t)?)
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    decode(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use satskip_core::tensor_from;

    fn sample() -> Tensor {
        let vals: Vec<f64> = (0..12).map(|i| (i as f64 - 5.5) * 0.37).collect();
        tensor_from(&[3, 4], &vals).unwrap()
    }

    #[test]
    fn layout_is_fixed() {
        let bytes = encode(&tensor_from(&[2], &[1.0, -2.0]).unwrap()).unwrap();
        assert_eq!(&bytes[..4], b"SATT");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 1]);
        assert_eq!(&bytes[8..12], &[2, 0, 0, 0]);
        assert_eq!(&bytes[12..20], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 12 + 16);
    }

    #[test]
    fn roundtrip_bits() {
        let t = sample();
        let back = decode(&encode(&t).unwrap()).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn u8_payload() {
        let t = tensor_from(&[3], &[0.0, 128.0, 255.0]).unwrap();
        let bytes = encode_u8(&t).unwrap();
        assert_eq!(&bytes[bytes.len() - 3..], &[0, 128, 255]);
        assert_eq!(decode(&bytes).unwrap(), t);
        assert!(encode_u8(&tensor_from(&[1], &[0.5]).unwrap()).is_err());
    }

    #[test]
    fn distinct_errors() {
        let mut bytes = encode(&sample()).unwrap();
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode(&bad), Err(Error::BadMagic(m)) if &m == b"XXXX"));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode(&bad), Err(Error::UnsupportedVersion(2))));
        let short = &bytes[..bytes.len() - 1];
        assert!(matches!(decode(short), Err(Error::Truncated { .. })));
        bytes.push(0);
        assert!(matches!(decode(&bytes), Err(Error::TrailingBytes(1))));
    }
}
