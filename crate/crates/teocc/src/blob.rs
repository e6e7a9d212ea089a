//! The "TEOC" tensor container.
//!
//! Layout: magic `TEOC`, format version `u16`, dtype code `u8`, rank `u8`,
//! `rank` dims as `u32`, then the C-order payload. Everything is little
//! endian.

use std::path::Path;

use crate::error::{io_err, parse_err, Error, Result};

pub const MAGIC: [u8; 4] = *b"TEOC";
pub const VERSION: u16 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_I32: u8 = 1;
const DTYPE_F64: u8 = 2;

#[derive(Clone, Debug, PartialEq)]
pub enum BlobData {
    F32(Vec<f32>),
    I32(Vec<i32>),
    F64(Vec<f64>),
}

impl BlobData {
    pub fn len(&self) -> usize {
        match self {
            BlobData::F32(v) => v.len(),
            BlobData::I32(v) => v.len(),
            BlobData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn code(&self) -> u8 {
        match self {
            BlobData::F32(_) => DTYPE_F32,
            BlobData::I32(_) => DTYPE_I32,
            BlobData::F64(_) => DTYPE_F64,
        }
    }

    fn dtype_name(&self) -> &'static str {
        match self {
            BlobData::F32(_) => "f32",
            BlobData::I32(_) => "i32",
            BlobData::F64(_) => "f64",
        }
    }
}

fn element_size(code: u8) -> Option<usize> {
    match code {
        DTYPE_F32 | DTYPE_I32 => Some(4),
        DTYPE_F64 => Some(8),
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub dims: Vec<usize>,
    pub data: BlobData,
}

impl Blob {
    pub fn new(dims: Vec<usize>, data: BlobData) -> std::result::Result<Self, String> {
        if dims.len() > u8::MAX as usize || dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(format!("dims {:?} not representable", dims));
        }
        if dims.iter().product::<usize>() != data.len() {
            return Err(format!("dims {:?} hold {} elements, payload has {}", dims, dims.iter().product::<usize>(), data.len()));
        }
        Ok(Self { dims, data })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.dims.len() + 8 * self.data.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.data.code());
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &self.data {
            BlobData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            BlobData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            BlobData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    /// Parses `bytes`; `path` only labels errors.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let truncated = |expected: usize| Error::Truncated { path: path.to_path_buf(), expected, found: bytes.len() };
        if bytes.len() < 8 {
            return Err(if bytes.len() >= 4 && bytes[..4] != MAGIC {
                Error::BadMagic { path: path.to_path_buf() }
            } else {
                truncated(8)
            });
        }
        if bytes[..4] != MAGIC {
            return Err(Error::BadMagic { path: path.to_path_buf() });
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::UnsupportedVersion { path: path.to_path_buf(), version: version.to_string() });
        }
        let code = bytes[6];
        let size = element_size(code).ok_or(Error::UnknownDtype { path: path.to_path_buf(), code })?;
        let rank = bytes[7] as usize;
        let header = 8 + 4 * rank;
        if bytes.len() < header {
            return Err(truncated(header));
        }
        let dims: Vec<usize> = bytes[8..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect();
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| parse_err(path, "dims", format!("{:?} overflow", dims)))?;
        let expected = n.checked_mul(size).and_then(|p| p.checked_add(header)).ok_or_else(|| parse_err(path, "dims", "payload size overflows"))?;
        if bytes.len() != expected {
            return Err(if bytes.len() < expected { truncated(expected) } else { parse_err(path, "payload", format!("{} trailing bytes", bytes.len() - expected)) });
        }
        let payload = &bytes[header..];
        let data = match code {
            DTYPE_F32 => BlobData::F32(payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            DTYPE_I32 => BlobData::I32(payload.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect()),
            _ => BlobData::F64(payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
        };
        Ok(Self { dims, data })
    }

    fn wrong_dtype(&self, path: &Path, want: &str) -> Error {
        parse_err(path, "dtype", format!("expected {}, found {}", want, self.data.dtype_name()))
    }

    pub fn into_f32(self, path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
        match self.data {
            BlobData::F32(v) => Ok((self.dims, v)),
            _ => Err(self.wrong_dtype(path, "f32")),
        }
    }

    pub fn into_i32(self, path: &Path) -> Result<(Vec<usize>, Vec<i32>)> {
        match self.data {
            BlobData::I32(v) => Ok((self.dims, v)),
            _ => Err(self.wrong_dtype(path, "i32")),
        }
    }

    pub fn into_f64(self, path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
        match self.data {
            BlobData::F64(v) => Ok((self.dims, v)),
            _ => Err(self.wrong_dtype(path, "f64")),
        }
    }
}

pub fn write_blob(path: &Path, blob: &Blob) -> Result<()> {
    std::fs::write(path, blob.encode()).map_err(io_err(path))
}

pub fn read_blob(path: &Path) -> Result<Blob> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Blob::decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("x.teoc")
    }

    #[test]
    fn header_layout() {
        let b = Blob::new(vec![2, 1], BlobData::I32(vec![7, -1])).unwrap();
        let bytes = b.encode();
        assert_eq!(&bytes[..4], b"TEOC");
        assert_eq!(&bytes[4..8], &[1, 0, 1, 2]);
        assert_eq!(&bytes[8..16], &[2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&bytes[16..], &[7, 0, 0, 0, 255, 255, 255, 255]);
    }

    #[test]
    fn round_trips_every_dtype() {
        for data in [BlobData::F32(vec![1.5, -0.0, f32::MIN_POSITIVE]), BlobData::I32(vec![i32::MIN, 0, 3]), BlobData::F64(vec![0.1, 1e300, -2.5])] {
            let b = Blob::new(vec![3], data).unwrap();
            assert_eq!(Blob::decode(&b.encode(), p()).unwrap(), b);
        }
        let scalar = Blob::new(vec![], BlobData::F64(vec![4.0])).unwrap();
        assert_eq!(Blob::decode(&scalar.encode(), p()).unwrap(), scalar);
    }

    #[test]
    fn truncation_names_expected_size() {
        let b = Blob::new(vec![4], BlobData::F32(vec![0.0; 4])).unwrap().encode();
        match Blob::decode(&b[..20], p()) {
            Err(Error::Truncated { expected, found, path }) => {
                assert_eq!((expected, found), (28, 20));
                assert!(Error::Truncated { expected, found, path }.to_string().contains("x.teoc"));
            }
            other => panic!("{:?}", other),
        }
        assert!(matches!(Blob::decode(&b[..6], p()), Err(Error::Truncated { .. })));
    }

    #[test]
    fn rejects_bad_headers() {
        let mut b = Blob::new(vec![1], BlobData::F32(vec![0.0])).unwrap().encode();
        b[4] = 9;
        assert!(matches!(Blob::decode(&b, p()), Err(Error::UnsupportedVersion { .. })));
        b[4] = 1;
        b[6] = 5;
        assert!(matches!(Blob::decode(&b, p()), Err(Error::UnknownDtype { code: 5, .. })));
        b[0] = b'X';
        assert!(matches!(Blob::decode(&b, p()), Err(Error::BadMagic { .. })));
        assert!(Blob::new(vec![2, 2], BlobData::F32(vec![0.0; 3])).is_err());
    }
}
