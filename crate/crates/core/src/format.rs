//! Little-endian binary containers.
//!
//! * SSEG holds one tensor: `"SSEG"`, `u32` version (1), `u8` dtype tag
//!   (0 = f32, 1 = u8), `u32` rank, `rank × u32` dims, row-major payload.
//! * PSEG holds named f32 arrays: `"PSEG"`, `u32` version (1), then per array
//!   `u16` name length, name bytes, `u32` rank, `rank × u32` dims, f32
//!   payload. A zero name length terminates the array list early so that a
//!   trailer may follow (used by training checkpoints).

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

pub const SSEG_MAGIC: &[u8; 4] = b"SSEG";
pub const PSEG_MAGIC: &[u8; 4] = b"PSEG";
pub const SSEG_VERSION: u32 = 1;
pub const PSEG_VERSION: u32 = 1;
pub const MAX_SSEG_RANK: usize = 4;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },
    #[error("unknown dtype tag {0}")]
    UnknownDtype(u8),
    #[error("rank {0} exceeds the maximum of {MAX_SSEG_RANK}")]
    Rank(usize),
    #[error("truncated {0}")]
    Truncated(String),
    #[error("invalid {field}: {detail}")]
    Invalid { field: String, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

pub type Result<T, E = FormatError> = std::result::Result<T, E>;

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| FormatError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| FormatError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Byte cursor whose errors name the field being read.
pub(crate) struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.pos >= self.buf.len()
    }

    pub(crate) fn bytes(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(FormatError::Truncated(field.to_string()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.bytes(1, field)?[0])
    }

    pub(crate) fn u16(&mut self, field: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(2, field)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4, field)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8, field)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self, field: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8, field)?.try_into().unwrap()))
    }

    pub(crate) fn f32s(&mut self, n: usize, field: &str) -> Result<Vec<f32>> {
        let raw = self.bytes(
            n.checked_mul(4).ok_or_else(|| FormatError::Truncated(field.into()))?,
            field,
        )?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let found = self.bytes(4, "magic").map_err(|_| FormatError::BadMagic {
            expected: String::from_utf8_lossy(expected).into(),
            found: String::from_utf8_lossy(&self.buf[self.pos..]).into(),
        })?;
        if found != expected {
            return Err(FormatError::BadMagic {
                expected: String::from_utf8_lossy(expected).into(),
                found: String::from_utf8_lossy(found).into(),
            });
        }
        Ok(())
    }

    fn dims(&mut self, rank: usize, field: &str) -> Result<Vec<usize>> {
        (0..rank)
            .map(|i| self.u32(&format!("{field} dim {i}")).map(|d| d as usize))
            .collect()
    }
}

fn checked_numel(dims: &[usize], field: &str) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| FormatError::Invalid {
            field: field.to_string(),
            detail: format!("dimensions {dims:?} overflow"),
        })
}

// ---------------------------------------------------------------- SSEG

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl ArrayData {
    pub fn dtype_tag(&self) -> u8 {
        match self {
            ArrayData::F32(_) => 0,
            ArrayData::U8(_) => 1,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub dims: Vec<usize>,
    pub data: ArrayData,
}

impl TensorFile {
    pub fn f32(dims: Vec<usize>, data: Vec<f32>) -> Self {
        Self {
            dims,
            data: ArrayData::F32(data),
        }
    }

    pub fn u8(dims: Vec<usize>, data: Vec<u8>) -> Self {
        Self {
            dims,
            data: ArrayData::U8(data),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        if self.dims.len() > MAX_SSEG_RANK {
            return Err(FormatError::Rank(self.dims.len()));
        }
        let n = checked_numel(&self.dims, "dims")?;
        if n != self.data.len() {
            return Err(FormatError::Invalid {
                field: "payload".into(),
                detail: format!("dims {:?} need {n} elements, got {}", self.dims, self.data.len()),
            });
        }
        let mut out = Vec::with_capacity(13 + 4 * self.dims.len() + 4 * n);
        out.extend_from_slice(SSEG_MAGIC);
        out.extend_from_slice(&SSEG_VERSION.to_le_bytes());
        out.push(self.data.dtype_tag());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &self.data {
            ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::U8(v) => out.extend_from_slice(v),
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor::new(bytes);
        c.magic(SSEG_MAGIC)?;
        let version = c.u32("version")?;
        if version != SSEG_VERSION {
            return Err(FormatError::Version {
                expected: SSEG_VERSION,
                found: version,
            });
        }
        let tag = c.u8("dtype tag")?;
        if tag > 1 {
            return Err(FormatError::UnknownDtype(tag));
        }
        let rank = c.u32("rank")? as usize;
        if rank > MAX_SSEG_RANK {
            return Err(FormatError::Rank(rank));
        }
        let dims = c.dims(rank, "shape")?;
        let n = checked_numel(&dims, "shape")?;
        let data = match tag {
            0 => ArrayData::F32(c.f32s(n, "payload")?),
            _ => ArrayData::U8(c.bytes(n, "payload")?.to_vec()),
        };
        if !c.is_empty() {
            return Err(FormatError::Invalid {
                field: "payload".into(),
                detail: "trailing bytes after payload".into(),
            });
        }
        Ok(Self { dims, data })
    }
}

pub fn save_tensor_file(path: impl AsRef<Path>, tensor: &TensorFile) -> Result<()> {
    write_file(path.as_ref(), &tensor.encode()?)
}

pub fn load_tensor_file(path: impl AsRef<Path>) -> Result<TensorFile> {
    TensorFile::decode(&read_file(path.as_ref())?)
}

// ---------------------------------------------------------------- PSEG

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

pub(crate) fn write_pseg_header(out: &mut Vec<u8>) {
    out.extend_from_slice(PSEG_MAGIC);
    out.extend_from_slice(&PSEG_VERSION.to_le_bytes());
}

pub(crate) fn write_pseg_array(out: &mut Vec<u8>, a: &NamedArray) -> Result<()> {
    let name = a.name.as_bytes();
    if name.is_empty() || name.len() > u16::MAX as usize {
        return Err(FormatError::Invalid {
            field: "array name".into(),
            detail: format!("length {} out of range", name.len()),
        });
    }
    if checked_numel(&a.dims, &a.name)? != a.data.len() {
        return Err(FormatError::Invalid {
            field: format!("array '{}'", a.name),
            detail: format!("dims {:?} disagree with {} values", a.dims, a.data.len()),
        });
    }
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name);
    out.extend_from_slice(&(a.dims.len() as u32).to_le_bytes());
    for &d in &a.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    a.data.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
    Ok(())
}

/// Reads the header and arrays up to end of input or a zero-length name.
pub(crate) fn read_pseg_arrays(c: &mut Cursor<'_>) -> Result<Vec<NamedArray>> {
    c.magic(PSEG_MAGIC)?;
    let version = c.u32("version")?;
    if version != PSEG_VERSION {
        return Err(FormatError::Version {
            expected: PSEG_VERSION,
            found: version,
        });
    }
    let mut arrays = Vec::new();
    while !c.is_empty() {
        let idx = arrays.len();
        let len = c.u16(&format!("name length of array #{idx}"))? as usize;
        if len == 0 {
            break;
        }
        let raw = c.bytes(len, &format!("name of array #{idx}"))?;
        let name = String::from_utf8(raw.to_vec()).map_err(|_| FormatError::Invalid {
            field: format!("name of array #{idx}"),
            detail: "not UTF-8".into(),
        })?;
        let rank = c.u32(&format!("rank of array '{name}'"))? as usize;
        if rank > 8 {
            return Err(FormatError::Invalid {
                field: format!("rank of array '{name}'"),
                detail: format!("{rank} is implausible"),
            });
        }
        let dims = c.dims(rank, &format!("array '{name}'"))?;
        let n = checked_numel(&dims, &format!("array '{name}'"))?;
        let data = c.f32s(n, &format!("payload of array '{name}'"))?;
        arrays.push(NamedArray { name, dims, data });
    }
    Ok(arrays)
}

pub fn encode_pseg(arrays: &[NamedArray]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    write_pseg_header(&mut out);
    for a in arrays {
        write_pseg_array(&mut out, a)?;
    }
    Ok(out)
}

pub fn decode_pseg(bytes: &[u8]) -> Result<Vec<NamedArray>> {
    read_pseg_arrays(&mut Cursor::new(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sseg_layout() {
        let t = TensorFile::u8(vec![2, 1], vec![7, 9]);
        let b = t.encode().unwrap();
        assert_eq!(&b[..4], b"SSEG");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(b[8], 1);
        assert_eq!(u32::from_le_bytes(b[9..13].try_into().unwrap()), 2);
        assert_eq!(b.len(), 13 + 8 + 2);
        assert_eq!(&b[21..], &[7, 9]);
    }

    #[test]
    fn sseg_errors() {
        let good = TensorFile::f32(vec![3], vec![1.0, 2.0, 3.0]).encode().unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(TensorFile::decode(&bad).unwrap_err().to_string().contains("bad magic"));
        let mut bad = good.clone();
        bad[8] = 7;
        assert!(matches!(TensorFile::decode(&bad), Err(FormatError::UnknownDtype(7))));
        let err = TensorFile::decode(&good[..good.len() - 1]).unwrap_err();
        assert_eq!(err.to_string(), "truncated payload");
        assert!(TensorFile::f32(vec![1; 5], vec![1.0]).encode().is_err());
    }

    #[test]
    fn pseg_truncation_names_array() {
        let arrays = vec![
            NamedArray {
                name: "a".into(),
                dims: vec![2],
                data: vec![1.0, 2.0],
            },
            NamedArray {
                name: "head.prototypes".into(),
                dims: vec![2, 3],
                data: vec![0.5; 6],
            },
        ];
        let b = encode_pseg(&arrays).unwrap();
        assert_eq!(decode_pseg(&b).unwrap(), arrays);
        let err = decode_pseg(&b[..b.len() - 3]).unwrap_err().to_string();
        assert!(err.contains("head.prototypes"), "{err}");
        let mut v = b.clone();
        v[4] = 2;
        assert!(matches!(decode_pseg(&v), Err(FormatError::Version { found: 2, .. })));
    }

    proptest! {
        #[test]
        fn sseg_f32_roundtrip(dims in prop::collection::vec(1usize..5, 0..=4), seed in any::<u32>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n).map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32 * 97) & 0x7f7f_ffff)).collect();
            let t = TensorFile::f32(dims, data);
            let back = TensorFile::decode(&t.encode().unwrap()).unwrap();
            prop_assert_eq!(back, t);
        }

        #[test]
        fn sseg_u8_roundtrip(data in prop::collection::vec(any::<u8>(), 1..64)) {
            let t = TensorFile::u8(vec![data.len()], data);
            prop_assert_eq!(TensorFile::decode(&t.encode().unwrap()).unwrap(), t);
        }
    }
}
