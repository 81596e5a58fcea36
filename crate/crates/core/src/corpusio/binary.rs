//! Little-endian binary formats: a plain `f64` matrix file and a container of
//! named tensors with a text metadata block.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{LidError, Result};

pub const MATRIX_MAGIC: &[u8; 4] = b"FVM1";
pub const CONTAINER_MAGIC: &[u8; 4] = b"LRMD";
pub const FORMAT_VERSION: u32 = 1;

/// Writes via a temporary sibling and renames, so readers never see a
/// partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| LidError::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes).map_err(|e| LidError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| LidError::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| LidError::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    source: &'a str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], source: &'a str) -> Self {
        Self { bytes, pos: 0, source }
    }

    fn fail(&self, reason: String) -> LidError {
        LidError::Format {
            path: self.source.to_string(),
            offset: self.pos as u64,
            reason,
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let remaining = self.bytes.len() - self.pos;
        if n > remaining {
            return Err(self.fail(format!("truncated {what}: expected {n} bytes, found {remaining}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != want {
            self.pos -= 4;
            return Err(self.fail(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(want)
            )));
        }
        Ok(())
    }

    fn version(&mut self) -> Result<()> {
        let v = self.u32("version")?;
        if v != FORMAT_VERSION {
            self.pos -= 4;
            return Err(self.fail(format!("unsupported format version {v}")));
        }
        Ok(())
    }

    fn f64s(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let n = count
            .checked_mul(8)
            .ok_or_else(|| self.fail(format!("{what} size overflows")))?;
        let raw = self.take(n, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn push_f64s(out: &mut Vec<u8>, data: &[f64]) {
    out.reserve(data.len() * 8);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn dim_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| LidError::InvalidInput(format!("{what} {v} does not fit in u32")))
}

/// Serializes a matrix in row-major order.
pub fn encode_matrix(m: &DMatrix<f64>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + m.len() * 8);
    out.extend_from_slice(MATRIX_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&dim_u32(m.nrows(), "row count")?.to_le_bytes());
    out.extend_from_slice(&dim_u32(m.ncols(), "column count")?.to_le_bytes());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_matrix(bytes: &[u8], source: &str) -> Result<DMatrix<f64>> {
    let mut r = Reader::new(bytes, source);
    r.magic(MATRIX_MAGIC)?;
    r.version()?;
    let rows = r.u32("row count")? as usize;
    let cols = r.u32("column count")? as usize;
    let count = rows
        .checked_mul(cols)
        .ok_or_else(|| r.fail(format!("matrix size {rows}x{cols} overflows")))?;
    let data = r.f64s(count, "matrix payload")?;
    if !r.at_end() {
        return Err(r.fail(format!("{} trailing bytes after payload", bytes.len() - r.pos)));
    }
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}

pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    write_atomic(path, &encode_matrix(m)?)
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    decode_matrix(&read_bytes(path)?, &path.display().to_string())
}

/// A named dense tensor with row-major `f64` payload.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, dims: Vec<u32>, data: Vec<f64>) -> Result<Self> {
        let name = name.into();
        let expected = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d as usize));
        if expected != Some(data.len()) {
            return Err(LidError::InvalidInput(format!(
                "tensor {name:?}: dims {dims:?} do not match {} values",
                data.len()
            )));
        }
        Ok(Self { name, dims, data })
    }

    pub fn vector(name: impl Into<String>, data: &[f64]) -> Result<Self> {
        Self::new(name, vec![dim_u32(data.len(), "vector length")?], data.to_vec())
    }

    pub fn matrix(name: impl Into<String>, m: &DMatrix<f64>) -> Result<Self> {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            data.extend(m.row(i).iter());
        }
        Self::new(name, vec![dim_u32(m.nrows(), "rows")?, dim_u32(m.ncols(), "cols")?], data)
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.dims.len() != 2 {
            return Err(LidError::InvalidInput(format!("tensor {:?} is not a matrix", self.name)));
        }
        Ok(DMatrix::from_row_slice(self.dims[0] as usize, self.dims[1] as usize, &self.data))
    }
}

/// Ordered `key=value` metadata plus named tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelContainer {
    pub metadata: Vec<(String, String)>,
    pub tensors: Vec<Tensor>,
}

impl ModelContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.metadata.push((key.into(), value.to_string()));
        self
    }

    pub fn push(&mut self, t: Tensor) {
        self.tensors.push(t);
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.meta(key)
            .ok_or_else(|| LidError::InvalidInput(format!("model container lacks metadata key {key:?}")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| LidError::InvalidInput(format!("model container lacks tensor {name:?}")))
    }

    fn metadata_text(&self) -> Result<String> {
        let mut s = String::new();
        for (k, v) in &self.metadata {
            if k.is_empty() || k.contains(['=', '\n']) || v.contains('\n') {
                return Err(LidError::InvalidInput(format!("metadata entry {k:?}={v:?} cannot be stored")));
            }
            s.push_str(k);
            s.push('=');
            s.push_str(v);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CONTAINER_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let meta = self.metadata_text()?;
        out.extend_from_slice(&dim_u32(meta.len(), "metadata length")?.to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        for t in &self.tensors {
            let name_len = u16::try_from(t.name.len())
                .map_err(|_| LidError::InvalidInput(format!("tensor name {:?} too long", t.name)))?;
            let rank = u8::try_from(t.dims.len())
                .map_err(|_| LidError::InvalidInput(format!("tensor {:?} rank too large", t.name)))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(rank);
            for d in &t.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            push_f64s(&mut out, &t.data);
        }
        Ok(out)
    }

    /// Tensors are read until the end of the input.
    pub fn decode(bytes: &[u8], source: &str) -> Result<Self> {
        let mut r = Reader::new(bytes, source);
        r.magic(CONTAINER_MAGIC)?;
        r.version()?;
        let meta_len = r.u32("metadata length")? as usize;
        let meta_start = r.pos;
        let raw = r.take(meta_len, "metadata")?;
        let text = std::str::from_utf8(raw).map_err(|e| LidError::Format {
            path: source.to_string(),
            offset: (meta_start + e.valid_up_to()) as u64,
            reason: "metadata is not valid UTF-8".into(),
        })?;
        let mut metadata = Vec::new();
        for line in text.split_terminator('\n') {
            let (k, v) = line.split_once('=').ok_or_else(|| LidError::Format {
                path: source.to_string(),
                offset: meta_start as u64,
                reason: format!("metadata line {line:?} has no '='"),
            })?;
            metadata.push((k.to_string(), v.to_string()));
        }
        let mut tensors = Vec::new();
        while !r.at_end() {
            let name_len = r.u16("tensor name length")? as usize;
            let name_start = r.pos;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|_| LidError::Format {
                    path: source.to_string(),
                    offset: name_start as u64,
                    reason: "tensor name is not valid UTF-8".into(),
                })?
                .to_string();
            let rank = r.u8("tensor rank")? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32("tensor dimension")?);
            }
            let count = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
                .ok_or_else(|| r.fail(format!("tensor {name:?} size overflows")))?;
            let data = r.f64s(count, "tensor payload")?;
            tensors.push(Tensor { name, dims, data });
        }
        Ok(Self { metadata, tensors })
    }
}

pub fn write_container(path: &Path, c: &ModelContainer) -> Result<()> {
    write_atomic(path, &c.encode()?)
}

pub fn read_container(path: &Path) -> Result<ModelContainer> {
    ModelContainer::decode(&read_bytes(path)?, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_roundtrip_is_bit_exact() {
        let m = DMatrix::from_fn(17, 23, |i, j| (i as f64 * 0.37 - j as f64).sin() * 1e5);
        let bytes = encode_matrix(&m).unwrap();
        assert_eq!(bytes.len(), 16 + 17 * 23 * 8);
        let back = decode_matrix(&bytes, "mem").unwrap();
        assert_eq!(back.shape(), (17, 23));
        assert!(m.iter().zip(back.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn truncated_matrix_reports_lengths() {
        let m = DMatrix::from_element(3, 4, 1.5);
        let mut bytes = encode_matrix(&m).unwrap();
        bytes.pop();
        match decode_matrix(&bytes, "x.fvm") {
            Err(LidError::Format { offset, reason, .. }) => {
                assert_eq!(offset, 16);
                assert!(reason.contains("expected 96 bytes, found 95"), "{reason}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = encode_matrix(&DMatrix::from_element(1, 1, 0.0)).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_matrix(&bytes, "m"), Err(LidError::Format { offset: 0, .. })));
        let c = ModelContainer::new().encode().unwrap();
        assert!(decode_matrix(&c, "m").is_err());
    }

    #[test]
    fn container_preserves_names_order_and_shapes() {
        let mut c = ModelContainer::new().with_meta("kind", "test").with_meta("labels", "a,b");
        c.push(Tensor::new("zeta", vec![2, 3], (0..6).map(f64::from).collect()).unwrap());
        c.push(Tensor::vector("alpha", &[1.0, -2.0]).unwrap());
        c.push(Tensor::new("scalar", vec![], vec![7.0]).unwrap());
        let back = ModelContainer::decode(&c.encode().unwrap(), "mem").unwrap();
        assert_eq!(back, c);
        assert_eq!(back.meta("labels"), Some("a,b"));
        assert_eq!(back.tensors[0].name, "zeta");
        assert_eq!(back.tensor("alpha").unwrap().dims, vec![2]);
    }

    #[test]
    fn truncated_container_is_rejected() {
        let mut c = ModelContainer::new();
        c.push(Tensor::vector("v", &[1.0, 2.0, 3.0]).unwrap());
        let bytes = c.encode().unwrap();
        // The first 12 bytes alone form a valid empty container.
        for len in (0..12).chain(13..bytes.len()) {
            assert!(ModelContainer::decode(&bytes[..len], "c").is_err(), "length {len}");
        }
    }

    #[test]
    fn tensor_shape_must_match_payload() {
        assert!(Tensor::new("t", vec![2, 2], vec![0.0; 3]).is_err());
        let m = DMatrix::from_fn(2, 3, |i, j| (i * 3 + j) as f64);
        assert_eq!(Tensor::matrix("m", &m).unwrap().to_matrix().unwrap(), m);
    }

    #[test]
    fn metadata_rejects_newlines() {
        let c = ModelContainer::new().with_meta("k", "a\nb");
        assert!(c.encode().is_err());
    }
}
