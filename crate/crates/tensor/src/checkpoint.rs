//! Checkpoint container: a line-oriented text manifest plus one raw
//! little-endian buffer file.
//!
//! ```text
//! HVTRCKPT1
//! buffer = "ckpt_000100.bin"
//! meta.iteration = "100"
//! tensor.latent.Z_G = f32 1x16x128x128 0 1048576
//! ```
//!
//! Meta values are JSON string literals; tensor lines give dtype, shape,
//! byte offset and byte length inside the buffer.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Result, TensorError};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const CHECKPOINT_HEADER: &str = "HVTRCKPT1";

#[derive(Clone, Debug, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U32 { shape: Vec<usize>, data: Vec<u32> },
}

impl StoredTensor {
    pub fn dtype(&self) -> DType {
        match self {
            StoredTensor::F32(_) => DType::F32,
            StoredTensor::F64(_) => DType::F64,
            StoredTensor::U32 { .. } => DType::U32,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
            StoredTensor::U32 { shape, .. } => shape,
        }
    }

    fn bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            StoredTensor::F32(t) => f32::write_le(t.data(), &mut out),
            StoredTensor::F64(t) => f64::write_le(t.data(), &mut out),
            StoredTensor::U32 { data, .. } => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, StoredTensor>,
}

/// Buffer file that sits next to a manifest.
pub fn buffer_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.meta.insert(key.into(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta.get(key).map(String::as_str).ok_or_else(|| TensorError::Checkpoint(format!("missing meta `{key}`")))
    }

    pub fn insert<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        let stored = match T::DTYPE {
            DType::F32 => StoredTensor::F32(t.cast()),
            _ => StoredTensor::F64(t.cast()),
        };
        self.tensors.insert(name.into(), stored);
    }

    pub fn insert_u32(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<u32>) {
        self.tensors.insert(name.into(), StoredTensor::U32 { shape, data });
    }

    /// Fetch a float tensor, converting between f32/f64 storage as needed.
    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        match self.tensors.get(name) {
            Some(StoredTensor::F32(t)) => Ok(t.cast()),
            Some(StoredTensor::F64(t)) => Ok(t.cast()),
            Some(StoredTensor::U32 { .. }) => Err(TensorError::Checkpoint(format!("`{name}` is an integer tensor"))),
            None => Err(TensorError::Checkpoint(format!("missing tensor `{name}`"))),
        }
    }

    pub fn u32_tensor(&self, name: &str) -> Result<(&[usize], &[u32])> {
        match self.tensors.get(name) {
            Some(StoredTensor::U32 { shape, data }) => Ok((shape, data)),
            Some(_) => Err(TensorError::Checkpoint(format!("`{name}` is not an integer tensor"))),
            None => Err(TensorError::Checkpoint(format!("missing tensor `{name}`"))),
        }
    }

    pub fn write(&self, manifest: &Path) -> Result<()> {
        let buf_path = buffer_path(manifest);
        let buf_name = buf_path
            .file_name()
            .and_then(|s| s.to_str())
            .ok_or_else(|| TensorError::Checkpoint(format!("bad manifest path {}", manifest.display())))?;
        let mut text = format!("{CHECKPOINT_HEADER}\nbuffer = {}\n", json_string(buf_name));
        for (k, v) in &self.meta {
            text.push_str(&format!("meta.{k} = {}\n", json_string(v)));
        }
        let mut buffer = Vec::new();
        for (name, t) in &self.tensors {
            let bytes = t.bytes();
            let shape = t.shape().iter().map(usize::to_string).collect::<Vec<_>>().join("x");
            let shape = if shape.is_empty() { "scalar".to_string() } else { shape };
            text.push_str(&format!("tensor.{name} = {} {shape} {} {}\n", t.dtype().as_str(), buffer.len(), bytes.len()));
            buffer.extend_from_slice(&bytes);
        }
        fs::write(&buf_path, &buffer)?;
        fs::write(manifest, text)?;
        Ok(())
    }

    pub fn read(manifest: &Path) -> Result<Self> {
        let text = fs::read_to_string(manifest)?;
        let mut lines = text.lines();
        if lines.next() != Some(CHECKPOINT_HEADER) {
            return Err(TensorError::Checkpoint(format!("{} lacks the {CHECKPOINT_HEADER} header", manifest.display())));
        }
        let bad = |line: &str| TensorError::Checkpoint(format!("malformed manifest line `{line}`"));
        let mut ckpt = Checkpoint::new();
        let mut entries = Vec::new();
        let mut buffer_name = None;
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let (key, value) = line.split_once(" = ").ok_or_else(|| bad(line))?;
            if key == "buffer" {
                buffer_name = Some(parse_json_string(value).ok_or_else(|| bad(line))?);
            } else if let Some(k) = key.strip_prefix("meta.") {
                ckpt.meta.insert(k.to_string(), parse_json_string(value).ok_or_else(|| bad(line))?);
            } else if let Some(name) = key.strip_prefix("tensor.") {
                let parts: Vec<&str> = value.split_whitespace().collect();
                let [dtype, shape, offset, len] = parts[..] else { return Err(bad(line)) };
                let dtype = DType::parse(dtype).ok_or_else(|| bad(line))?;
                let shape: Vec<usize> = if shape == "scalar" {
                    Vec::new()
                } else {
                    shape.split('x').map(str::parse).collect::<std::result::Result<_, _>>().map_err(|_| bad(line))?
                };
                let offset: usize = offset.parse().map_err(|_| bad(line))?;
                let len: usize = len.parse().map_err(|_| bad(line))?;
                entries.push((name.to_string(), dtype, shape, offset, len));
            } else {
                return Err(bad(line));
            }
        }
        let buffer_name = buffer_name.ok_or_else(|| TensorError::Checkpoint("manifest names no buffer".into()))?;
        let dir = manifest.parent().unwrap_or_else(|| Path::new("."));
        let buffer = fs::read(dir.join(buffer_name))?;
        for (name, dtype, shape, offset, len) in entries {
            let numel: usize = shape.iter().product();
            if numel * dtype.size_of() != len || offset + len > buffer.len() {
                return Err(TensorError::Checkpoint(format!("tensor `{name}` extent does not match its shape/buffer")));
            }
            let bytes = &buffer[offset..offset + len];
            let stored = match dtype {
                DType::F32 => StoredTensor::F32(tensor_from(shape, f32::read_le(bytes))?),
                DType::F64 => StoredTensor::F64(tensor_from(shape, f64::read_le(bytes))?),
                DType::U32 => StoredTensor::U32 {
                    shape,
                    data: bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect(),
                },
            };
            ckpt.tensors.insert(name, stored);
        }
        Ok(ckpt)
    }
}

fn tensor_from<T: Scalar>(shape: Vec<usize>, data: Vec<T>) -> Result<Tensor<T>> {
    if shape.is_empty() {
        Ok(Tensor::scalar(data[0]))
    } else {
        Tensor::new(shape, data)
    }
}

fn json_string(s: &str) -> String {
    serde_json::Value::String(s.to_string()).to_string()
}

fn parse_json_string(s: &str) -> Option<String> {
    match serde_json::from_str(s).ok()? {
        serde_json::Value::String(v) => Some(v),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits_and_meta() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.manifest");
        let mut c = Checkpoint::new();
        c.set_meta("iteration", 42);
        c.set_meta("note", "line\nbreak = \"quoted\"");
        c.insert("w", &Tensor::<f32>::from_fn(&[2, 3], |i| i as f32 * 0.1 - 0.2));
        c.insert("s", &Tensor::<f64>::scalar(std::f64::consts::PI));
        c.insert_u32("faces", vec![1, 3], vec![0, 1, 2]);
        c.write(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("HVTRCKPT1\n"));
        assert_eq!(Checkpoint::read(&path).unwrap(), c);
    }

    #[test]
    fn rejects_missing_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.manifest");
        std::fs::write(&path, "NOTACKPT\n").unwrap();
        assert!(Checkpoint::read(&path).is_err());
    }
}
