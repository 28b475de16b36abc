//! Self-describing on-disk container: named tensors plus a JSON header.
//!
//! The byte layout is safetensors. The whole header (format tag, version,
//! kind, and arbitrary typed fields) is serialized into a single
//! `__metadata__` entry so files are byte-stable for identical content.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use ndarray::{ArrayBase, ArrayD, Data, Dimension, IxDyn};
use safetensors::{Dtype, SafeTensors, View};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const FORMAT_TAG: &str = "stenosis-container";
pub const FORMAT_VERSION: u32 = 1;

const HEADER_KEY: &str = "header";

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
    I64(Vec<i64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn from_array<T, S, D>(array: &ArrayBase<S, D>) -> Self
    where
        T: Scalar,
        S: Data<Elem = T>,
        D: Dimension,
    {
        let shape = array.shape().to_vec();
        let values = array.iter().map(|v| v.as_f64());
        let data = match T::DTYPE {
            Dtype::F32 => TensorData::F32(values.map(|v| v as f32).collect()),
            _ => TensorData::F64(values.collect()),
        };
        Tensor { shape, data }
    }

    pub fn from_u8(shape: Vec<usize>, data: Vec<u8>) -> Self {
        Tensor {
            shape,
            data: TensorData::U8(data),
        }
    }

    pub fn from_i64(shape: Vec<usize>, data: Vec<i64>) -> Self {
        Tensor {
            shape,
            data: TensorData::I64(data),
        }
    }

    /// Converts a floating-point tensor to an array of `T`.
    pub fn to_array<T: Scalar>(&self) -> Result<ArrayD<T>> {
        let values: Vec<T> = match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| T::lit(x as f64)).collect(),
            TensorData::F64(v) => v.iter().map(|&x| T::lit(x)).collect(),
            _ => {
                return Err(Error::Container(
                    "expected a floating-point tensor".to_string(),
                ))
            }
        };
        ArrayD::from_shape_vec(IxDyn(&self.shape), values)
            .map_err(|e| Error::Container(e.to_string()))
    }

    pub fn as_u8(&self) -> Result<&[u8]> {
        match &self.data {
            TensorData::U8(v) => Ok(v),
            _ => Err(Error::Container("expected a u8 tensor".to_string())),
        }
    }

    pub fn as_i64(&self) -> Result<&[i64]> {
        match &self.data {
            TensorData::I64(v) => Ok(v),
            _ => Err(Error::Container("expected an i64 tensor".to_string())),
        }
    }

    fn dtype(&self) -> Dtype {
        match self.data {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F64(_) => Dtype::F64,
            TensorData::U8(_) => Dtype::U8,
            TensorData::I64(_) => Dtype::I64,
        }
    }

    fn to_le_bytes(&self) -> Vec<u8> {
        match &self.data {
            TensorData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::U8(v) => v.clone(),
            TensorData::I64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    fn from_view(dtype: Dtype, shape: &[usize], bytes: &[u8]) -> Result<Self> {
        let data = match dtype {
            Dtype::F32 => TensorData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            Dtype::F64 => TensorData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            Dtype::U8 => TensorData::U8(bytes.to_vec()),
            Dtype::I64 => TensorData::I64(
                bytes
                    .chunks_exact(8)
                    .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            other => {
                return Err(Error::Container(format!("unsupported dtype {other:?}")));
            }
        };
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }
}

struct EncodedTensor {
    dtype: Dtype,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl View for &EncodedTensor {
    fn dtype(&self) -> Dtype {
        self.dtype
    }

    fn shape(&self) -> &[usize] {
        &self.shape
    }

    fn data(&self) -> Cow<'_, [u8]> {
        Cow::Borrowed(&self.bytes)
    }

    fn data_len(&self) -> usize {
        self.bytes.len()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    kind: String,
    #[serde(default)]
    fields: serde_json::Map<String, serde_json::Value>,
}

/// A typed bag of named tensors and header fields.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    kind: String,
    fields: serde_json::Map<String, serde_json::Value>,
    tensors: BTreeMap<String, Tensor>,
}

impl Container {
    pub fn new(kind: impl Into<String>) -> Self {
        Container {
            kind: kind.into(),
            fields: serde_json::Map::new(),
            tensors: BTreeMap::new(),
        }
    }

    pub fn kind(&self) -> &str {
        &self.kind
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::Container(format!(
                "expected a `{kind}` container, found `{}`",
                self.kind
            )))
        }
    }

    pub fn set_field<V: Serialize>(&mut self, key: &str, value: &V) -> Result<()> {
        let value =
            serde_json::to_value(value).map_err(|e| Error::Container(e.to_string()))?;
        self.fields.insert(key.to_string(), value);
        Ok(())
    }

    pub fn field<V: DeserializeOwned>(&self, key: &str) -> Result<V> {
        let value = self
            .fields
            .get(key)
            .ok_or_else(|| Error::Container(format!("missing header field `{key}`")))?;
        serde_json::from_value(value.clone())
            .map_err(|e| Error::Container(format!("header field `{key}`: {e}")))
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Container(format!("missing tensor `{name}`")))
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format: FORMAT_TAG.to_string(),
            version: FORMAT_VERSION,
            kind: self.kind.clone(),
            fields: self.fields.clone(),
        };
        let header =
            serde_json::to_string(&header).map_err(|e| Error::Container(e.to_string()))?;
        let metadata = HashMap::from([(HEADER_KEY.to_string(), header)]);

        let encoded: Vec<(String, EncodedTensor)> = self
            .tensors
            .iter()
            .map(|(name, t)| {
                (
                    name.clone(),
                    EncodedTensor {
                        dtype: t.dtype(),
                        shape: t.shape.clone(),
                        bytes: t.to_le_bytes(),
                    },
                )
            })
            .collect();
        safetensors::serialize(
            encoded.iter().map(|(n, t)| (n.as_str(), t)),
            Some(metadata),
        )
        .map_err(|e| Error::Container(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, metadata) =
            SafeTensors::read_metadata(bytes).map_err(|e| Error::Container(e.to_string()))?;
        let raw = metadata
            .metadata()
            .as_ref()
            .and_then(|m| m.get(HEADER_KEY))
            .ok_or_else(|| Error::Container("missing header".to_string()))?;
        let header: Header =
            serde_json::from_str(raw).map_err(|e| Error::Container(e.to_string()))?;
        if header.format != FORMAT_TAG {
            return Err(Error::Container(format!(
                "unknown format tag `{}`",
                header.format
            )));
        }
        if header.version > FORMAT_VERSION {
            return Err(Error::Container(format!(
                "format version {} is newer than supported version {FORMAT_VERSION}",
                header.version
            )));
        }

        let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Container(e.to_string()))?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.iter() {
            tensors.insert(
                name.to_string(),
                Tensor::from_view(view.dtype(), view.shape(), view.data())?,
            );
        }
        Ok(Container {
            kind: header.kind,
            fields: header.fields,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::config(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Serializes `value` as pretty JSON and writes it atomically.
pub fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| Error::Container(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<V: DeserializeOwned>(path: &Path) -> Result<V> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Container(format!("{}: {e}", path.display())))
}
