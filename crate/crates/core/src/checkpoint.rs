//! Reading and writing safetensors checkpoints.
//!
//! Layout: an 8-byte little-endian header length, a UTF-8 JSON header mapping
//! tensor names to `{dtype, shape, data_offsets}` (plus an optional
//! `__metadata__` string map), then the raw little-endian data region.
//!
//! Files are memory mapped on open; tensor bytes are only touched when a
//! tensor is read. Headers are written in the canonical form the reference
//! serializer emits (compact JSON, `__metadata__` first, tensors in data
//! order, space padding to an 8-byte boundary), so a file produced by any
//! standard writer round-trips byte for byte.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use memmap2::Mmap;
use serde::de::{self, Deserializer, MapAccess, Visitor};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::halfp;
use crate::tensor::Tensor;

const METADATA_KEY: &str = "__metadata__";
// Same cap the reference implementation uses.
const MAX_HEADER_LEN: u64 = 100_000_000;

/// Element type of a stored tensor.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Dtype {
    F32,
    F16,
    BF16,
    I64,
    /// Any other dtype the container allows. Copied verbatim, never used in
    /// arithmetic.
    Other {
        name: String,
        width: usize,
    },
}

impl Dtype {
    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "F32" => Dtype::F32,
            "F16" => Dtype::F16,
            "BF16" => Dtype::BF16,
            "I64" => Dtype::I64,
            other => {
                let width = match other {
                    "BOOL" | "U8" | "I8" | "F8_E5M2" | "F8_E4M3" => 1,
                    "I16" | "U16" => 2,
                    "I32" | "U32" => 4,
                    "F64" | "U64" => 8,
                    _ => return Err(Error::MalformedHeader(format!("unknown dtype `{other}`"))),
                };
                Dtype::Other {
                    name: other.to_string(),
                    width,
                }
            }
        })
    }

    pub fn name(&self) -> &str {
        match self {
            Dtype::F32 => "F32",
            Dtype::F16 => "F16",
            Dtype::BF16 => "BF16",
            Dtype::I64 => "I64",
            Dtype::Other { name, .. } => name,
        }
    }

    pub fn width(&self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 | Dtype::BF16 => 2,
            Dtype::I64 => 8,
            Dtype::Other { width, .. } => *width,
        }
    }

    /// Whether tensors of this dtype take part in task-vector arithmetic.
    pub fn is_float(&self) -> bool {
        matches!(self, Dtype::F32 | Dtype::F16 | Dtype::BF16)
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorMeta {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    /// Offsets into the data region, end exclusive.
    pub byte_range: (u64, u64),
}

impl TensorMeta {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn byte_len(&self) -> u64 {
        self.byte_range.1 - self.byte_range.0
    }
}

#[derive(Debug)]
enum Source {
    Mapped(Mmap),
    Memory(Arc<[u8]>),
}

/// An opened checkpoint. Cheap to share between threads; reads are lock-free.
#[derive(Debug)]
pub struct Checkpoint {
    path: Option<PathBuf>,
    metas: Vec<TensorMeta>,
    metadata: Vec<(String, String)>,
    data_start: usize,
    source: Source,
}

impl Checkpoint {
    /// Open a checkpoint file. Only the header is parsed.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let len = file.metadata().map_err(|e| Error::io(path, e))?.len();
        let source = if len == 0 {
            Source::Memory(Arc::from(Vec::new()))
        } else {
            // SAFETY: the map is read-only; callers must not truncate the file
            // while the checkpoint is open.
            let map = unsafe { Mmap::map(&file) }.map_err(|e| Error::io(path, e))?;
            Source::Mapped(map)
        };
        let mut ckpt = Self::parse(source)?;
        ckpt.path = Some(path.to_path_buf());
        Ok(ckpt)
    }

    /// Parse a checkpoint held in memory.
    pub fn from_bytes(bytes: impl Into<Arc<[u8]>>) -> Result<Self> {
        Self::parse(Source::Memory(bytes.into()))
    }

    fn parse(source: Source) -> Result<Self> {
        let bytes: &[u8] = match &source {
            Source::Mapped(m) => m,
            Source::Memory(b) => b,
        };
        if bytes.len() < 8 {
            return Err(Error::MalformedHeader("file shorter than 8 bytes".into()));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        if header_len > MAX_HEADER_LEN {
            return Err(Error::MalformedHeader(format!("header length {header_len} too large")));
        }
        let data_start = 8 + header_len as usize;
        if data_start > bytes.len() {
            return Err(Error::MalformedHeader(format!(
                "header length {header_len} exceeds file size {}",
                bytes.len()
            )));
        }
        let header = std::str::from_utf8(&bytes[8..data_start])
            .map_err(|e| Error::MalformedHeader(format!("header is not utf-8: {e}")))?;
        let raw: RawHeader =
            serde_json::from_str(header.trim_end_matches(' ')).map_err(|e| Error::MalformedHeader(e.to_string()))?;

        let mut metas = Vec::with_capacity(raw.tensors.len());
        let mut seen = std::collections::HashSet::new();
        for (name, info) in raw.tensors {
            if !seen.insert(name.clone()) {
                return Err(Error::DuplicateTensor(name));
            }
            let dtype = Dtype::parse(&info.dtype)?;
            let [start, end] = info.data_offsets;
            if end < start {
                return Err(Error::MalformedHeader(format!("tensor `{name}` has end < start")));
            }
            let numel = info
                .shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::MalformedHeader(format!("tensor `{name}` shape overflows")))?;
            let expected = (numel as u64)
                .checked_mul(dtype.width() as u64)
                .ok_or_else(|| Error::MalformedHeader(format!("tensor `{name}` size overflows")))?;
            if end - start != expected {
                return Err(Error::MalformedHeader(format!(
                    "tensor `{name}`: byte range {start}..{end} does not hold {numel} x {dtype}"
                )));
            }
            metas.push(TensorMeta {
                name,
                dtype,
                shape: info.shape,
                byte_range: (start, end),
            });
        }

        let available = (bytes.len() - data_start) as u64;
        let mut order: Vec<&TensorMeta> = metas.iter().collect();
        order.sort_by_key(|m| m.byte_range);
        let mut cursor = 0u64;
        for meta in &order {
            if meta.byte_range.1 > available {
                return Err(Error::Truncated {
                    name: meta.name.clone(),
                    end: meta.byte_range.1,
                    available,
                });
            }
            if meta.byte_range.0 != cursor {
                return Err(Error::MalformedHeader(format!(
                    "tensor `{}` starts at {} but previous data ends at {cursor}",
                    meta.name, meta.byte_range.0
                )));
            }
            cursor = meta.byte_range.1;
        }
        if cursor != available {
            return Err(Error::MalformedHeader(format!(
                "data region has {available} bytes but tensors cover {cursor}"
            )));
        }

        Ok(Self {
            path: None,
            metas,
            metadata: raw.metadata,
            data_start,
            source,
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// Tensor metadata in header order.
    pub fn metas(&self) -> &[TensorMeta] {
        &self.metas
    }

    /// The `__metadata__` map, in header order.
    pub fn metadata(&self) -> &[(String, String)] {
        &self.metadata
    }

    pub fn meta(&self, name: &str) -> Result<&TensorMeta> {
        self.metas
            .iter()
            .find(|m| m.name == name)
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.metas.iter().any(|m| m.name == name)
    }

    /// Raw stored bytes of one tensor.
    pub fn raw(&self, name: &str) -> Result<&[u8]> {
        let meta = self.meta(name)?;
        let bytes: &[u8] = match &self.source {
            Source::Mapped(m) => m,
            Source::Memory(b) => b,
        };
        let start = self.data_start + meta.byte_range.0 as usize;
        let end = self.data_start + meta.byte_range.1 as usize;
        Ok(&bytes[start..end])
    }

    /// Read a floating tensor widened to F32.
    pub fn read_tensor(&self, name: &str) -> Result<Tensor> {
        let meta = self.meta(name)?;
        let raw = self.raw(name)?;
        let data = decode_f32(&meta.dtype, raw).ok_or_else(|| Error::UnsupportedDtype {
            name: name.to_string(),
            dtype: meta.dtype.to_string(),
        })?;
        Ok(Tensor::with_dtype(meta.shape.clone(), data, meta.dtype.clone()))
    }

    /// Materialize every tensor as an owned [`TensorData`], ready for writing.
    pub fn to_entries(&self) -> Result<Vec<TensorData>> {
        self.metas
            .iter()
            .map(|m| {
                let body = if m.dtype.is_float() {
                    Body::F32(self.read_tensor(&m.name)?.into_data())
                } else {
                    Body::Raw(self.raw(&m.name)?.to_vec())
                };
                Ok(TensorData {
                    name: m.name.clone(),
                    dtype: m.dtype.clone(),
                    shape: m.shape.clone(),
                    body,
                })
            })
            .collect()
    }
}

fn decode_f32(dtype: &Dtype, raw: &[u8]) -> Option<Vec<f32>> {
    Some(match dtype {
        Dtype::F32 => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Dtype::F16 => raw
            .chunks_exact(2)
            .map(|c| halfp::f16_to_f32(u16::from_le_bytes([c[0], c[1]])))
            .collect(),
        Dtype::BF16 => raw
            .chunks_exact(2)
            .map(|c| halfp::bf16_to_f32(u16::from_le_bytes([c[0], c[1]])))
            .collect(),
        _ => return None,
    })
}

/// Narrow F32 working values to the stored representation of `dtype`.
pub fn encode_f32(dtype: &Dtype, values: &[f32]) -> Option<Vec<u8>> {
    Some(match dtype {
        Dtype::F32 => values.iter().flat_map(|v| v.to_le_bytes()).collect(),
        Dtype::F16 => values
            .iter()
            .flat_map(|&v| halfp::f32_to_f16(v).to_le_bytes())
            .collect(),
        Dtype::BF16 => values
            .iter()
            .flat_map(|&v| halfp::f32_to_bf16(v).to_le_bytes())
            .collect(),
        _ => return None,
    })
}

/// Tensor contents ready to be written.
#[derive(Debug, Clone, PartialEq)]
pub enum Body {
    /// Working values, narrowed to the entry's dtype on write.
    F32(Vec<f32>),
    /// Stored bytes, written verbatim.
    Raw(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorData {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub body: Body,
}

impl TensorData {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let numel: usize = self.shape.iter().product();
        let bytes = match &self.body {
            Body::F32(values) => {
                if values.len() != numel {
                    return Err(Error::shape(
                        &self.name,
                        format!("shape {:?} needs {numel} values, got {}", self.shape, values.len()),
                    ));
                }
                encode_f32(&self.dtype, values).ok_or_else(|| Error::UnsupportedDtype {
                    name: self.name.clone(),
                    dtype: self.dtype.to_string(),
                })?
            }
            Body::Raw(bytes) => bytes.clone(),
        };
        if bytes.len() != numel * self.dtype.width() {
            return Err(Error::shape(
                &self.name,
                format!(
                    "shape {:?} x {} needs {} bytes, got {}",
                    self.shape,
                    self.dtype,
                    numel * self.dtype.width(),
                    bytes.len()
                ),
            ));
        }
        Ok(bytes)
    }
}

/// Layout of one tensor in an output file, before its data is known.
#[derive(Debug, Clone)]
pub struct OutputSpec {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
}

/// Serialize a header in canonical form, padded to a multiple of 8 bytes.
pub fn encode_header(metadata: &[(String, String)], specs: &[OutputSpec]) -> Vec<u8> {
    use serde_json::to_string as js;
    let mut out = String::from("{");
    let mut first = true;
    if !metadata.is_empty() {
        out.push_str(&format!("{}:{{", js(METADATA_KEY).unwrap()));
        for (i, (k, v)) in metadata.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            out.push_str(&format!("{}:{}", js(k).unwrap(), js(v).unwrap()));
        }
        out.push('}');
        first = false;
    }
    let mut offset = 0u64;
    for spec in specs {
        if !first {
            out.push(',');
        }
        first = false;
        let len = spec.shape.iter().product::<usize>() as u64 * spec.dtype.width() as u64;
        out.push_str(&format!(
            "{}:{{\"dtype\":{},\"shape\":{},\"data_offsets\":[{},{}]}}",
            js(&spec.name).unwrap(),
            js(spec.dtype.name()).unwrap(),
            js(&spec.shape).unwrap(),
            offset,
            offset + len
        ));
        offset += len;
    }
    out.push('}');
    let mut bytes = out.into_bytes();
    while bytes.len() % 8 != 0 {
        bytes.push(b' ');
    }
    bytes
}

/// Streaming writer: the header is written up front, then tensors are
/// appended one at a time in the declared order. Holds at most one tensor's
/// bytes at a time.
pub struct CheckpointWriter {
    path: PathBuf,
    out: BufWriter<File>,
    specs: Vec<OutputSpec>,
    next: usize,
}

impl CheckpointWriter {
    pub fn create(path: impl AsRef<Path>, metadata: &[(String, String)], specs: Vec<OutputSpec>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut seen = std::collections::HashSet::new();
        for spec in &specs {
            if !seen.insert(spec.name.as_str()) {
                return Err(Error::DuplicateTensor(spec.name.clone()));
            }
        }
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = BufWriter::new(file);
        let header = encode_header(metadata, &specs);
        out.write_all(&(header.len() as u64).to_le_bytes())
            .and_then(|_| out.write_all(&header))
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            path,
            out,
            specs,
            next: 0,
        })
    }

    /// Append the next tensor's stored bytes.
    pub fn write_next(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let spec = self
            .specs
            .get(self.next)
            .ok_or_else(|| Error::InvalidArgument(format!("tensor `{name}` written past the declared tensor list")))?;
        if spec.name != name {
            return Err(Error::InvalidArgument(format!(
                "expected tensor `{}` next, got `{name}`",
                spec.name
            )));
        }
        let want = spec.shape.iter().product::<usize>() * spec.dtype.width();
        if bytes.len() != want {
            return Err(Error::shape(
                name,
                format!("expected {want} bytes, got {}", bytes.len()),
            ));
        }
        self.out.write_all(bytes).map_err(|e| Error::io(&self.path, e))?;
        self.next += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        if self.next != self.specs.len() {
            return Err(Error::InvalidArgument(format!(
                "only {} of {} tensors written",
                self.next,
                self.specs.len()
            )));
        }
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Write a complete checkpoint. F32 bodies are narrowed to each entry's dtype
/// with round-to-nearest-even.
pub fn write_checkpoint(path: impl AsRef<Path>, metadata: &[(String, String)], tensors: &[TensorData]) -> Result<()> {
    let encoded = tensors.iter().map(TensorData::encode).collect::<Result<Vec<_>>>()?;
    let specs = tensors
        .iter()
        .map(|t| OutputSpec {
            name: t.name.clone(),
            dtype: t.dtype.clone(),
            shape: t.shape.clone(),
        })
        .collect();
    let mut writer = CheckpointWriter::create(path, metadata, specs)?;
    for (t, bytes) in tensors.iter().zip(&encoded) {
        writer.write_next(&t.name, bytes)?;
    }
    writer.finish()
}

#[derive(Deserialize)]
struct RawTensorInfo {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [u64; 2],
}

/// Header entries in file order. Duplicates are kept so they can be reported.
struct RawHeader {
    metadata: Vec<(String, String)>,
    tensors: Vec<(String, RawTensorInfo)>,
}

impl<'de> Deserialize<'de> for RawHeader {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct HeaderVisitor;

        impl<'de> Visitor<'de> for HeaderVisitor {
            type Value = RawHeader;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a safetensors header object")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<RawHeader, A::Error> {
                let mut metadata = None;
                let mut tensors = Vec::new();
                while let Some(key) = map.next_key::<String>()? {
                    if key == METADATA_KEY {
                        if metadata.is_some() {
                            return Err(de::Error::custom("duplicate __metadata__"));
                        }
                        metadata = Some(map.next_value::<OrderedStrings>()?.0);
                    } else {
                        tensors.push((key, map.next_value()?));
                    }
                }
                Ok(RawHeader {
                    metadata: metadata.unwrap_or_default(),
                    tensors,
                })
            }
        }

        deserializer.deserialize_map(HeaderVisitor)
    }
}

struct OrderedStrings(Vec<(String, String)>);

impl<'de> Deserialize<'de> for OrderedStrings {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = OrderedStrings;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a map of strings")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<OrderedStrings, A::Error> {
                let mut out = Vec::new();
                while let Some(entry) = map.next_entry::<String, String>()? {
                    out.push(entry);
                }
                Ok(OrderedStrings(out))
            }
        }
        deserializer.deserialize_map(V)
    }
}
