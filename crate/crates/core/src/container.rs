//! Named-tensor container files.
//!
//! Layout: the 8-byte magic `NTCONT01`, a little-endian `u64` manifest
//! length, a UTF-8 JSON manifest, then the raw payloads. The manifest maps
//! each tensor name to `{dtype, shape, offset}` (offset relative to the
//! start of the payload section) and may carry a `__metadata__` object of
//! string pairs.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 8] = b"NTCONT01";
const METADATA_KEY: &str = "__metadata__";

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn from_slice<T: Element>(data: &[T]) -> Self {
        match T::DTYPE {
            DType::F32 => TensorData::F32(data.iter().map(|v| v.as_f64() as f32).collect()),
            DType::F64 => TensorData::F64(data.iter().map(|v| v.as_f64()).collect()),
        }
    }

    /// Values converted to `T` (exact when the dtypes agree).
    fn to_vec<T: Element>(&self) -> Vec<T> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| T::of(x as f64)).collect(),
            TensorData::F64(v) => v.iter().map(|&x| T::of(x)).collect(),
        }
    }

    fn write(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F32(v) => f32::write_le(v, out),
            TensorData::F64(v) => f64::write_le(v, out),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    dtype: DType,
    shape: Vec<usize>,
    offset: u64,
}

/// A manifest object that rejects repeated keys instead of keeping the last.
struct StrictManifest(Vec<(String, serde_json::Value)>);

impl<'de> Deserialize<'de> for StrictManifest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = StrictManifest;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<StrictManifest, A::Error> {
                let mut seen = std::collections::HashSet::new();
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, serde_json::Value>()? {
                    if !seen.insert(k.clone()) {
                        return Err(serde::de::Error::custom(format!("duplicate tensor '{k}'")));
                    }
                    out.push((k, v));
                }
                Ok(StrictManifest(out))
            }
        }
        d.deserialize_map(V)
    }
}

/// An ordered set of named tensors plus string metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    entries: BTreeMap<String, Entry>,
    pub metadata: BTreeMap<String, String>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.entries.get(name)
    }

    pub fn insert_entry(&mut self, name: &str, entry: Entry) -> Result<()> {
        if name == METADATA_KEY {
            return Err(Error::invalid("Container::insert", format!("'{METADATA_KEY}' is reserved")));
        }
        if entry.shape.iter().product::<usize>() != entry.data.len() {
            return Err(Error::shape("Container::insert", format!("'{name}': shape {:?} vs {} values", entry.shape, entry.data.len())));
        }
        if self.entries.contains_key(name) {
            return Err(Error::DuplicateTensor(name.to_string()));
        }
        self.entries.insert(name.to_string(), entry);
        Ok(())
    }

    /// Stores a tensor in its own dtype.
    pub fn insert<T: Element>(&mut self, name: &str, t: &Tensor<T>) -> Result<()> {
        self.insert_entry(name, Entry { shape: t.shape().to_vec(), data: TensorData::from_slice(t.data()) })
    }

    /// Loads a tensor as `T`, converting the stored dtype when it differs.
    pub fn get<T: Element>(&self, name: &str) -> Result<Tensor<T>> {
        let e = self.entries.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        Tensor::new(e.data.to_vec(), &e.shape)
    }

    /// Like [`Container::get`] but also checks the shape.
    pub fn get_shaped<T: Element>(&self, name: &str, shape: &[usize]) -> Result<Tensor<T>> {
        let t = self.get::<T>(name)?;
        if t.shape() != shape {
            return Err(Error::shape("Container::get", format!("'{name}' has shape {:?}, expected {shape:?}", t.shape())));
        }
        Ok(t)
    }

    /// Copies every tensor and metadata key of `other` in under `prefix.`.
    pub fn merge_prefixed(&mut self, other: &Container, prefix: &str) -> Result<()> {
        for (name, e) in &other.entries {
            self.insert_entry(&format!("{prefix}.{name}"), e.clone())?;
        }
        for (k, v) in &other.metadata {
            self.metadata.insert(format!("{prefix}.{k}"), v.clone());
        }
        Ok(())
    }

    /// The entries and metadata under `prefix.`, with the prefix removed.
    pub fn sub_container(&self, prefix: &str) -> Container {
        let p = format!("{prefix}.");
        let strip = |k: &String| k.strip_prefix(&p).map(str::to_string);
        Container {
            entries: self.entries.iter().filter_map(|(k, e)| Some((strip(k)?, e.clone()))).collect(),
            metadata: self.metadata.iter().filter_map(|(k, v)| Some((strip(k)?, v.clone()))).collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut manifest = serde_json::Map::new();
        for (name, e) in &self.entries {
            let m = ManifestEntry { dtype: e.data.dtype(), shape: e.shape.clone(), offset: payload.len() as u64 };
            manifest.insert(name.clone(), serde_json::to_value(m)?);
            e.data.write(&mut payload);
        }
        if !self.metadata.is_empty() {
            manifest.insert(METADATA_KEY.to_string(), serde_json::to_value(&self.metadata)?);
        }
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Format("missing NTCONT01 magic".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json = bytes
            .get(16..16usize.saturating_add(len))
            .filter(|_| len <= bytes.len())
            .ok_or_else(|| Error::Format(format!("manifest length {len} exceeds file size {}", bytes.len())))?;
        let payload = &bytes[16 + len..];
        let manifest: StrictManifest = serde_json::from_slice(json).map_err(|e| {
            let msg = e.to_string();
            match msg.strip_prefix("duplicate tensor '").and_then(|s| s.split('\'').next()) {
                Some(name) => Error::DuplicateTensor(name.to_string()),
                None => Error::Format(format!("manifest: {msg}")),
            }
        })?;

        let mut c = Container::new();
        for (name, value) in manifest.0 {
            if name == METADATA_KEY {
                c.metadata = serde_json::from_value(value).map_err(|e| Error::Format(format!("metadata: {e}")))?;
                continue;
            }
            let m: ManifestEntry =
                serde_json::from_value(value).map_err(|e| Error::Format(format!("entry '{name}': {e}")))?;
            let count = m.shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let size = count.and_then(|n| n.checked_mul(m.dtype.size_in_bytes()));
            let start = m.offset as usize;
            let raw = size
                .and_then(|s| start.checked_add(s))
                .and_then(|end| payload.get(start..end))
                .ok_or_else(|| Error::Format(format!("entry '{name}' lies outside the payload")))?;
            let data = match m.dtype {
                DType::F32 => TensorData::F32(f32::read_le(raw)),
                DType::F64 => TensorData::F64(f64::read_le(raw)),
            };
            c.insert_entry(&name, Entry { shape: m.shape, data })?;
        }
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
