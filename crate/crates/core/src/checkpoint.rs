//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"PNET"  u32 version  u64 manifest_len  manifest (UTF-8 `key=value` lines)
//! repeated until EOF:
//!     u64 name_len  name  u64 rank  u64 dims[rank]  f64 values[product(dims)]
//! ```
//!
//! The manifest records the model configuration under `model.*` keys and the
//! tensor count under `tensor_count`, so a file cut at a tensor boundary is
//! still detected as truncated.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PNET";
pub const FORMAT_VERSION: u32 = 1;

const TENSOR_COUNT_KEY: &str = "tensor_count";

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    pub manifest: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!("truncated file while reading {what}")));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let v = self.u64(what)?;
        usize::try_from(v).map_err(|_| Error::Format(format!("{what} {v} too large")))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = self.manifest.clone();
        manifest.insert(TENSOR_COUNT_KEY.into(), self.tensors.len().to_string());
        let text: String = manifest.iter().map(|(k, v)| format!("{k}={v}\n")).collect();

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic").ok() != Some(MAGIC.as_slice()) {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let manifest_len = r.len("manifest length")?;
        let text = std::str::from_utf8(r.take(manifest_len, "manifest")?)
            .map_err(|_| Error::Format("manifest is not UTF-8".into()))?;
        let mut manifest = BTreeMap::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("malformed manifest line `{line}`")))?;
            manifest.insert(k.to_string(), v.to_string());
        }
        let expected: usize = manifest
            .remove(TENSOR_COUNT_KEY)
            .ok_or_else(|| Error::Format("manifest lacks tensor_count".into()))?
            .parse()
            .map_err(|_| Error::Format("bad tensor_count".into()))?;

        let mut tensors = Vec::with_capacity(expected);
        while !r.done() {
            let name_len = r.len("name length")?;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.len("rank")?;
            let dims = (0..rank).map(|_| r.len("dimension")).collect::<Result<Vec<_>>>()?;
            let numel = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("tensor `{name}` too large")))?;
            let raw = r.take(numel.saturating_mul(8), &format!("tensor `{name}`"))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::new(dims, data)?));
        }
        if tensors.len() != expected {
            return Err(Error::Format(format!(
                "truncated file: {} of {expected} tensors present",
                tensors.len()
            )));
        }
        Ok(Self { manifest, tensors })
    }

    /// Writes atomically: the previous file at `path` survives a failed write.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Stores the scalar fields of `value` as `prefix.field=json` entries.
    pub fn put_section<T: Serialize>(&mut self, prefix: &str, value: &T) -> Result<()> {
        let json = serde_json::to_value(value).map_err(|e| Error::Format(e.to_string()))?;
        let obj = json
            .as_object()
            .ok_or_else(|| Error::Format(format!("section `{prefix}` is not a struct")))?;
        for (k, v) in obj {
            self.manifest.insert(format!("{prefix}.{k}"), v.to_string());
        }
        Ok(())
    }

    pub fn section<T: DeserializeOwned>(&self, prefix: &str) -> Result<T> {
        let head = format!("{prefix}.");
        let mut obj = serde_json::Map::new();
        for (k, v) in &self.manifest {
            if let Some(field) = k.strip_prefix(&head) {
                let value = serde_json::from_str(v)
                    .map_err(|e| Error::Format(format!("manifest `{k}`: {e}")))?;
                obj.insert(field.to_string(), value);
            }
        }
        if obj.is_empty() {
            return Err(Error::Format(format!("manifest has no `{prefix}` section")));
        }
        serde_json::from_value(serde_json::Value::Object(obj))
            .map_err(|e| Error::Format(format!("manifest section `{prefix}`: {e}")))
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.manifest.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.manifest.insert(key.to_string(), value.to_string());
    }

    /// Model configuration plus every tensor whose name has no `optim.` prefix.
    pub fn from_model(model: &Model) -> Result<Self> {
        let mut ck = Self::default();
        ck.put_section("model", &model.config)?;
        ck.tensors = model
            .params
            .iter()
            .map(|(n, t)| (n.clone(), t.detached()))
            .collect();
        Ok(ck)
    }

    pub fn model(&self) -> Result<Model> {
        let config: ModelConfig = self.section("model")?;
        let params = self
            .tensors
            .iter()
            .filter(|(n, _)| !n.starts_with(crate::train::OPTIM_PREFIX))
            .map(|(n, t)| (n.clone(), t.detached().with_requires_grad(true)))
            .collect();
        Model::from_parts(config, ModelParams::from_map(params))
    }
}
