//! Versioned JSON parameter blobs.
//!
//! A checkpoint is a flat list of named tensors (`<network>/<layer param>`)
//! plus a string-keyed header. Values are written with shortest round-trip
//! formatting and parsed with exact float parsing, so save/load is bit-exact.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{ensure, Error, Result};
use crate::nn::{Mlp, Tensor};

pub const CHECKPOINT_FORMAT: &str = "fac-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub header: BTreeMap<String, Value>,
    pub entries: Vec<Entry>,
}

impl Default for Checkpoint {
    fn default() -> Self {
        Self::new()
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            header: BTreeMap::new(),
            entries: Vec::new(),
        }
    }

    pub fn set_header(&mut self, key: &str, value: impl Serialize) -> Result<()> {
        self.header.insert(key.to_string(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn header_value<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .header
            .get(key)
            .ok_or_else(|| Error::Format(format!("checkpoint header lacks `{key}`")))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    pub fn push_tensor(&mut self, name: String, t: &Tensor) {
        self.entries.push(Entry { name, shape: t.shape().to_vec(), values: t.values().to_vec() });
    }

    pub fn push_tensors(&mut self, prefix: &str, ts: &[Tensor]) {
        for (i, t) in ts.iter().enumerate() {
            self.push_tensor(format!("{prefix}/{i}"), t);
        }
    }

    pub fn tensors(&self, prefix: &str) -> Result<Vec<Tensor>> {
        let p = format!("{prefix}/");
        let mut out = Vec::new();
        for e in self.entries.iter().filter(|e| e.name.starts_with(&p)) {
            out.push(Tensor::new(e.shape.clone(), e.values.clone())?);
        }
        Ok(out)
    }

    pub fn add_network(&mut self, prefix: &str, net: &Mlp) -> Result<()> {
        self.set_header(&format!("{prefix}.widths"), net.widths())?;
        self.set_header(&format!("{prefix}.layer_norm"), net.uses_layer_norm())?;
        for (name, t) in net.param_names().iter().zip(net.params()) {
            self.push_tensor(format!("{prefix}/{name}"), t);
        }
        Ok(())
    }

    pub fn network(&self, prefix: &str) -> Result<Mlp> {
        let widths: Vec<usize> = self.header_value(&format!("{prefix}.widths"))?;
        let ln: bool = self.header_value(&format!("{prefix}.layer_norm"))?;
        let mut net = Mlp::new(&widths, ln, &mut ChaCha8Rng::seed_from_u64(0))?;
        let mut params = Vec::with_capacity(net.params().len());
        for name in net.param_names() {
            let full = format!("{prefix}/{name}");
            let e = self
                .entries
                .iter()
                .find(|e| e.name == full)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor `{full}`")))?;
            params.push(Tensor::new(e.shape.clone(), e.values.clone())?);
        }
        net.set_params(params)?;
        Ok(net)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(s)?;
        ensure!(c.format == CHECKPOINT_FORMAT, Format, "not a checkpoint (format `{}`)", c.format);
        ensure!(c.version == CHECKPOINT_VERSION, Format, "unsupported checkpoint version {}", c.version);
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
