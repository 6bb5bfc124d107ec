//! Offline transition datasets and their on-disk formats.
//!
//! Binary layout (little endian):
//!
//! ```text
//! magic   8 bytes  "FACDSET\0"
//! version u32
//! d_s     u32
//! d_a     u32
//! count   u64
//! flags   u8       bit 0: density column present
//! metalen u32, then metalen bytes of JSON metadata
//! count records: state[d_s] action[d_a] reward next_state[d_s] (f64 each),
//!                terminal u8, log_density f64 if flagged
//! ```
//!
//! The JSON-lines variant holds a header object on the first line and one
//! record object per following line.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::nn::Tensor;

pub const DATASET_MAGIC: &[u8; 8] = b"FACDSET\0";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_density: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub d_s: usize,
    pub d_a: usize,
    pub source: String,
    pub seed: u64,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

impl DatasetMeta {
    pub fn new(d_s: usize, d_a: usize, source: &str, seed: u64) -> Self {
        Self { d_s, d_a, source: source.into(), seed, extra: BTreeMap::new() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OfflineDataset {
    records: Vec<Transition>,
    meta: DatasetMeta,
}

/// Column views of a mini-batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub states: Tensor,
    pub actions: Tensor,
    pub rewards: Tensor,
    pub next_states: Tensor,
    /// 1.0 for non-terminal transitions.
    pub not_done: Tensor,
    pub log_densities: Option<Tensor>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl OfflineDataset {
    pub fn new(records: Vec<Transition>, meta: DatasetMeta) -> Result<Self> {
        ensure!(!records.is_empty(), Contract, "dataset must not be empty");
        let ds = Self { records, meta };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let has = self.records[0].log_density.is_some();
        for (i, t) in self.records.iter().enumerate() {
            self.check_record(t).map_err(|e| Error::Contract(format!("record {i}: {e}")))?;
            ensure!(t.log_density.is_some() == has, Contract, "record {i}: density column must be all-present or all-absent");
        }
        Ok(())
    }

    fn check_record(&self, t: &Transition) -> Result<()> {
        ensure!(
            t.state.len() == self.meta.d_s && t.next_state.len() == self.meta.d_s && t.action.len() == self.meta.d_a,
            Dimension,
            "expected d_s={} d_a={}, got state {} action {} next {}",
            self.meta.d_s,
            self.meta.d_a,
            t.state.len(),
            t.action.len(),
            t.next_state.len()
        );
        Ok(())
    }

    pub fn records(&self) -> &[Transition] {
        &self.records
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn d_s(&self) -> usize {
        self.meta.d_s
    }

    pub fn d_a(&self) -> usize {
        self.meta.d_a
    }

    pub fn has_densities(&self) -> bool {
        self.records[0].log_density.is_some()
    }

    pub fn log_densities(&self) -> Option<Vec<f64>> {
        self.records.iter().map(|t| t.log_density).collect()
    }

    /// Attaches a density column, one value per record.
    pub fn with_log_densities(mut self, col: &[f64]) -> Result<Self> {
        ensure!(col.len() == self.records.len(), Contract, "density column has {} values for {} records", col.len(), self.records.len());
        for (t, &v) in self.records.iter_mut().zip(col) {
            t.log_density = Some(v);
        }
        Ok(self)
    }

    pub fn without_log_densities(mut self) -> Self {
        for t in &mut self.records {
            t.log_density = None;
        }
        self
    }

    /// Appends a transition (replay-buffer use). The density column becomes
    /// all-absent if the new record has none.
    pub fn push(&mut self, t: Transition) -> Result<()> {
        self.check_record(&t)?;
        if t.log_density.is_none() && self.has_densities() {
            for r in &mut self.records {
                r.log_density = None;
            }
        }
        let has = self.has_densities();
        let mut t = t;
        if !has {
            t.log_density = None;
        }
        self.records.push(t);
        Ok(())
    }

    pub fn states(&self) -> Tensor {
        let n = self.len();
        Tensor::matrix(n, self.d_s(), self.records.iter().flat_map(|t| t.state.iter().copied()).collect())
    }

    pub fn actions(&self) -> Tensor {
        let n = self.len();
        Tensor::matrix(n, self.d_a(), self.records.iter().flat_map(|t| t.action.iter().copied()).collect())
    }

    pub fn batch(&self, idx: &[usize]) -> Batch {
        let n = idx.len();
        let (ds, da) = (self.d_s(), self.d_a());
        let mut s = Vec::with_capacity(n * ds);
        let mut a = Vec::with_capacity(n * da);
        let mut r = Vec::with_capacity(n);
        let mut s2 = Vec::with_capacity(n * ds);
        let mut nd = Vec::with_capacity(n);
        let mut ld = Vec::with_capacity(n);
        for &i in idx {
            let t = &self.records[i];
            s.extend_from_slice(&t.state);
            a.extend_from_slice(&t.action);
            r.push(t.reward);
            s2.extend_from_slice(&t.next_state);
            nd.push(if t.terminal { 0.0 } else { 1.0 });
            if let Some(v) = t.log_density {
                ld.push(v);
            }
        }
        Batch {
            states: Tensor::matrix(n, ds, s),
            actions: Tensor::matrix(n, da, a),
            rewards: Tensor::matrix(n, 1, r),
            next_states: Tensor::matrix(n, ds, s2),
            not_done: Tensor::matrix(n, 1, nd),
            log_densities: (ld.len() == n && n > 0).then(|| Tensor::matrix(n, 1, ld)),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(&self.to_bytes()?)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let has = self.has_densities();
        let mut out = Vec::new();
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.d_s() as u32).to_le_bytes());
        out.extend_from_slice(&(self.d_a() as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.push(has as u8);
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        for t in &self.records {
            for v in t.state.iter().chain(&t.action).chain(std::iter::once(&t.reward)).chain(&t.next_state) {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.push(t.terminal as u8);
            if let Some(v) = t.log_density {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        let magic = r.take(8)?;
        ensure!(magic == DATASET_MAGIC, Format, "bad dataset magic {:?}", String::from_utf8_lossy(magic));
        let version = r.u32()?;
        ensure!(version == DATASET_VERSION, Format, "unsupported dataset version {version}");
        let d_s = r.u32()? as usize;
        let d_a = r.u32()? as usize;
        let count = r.u64()? as usize;
        let flags = r.take(1)?[0];
        ensure!(flags <= 1, Format, "unknown dataset flags {flags:#x}");
        let has = flags & 1 == 1;
        let mlen = r.u32()? as usize;
        let meta: DatasetMeta = serde_json::from_slice(r.take(mlen)?)?;
        ensure!(meta.d_s == d_s && meta.d_a == d_a, Format, "header dims disagree with metadata");
        let per = 8 * (2 * d_s + d_a + 1) + 1 + if has { 8 } else { 0 };
        ensure!(
            r.remaining() == count.saturating_mul(per),
            Format,
            "truncated or oversized body: {} bytes for {} records of {} bytes",
            r.remaining(),
            count,
            per
        );
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let state = r.f64s(d_s)?;
            let action = r.f64s(d_a)?;
            let reward = r.f64()?;
            let next_state = r.f64s(d_s)?;
            let terminal = r.take(1)?[0] != 0;
            let log_density = if has { Some(r.f64()?) } else { None };
            records.push(Transition { state, action, reward, next_state, terminal, log_density });
        }
        Self::new(records, meta)
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        let header = serde_json::json!({
            "format": "facdset-jsonl",
            "version": DATASET_VERSION,
            "meta": self.meta,
        });
        writeln!(w, "{header}")?;
        for t in &self.records {
            writeln!(w, "{}", serde_json::to_string(t)?)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_jsonl(path: &Path) -> Result<Self> {
        let f = BufReader::new(std::fs::File::open(path)?);
        let mut lines = f.lines();
        let header: serde_json::Value = match lines.next() {
            Some(l) => serde_json::from_str(&l?)?,
            None => return Err(Error::Format("empty dataset file".into())),
        };
        ensure!(header["format"] == "facdset-jsonl", Format, "not a JSON-lines dataset header");
        ensure!(header["version"] == DATASET_VERSION, Format, "unsupported dataset version {}", header["version"]);
        let meta: DatasetMeta = serde_json::from_value(header["meta"].clone())?;
        let mut records = Vec::new();
        for l in lines {
            let l = l?;
            if l.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str::<Transition>(&l)?);
        }
        Self::new(records, meta)
    }

    /// Dispatches on extension: `.jsonl` is JSON-lines, anything else binary.
    pub fn load_any(path: &Path) -> Result<Self> {
        if path.extension().is_some_and(|e| e == "jsonl") {
            Self::load_jsonl(path)
        } else {
            Self::load(path)
        }
    }

    pub fn save_any(&self, path: &Path) -> Result<()> {
        if path.extension().is_some_and(|e| e == "jsonl") {
            self.save_jsonl(path)
        } else {
            self.save(path)
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        ensure!(self.remaining() >= n, Format, "unexpected end of dataset at byte {}", self.pos);
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{make_bandit_dataset, make_gmm2d_dataset, BanditDataSpec};
    use crate::rng::seeded;
    use proptest::prelude::*;

    fn toy(n: usize, with_density: bool) -> OfflineDataset {
        let mut rng = seeded(n as u64);
        let ds = make_gmm2d_dataset(n, 1, &mut rng).unwrap();
        if with_density {
            let col: Vec<f64> = (0..n).map(|i| -(i as f64) / 7.0).collect();
            ds.with_log_densities(&col).unwrap()
        } else {
            ds
        }
    }

    proptest! {
        #[test]
        fn binary_round_trip(n in 1usize..40, dens in any::<bool>()) {
            let ds = toy(n, dens);
            let back = OfflineDataset::from_bytes(&ds.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(back, ds);
        }
    }

    #[test]
    fn jsonl_round_trip_and_missing_column() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let ds = toy(5, true);
        ds.save_jsonl(&p).unwrap();
        assert_eq!(OfflineDataset::load_jsonl(&p).unwrap(), ds);

        let plain = toy(5, false);
        plain.save_jsonl(&p).unwrap();
        let back = OfflineDataset::load_jsonl(&p).unwrap();
        assert!(!back.has_densities());
        assert_eq!(back.log_densities(), None);
    }

    #[test]
    fn corrupted_header_rejected() {
        let mut bytes = toy(3, false).to_bytes().unwrap();
        bytes[0] = b'X';
        let err = OfflineDataset::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");

        let mut bytes = toy(3, false).to_bytes().unwrap();
        bytes[8] = 7;
        assert!(OfflineDataset::from_bytes(&bytes).unwrap_err().to_string().contains("version"));

        let bytes = toy(3, true).to_bytes().unwrap();
        let err = OfflineDataset::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn mixed_density_column_is_rejected() {
        let ds = toy(3, false);
        let mut recs = ds.records().to_vec();
        recs[1].log_density = Some(0.0);
        assert!(OfflineDataset::new(recs, ds.meta().clone()).is_err());
    }

    #[test]
    fn generation_is_pure_in_seed() {
        let a = make_bandit_dataset(50, &BanditDataSpec::default(), 4, &mut seeded(4)).unwrap();
        let b = make_bandit_dataset(50, &BanditDataSpec::default(), 4, &mut seeded(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn batch_columns() {
        let ds = toy(4, true);
        let b = ds.batch(&[2, 0]);
        assert_eq!(b.states.shape(), &[2, 4]);
        assert_eq!(b.actions.row_slice(0), ds.records()[2].action.as_slice());
        assert_eq!(b.log_densities.unwrap().values(), &[-2.0 / 7.0, 0.0]);
        assert_eq!(b.not_done.values(), &[0.0, 0.0]);
    }
}
