//! Versioned binary checkpoint.
//!
//! Layout, all integers `u32` and all reals `f64`, little-endian:
//!
//! ```text
//! magic "AHSTNCKP" | version
//! config text length | config text (`key = value` lines)
//! normalizer mean | normalizer std
//! node count N | adjacency N×N
//! parameter count | per parameter: name length, name, rank, dims, values
//! assignment flag (u8) | rows | cols | values | frozen (u8)
//! block count | per block: channels, running mean, running var
//! ```
//!
//! Parameters appear in census order.

use std::fs;
use std::path::Path;

use crate::config::KvFile;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::graph::GraphSpec;
use crate::hierarchy::AssignmentState;
use crate::model::{Model, ModelConfig};
use crate::scalar::Scalar;
use crate::training::Normalizer;

pub const MAGIC: &[u8; 8] = b"AHSTNCKP";
pub const VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("value {v} exceeds u32")))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn reals<S: Scalar>(&mut self, vs: &[S]) {
        for v in vs {
            self.f64(v.as_f64());
        }
    }

    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.u32(b.len())?;
        self.0.extend_from_slice(b);
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated file: need {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(f64::from_le_bytes(a))
    }

    fn reals<S: Scalar>(&mut self, n: usize) -> Result<Vec<S>> {
        (0..n).map(|_| self.f64().map(S::of)).collect()
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()?;
        self.take(n)
    }
}

pub fn encode<S: Scalar>(model: &Model<S>, normalizer: &Normalizer) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION as usize)?;

    let text: String = model
        .config()
        .pairs()
        .iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect();
    w.bytes(text.as_bytes())?;
    w.f64(normalizer.mean);
    w.f64(normalizer.std);

    let n = model.n_nodes();
    w.u32(n)?;
    w.reals(model.graph().adjacency().data());

    let entries = model.params().entries();
    w.u32(entries.len())?;
    for e in entries {
        w.bytes(e.name.as_bytes())?;
        w.u32(e.value.rank())?;
        for &d in e.value.shape() {
            w.u32(d)?;
        }
        w.reals(e.value.data());
    }

    match model.assignment() {
        Some(a) => {
            w.u8(1);
            w.u32(a.n_nodes())?;
            w.u32(a.n_clusters())?;
            w.reals(a.matrix().data());
            w.u8(u8::from(a.is_frozen()));
        }
        None => w.u8(0),
    }

    let stats = model.running_stats();
    w.u32(stats.len())?;
    for s in stats {
        w.u32(s.mean.len())?;
        w.reals(&s.mean);
        w.reals(&s.var);
    }
    Ok(w.0)
}

pub fn decode<S: Scalar>(bytes: &[u8]) -> Result<(Model<S>, Normalizer)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic bytes)".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }

    let text = std::str::from_utf8(r.bytes()?).map_err(|_| Error::Checkpoint("config text is not UTF-8".into()))?;
    let kv = KvFile::parse(text, None)?;
    let mut config = ModelConfig::default();
    for e in &kv.entries {
        config.set(&e.key, &e.value)?;
    }
    let normalizer = Normalizer::new(r.f64()?, r.f64()?)?;

    let n = r.u32()?;
    let adjacency = Tensor::new([n, n], r.reals(n * n)?)?;
    let mut model = Model::new(config, GraphSpec::new(adjacency)?)?;

    let count = r.u32()?;
    if count != model.params().len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {count} parameters, model expects {}",
            model.params().len()
        )));
    }
    for entry in model.params_mut().entries_mut() {
        let name = std::str::from_utf8(r.bytes()?).map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        if name != entry.name {
            return Err(Error::Checkpoint(format!("expected parameter '{}', found '{name}'", entry.name)));
        }
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        if shape != entry.value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter '{name}' has shape {shape:?}, model expects {:?}",
                entry.value.shape()
            )));
        }
        let numel = entry.value.numel();
        entry.value = Tensor::new(shape, r.reals(numel)?)?;
    }

    if r.u8()? == 1 {
        let (rows, cols) = (r.u32()?, r.u32()?);
        let m = Tensor::new([rows, cols], r.reals(rows * cols)?)?;
        let frozen = r.u8()? == 1;
        let cfg = model.config();
        let state = AssignmentState::from_matrix(m, S::of(cfg.alpha), S::of(cfg.tau), frozen)?;
        model.set_assignment(state)?;
    } else if model.assignment().is_some() {
        return Err(Error::Checkpoint("checkpoint lacks the cluster assignment".into()));
    }

    let blocks = r.u32()?;
    if blocks != model.running_stats().len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {blocks} normalization layers, model expects {}",
            model.running_stats().len()
        )));
    }
    for s in model.running_stats_mut() {
        let c = r.u32()?;
        if c != s.mean.len() {
            return Err(Error::Checkpoint("running statistics width mismatch".into()));
        }
        s.mean = r.reals(c)?;
        s.var = r.reals(c)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((model, normalizer))
}

pub fn save<S: Scalar>(path: &Path, model: &Model<S>, normalizer: &Normalizer) -> Result<()> {
    let bytes = encode(model, normalizer)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load<S: Scalar>(path: &Path) -> Result<(Model<S>, Normalizer)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
