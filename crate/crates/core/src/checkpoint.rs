//! Checkpoint files.
//!
//! Layout: the 8-byte magic `TRMCKPT1`, a little-endian `u64` header length,
//! a JSON header, then every array's little-endian values back to back in
//! header order. Arrays are named `param/…`, `ema/…`, `adam_m/…`, `adam_v/…`,
//! `init/y`, `init/z`, `state/y` and `state/z{i}`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Model, ParamGroup, ParamStore};
use crate::recursion::LatentState;
use crate::tensor::{DType, Scalar, Tensor};
use crate::train::{AdamW, Ema, SamplePool, SampleStream, Slot, Trainer};

const MAGIC: &[u8; 8] = b"TRMCKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Parameter group, for `param/…` entries.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<ParamGroup>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolHeader {
    pub slots: Vec<Slot>,
    pub stream: SampleStream,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: u32,
    pub dtype: DType,
    pub config: RunConfig,
    pub config_hash: String,
    pub seed: u64,
    pub step: u64,
    pub param_count: usize,
    pub params_digest: String,
    pub ema_digest: String,
    pub adam_t: u64,
    pub pool: Option<PoolHeader>,
    pub arrays: Vec<ArrayEntry>,
}

/// Writes the full training state of `t`.
pub fn save<T: Scalar>(path: &Path, t: &Trainer<T>, config: &RunConfig) -> Result<()> {
    let mut entries: Vec<(String, Option<ParamGroup>, &Tensor<T>)> = Vec::new();
    for p in t.model.params.iter() {
        entries.push((format!("param/{}", p.name), Some(p.group), &*p.value));
    }
    for p in t.ema.shadow.iter() {
        entries.push((format!("ema/{}", p.name), None, &*p.value));
    }
    for (p, m) in t.model.params.iter().zip(&t.opt.m) {
        entries.push((format!("adam_m/{}", p.name), None, m));
    }
    for (p, v) in t.model.params.iter().zip(&t.opt.v) {
        entries.push((format!("adam_v/{}", p.name), None, v));
    }
    entries.push(("init/y".into(), None, &t.model.y_init));
    entries.push(("init/z".into(), None, &t.model.z_init));
    if let Some(y) = &t.pool.state.y {
        entries.push(("state/y".into(), None, y));
    }
    for (i, z) in t.pool.state.z.iter().enumerate() {
        entries.push((format!("state/z{i}"), None, z));
    }
    let arrays = entries
        .iter()
        .map(|(name, group, v)| ArrayEntry {
            name: name.clone(),
            shape: v.shape().to_vec(),
            group: *group,
        })
        .collect();
    let blobs: Vec<&Tensor<T>> = entries.iter().map(|e| e.2).collect();
    let header = Header {
        format: 1,
        dtype: T::DTYPE,
        config: config.canonical(),
        config_hash: config.hash(),
        seed: config.train.seed,
        step: t.step,
        param_count: t.model.param_count(),
        params_digest: t.model.params.digest(),
        ema_digest: t.ema.shadow.digest(),
        adam_t: t.opt.t,
        pool: Some(PoolHeader {
            slots: t.pool.slots.clone(),
            stream: t.pool.stream.clone(),
        }),
        arrays,
    };
    write_file(path, &header, &blobs)
}

fn write_file<T: Scalar>(path: &Path, header: &Header, blobs: &[&Tensor<T>]) -> Result<()> {
    let json = serde_json::to_vec(header)?;
    let total: usize = blobs.iter().map(|b| b.len()).sum();
    let mut out = Vec::with_capacity(16 + json.len() + total * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for b in blobs {
        for &v in b.data() {
            v.write_le(&mut out);
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn split(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json = bytes
        .get(16..16 + n)
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    Ok((header, &bytes[16 + n..]))
}

/// Reads only the header.
pub fn read_header(path: &Path) -> Result<Header> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(split(&bytes)?.0)
}

/// Decoded checkpoint contents.
pub struct Loaded<T> {
    pub header: Header,
    arrays: Vec<(ArrayEntry, Tensor<T>)>,
}

pub fn load<T: Scalar>(path: &Path) -> Result<Loaded<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, mut body) = split(&bytes)?;
    if header.dtype != T::DTYPE {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {:?}, requested {:?}",
            header.dtype,
            T::DTYPE
        )));
    }
    let w = T::DTYPE.size();
    let mut arrays = Vec::with_capacity(header.arrays.len());
    for e in &header.arrays {
        let n: usize = e.shape.iter().product();
        if body.len() < n * w {
            return Err(Error::Checkpoint(format!("truncated array {}", e.name)));
        }
        let data = body[..n * w].chunks_exact(w).map(T::read_le).collect();
        body = &body[n * w..];
        arrays.push((e.clone(), Tensor::from_vec(&e.shape, data)?));
    }
    if !body.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", body.len())));
    }
    Ok(Loaded { header, arrays })
}

impl<T: Scalar> Loaded<T> {
    fn take(&self, name: &str) -> Result<Tensor<T>> {
        self.arrays
            .iter()
            .find(|(e, _)| e.name == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::Checkpoint(format!("missing array {name}")))
    }

    fn store(&self, prefix: &str) -> Result<ParamStore<T>> {
        let mut s = ParamStore::new();
        for (e, t) in &self.arrays {
            if let Some(name) = e.name.strip_prefix("param/") {
                let v = if prefix == "param/" {
                    t.clone()
                } else {
                    self.take(&format!("{prefix}{name}"))?
                };
                s.push(name, e.group.unwrap_or(ParamGroup::Weight), v);
            }
        }
        Ok(s)
    }

    /// The model with training (`ema = false`) or EMA weights.
    pub fn model(&self, ema: bool) -> Result<Model<T>> {
        let c = &self.header.config;
        let mut m = Model::new(c.net.clone(), c.schedule.variant, 0)?;
        let stored = self.store(if ema { "ema/" } else { "param/" })?;
        if stored.len() != m.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} stored parameters, config implies {}",
                stored.len(),
                m.params.len()
            )));
        }
        for p in stored.iter() {
            m.params.set(&p.name, (*p.value).clone())?;
        }
        m.y_init = self.take("init/y")?;
        m.z_init = self.take("init/z")?;
        Ok(m)
    }

    /// Rebuilds the trainer so that training continues exactly where it stopped.
    pub fn trainer(&self, data: &Dataset) -> Result<Trainer<T>> {
        let c = &self.header.config;
        let model = self.model(false)?;
        let mut t = Trainer::new(model, c.schedule, c.train.clone(), data)?;
        t.ema = Ema {
            shadow: self.store("ema/")?,
            decay: c.train.ema_decay,
        };
        let names: Vec<String> = t.model.params.iter().map(|p| p.name.clone()).collect();
        t.opt = AdamW {
            m: names
                .iter()
                .map(|n| self.take(&format!("adam_m/{n}")))
                .collect::<Result<_>>()?,
            v: names
                .iter()
                .map(|n| self.take(&format!("adam_v/{n}")))
                .collect::<Result<_>>()?,
            t: self.header.adam_t,
        };
        let pool = self
            .header
            .pool
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("no sample pool stored".into()))?;
        if pool.stream.len != data.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint streamed {} records, dataset has {}",
                pool.stream.len,
                data.len()
            )));
        }
        let y = if t.pool.state.y.is_some() {
            Some(self.take("state/y")?)
        } else {
            None
        };
        let z = (0..t.pool.state.z.len())
            .map(|i| self.take(&format!("state/z{i}")))
            .collect::<Result<Vec<_>>>()?;
        t.pool = SamplePool {
            slots: pool.slots.clone(),
            state: LatentState { y, z },
            stream: SampleStream::resume(pool.stream.len, pool.stream.seed, pool.stream.epoch, pool.stream.pos)?,
        };
        t.step = self.header.step;
        Ok(t)
    }
}
