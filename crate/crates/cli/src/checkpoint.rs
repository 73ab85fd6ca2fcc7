//! Binary checkpoints: generator, discriminator and both optimiser states.
//!
//! Layout (little endian):
//!
//! ```text
//! b"WSDT" | u32 version | u64 meta_len | meta JSON
//! u64 count | count × (u32 name_len | name | u32 rank | rank × u64 extent | f32 data)
//! ```

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use wsdt::diffusion::NoiseSchedule;
use wsdt::nn::ParamStore;
use wsdt::tensor::Tensor;
use wsdt::training::{Adam, TrainConfig, Trainer};
use wsdt::wsdt::{ModelConfig, Wsdt};
use wsdt::{Error, Result};

const MAGIC: &[u8; 4] = b"WSDT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub schedule: NoiseSchedule,
    pub iteration: u64,
    pub seed: u64,
    pub opt_g_step: u64,
    pub opt_d_step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: Meta,
    pub arrays: Vec<(String, Tensor<f32>)>,
}

fn push_store(arrays: &mut Vec<(String, Tensor<f32>)>, prefix: &str, store: &ParamStore<f32>) {
    arrays.extend(store.iter().map(|(n, t)| (format!("{prefix}/{n}"), t.clone())));
}

fn push_adam(arrays: &mut Vec<(String, Tensor<f32>)>, prefix: &str, store: &ParamStore<f32>, opt: &Adam<f32>) {
    for ((name, _), (m, v)) in store.iter().zip(opt.m.iter().zip(&opt.v)) {
        arrays.push((format!("{prefix}/m/{name}"), m.clone()));
        arrays.push((format!("{prefix}/v/{name}"), v.clone()));
    }
}

impl Checkpoint {
    pub fn from_trainer(tr: &Trainer<f32>) -> Self {
        let mut arrays = Vec::new();
        push_store(&mut arrays, "g", &tr.generator.params);
        push_store(&mut arrays, "d", &tr.disc_params);
        push_adam(&mut arrays, "opt_g", &tr.generator.params, &tr.opt_g);
        push_adam(&mut arrays, "opt_d", &tr.disc_params, &tr.opt_d);
        Self {
            meta: Meta {
                model: *tr.generator.config(),
                train: tr.config.clone(),
                schedule: tr.schedule.clone(),
                iteration: tr.iteration,
                seed: tr.config.seed,
                opt_g_step: tr.opt_g.step,
                opt_d_step: tr.opt_d.step,
            },
            arrays,
        }
    }

    /// Rebuilds the full training state. Every array must match the shape of
    /// a freshly constructed trainer, and nothing may be missing or extra.
    pub fn into_trainer(self) -> Result<Trainer<f32>> {
        let meta = self.meta;
        let mut tr = Trainer::new(meta.model, meta.train, meta.schedule)?;
        let mut arrays = Arrays::new(self.arrays);
        arrays.fill_store("g", &mut tr.generator.params)?;
        arrays.fill_store("d", &mut tr.disc_params)?;
        arrays.fill_adam("opt_g", &tr.generator.params, &mut tr.opt_g)?;
        arrays.fill_adam("opt_d", &tr.disc_params, &mut tr.opt_d)?;
        arrays.finish()?;
        tr.iteration = meta.iteration;
        tr.opt_g.step = meta.opt_g_step;
        tr.opt_d.step = meta.opt_d_step;
        Ok(tr)
    }

    /// Only the generator, for inference.
    pub fn into_generator(self) -> Result<(Wsdt<f32>, NoiseSchedule)> {
        let mut g = Wsdt::new(self.meta.model, 0)?;
        let mut arrays = Arrays::new(self.arrays.into_iter().filter(|(n, _)| n.starts_with("g/")).collect());
        arrays.fill_store("g", &mut g.params)?;
        arrays.finish()?;
        Ok((g, self.meta.schedule))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.arrays.len() as u64).to_le_bytes());
        for (name, t) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a wsdt checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = r.len_u64()?;
        let meta: Meta = serde_json::from_slice(r.take(meta_len)?)?;
        let count = r.len_u64()?;
        let mut arrays = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("checkpoint array name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.len_u64()).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .ok_or_else(|| Error::Format(format!("array {name}: extents overflow")))?;
            let raw = r.take(
                numel
                    .checked_mul(4)
                    .ok_or_else(|| Error::Format("array too large".into()))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            arrays.push((name, Tensor::new(&shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint arrays".into()));
        }
        Ok(Self { meta, arrays })
    }

    /// Writes to a sibling temporary file and renames it into place, so a
    /// crash never leaves a half-written checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.encode()?)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn len_u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::Format(format!("length {v} does not fit in memory")))
    }
}

/// Named arrays consumed by key; leftovers are an error.
struct Arrays(std::collections::HashMap<String, Tensor<f32>>);

impl Arrays {
    fn new(list: Vec<(String, Tensor<f32>)>) -> Self {
        Self(list.into_iter().collect())
    }

    fn take(&mut self, name: &str, shape: &[usize]) -> Result<Tensor<f32>> {
        let t = self
            .0
            .remove(name)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing array {name}")))?;
        if t.shape() != shape {
            return Err(Error::Format(format!(
                "checkpoint array {name} has shape {:?}, model expects {:?}",
                t.shape(),
                shape
            )));
        }
        Ok(t)
    }

    fn fill_store(&mut self, prefix: &str, store: &mut ParamStore<f32>) -> Result<()> {
        for id in store.ids().collect::<Vec<_>>() {
            let name = format!("{prefix}/{}", store.name(id));
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = self.take(&name, &shape)?;
        }
        Ok(())
    }

    fn fill_adam(&mut self, prefix: &str, store: &ParamStore<f32>, opt: &mut Adam<f32>) -> Result<()> {
        for (i, (name, t)) in store.iter().enumerate() {
            opt.m[i] = self.take(&format!("{prefix}/m/{name}"), t.shape())?;
            opt.v[i] = self.take(&format!("{prefix}/v/{name}"), t.shape())?;
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        match self.0.keys().min() {
            Some(name) => Err(Error::Format(format!("checkpoint has unexpected array {name}"))),
            None => Ok(()),
        }
    }
}
