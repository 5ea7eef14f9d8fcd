//! Single-file checkpoint container.
//!
//! Layout (little endian):
//! `b"HJSCCKPT"`, `u32` format version, `u64` step, `u32` config length and
//! the TOML config snapshot, `u32` parameter count, then each parameter as
//! name, shape and `f64` data. An optional optimizer section follows with the
//! Adam step count and both moment buffers in parameter order.

use std::io::{Read, Write};
use std::path::Path;

use hjscc_nn::{Adam, AdamConfig, ParamStore, Tensor};

use crate::config::RunConfig;
use crate::error::{HjsccError, Result};
use crate::model::HjsccModel;

pub const MAGIC: &[u8; 8] = b"HJSCCKPT";
pub const FORMAT_VERSION: u32 = 1;

pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

pub struct Checkpoint {
    pub config: RunConfig,
    pub step: u64,
    pub params: ParamStore,
    pub optimizer: Option<OptimizerState>,
}

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    put_u32(w, t.shape().len() as u32)?;
    for &d in t.shape() {
        put_u64(w, d as u64)?;
    }
    let mut buf = Vec::with_capacity(t.len() * 8);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(w.write_all(&buf)?)
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_bytes(r: &mut impl Read, limit: usize) -> Result<Vec<u8>> {
    let n = get_u32(r)? as usize;
    if n > limit {
        return Err(HjsccError::Incompatible(format!("field length {n} exceeds {limit}")));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn get_tensor(r: &mut impl Read) -> Result<Tensor> {
    let nd = get_u32(r)? as usize;
    if nd > 8 {
        return Err(HjsccError::Incompatible(format!("tensor rank {nd}")));
    }
    let mut shape = Vec::with_capacity(nd);
    for _ in 0..nd {
        shape.push(get_u64(r)? as usize);
    }
    let n: usize = shape.iter().product();
    if n > 1 << 31 {
        return Err(HjsccError::Incompatible("tensor too large".into()));
    }
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    let data = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(Tensor::from_vec(&shape, data)?)
}

impl Checkpoint {
    pub fn from_model(model: &HjsccModel, step: u64, adam: Option<&Adam>) -> Self {
        Self {
            config: model.config.clone(),
            step,
            params: model.params.clone(),
            optimizer: adam.map(|a| OptimizerState {
                step: a.step,
                m: a.m.clone(),
                v: a.v.clone(),
            }),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Vec::new();
        w.write_all(MAGIC)?;
        put_u32(&mut w, FORMAT_VERSION)?;
        put_u64(&mut w, self.step)?;
        let cfg = self.config.to_toml_string()?;
        put_u32(&mut w, cfg.len() as u32)?;
        w.write_all(cfg.as_bytes())?;
        put_u32(&mut w, self.params.len() as u32)?;
        for (_, name, t) in self.params.iter() {
            put_u32(&mut w, name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            put_tensor(&mut w, t)?;
        }
        match &self.optimizer {
            None => w.write_all(&[0])?,
            Some(o) => {
                w.write_all(&[1])?;
                put_u64(&mut w, o.step)?;
                for t in o.m.iter().chain(&o.v) {
                    put_tensor(&mut w, t)?;
                }
            }
        }
        Ok(w)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| HjsccError::Incompatible("file too short".into()))?;
        if &magic != MAGIC {
            return Err(HjsccError::Incompatible("not a checkpoint file".into()));
        }
        let version = get_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(HjsccError::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let step = get_u64(&mut r)?;
        let cfg = get_bytes(&mut r, 1 << 20)?;
        let cfg = String::from_utf8(cfg)
            .map_err(|_| HjsccError::Incompatible("config snapshot is not UTF-8".into()))?;
        let config = RunConfig::from_toml_str(&cfg)?;
        let count = get_u32(&mut r)? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = String::from_utf8(get_bytes(&mut r, 4096)?)
                .map_err(|_| HjsccError::Incompatible("parameter name is not UTF-8".into()))?;
            let t = get_tensor(&mut r)?;
            params.add(name, t);
        }
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let optimizer = if flag[0] == 1 {
            let step = get_u64(&mut r)?;
            let mut m = Vec::with_capacity(count);
            let mut v = Vec::with_capacity(count);
            for _ in 0..count {
                m.push(get_tensor(&mut r)?);
            }
            for _ in 0..count {
                v.push(get_tensor(&mut r)?);
            }
            Some(OptimizerState { step, m, v })
        } else {
            None
        };
        Ok(Self {
            config,
            step,
            params,
            optimizer,
        })
    }

    /// Atomic write through a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Rebuild the model; fails if the stored weights do not fit the stored
    /// architecture.
    pub fn model(&self) -> Result<HjsccModel> {
        let mut model = HjsccModel::new(&self.config)?;
        model
            .params
            .load_from(&self.params)
            .map_err(|e| HjsccError::Incompatible(e.to_string()))?;
        Ok(model)
    }

    pub fn optimizer(&self, store: &ParamStore) -> Result<Adam> {
        match &self.optimizer {
            None => Ok(Adam::new(store, AdamConfig::default())),
            Some(o) => Adam::from_state(store, AdamConfig::default(), o.step, o.m.clone(), o.v.clone())
                .map_err(|e| HjsccError::Incompatible(e.to_string())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> HjsccModel {
        let mut cfg = RunConfig::default();
        cfg.model.channels = vec![4, 4];
        cfg.model.downsampling = vec![4, 2];
        cfg.model.width = 8;
        HjsccModel::new(&cfg).unwrap()
    }

    #[test]
    fn bytes_round_trip_with_optimizer_state() {
        let model = small();
        let mut adam = Adam::new(&model.params, AdamConfig::default());
        adam.step = 12;
        adam.m[0].data_mut()[0] = 0.25;
        let ck = Checkpoint::from_model(&model, 12, Some(&adam));
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.step, 12);
        assert_eq!(back.config, model.config);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let restored = back.optimizer(&back.params).unwrap();
        assert_eq!(restored.step, 12);
        assert_eq!(restored.m[0].data()[0], 0.25);
    }

    #[test]
    fn architecture_mismatch_is_incompatible() {
        let mut ck = Checkpoint::from_model(&small(), 0, None);
        ck.config.model.width = 16;
        assert!(matches!(ck.model(), Err(HjsccError::Incompatible(_))));
    }
}
