//! GIMA activation stores and GIMC checkpoints.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::autodiff::{Param, ParamId};
use crate::data::{gather_items, read_all, ByteReader};
use crate::error::{GimError, Result};
use crate::tensor::Tensor;
use crate::training::{AdamConfig, AdamState};

pub const GIMA_MAGIC: [u8; 4] = *b"GIMA";
pub const GIMC_MAGIC: [u8; 4] = *b"GIMC";
pub const GIMC_VERSION: u32 = 1;

/// Outputs of a frozen module for every sample of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationCacheStore {
    pub module: usize,
    /// `[n, ...]`, one entry per sample.
    pub values: Tensor,
}

impl ActivationCacheStore {
    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.values.shape()[1..]
    }

    pub fn gather(&self, index: &[usize]) -> Result<Tensor> {
        gather_items(&self.values, index)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&GIMA_MAGIC)?;
        w.write_all(&(self.module as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&(self.sample_shape().len() as u32).to_le_bytes())?;
        for &d in self.sample_shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in self.values.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let buf = read_all(path)?;
        let mut r = ByteReader::new(path, &buf);
        r.magic(GIMA_MAGIC)?;
        let module = r.u32()? as usize;
        let n = usize::try_from(r.u64()?).map_err(|_| GimError::DimOverflow { path: path.to_path_buf() })?;
        let rank = r.u32()? as usize;
        let (sample, per) = r.shape(rank)?;
        let numel = n
            .checked_mul(per)
            .filter(|v| v.checked_mul(8).is_some())
            .ok_or_else(|| GimError::DimOverflow { path: path.to_path_buf() })?;
        let mut dims = vec![n];
        dims.extend(sample);
        if dims.contains(&0) {
            return Err(r.format(format!("zero extent in {dims:?}")));
        }
        let data = r.f64s(numel)?;
        r.finish()?;
        Ok(Self {
            module,
            values: Tensor::new(dims, data)?,
        })
    }
}

/// Parameters (and optionally optimiser state) of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// SHA-256 of the run config, as 64 hex characters.
    pub config_digest: String,
    pub params: Vec<(ParamId, Tensor)>,
    pub optimizer: Option<Vec<AdamState>>,
}

fn digest_bytes(hex: &str) -> Result<[u8; 32]> {
    if hex.len() != 64 {
        return Err(GimError::invalid("checkpoint", format!("config digest must be 64 hex characters, got {}", hex.len())));
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16)
            .map_err(|_| GimError::invalid("checkpoint", "config digest is not hex"))?;
    }
    Ok(out)
}

impl Checkpoint {
    pub fn from_params<'a>(config_digest: &str, params: impl IntoIterator<Item = &'a Param>, optimizer: Option<Vec<AdamState>>) -> Self {
        Self {
            config_digest: config_digest.to_string(),
            params: params.into_iter().map(|p| (p.id, p.value.clone())).collect(),
            optimizer,
        }
    }

    /// Copies values into `params`, matching by id and shape.
    pub fn load_into<'a>(&self, params: impl IntoIterator<Item = &'a mut Param>) -> Result<()> {
        let mut seen = 0;
        for p in params {
            let (_, t) = self
                .params
                .iter()
                .find(|(id, _)| *id == p.id)
                .ok_or_else(|| GimError::invalid("checkpoint", format!("no entry for {} (id {})", p.name, p.id.0)))?;
            if t.shape() != p.value.shape() {
                return Err(GimError::shape("checkpoint", t.shape(), p.value.shape()));
            }
            p.value = t.clone();
            seen += 1;
        }
        if seen != self.params.len() {
            return Err(GimError::invalid(
                "checkpoint",
                format!("checkpoint holds {} parameters, model has {seen}", self.params.len()),
            ));
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let digest = digest_bytes(&self.config_digest)?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&GIMC_MAGIC)?;
        w.write_all(&GIMC_VERSION.to_le_bytes())?;
        w.write_all(&digest)?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (id, t) in &self.params {
            w.write_all(&id.0.to_le_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        match &self.optimizer {
            None => w.write_all(&0u32.to_le_bytes())?,
            Some(states) => {
                w.write_all(&1u32.to_le_bytes())?;
                w.write_all(&(states.len() as u32).to_le_bytes())?;
                for s in states {
                    w.write_all(&s.step.to_le_bytes())?;
                    for v in [s.config.lr, s.config.beta1, s.config.beta2, s.config.eps] {
                        w.write_all(&v.to_le_bytes())?;
                    }
                    w.write_all(&(s.moments.len() as u32).to_le_bytes())?;
                    for (id, (m, v)) in &s.moments {
                        w.write_all(&id.0.to_le_bytes())?;
                        w.write_all(&(m.numel() as u64).to_le_bytes())?;
                        for x in m.data().iter().chain(v.data()) {
                            w.write_all(&x.to_le_bytes())?;
                        }
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let buf = read_all(path)?;
        let mut r = ByteReader::new(path, &buf);
        r.magic(GIMC_MAGIC)?;
        let version = r.u32()?;
        if version != GIMC_VERSION {
            return Err(r.format(format!("unsupported version {version}")));
        }
        let config_digest = crate::params::hex(r.take(32)?);
        let count = r.u32()?;
        let mut params = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let id = ParamId(r.u32()?);
            let rank = r.u32()? as usize;
            let (dims, numel) = r.shape(rank)?;
            let data = r.f64s(numel)?;
            params.push((id, Tensor::new(dims, data)?));
        }
        let optimizer = match r.u32()? {
            0 => None,
            1 => {
                let n = r.u32()?;
                let mut states = Vec::with_capacity(n as usize);
                for _ in 0..n {
                    let step = r.u64()?;
                    let f = r.f64s(4)?;
                    let mut state = AdamState::new(AdamConfig {
                        lr: f[0],
                        beta1: f[1],
                        beta2: f[2],
                        eps: f[3],
                    });
                    state.step = step;
                    let entries = r.u32()?;
                    for _ in 0..entries {
                        let id = ParamId(r.u32()?);
                        let numel = r.u64()? as usize;
                        let shape = params
                            .iter()
                            .find(|(pid, _)| *pid == id)
                            .map(|(_, t)| t.shape().to_vec())
                            .ok_or_else(|| r.format(format!("optimizer state for unknown parameter {}", id.0)))?;
                        let m = r.f64s(numel)?;
                        let v = r.f64s(numel)?;
                        state.moments.insert(id, (Tensor::new(shape.clone(), m)?, Tensor::new(shape, v)?));
                    }
                    states.push(state);
                }
                Some(states)
            }
            other => return Err(r.format(format!("unknown optimizer flag {other}"))),
        };
        r.finish()?;
        Ok(Self {
            config_digest,
            params,
            optimizer,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gima_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.gima");
        let store = ActivationCacheStore {
            module: 2,
            values: Tensor::new(vec![3, 2, 2], (0..12).map(|i| i as f64 / 7.0 - 0.5).collect()).unwrap(),
        };
        store.write(&path).unwrap();
        let back = ActivationCacheStore::read(&path).unwrap();
        assert_eq!(back.module, 2);
        assert!(back.values.bitwise_eq(&store.values));
        assert_eq!(back.gather(&[2, 0]).unwrap().data()[..4], store.values.data()[8..12]);

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(ActivationCacheStore::read(&path), Err(GimError::Truncated { .. })));
        std::fs::write(&path, b"GIMD").unwrap();
        assert!(matches!(ActivationCacheStore::read(&path), Err(GimError::BadMagic { .. })));
    }

    #[test]
    fn gimc_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.gimc");
        let p = Param {
            id: ParamId(4),
            name: "w".into(),
            value: Tensor::matrix(2, 2, vec![1.0, -2.0, 3.5, 0.25]).unwrap(),
        };
        let mut state = AdamState::new(AdamConfig::default());
        state.step = 7;
        state
            .moments
            .insert(ParamId(4), (Tensor::full(&[2, 2], 0.1), Tensor::full(&[2, 2], 0.01)));
        let digest = "ab".repeat(32);
        let ck = Checkpoint::from_params(&digest, [&p], Some(vec![state]));
        ck.write(&path).unwrap();
        let back = Checkpoint::read(&path).unwrap();
        assert_eq!(back, ck);

        let mut q = p.clone();
        q.value = Tensor::zeros(&[2, 2]);
        back.load_into([&mut q]).unwrap();
        assert!(q.value.bitwise_eq(&p.value));
        let mut wrong = p.clone();
        wrong.value = Tensor::zeros(&[4]);
        assert!(back.load_into([&mut wrong]).is_err());
    }
}
