//! Versioned binary checkpoints: header JSON, parameters in declared
//! order, then optional AdamW moments.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DapError, Result};

use super::model::{Model, ModelConfig};
use super::optim::{AdamW, AdamWConfig};

const MAGIC: &[u8; 8] = b"DAPCKPT\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub seed: u64,
    pub step: u64,
    pub config_hash: String,
    /// Free-form stage label, e.g. `bc` or `sacbc`.
    pub stage: String,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<f64>,
    pub optimizer: Option<(AdamWConfig, Vec<f64>, Vec<f64>, u64)>,
    /// Extra named f64 blocks (for example critic heads).
    pub extras: Vec<(String, Vec<f64>)>,
}

fn put_f64s(buf: &mut Vec<u8>, v: &[f64]) {
    buf.extend_from_slice(&(v.len() as u64).to_le_bytes());
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u64).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(DapError::format(self.path, "truncated checkpoint"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| DapError::format(self.path, "bad length"))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u64()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| DapError::format(self.path, "invalid UTF-8"))
    }
}

impl Checkpoint {
    pub fn from_model(
        model: &Model,
        opt: Option<&AdamW>,
        seed: u64,
        config_hash: &str,
        stage: &str,
    ) -> Self {
        Checkpoint {
            header: CheckpointHeader {
                model: model.config.clone(),
                seed,
                step: opt.map_or(0, |o| o.step),
                config_hash: config_hash.to_string(),
                stage: stage.to_string(),
            },
            params: model.params.data.clone(),
            optimizer: opt.map(|o| (o.config, o.m.clone(), o.v.clone(), o.step)),
            extras: Vec::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let header = serde_json::to_string(&self.header).expect("header serializes");
        put_str(&mut buf, &header);
        put_f64s(&mut buf, &self.params);
        match &self.optimizer {
            Some((cfg, m, v, step)) => {
                buf.push(1);
                put_str(
                    &mut buf,
                    &serde_json::to_string(cfg).expect("optimizer config serializes"),
                );
                buf.extend_from_slice(&step.to_le_bytes());
                put_f64s(&mut buf, m);
                put_f64s(&mut buf, v);
            }
            None => buf.push(0),
        }
        buf.extend_from_slice(&(self.extras.len() as u64).to_le_bytes());
        for (name, data) in &self.extras {
            put_str(&mut buf, name);
            put_f64s(&mut buf, data);
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader {
            buf: bytes,
            pos: 0,
            path,
        };
        if r.take(8)? != MAGIC {
            return Err(DapError::format(path, "not a checkpoint file"));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(DapError::format(
                path,
                format!("unsupported checkpoint version {version}"),
            ));
        }
        let header: CheckpointHeader = serde_json::from_str(&r.string()?)
            .map_err(|e| DapError::format(path, format!("bad checkpoint header: {e}")))?;
        let params = r.f64s()?;
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let cfg: AdamWConfig = serde_json::from_str(&r.string()?)
                    .map_err(|e| DapError::format(path, format!("bad optimizer config: {e}")))?;
                let step = r.u64()?;
                let m = r.f64s()?;
                let v = r.f64s()?;
                if m.len() != params.len() || v.len() != params.len() {
                    return Err(DapError::format(path, "optimizer state size mismatch"));
                }
                Some((cfg, m, v, step))
            }
            _ => return Err(DapError::format(path, "bad optimizer flag")),
        };
        let n_extra = r.u64()? as usize;
        let mut extras = Vec::with_capacity(n_extra.min(64));
        for _ in 0..n_extra {
            let name = r.string()?;
            extras.push((name, r.f64s()?));
        }
        if r.pos != bytes.len() {
            return Err(DapError::format(path, "trailing bytes in checkpoint"));
        }
        Ok(Checkpoint {
            header,
            params,
            optimizer,
            extras,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| DapError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| DapError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn model(&self) -> Result<Model> {
        Model::from_params(self.header.model.clone(), self.params.clone())
    }

    pub fn optimizer_for(&self, model: &Model) -> Option<AdamW> {
        self.optimizer.as_ref().map(|(cfg, m, v, step)| {
            AdamW::with_state(*cfg, model.params.decay_mask(), m.clone(), v.clone(), *step)
        })
    }

    pub fn extra(&self, name: &str) -> Option<&[f64]> {
        self.extras
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, d)| d.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::armodel::model::tests::tiny_config;

    #[test]
    fn round_trip_is_byte_stable() {
        let m = Model::init(tiny_config(8, 1, 2, 1), 3).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), m.params.decay_mask());
        let mut p = m.params.data.clone();
        let g = vec![0.1; p.len()];
        opt.update(&mut p, &g);
        let mut ck = Checkpoint::from_model(&m, Some(&opt), 3, "abc", "bc");
        ck.extras.push(("critic".into(), vec![1.0, 2.0]));
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.model().unwrap().params.data, m.params.data);
        assert_eq!(back.optimizer_for(&m).unwrap(), opt);
        assert_eq!(back.extra("critic"), Some(&[1.0, 2.0][..]));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], Path::new("mem")).is_err());
    }
}
