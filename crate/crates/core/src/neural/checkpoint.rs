//! Binary checkpoint: magic, version, JSON header, raw little-endian f64.
//!
//! The payload holds, in header order, each parameter's values followed by
//! its two Adam moment buffers, then each batchnorm running mean.

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::batchnorm::BatchNormState;
use super::param::{ParamStore, Parameter};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"FGSECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: [usize; 2],
    step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct NormMeta {
    name: String,
    len: usize,
    momentum: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    toolkit: String,
    config: serde_json::Value,
    system_digest: Option<String>,
    params: Vec<ParamMeta>,
    batchnorm: Vec<NormMeta>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Echo of the model configuration that produced the parameters.
    pub config: serde_json::Value,
    pub system_digest: Option<String>,
    pub params: ParamStore,
    pub batchnorm: Vec<(String, BatchNormState)>,
}

fn put(out: &mut Vec<u8>, values: impl Iterator<Item = f64>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }

    fn matrix(&mut self, shape: [usize; 2]) -> Result<Array2<f64>> {
        let data = self.f64s(shape[0] * shape[1])?;
        Array2::from_shape_vec((shape[0], shape[1]), data).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            toolkit: crate::TOOLKIT_VERSION.to_string(),
            config: self.config.clone(),
            system_digest: self.system_digest.clone(),
            params: self
                .params
                .params
                .iter()
                .map(|p| ParamMeta {
                    name: p.name.clone(),
                    shape: [p.value.nrows(), p.value.ncols()],
                    step: p.step,
                })
                .collect(),
            batchnorm: self
                .batchnorm
                .iter()
                .map(|(name, bn)| NormMeta {
                    name: name.clone(),
                    len: bn.running_mean.len(),
                    momentum: bn.momentum,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in &self.params.params {
            put(&mut out, p.value.iter().copied());
            put(&mut out, p.adam_m.iter().copied());
            put(&mut out, p.adam_v.iter().copied());
        }
        for (_, bn) in &self.batchnorm {
            put(&mut out, bn.running_mean.iter().copied());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
        let header: Header = serde_json::from_slice(r.take(len)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut params = ParamStore::new();
        for meta in header.params {
            let value = r.matrix(meta.shape)?;
            let adam_m = r.matrix(meta.shape)?;
            let adam_v = r.matrix(meta.shape)?;
            params.params.push(Parameter {
                name: meta.name,
                value,
                grad: None,
                adam_m,
                adam_v,
                step: meta.step,
            });
        }
        let mut batchnorm = Vec::new();
        for meta in header.batchnorm {
            let running_mean = Array1::from(r.f64s(meta.len)?);
            if running_mean.iter().any(|v| !v.is_finite()) {
                return Err(Error::Checkpoint(format!("non-finite running mean in {}", meta.name)));
            }
            batchnorm.push((
                meta.name,
                BatchNormState {
                    running_mean,
                    momentum: meta.momentum,
                },
            ));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            config: header.config,
            system_digest: header.system_digest,
            params,
            batchnorm,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::param::glorot_uniform;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut params = ParamStore::new();
        for (i, shape) in [(3, 4), (1, 4), (4, 1)].into_iter().enumerate() {
            let id = params.add(format!("p{i}"), glorot_uniform(shape.0, shape.1, &mut rng));
            let p = params.get_mut(id);
            p.adam_m = glorot_uniform(shape.0, shape.1, &mut rng);
            p.adam_v = glorot_uniform(shape.0, shape.1, &mut rng).mapv(|v| v * v * 1e-7);
            p.step = 17 + i as u64;
        }
        let mut bn = BatchNormState::new(4);
        bn.running_mean = Array1::from(vec![0.1, -1.0 / 3.0, f64::MIN_POSITIVE, 1e300]);
        Checkpoint {
            config: serde_json::json!({"embedding_size": 4, "leaky_relu_slope": 0.2}),
            system_digest: Some("abc".into()),
            params,
            batchnorm: vec![("bn0".into(), bn)],
        }
    }

    #[test]
    fn bit_exact_round_trip() {
        let ck = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        for (a, b) in back.params.params.iter().zip(&ck.params.params) {
            assert!(a.value.iter().zip(b.value.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(back.to_bytes().unwrap(), ck.to_bytes().unwrap());
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
