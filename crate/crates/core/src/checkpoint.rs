//! Binary checkpoints.
//!
//! Layout (little-endian):
//!
//! * magic `BLIPCKPT`, version `u32`;
//! * `u32` length + JSON header with the model, feature and training configs
//!   and the optimizer step;
//! * `u32` tensor count, then per tensor: `u16` name length, name, `u8` rank,
//!   `u32` dims, `f64` values;
//! * `u8` state flag; when set: epoch and best epoch `u32`, best AUC `f64`,
//!   generator seed (32 bytes), stream `u64`, word position `u128`, then the
//!   first and second moments as two tensor lists in parameter order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::FeatureConfig;
use crate::network::{ModelConfig, ModelParams};
use crate::training::{AdamState, TrainConfig};
use crate::trajectory::write_atomic;

const MAGIC: &[u8; 8] = b"BLIPCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub adam: AdamState,
    pub epoch: usize,
    pub best_epoch: usize,
    pub best_auc: f64,
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub features: FeatureConfig,
    pub train: Option<TrainConfig>,
    pub state: Option<TrainState>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    features: FeatureConfig,
    train: Option<TrainConfig>,
    step: u64,
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    out.extend((name.len() as u16).to_le_bytes());
    out.extend(name.as_bytes());
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend((d as u32).to_le_bytes());
    }
    for x in data {
        out.extend(x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn tensor(&mut self) -> Result<(String, Vec<usize>, Vec<f64>)> {
        let len = self.u16()? as usize;
        let name = std::str::from_utf8(self.take(len)?).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?.to_string();
        let rank = self.u8()? as usize;
        let shape = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok((name, shape, data))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        let header = serde_json::to_vec(&Header {
            model: self.params.config.clone(),
            features: self.features.clone(),
            train: self.train.clone(),
            step: self.params.step,
        })?;
        out.extend((header.len() as u32).to_le_bytes());
        out.extend(&header);
        let mut count = 0u32;
        self.params.for_each(|_, _, _| count += 1);
        out.extend(count.to_le_bytes());
        self.params.for_each(|name, _, t| put_tensor(&mut out, name, &t.shape, &t.data));
        match &self.state {
            None => out.push(0),
            Some(s) => {
                out.push(1);
                out.extend((s.epoch as u32).to_le_bytes());
                out.extend((s.best_epoch as u32).to_le_bytes());
                out.extend(s.best_auc.to_le_bytes());
                out.extend(s.rng_seed);
                out.extend(s.rng_stream.to_le_bytes());
                out.extend(s.rng_word_pos.to_le_bytes());
                out.extend((s.adam.names.len() as u32).to_le_bytes());
                for moments in [&s.adam.m, &s.adam.v] {
                    for (name, data) in s.adam.names.iter().zip(moments) {
                        put_tensor(&mut out, name, &[data.len()], data);
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let len = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(len)?)?;
        let mut params = ModelParams::zeros(&header.model)?;
        params.step = header.step;
        let count = r.u32()? as usize;
        let mut tensors = std::collections::HashMap::new();
        for _ in 0..count {
            let (name, shape, data) = r.tensor()?;
            tensors.insert(name, (shape, data));
        }
        let mut missing = None;
        params.for_each_mut(|name, _, t| match tensors.remove(name) {
            Some((shape, data)) if shape == t.shape => t.data = data,
            _ => {
                missing.get_or_insert_with(|| name.to_string());
            }
        });
        if let Some(name) = missing {
            return Err(Error::Checkpoint(format!("tensor `{name}` missing or misshapen")));
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
        }
        let state = match r.u8()? {
            0 => None,
            1 => {
                let epoch = r.u32()? as usize;
                let best_epoch = r.u32()? as usize;
                let best_auc = r.f64()?;
                let rng_seed = r.array()?;
                let rng_stream = r.u64()?;
                let rng_word_pos = u128::from_le_bytes(r.array()?);
                let n = r.u32()? as usize;
                let mut adam = AdamState::new(&params);
                if adam.names.len() != n {
                    return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
                }
                for which in 0..2 {
                    for i in 0..n {
                        let (name, _, data) = r.tensor()?;
                        let slot = if which == 0 { &mut adam.m[i] } else { &mut adam.v[i] };
                        if name != adam.names[i] || data.len() != slot.len() {
                            return Err(Error::Checkpoint(format!("optimizer tensor `{name}` out of place")));
                        }
                        *slot = data;
                    }
                }
                Some(TrainState { adam, epoch, best_epoch, best_auc, rng_seed, rng_stream, rng_word_pos })
            }
            other => return Err(Error::Checkpoint(format!("bad state flag {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint { params, features: header.features, train: header.train, state })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = ModelParams::init(&ModelConfig::default(), &mut rng).unwrap();
        params.step = 17;
        let mut adam = AdamState::new(&params);
        adam.m[0][3] = -0.0;
        adam.v[2][1] = f64::MIN_POSITIVE / 4.0;
        Checkpoint {
            params,
            features: FeatureConfig::default(),
            train: Some(TrainConfig::default()),
            state: Some(TrainState {
                adam,
                epoch: 9,
                best_epoch: 4,
                best_auc: 0.987654321,
                rng_seed: [7; 32],
                rng_stream: 3,
                rng_word_pos: 1 << 70,
            }),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back, ck);
        assert!(back.state.unwrap().adam.m[0][3].is_sign_negative());
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }

    #[test]
    fn stateless_round_trip() {
        let mut ck = sample();
        ck.state = None;
        ck.train = None;
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
    }
}
