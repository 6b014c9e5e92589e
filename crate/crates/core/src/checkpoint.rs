//! Versioned parameter-map checkpoints shared by every model.
//!
//! Layout (little-endian): magic `KDCK`, version `u16`, header length `u32`,
//! UTF-8 JSON header, parameter count `u32`, then per parameter: name length
//! `u16`, name, group `u8`, rank `u8`, `rank` dims as `u32`, and the values as
//! `f64`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Tensor;
use crate::tokenizer_vq::ByteReader;

const MAGIC: &[u8; 4] = b"KDCK";
const VERSION: u16 = 1;
const MAX_RANK: usize = 4;
const MAX_HEADER: usize = 1 << 20;

/// JSON header stored ahead of the parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// Which model the parameters belong to, e.g. `speech_encoder`.
    pub kind: String,
    /// Model configuration as written by the model itself.
    pub config: serde_json::Value,
    /// Output heads present in the parameter map.
    #[serde(default)]
    pub heads: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamStore,
}

fn group_code(g: ParamGroup) -> u8 {
    ParamGroup::ALL.iter().position(|x| *x == g).unwrap() as u8
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in self.params.iter() {
            out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.push(group_code(p.group));
            out.push(p.value.shape().len() as u8);
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = r.u32()? as usize;
        if hlen > MAX_HEADER {
            return Err(Error::Checkpoint("header too large".into()));
        }
        let header: CheckpointHeader = serde_json::from_slice(r.take(hlen)?)
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let n = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
                .to_string();
            let group = *ParamGroup::ALL
                .get(r.take(1)?[0] as usize)
                .ok_or_else(|| Error::Checkpoint(format!("bad group code for `{name}`")))?;
            let rank = r.take(1)?[0] as usize;
            if rank == 0 || rank > MAX_RANK {
                return Err(Error::Checkpoint(format!("bad rank {rank} for `{name}`")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let count = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let count = match count {
                Some(c) if c.checked_mul(8).is_some_and(|b| b <= r.remaining()) => c,
                _ => return Err(Error::Checkpoint(format!("truncated values for `{name}`"))),
            };
            let mut data = Vec::with_capacity(count);
            for _ in 0..count {
                data.push(r.f64()?);
            }
            if params.id_of(&name).is_some() {
                return Err(Error::Checkpoint(format!("duplicate parameter `{name}`")));
            }
            params.add(name, group, Tensor::new(shape, data));
        }
        if r.remaining() != 0 {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self { header, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Checks the kind tag and returns the decoded model config.
    pub fn config_as<T: serde::de::DeserializeOwned>(&self, kind: &str) -> Result<T> {
        if self.header.kind != kind {
            return Err(Error::Checkpoint(format!("expected a `{kind}` checkpoint, found `{}`", self.header.kind)));
        }
        serde_json::from_value(self.header.config.clone()).map_err(|e| Error::Checkpoint(format!("config: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ParamStore::new();
        params.add("a.weight", ParamGroup::Am, Tensor::matrix(2, 3, vec![1.0, -2.0, 3.5, 0.0, 1e-300, -0.0]));
        params.add("conv", ParamGroup::Heads, Tensor::new(vec![1, 1, 2, 2], vec![0.5; 4]));
        Checkpoint {
            header: CheckpointHeader { kind: "am".into(), config: serde_json::json!({"x": 1}), heads: vec!["ctc".into()] },
            params,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.params.checksum(), c.params.checksum());
    }

    #[test]
    fn rejects_truncation_and_trailing_bytes() {
        let bytes = sample().to_bytes();
        for cut in [0, 3, 10, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn kind_is_checked() {
        let c = sample();
        assert!(c.config_as::<serde_json::Value>("teacher").is_err());
        assert!(c.config_as::<serde_json::Value>("am").is_ok());
    }
}
