//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! "TCLN" u8:version
//! u32:len  JSON {arch, topology}
//! u64:epoch f64:lr
//! u32:n_params
//!   n_params × { u32:len name  f64:lr_multiplier  u8:regularize
//!                u32:ndim  ndim × u32:dim  count × f32 }
//! u8:has_velocity  [n_params × count × f32]
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_network, ArchConfig, NetworkGraph, Topology};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TCLN";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub lr_multiplier: f64,
    pub regularize: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrainCounters {
    /// Number of completed epochs.
    pub epoch: u64,
    /// Learning rate to use for the next epoch.
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: ArchConfig,
    pub topology: Topology,
    pub params: Vec<ParamRecord>,
    pub counters: TrainCounters,
    /// Optimizer velocity, one buffer per parameter in table order.
    pub velocity: Option<Vec<Vec<f32>>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Fingerprint {
    arch: ArchConfig,
    topology: Topology,
}

impl Checkpoint {
    pub fn from_network<T: Scalar>(net: &NetworkGraph<T>) -> Self {
        Checkpoint {
            arch: net.arch().clone(),
            topology: net.topology(),
            params: net
                .params()
                .iter()
                .map(|p| ParamRecord {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    data: p.value.data().iter().map(|v| v.to_f64_lossy() as f32).collect(),
                    lr_multiplier: p.lr_multiplier,
                    regularize: p.regularize,
                })
                .collect(),
            counters: TrainCounters::default(),
            velocity: None,
        }
    }

    /// Rebuilds the network and overwrites every parameter from the records.
    pub fn to_network<T: Scalar>(&self) -> Result<NetworkGraph<T>> {
        let mut net = build_network::<T>(&self.arch, self.topology, 0)?;
        if net.params().len() != self.params.len() {
            return Err(Error::IncompatibleCheckpoint(format!(
                "checkpoint has {} parameters, network has {}",
                self.params.len(),
                net.params().len()
            )));
        }
        for rec in &self.params {
            let id = net
                .params()
                .id(&rec.name)
                .ok_or_else(|| Error::IncompatibleCheckpoint(format!("unknown parameter {}", rec.name)))?;
            let p = net.params_mut().get_mut(id);
            if p.value.shape() != rec.shape.as_slice() {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "{}: shape {:?} in checkpoint, {:?} in network",
                    rec.name,
                    rec.shape,
                    p.value.shape()
                )));
            }
            p.value = Tensor::new(rec.shape.clone(), rec.data.iter().map(|&v| T::from_f64_lossy(v as f64)).collect())?;
            p.lr_multiplier = rec.lr_multiplier;
            p.regularize = rec.regularize;
        }
        Ok(net)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        let fp = serde_json::to_vec(&Fingerprint { arch: self.arch.clone(), topology: self.topology })
            .expect("config serializes");
        put_u32(&mut out, fp.len());
        out.extend_from_slice(&fp);
        out.extend_from_slice(&self.counters.epoch.to_le_bytes());
        out.extend_from_slice(&self.counters.lr.to_le_bytes());
        put_u32(&mut out, self.params.len());
        for p in &self.params {
            put_u32(&mut out, p.name.len());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&p.lr_multiplier.to_le_bytes());
            out.push(p.regularize as u8);
            put_u32(&mut out, p.shape.len());
            for &d in &p.shape {
                put_u32(&mut out, d);
            }
            put_f32s(&mut out, &p.data);
        }
        match &self.velocity {
            Some(v) => {
                out.push(1);
                for buf in v {
                    put_f32s(&mut out, buf);
                }
            }
            None => out.push(0),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 5 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::UnreadableCheckpoint("missing TCLN magic".into()));
        }
        if bytes[4] != CHECKPOINT_VERSION {
            return Err(Error::UnreadableCheckpoint(format!(
                "format version {} (expected {CHECKPOINT_VERSION})",
                bytes[4]
            )));
        }
        let mut r = Reader { buf: bytes, pos: 5 };
        let fp_len = r.u32()?;
        let fp: Fingerprint = serde_json::from_slice(r.take(fp_len)?)
            .map_err(|e| Error::CheckpointIntegrity(format!("bad fingerprint: {e}")))?;
        let epoch = u64::from_le_bytes(r.array()?);
        let lr = f64::from_le_bytes(r.array()?);
        let n = r.u32()?;
        let mut params = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let len = r.u32()?;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::CheckpointIntegrity("parameter name is not UTF-8".into()))?;
            let lr_multiplier = f64::from_le_bytes(r.array()?);
            let regularize = match r.take(1)?[0] {
                0 => false,
                1 => true,
                b => return Err(Error::CheckpointIntegrity(format!("{name}: bad flag byte {b}"))),
            };
            let ndim = r.u32()?;
            let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let count = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::CheckpointIntegrity(format!("{name}: shape overflows")))?;
            let data = r.f32s(count)?;
            params.push(ParamRecord { name, shape, data, lr_multiplier, regularize });
        }
        let velocity = match r.take(1)?[0] {
            0 => None,
            1 => Some(params.iter().map(|p| r.f32s(p.data.len())).collect::<Result<Vec<_>>>()?),
            b => return Err(Error::CheckpointIntegrity(format!("bad velocity flag {b}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::CheckpointIntegrity(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { arch: fp.arch, topology: fp.topology, params, counters: TrainCounters { epoch, lr }, velocity })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Writes the network's parameters with zeroed counters and no optimizer state.
pub fn save_checkpoint<T: Scalar>(net: &NetworkGraph<T>, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::from_network(net).save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<NetworkGraph> {
    Checkpoint::load(path)?.to_network()
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    let v = u32::try_from(v).expect("length fits in u32");
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, data: &[f32]) {
    out.reserve(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::CheckpointIntegrity(format!("truncated at byte {} (need {n} more)", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.array()?) as usize)
    }

    fn f32s(&mut self, count: usize) -> Result<Vec<f32>> {
        let bytes = self.take(count.checked_mul(4).ok_or_else(|| Error::CheckpointIntegrity("size overflow".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}
