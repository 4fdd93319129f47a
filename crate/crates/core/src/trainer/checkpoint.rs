//! Binary checkpoint format.
//!
//! ```text
//! "PISAC" | u16 version | u32 config length | config JSON
//! u64 epoch | u64 Adam step | u32 tensor count
//! tensors: u8 rank | u32 extents… | f64 payload
//! ```
//!
//! All integers and floats are little-endian. Tensors are the network
//! parameters followed by the Adam first and second moments.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamState, TrainConfig, TrainError};
use crate::autodiff::Tensor;
use crate::network::{NetworkConfig, NetworkParams, Variant};
use crate::scenario::SystemConfig;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"PISAC";
pub const CHECKPOINT_VERSION: u16 = 1;

/// A trained network with everything needed to evaluate or resume it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub system: SystemConfig,
    pub train: TrainConfig,
    pub variant: Variant,
    pub epoch: u64,
    pub params: NetworkParams,
    pub adam: AdamState,
}

#[derive(Serialize, Deserialize)]
struct ConfigBlock {
    system: SystemConfig,
    train: TrainConfig,
    variant: Variant,
}

fn bad(msg: impl Into<String>) -> TrainError {
    TrainError::Checkpoint(msg.into())
}

fn write_tensor(out: &mut Vec<u8>, t: &Tensor) -> Result<(), TrainError> {
    let rank = u8::try_from(t.rank()).map_err(|_| bad("tensor rank exceeds 255"))?;
    out.push(rank);
    for &e in t.shape() {
        out.extend(u32::try_from(e).map_err(|_| bad("tensor extent exceeds u32"))?.to_le_bytes());
    }
    for v in t.data() {
        out.extend(v.to_le_bytes());
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| bad("truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], TrainError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8, TrainError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, TrainError> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn tensor(&mut self) -> Result<Tensor, TrainError> {
        let rank = self.u8()? as usize;
        let shape = (0..rank).map(|_| self.u32().map(|e| e as usize)).collect::<Result<Vec<_>, _>>()?;
        let n = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e)).ok_or_else(|| bad("tensor too large"))?;
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| bad("tensor too large"))?)?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Tensor::new(shape, data).map_err(|e| bad(e.to_string()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>, TrainError> {
        let mut out = Vec::new();
        out.extend(CHECKPOINT_MAGIC);
        out.extend(CHECKPOINT_VERSION.to_le_bytes());
        let block = ConfigBlock { system: self.system.clone(), train: self.train.clone(), variant: self.variant };
        let json = serde_json::to_vec(&block).map_err(|e| bad(e.to_string()))?;
        out.extend(u32::try_from(json.len()).map_err(|_| bad("config block too large"))?.to_le_bytes());
        out.extend(json);
        out.extend(self.epoch.to_le_bytes());
        out.extend(self.adam.step.to_le_bytes());
        let tensors: Vec<&Tensor> = self.params.tensors.iter().chain(&self.adam.m).chain(&self.adam.v).collect();
        out.extend((tensors.len() as u32).to_le_bytes());
        for t in tensors {
            write_tensor(&mut out, t)?;
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, TrainError> {
        let mut c = Cursor { buf, pos: 0 };
        if c.take(5)? != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = c.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let len = c.u32()? as usize;
        let block: ConfigBlock = serde_json::from_slice(c.take(len)?).map_err(|e| bad(e.to_string()))?;
        let epoch = c.u64()?;
        let step = c.u64()?;
        let count = c.u32()? as usize;
        let ncfg = NetworkConfig::from_system(&block.system);
        let per = ncfg.layout().len();
        if count != 3 * per {
            return Err(bad(format!("{count} tensors, expected {}", 3 * per)));
        }
        let mut tensors = (0..count).map(|_| c.tensor()).collect::<Result<Vec<_>, _>>()?;
        if c.pos != buf.len() {
            return Err(bad("trailing bytes"));
        }
        let v = tensors.split_off(2 * per);
        let m = tensors.split_off(per);
        let params = NetworkParams { tensors };
        params.check(&ncfg)?;
        if m.iter().chain(&v).zip(params.tensors.iter().chain(&params.tensors)).any(|(a, b)| a.shape() != b.shape()) {
            return Err(bad("Adam moment shapes do not match the parameters"));
        }
        Ok(Self {
            system: block.system,
            train: block.train,
            variant: block.variant,
            epoch,
            params,
            adam: AdamState { m, v, step },
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}
