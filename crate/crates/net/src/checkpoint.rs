//! Checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "GPNETCK\0"
//! version    u32
//! header     u32 length, then JSON {arch, hyper, pos_weight, history, complete, fingerprint}
//! tensors    u32 count, then per tensor:
//!            u16 name length, name (utf-8), u8 rank, rank × u32 dims, f32 data
//! ```

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::arch::ArchSpec;
use crate::error::{NetError, Result};
use crate::model::ParamSet;
use crate::train::{EpochRecord, HyperParams};

pub const MAGIC: &[u8; 8] = b"GPNETCK\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub arch: ArchSpec,
    pub hyper: HyperParams,
    /// Positive-class weight actually used by the loss.
    pub pos_weight: f64,
    pub history: Vec<EpochRecord>,
    /// False when training stopped before the last epoch.
    pub complete: bool,
    pub params: ParamSet<f32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    arch: ArchSpec,
    hyper: HyperParams,
    pos_weight: f64,
    history: Vec<EpochRecord>,
    complete: bool,
    fingerprint: String,
}

impl ModelCheckpoint {
    pub fn fingerprint(&self) -> String {
        self.arch.fingerprint()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            arch: self.arch.clone(),
            hyper: self.hyper.clone(),
            pos_weight: self.pos_weight,
            history: self.history.clone(),
            complete: self.complete,
            fingerprint: self.fingerprint(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(2 * self.params.layers.len() as u32).to_le_bytes());
        for l in &self.params.layers {
            put_tensor(&mut out, &format!("{}.weight", l.name), &l.weight_dims(), l.w.iter());
            put_tensor(&mut out, &format!("{}.bias", l.name), &[l.c_out], l.b.iter());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: String| NetError::Corrupt {
            path: path.to_path_buf(),
            reason,
        };
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8).ok() != Some(&MAGIC[..]) {
            return Err(NetError::BadMagic { path: path.to_path_buf() });
        }
        let version = r.u32().map_err(corrupt)?;
        if version != FORMAT_VERSION {
            return Err(NetError::VersionMismatch {
                path: path.to_path_buf(),
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let hlen = r.u32().map_err(corrupt)? as usize;
        let header: Header = serde_json::from_slice(r.take(hlen).map_err(corrupt)?)
            .map_err(|e| corrupt(format!("header: {e}")))?;
        if header.fingerprint != header.arch.fingerprint() {
            return Err(corrupt("architecture fingerprint does not match the stored spec".into()));
        }
        let mut params = ParamSet::<f32>::zeros(&header.arch).map_err(|e| corrupt(e.to_string()))?;
        let count = r.u32().map_err(corrupt)? as usize;
        if count != 2 * params.layers.len() {
            return Err(corrupt(format!("{count} tensors, expected {}", 2 * params.layers.len())));
        }
        for l in &mut params.layers {
            let (name, dims, data) = r.tensor().map_err(corrupt)?;
            if name != format!("{}.weight", l.name) || dims != l.weight_dims() {
                return Err(corrupt(format!("unexpected tensor {name} {dims:?} for layer {}", l.name)));
            }
            l.w = Array2::from_shape_vec(l.w.raw_dim(), data).expect("dims checked");
            let (name, dims, data) = r.tensor().map_err(corrupt)?;
            if name != format!("{}.bias", l.name) || dims != [l.c_out] {
                return Err(corrupt(format!("unexpected tensor {name} {dims:?} for layer {}", l.name)));
            }
            l.b = Array1::from_vec(data);
        }
        if r.pos != bytes.len() {
            return Err(corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        if header.history.len() != header.history.last().map_or(0, |h| h.epoch + 1) {
            return Err(corrupt("history epochs are not consecutive".into()));
        }
        Ok(Self {
            arch: header.arch,
            hyper: header.hyper,
            pos_weight: header.pos_weight,
            history: header.history,
            complete: header.complete,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| NetError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| NetError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

pub fn save_checkpoint(cp: &ModelCheckpoint, path: impl AsRef<Path>) -> Result<()> {
    cp.save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelCheckpoint> {
    ModelCheckpoint::load(path)
}

fn put_tensor<'a>(out: &mut Vec<u8>, name: &str, dims: &[usize], data: impl Iterator<Item = &'a f32>) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format!("truncated at byte {} (wanted {n} more)", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> std::result::Result<(String, Vec<usize>, Vec<f32>), String> {
        let nlen = u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(self.take(nlen)?.to_vec()).map_err(|_| "tensor name is not utf-8".to_string())?;
        let rank = self.take(1)?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(self.u32()? as usize);
        }
        let len = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("tensor size overflows")?;
        let raw = self.take(len.checked_mul(4).ok_or("tensor size overflows")?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok((name, dims, data))
    }
}
