//! Binary checkpoint container. All integers are little-endian.
//!
//! ```text
//! magic        8 bytes  "LSDCKPT\0"
//! version      u32      = 1
//! kind         u32      0 = autoencoder, 1 = diffusion
//! config       u64 length + UTF-8 bytes   (canonical TrainConfig text)
//! config_hash  32 bytes SHA-256 of the config bytes
//! parent       u64 length + UTF-8 bytes   (encoder's config for diffusion runs, else empty)
//! step         u64
//! seed         u64
//! loss_digest  32 bytes hash chain over the logged loss rows
//! count        u64      number of tensors
//! tensors      count × { u32 name length, name bytes, u64 rows, u64 cols, rows·cols f64 row-major }
//! trailer      32 bytes SHA-256 of every preceding byte
//! ```

use std::path::Path;

use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::Parameterized;

use super::optim::{AdamW, AdamWConfig, Moment};

pub const MAGIC: &[u8; 8] = b"LSDCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Autoencoder,
    Diffusion,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub config_text: String,
    pub parent_config_text: String,
    pub step: u64,
    pub seed: u64,
    pub loss_digest: [u8; 32],
    pub tensors: Vec<(String, Array2<f64>)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let kind: u32 = match self.kind {
            CheckpointKind::Autoencoder => 0,
            CheckpointKind::Diffusion => 1,
        };
        out.extend_from_slice(&kind.to_le_bytes());
        out.extend_from_slice(&(self.config_text.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config_text.as_bytes());
        out.extend_from_slice(&Sha256::digest(self.config_text.as_bytes()));
        out.extend_from_slice(&(self.parent_config_text.len() as u64).to_le_bytes());
        out.extend_from_slice(self.parent_config_text.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.loss_digest);
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.nrows() as u64).to_le_bytes());
            out.extend_from_slice(&(t.ncols() as u64).to_le_bytes());
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let trailer = Sha256::digest(&out);
        out.extend_from_slice(&trailer);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        if bytes.len() < 12 + 32 {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        let mut r = Reader { buf: body, pos: 12 };
        let kind = match r.u32()? {
            0 => CheckpointKind::Autoencoder,
            1 => CheckpointKind::Diffusion,
            k => return Err(Error::Checkpoint(format!("unknown checkpoint kind {k}"))),
        };
        let config_text = r.string_u64()?;
        let config_hash = r.take(32)?;
        let parent_config_text = r.string_u64()?;
        let step = r.u64()?;
        let seed = r.u64()?;
        let loss_digest: [u8; 32] = r.take(32)?.try_into().unwrap();
        let count = r.u64()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let n = rows
                .checked_mul(cols)
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| Error::Checkpoint(format!("tensor '{name}' has absurd shape")))?;
            let data = r.take(n)?;
            let values = data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, Array2::from_shape_vec((rows, cols), values).unwrap()));
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after tensor records".into()));
        }
        if Sha256::digest(body).as_slice() != trailer {
            return Err(Error::Checkpoint("checksum mismatch (file corrupted)".into()));
        }
        if Sha256::digest(config_text.as_bytes()).as_slice() != config_hash {
            return Err(Error::Checkpoint("config hash mismatch".into()));
        }
        Ok(Self {
            kind,
            config_text,
            parent_config_text,
            step,
            seed,
            loss_digest,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn tensor(&self, name: &str) -> Option<&Array2<f64>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Append `model`'s parameters under `prefix`.
    pub fn push_params<M: Parameterized>(&mut self, prefix: &str, model: &M) {
        for (name, p) in model.params() {
            self.tensors.push((format!("{prefix}.{name}"), p.value.clone()));
        }
    }

    pub fn push_optimizer(&mut self, prefix: &str, opt: &AdamW) {
        self.tensors
            .push((format!("adam.t.{prefix}"), Array2::from_elem((1, 1), opt.step as f64)));
        for m in &opt.moments {
            self.tensors.push((format!("adam.m.{prefix}.{}", m.name), m.m.clone()));
        }
        for m in &opt.moments {
            self.tensors.push((format!("adam.v.{prefix}.{}", m.name), m.v.clone()));
        }
    }

    /// Overwrite `model`'s parameters from the tensors stored under `prefix`.
    pub fn load_params<M: Parameterized>(&self, prefix: &str, model: &mut M) -> Result<()> {
        for (name, p) in model.params_mut() {
            let full = format!("{prefix}.{name}");
            let t = self
                .tensor(&full)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{full}'")))?;
            if t.dim() != p.value.dim() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for tensor '{full}': checkpoint {:?}, model {:?}",
                    t.dim(),
                    p.value.dim()
                )));
            }
            p.value.assign(t);
        }
        Ok(())
    }

    /// Rebuild optimizer state for `model` from the moments under `prefix`.
    pub fn load_optimizer<M: Parameterized>(&self, prefix: &str, config: AdamWConfig, model: &M) -> Result<AdamW> {
        let mut opt = AdamW::new(config);
        let t_name = format!("adam.t.{prefix}");
        let t = self
            .tensor(&t_name)
            .filter(|t| t.dim() == (1, 1))
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{t_name}'")))?;
        opt.step = t[[0, 0]] as u64;
        for (name, p) in model.params() {
            let get = |which: &str| {
                let full = format!("adam.{which}.{prefix}.{name}");
                let t = self
                    .tensor(&full)
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{full}'")))?;
                if t.dim() != p.value.dim() {
                    return Err(Error::Checkpoint(format!("shape mismatch for tensor '{full}'")));
                }
                Ok(t.clone())
            };
            opt.moments.push(Moment {
                name: name.clone(),
                m: get("m")?,
                v: get("v")?,
            });
        }
        Ok(opt)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string_u64(&mut self) -> Result<String> {
        let n = self.u64()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("text field is not UTF-8".into()))
    }
}
