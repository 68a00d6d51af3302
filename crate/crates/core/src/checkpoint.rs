//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "ALPOLCKP"
//! version    u32
//! kind       u8       0 = meta, 1 = single
//! iteration  u64
//! digest     32 bytes training-settings digest
//! adam       lr, beta1, beta2, eps as f64, step as u64
//! count      u32      number of tensors
//! tensors    name_len u16, name, rows u32, cols u32, rows*cols f64
//! checksum   32 bytes SHA-256 of everything above
//! ```
//!
//! Tensors are the model parameters in [`PolicyModel::names`] order followed
//! by the Adam first and second moments (`m.<name>`, `v.<name>`).

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::diff::{AdamState, Tensor};
use crate::error::{Error, Result};
use crate::policy::{ModelKind, PolicyModel};

pub const MAGIC: &[u8; 8] = b"ALPOLCKP";
pub const FORMAT_VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;

/// Trainable state at some iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: PolicyModel,
    pub adam: AdamState,
    pub iteration: u64,
    pub config_digest: [u8; 32],
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        self.encode(FORMAT_VERSION)
    }

    fn encode(&self, version: u32) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&version.to_le_bytes());
        out.push(match self.model.kind() {
            ModelKind::Meta => 0,
            ModelKind::Single => 1,
        });
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&self.config_digest);
        for v in [self.adam.lr, self.adam.beta1, self.adam.beta2, self.adam.eps] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.adam.step.to_le_bytes());

        let names = PolicyModel::names(self.model.kind());
        let params = self.model.tensors();
        let mut entries: Vec<(String, &Tensor)> = Vec::new();
        entries.extend(names.iter().map(|n| n.to_string()).zip(params));
        entries.extend(names.iter().map(|n| format!("m.{n}")).zip(&self.adam.first));
        entries.extend(names.iter().map(|n| format!("v.{n}")).zip(&self.adam.second));
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, t) in entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = Sha256::digest(&out);
        out.extend_from_slice(&sum);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CHECKSUM_LEN {
            return Err(Error::Checksum);
        }
        let (body, sum) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
        if Sha256::digest(body).as_slice() != sum {
            return Err(Error::Checksum);
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::InvalidData("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let kind = match r.take(1)?[0] {
            0 => ModelKind::Meta,
            1 => ModelKind::Single,
            k => return Err(Error::InvalidData(format!("unknown model kind tag {k}"))),
        };
        let iteration = r.u64()?;
        let config_digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let (lr, beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
        let step = r.u64()?;

        let names = PolicyModel::names(kind);
        let count = r.u32()? as usize;
        if count != 3 * names.len() {
            return Err(Error::InvalidData(format!(
                "{count} tensors, expected {}",
                3 * names.len()
            )));
        }
        let expected = names
            .iter()
            .map(|n| n.to_string())
            .chain(names.iter().map(|n| format!("m.{n}")))
            .chain(names.iter().map(|n| format!("v.{n}")));
        let mut tensors = Vec::with_capacity(count);
        for want in expected {
            let len = r.u16()? as usize;
            let name = r.take(len)?;
            if name != want.as_bytes() {
                return Err(Error::InvalidData(format!(
                    "tensor {:?} where {want:?} was expected",
                    String::from_utf8_lossy(name)
                )));
            }
            let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
            let data = (0..rows * cols).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            tensors.push(Tensor::from_vec(rows, cols, data)?);
        }
        if r.pos != body.len() {
            return Err(Error::InvalidData("trailing bytes after tensors".into()));
        }
        let second = tensors.split_off(2 * names.len());
        let first = tensors.split_off(names.len());
        let model = PolicyModel::from_tensors(kind, tensors)?;
        for (m, p) in first.iter().chain(&second).zip(model.tensors().iter().cycle()) {
            if m.shape() != p.shape() {
                return Err(Error::Shape("optimizer moment shape differs from parameter".into()));
            }
        }
        Ok(Self {
            model,
            adam: AdamState {
                lr,
                beta1,
                beta2,
                eps,
                step,
                first,
                second,
            },
            iteration,
            config_digest,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
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
            .ok_or_else(|| Error::InvalidData("checkpoint ends early".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
