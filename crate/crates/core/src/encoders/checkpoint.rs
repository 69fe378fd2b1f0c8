//! Checkpoint files.
//!
//! ```text
//! magic          4 bytes  "GDOC"
//! version        u32 LE   (1)
//! config digest  32 bytes (SHA-256 of the canonical model config)
//! block count    u32 LE
//! block*:
//!   name length  u32 LE
//!   name         UTF-8 bytes
//!   rank         u32 LE
//!   dims         rank × u32 LE
//!   data         product(dims) × f32 LE
//! ```

use std::fs;
use std::path::Path;

use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};

use super::model::GlobalDocModel;

pub const MAGIC: &[u8; 4] = b"GDOC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub digest: [u8; 32],
    pub blocks: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.digest);
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for (name, t) in &self.blocks {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, origin };
        if r.take(4)? != MAGIC {
            return Err(Error::data(origin, "bad magic, not a GDOC checkpoint"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::data(origin, format!("unsupported checkpoint version {version}")));
        }
        let mut digest = [0u8; 32];
        digest.copy_from_slice(r.take(32)?);
        let count = r.u32()? as usize;
        let mut blocks = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::data(origin, "block name is not UTF-8"))?
                .to_owned();
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::data(origin, "block too large"))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let t = Tensor::new(dims, data).map_err(|e| Error::data(origin, e.to_string()))?;
            blocks.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::data(origin, "trailing bytes after last block"));
        }
        Ok(Self { digest, blocks })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn block(&self, name: &str) -> Option<&Tensor<f32>> {
        self.blocks.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::data(self.origin, "unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

impl<S: Scalar> GlobalDocModel<S> {
    /// Parameter blocks in store order, rounded to `f32`.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let p = self.params();
        Checkpoint {
            digest: self.config().digest(),
            blocks: p.ids().map(|id| (p.name(id).to_owned(), p.get(id).cast())).collect(),
        }
    }

    /// Load every parameter from `ckpt`. The config digest must match and
    /// every parameter must be present with its exact shape; blocks that
    /// are not parameters (e.g. optimizer state) are ignored.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.digest != self.config().digest() {
            return Err(Error::Config(format!(
                "checkpoint digest {} does not match model config {}",
                hex::encode(ckpt.digest),
                hex::encode(self.config().digest())
            )));
        }
        let names: Vec<String> = self.params().ids().map(|id| self.params().name(id).to_owned()).collect();
        for name in names {
            let t = ckpt
                .block(&name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter '{name}'")))?;
            self.params_mut().set(&name, t.cast())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::ModelConfig;

    #[test]
    fn bytes_round_trip_bit_exact() {
        let model = GlobalDocModel::<f32>::new(ModelConfig::tiny(4)).unwrap();
        let ckpt = model.to_checkpoint();
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes(), bytes);
        let mut other = GlobalDocModel::<f32>::new(ModelConfig {
            init_seed: 99,
            ..ModelConfig::tiny(4)
        })
        .unwrap();
        other.load_checkpoint(&back).unwrap();
        assert_eq!(other.params(), model.params());
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let model = GlobalDocModel::<f32>::new(ModelConfig::tiny(4)).unwrap();
        let bytes = model.to_checkpoint().to_bytes();
        let p = Path::new("mem");
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], p).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad, p).is_err());
        let mut mismatched = GlobalDocModel::<f32>::new(ModelConfig::tiny(6)).unwrap();
        assert!(mismatched.load_checkpoint(&model.to_checkpoint()).is_err());
    }
}
