//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "MOECFCK\0"
//! version      u32
//! step         u64      completed steps
//! next_sample  u64      data cursor (the sample stream is counter-based)
//! config       u32 length + UTF-8 TOML of the full experiment config
//! optimizer    u32 kind (0 sgd, 1 momentum) + f64 momentum
//! arrays       u32 count, then per array:
//!              u32 name length + name, u64 rows, u64 cols, rows*cols f64
//! ```
//!
//! Parameters come first in model order, then `velocity.<name>` buffers for
//! momentum. Loading validates every name and shape against a model built
//! from the embedded config.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::pipeline::{Model, Optimizer, OptimizerKind};

use super::config::ExperimentConfig;

pub const MAGIC: &[u8; 8] = b"MOECFCK\0";
pub const VERSION: u32 = 1;

/// Everything needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub step: u64,
    pub next_sample: u64,
    pub model: Model,
    pub optimizer: Optimizer,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u32(out, b.len() as u32);
    out.extend_from_slice(b);
}

fn put_array(out: &mut Vec<u8>, name: &str, m: &Matrix) {
    put_bytes(out, name.as_bytes());
    put_u64(out, m.rows() as u64);
    put_u64(out, m.cols() as u64);
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u64(&mut out, self.step);
        put_u64(&mut out, self.next_sample);
        put_bytes(&mut out, self.config.to_toml()?.as_bytes());
        put_u32(
            &mut out,
            match self.optimizer.kind {
                OptimizerKind::Sgd => 0,
                OptimizerKind::Momentum => 1,
            },
        );
        out.extend_from_slice(&self.optimizer.momentum.to_le_bytes());
        let params = self.model.named_params();
        put_u32(&mut out, (params.len() + self.optimizer.velocity.len()) as u32);
        for (name, m) in &params {
            put_array(&mut out, name, m);
        }
        for ((name, _), v) in params.iter().zip(&self.optimizer.velocity) {
            put_array(&mut out, &format!("velocity.{name}"), v);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take("magic", 8)? != MAGIC {
            return Err(bad("magic", "not a checkpoint file"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(bad("version", format!("found {version}, supported {VERSION}")));
        }
        let step = r.u64("step")?;
        let next_sample = r.u64("next_sample")?;
        let text = r.bytes("config")?;
        let text = std::str::from_utf8(text).map_err(|_| bad("config", "not UTF-8"))?;
        let config = ExperimentConfig::from_toml(text).map_err(|e| bad("config", e.to_string()))?;
        let kind = match r.u32("optimizer")? {
            0 => OptimizerKind::Sgd,
            1 => OptimizerKind::Momentum,
            k => return Err(bad("optimizer", format!("unknown kind {k}"))),
        };
        let momentum = r.f64("optimizer.momentum")?;

        let mut model = Model::init(&config.model_config()).map_err(|e| bad("config", e.to_string()))?;
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        let mut optimizer = Optimizer::new(kind, momentum, &model);
        let expected = names.len() + optimizer.velocity.len();
        let count = r.u32("arrays")? as usize;
        if count != expected {
            return Err(bad("arrays", format!("{count} arrays, config implies {expected}")));
        }
        let mut params = model.params_mut();
        for (i, name) in names.iter().enumerate() {
            r.array_into(name, params[i])?;
        }
        drop(params);
        for (name, v) in names.iter().zip(optimizer.velocity.iter_mut()) {
            r.array_into(&format!("velocity.{name}"), v)?;
        }
        if r.pos != bytes.len() {
            return Err(bad("arrays", format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            config,
            step,
            next_sample,
            model,
            optimizer,
        })
    }

    /// Writes to a sibling temp file and renames, so a crash never leaves a
    /// half-written checkpoint under `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn bad(field: &str, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        field: field.to_string(),
        msg: msg.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, field: &str, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| bad(field, format!("truncated: need {n} bytes at offset {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(field, 4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(field, 8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, field: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(field, 8)?.try_into().expect("8 bytes")))
    }

    fn bytes(&mut self, field: &str) -> Result<&'a [u8]> {
        let n = self.u32(field)? as usize;
        self.take(field, n)
    }

    fn array_into(&mut self, name: &str, dst: &mut Matrix) -> Result<()> {
        let found = self.bytes(name)?;
        if found != name.as_bytes() {
            return Err(bad(name, format!("found array `{}`", String::from_utf8_lossy(found))));
        }
        let rows = self.u64(name)?;
        let cols = self.u64(name)?;
        if (rows, cols) != (dst.rows() as u64, dst.cols() as u64) {
            return Err(bad(name, format!("shape {rows}x{cols}, config implies {}x{}", dst.rows(), dst.cols())));
        }
        let raw = self.take(name, dst.len() * 8)?;
        for (v, chunk) in dst.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::Trainer;

    fn trained() -> Checkpoint {
        let mut config = ExperimentConfig::from_toml("[run]\nsteps = 2\nbatch_size = 2\noptimizer = \"momentum\"\n").unwrap();
        config.encoders.siglip.tokens = Some(3);
        config.model.encoders = vec![crate::encoders::GroupKind::Siglip];
        let mut t = Trainer::new(&config.model_config(), &config.train_settings()).unwrap();
        t.run().unwrap();
        Checkpoint {
            config,
            step: t.step,
            next_sample: t.next_sample,
            model: t.model,
            optimizer: t.optimizer,
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = trained();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), c.to_bytes().unwrap());
    }

    #[test]
    fn every_truncation_fails_cleanly() {
        let bytes = trained().to_bytes().unwrap();
        for cut in (0..bytes.len()).step_by(7) {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Checkpoint { .. })));
        }
    }

    #[test]
    fn corrupt_headers_name_the_field() {
        let bytes = trained().to_bytes().unwrap();
        let field = |b: &[u8]| match Checkpoint::from_bytes(b) {
            Err(Error::Checkpoint { field, .. }) => field,
            other => panic!("{other:?}"),
        };
        let mut b = bytes.clone();
        b[0] = b'X';
        assert_eq!(field(&b), "magic");
        let mut b = bytes.clone();
        b[8] = 9;
        assert_eq!(field(&b), "version");
        // shrink the router's declared rows
        let name = b"siglip.router.weight";
        let at = bytes.windows(name.len()).position(|w| w == name).unwrap() + name.len();
        let mut b = bytes.clone();
        b[at] = 3;
        assert_eq!(field(&b), "siglip.router.weight");
        let mut b = bytes;
        b.push(0);
        assert_eq!(field(&b), "arrays");
    }
}
