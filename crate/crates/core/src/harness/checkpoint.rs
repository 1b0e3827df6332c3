//! Binary checkpoint, little-endian throughout.
//!
//! ```text
//! magic "TFCKPT\0\0" | version u32 | config sha256 [32] | config json (u32 len, bytes)
//! progress: epochs_done u32, step u64, best_score f64, best_epoch u32, since_best u32, finished u8
//! generator: key [32], stream u64, word_pos u128
//! adam_t u64 | n_params u32
//! per param: name (u32 len, bytes), rows u32, cols u32, value, best, adam_m, adam_v (f64 each)
//! bank: n_datasets u32, d u32, momentum f64, initialized u8 × 2n, cells f64 × 2nd
//! sha256 of everything above [32]
//! ```

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::harness::config::HyperParams;
use crate::harness::optim::Adam;
use crate::numcore::{ParamSet, StreamRng, Tensor};
use crate::prototypes::PrototypeBank;

pub const MAGIC: &[u8; 8] = b"TFCKPT\0\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Progress {
    pub epochs_done: u32,
    pub step: u64,
    /// Best validation Macro-F1 so far; `-inf` before the first epoch.
    pub best_score: f64,
    pub best_epoch: u32,
    pub since_best: u32,
    pub finished: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: HyperParams,
    pub progress: Progress,
    pub rng: StreamRng,
    pub params: ParamSet,
    /// Parameter values of the best validation epoch, in `params` order.
    pub best: Vec<Tensor>,
    pub adam: Adam,
    pub bank: PrototypeBank,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len());
        self.0.extend_from_slice(b);
    }
    fn floats(&mut self, v: &[f64]) {
        for &x in v {
            self.f64(x);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.array()?) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()?;
        self.take(n)
    }
    fn tensor(&mut self, rows: usize, cols: usize) -> Result<Tensor> {
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Checkpoint("tensor size overflow".into()))?;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor size overflow".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Tensor::new(rows, cols, data).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION as usize);
        w.0.extend_from_slice(&self.config.hash());
        w.bytes(self.config.to_canonical_json().as_bytes());

        let p = &self.progress;
        w.u32(p.epochs_done as usize);
        w.u64(p.step);
        w.f64(p.best_score);
        w.u32(p.best_epoch as usize);
        w.u32(p.since_best as usize);
        w.u8(u8::from(p.finished));

        w.0.extend_from_slice(&self.rng.get_seed());
        w.u64(self.rng.get_stream());
        w.0.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());

        w.u64(self.adam.t);
        w.u32(self.params.len());
        for (k, (_, name, t)) in self.params.iter().enumerate() {
            w.bytes(name.as_bytes());
            w.u32(t.rows());
            w.u32(t.cols());
            w.floats(t.data());
            w.floats(self.best[k].data());
            w.floats(self.adam.m[k].data());
            w.floats(self.adam.v[k].data());
        }

        let b = &self.bank;
        w.u32(b.n_datasets());
        w.u32(b.dim());
        w.f64(b.momentum());
        for &f in b.initialized_flags() {
            w.u8(u8::from(f));
        }
        w.floats(b.raw());

        let digest: [u8; 32] = Sha256::digest(&w.0).into();
        w.0.extend_from_slice(&digest);
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < MAGIC.len() + 4 + 32 {
            return Err(Error::Checkpoint("file too short".into()));
        }
        let (body, digest) = buf.split_at(buf.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION as usize {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hash: [u8; 32] = r.array()?;
        let text = std::str::from_utf8(r.bytes()?).map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
        let config = HyperParams::from_canonical_json(text)?;
        if config.hash() != hash {
            return Err(Error::Checkpoint("config hash mismatch".into()));
        }

        let progress = Progress {
            epochs_done: r.u32()? as u32,
            step: r.u64()?,
            best_score: r.f64()?,
            best_epoch: r.u32()? as u32,
            since_best: r.u32()? as u32,
            finished: r.u8()? != 0,
        };

        let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(r.array()?);
        rng.set_stream(r.u64()?);
        rng.set_word_pos(u128::from_le_bytes(r.array()?));

        let t = r.u64()?;
        let n = r.u32()?;
        let mut params = ParamSet::new();
        let (mut best, mut m, mut v) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..n {
            let name = std::str::from_utf8(r.bytes()?)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
                .to_string();
            let (rows, cols) = (r.u32()?, r.u32()?);
            params.add(name, r.tensor(rows, cols)?);
            best.push(r.tensor(rows, cols)?);
            m.push(r.tensor(rows, cols)?);
            v.push(r.tensor(rows, cols)?);
        }
        let adam = Adam {
            cfg: config.optimizer,
            t,
            m,
            v,
        };

        let (nd, d) = (r.u32()?, r.u32()?);
        let momentum = r.f64()?;
        let cells = nd
            .checked_mul(2)
            .ok_or_else(|| Error::Checkpoint("bank size overflow".into()))?;
        let flags = (0..cells).map(|_| r.u8().map(|b| b != 0)).collect::<Result<Vec<_>>>()?;
        let raw = r.tensor(cells, d)?.into_data();
        let bank = PrototypeBank::from_parts(nd, d, momentum, raw, flags)
            .map_err(|e| Error::Checkpoint(format!("prototype bank: {e}")))?;
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self {
            config,
            progress,
            rng,
            params,
            best,
            adam,
            bank,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    /// Parameters of the best validation epoch.
    pub fn best_params(&self) -> ParamSet {
        let mut ps = self.params.clone();
        let ids: Vec<_> = ps.ids().collect();
        for (id, t) in ids.into_iter().zip(&self.best) {
            *ps.get_mut(id) = t.clone();
        }
        ps
    }
}
