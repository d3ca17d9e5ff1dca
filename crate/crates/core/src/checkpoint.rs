//! Binary checkpoints.
//!
//! Layout (little endian): magic `RGBTCKP1`, config text, config hash,
//! optimizer step, then three named-tensor tables (parameters, Adam first
//! moments, Adam second moments). Strings are `u64` length + UTF-8 bytes;
//! tensors are rank, dims and raw `f64` data.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::CrowdCounter;
use crate::params::ParamStore;
use crate::train::Adam;

pub const MAGIC: &[u8; 8] = b"RGBTCKP1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: ParamStore,
    pub adam: Adam,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }

    fn table<'a>(&mut self, items: impl Iterator<Item = (&'a String, &'a Tensor)>) {
        let items: Vec<_> = items.collect();
        self.u64(items.len() as u64);
        for (name, t) in items {
            self.str(name);
            self.u64(t.shape().len() as u64);
            for &d in t.shape() {
                self.u64(d as u64);
            }
            for &v in t.data() {
                self.0.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn corrupt(msg: &str) -> Error {
    Error::Checkpoint(msg.to_string())
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| corrupt("truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| corrupt("length overflow"))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| corrupt("invalid UTF-8"))
    }

    fn table(&mut self) -> Result<BTreeMap<String, Tensor>> {
        let count = self.len()?;
        let mut out = BTreeMap::new();
        for _ in 0..count {
            let name = self.str()?;
            let rank = self.len()?;
            let shape = (0..rank).map(|_| self.len()).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| corrupt("tensor size overflow"))?;
            let bytes = self.take(n.checked_mul(8).ok_or_else(|| corrupt("tensor size overflow"))?)?;
            let data = bytes
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            if out.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
                return Err(corrupt(&format!("duplicate tensor `{name}`")));
            }
        }
        Ok(out)
    }
}

impl Checkpoint {
    pub fn new(config: &RunConfig, params: &ParamStore, adam: &Adam) -> Self {
        Self {
            config: config.clone(),
            params: params.clone(),
            adam: adam.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(MAGIC.to_vec());
        w.str(&self.config.to_text());
        w.str(&self.config.hash());
        w.u64(self.adam.step);
        w.table(self.params.iter());
        w.table(self.adam.m.iter());
        w.table(self.adam.v.iter());
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let text = r.str()?;
        let config = RunConfig::parse(&text, Path::new("<checkpoint>"))?;
        if r.str()? != config.hash() {
            return Err(corrupt("config hash mismatch"));
        }
        let step = r.u64()?;
        let params = r.table()?;
        let m = r.table()?;
        let v = r.table()?;
        if r.pos != buf.len() {
            return Err(corrupt("trailing bytes"));
        }

        // the tensors must match the architecture the config describes
        let (_, fresh) = CrowdCounter::new(&config)?;
        let mut store = ParamStore::new();
        for (name, t) in params {
            match fresh.get(&name) {
                Some(f) if f.shape() == t.shape() => store.insert(name, t),
                Some(_) => return Err(corrupt(&format!("shape mismatch for `{name}`"))),
                None => return Err(corrupt(&format!("unexpected parameter `{name}`"))),
            }
        }
        if store.len() != fresh.len() {
            return Err(corrupt("missing parameters"));
        }
        let mut adam = Adam::new(&config.optim);
        adam.step = step;
        adam.m = m;
        adam.v = v;
        Ok(Self {
            config,
            params: store,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn model(&self) -> Result<CrowdCounter> {
        Ok(CrowdCounter::new(&self.config)?.0)
    }
}
