//! Versioned binary checkpoints: the run configuration as text, named
//! parameter tensors, running normalization statistics and the
//! pre-training flags. Loading rebuilds the network from the stored
//! configuration and rejects any shape disagreement.
//!
//! All integers are little-endian; tensor values are `f64`.

use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fsutil::atomic_write;
use crate::network::{ModelState, Network, STATE_VERSION};
use crate::nn::Tensor;

pub const MAGIC: &[u8; 4] = b"FVCK";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub state: ModelState,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len());
        self.0.extend_from_slice(b);
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u32(v.len());
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
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
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()?;
        self.take(n)
    }
    fn string(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u32()?;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("length overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(self.state.version as usize);
        w.bytes(self.config.to_text().as_bytes());
        w.u64(self.state.rng_seed);
        w.0.push(self.state.voxel_pretrained as u8);
        w.0.push(self.state.coord_pretrained as u8);
        w.u32(self.state.params.len());
        for (name, t) in self.state.names.iter().zip(&self.state.params) {
            w.bytes(name.as_bytes());
            w.u32(t.shape().len());
            for &d in t.shape() {
                w.u32(d);
            }
            w.f64s(t.data());
        }
        w.u32(self.state.norm_stats.len());
        for (m, v) in &self.state.norm_stats {
            w.f64s(m);
            w.f64s(v);
        }
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()? as u32;
        if version != STATE_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint version {version}, this build reads {STATE_VERSION}"
            )));
        }
        let config = RunConfig::parse(&r.string()?)?;
        let rng_seed = r.u64()?;
        let flags = r.take(2)?;
        let n = r.u32()?;
        let mut names = Vec::with_capacity(n);
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            names.push(r.string()?);
            let rank = r.u32()?;
            let shape: Vec<usize> = (0..rank).map(|_| r.u32()).collect::<Result<_>>()?;
            let data = r.f64s()?;
            if data.len() != shape.iter().product::<usize>() {
                return Err(Error::Checkpoint(format!("tensor {} has wrong element count", names.last().unwrap())));
            }
            params.push(Tensor::from_vec(&shape, data));
        }
        let k = r.u32()?;
        let norm_stats = (0..k).map(|_| Ok((r.f64s()?, r.f64s()?))).collect::<Result<Vec<_>>>()?;
        if r.pos != buf.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        let state = ModelState {
            names,
            params,
            norm_stats,
            rng_seed,
            version,
            voxel_pretrained: flags[0] != 0,
            coord_pretrained: flags[1] != 0,
        };
        let ck = Self { config, state };
        ck.network()?;
        Ok(ck)
    }

    /// Builds the network described by the stored configuration and checks
    /// the state against it.
    pub fn network(&self) -> Result<Network> {
        let net = Network::new(self.config.model.clone())?;
        net.check_state(&self.state)
            .map_err(|e| Error::Checkpoint(format!("state does not fit its configuration: {e}")))?;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path)?;
        Self::from_bytes(&buf).map_err(|e| match e {
            Error::Io(_) => e,
            other => Error::Parse {
                path: path.to_path_buf(),
                msg: other.to_string(),
            },
        })
    }
}
