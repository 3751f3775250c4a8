//! Flat little-endian checkpoint archive.
//!
//! Layout: 8-byte magic `PATTUNET`, `u32` version, `u64` config length and
//! UTF-8 config text, `f64` best metric, `u64` epoch, `u64` record count,
//! then per record `u32` name length, name bytes, `u32` rank, `u64` dims and
//! `f32` payload.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor4;

pub const MAGIC: &[u8; 8] = b"PATTUNET";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Run configuration snapshot as flat TOML.
    pub config: String,
    /// Selection metric of the stored weights: test mDSC for segmentation
    /// checkpoints, validation reconstruction MSE for prior checkpoints.
    pub best_metric: f64,
    pub epoch: u64,
    pub tensors: Vec<(String, Tensor4<f32>)>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| Error::Checkpoint(format!("{what} does not fit in memory")))
    }
}

impl Checkpoint {
    /// Collects every entry, running statistics included, of the given stores.
    pub fn from_stores(config: String, best_metric: f64, epoch: u64, stores: &[&ParamStore<f32>]) -> Self {
        let tensors = stores
            .iter()
            .flat_map(|s| s.entries().iter().map(|e| (e.name.clone(), e.value.clone())))
            .collect();
        Checkpoint { config, best_metric, epoch, tensors }
    }

    pub fn tensor_map(&self) -> HashMap<String, Tensor4<f32>> {
        self.tensors.iter().cloned().collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&self.best_metric.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let dims = t.shape().dims();
            out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for d in dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint: bad magic".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}, expected {VERSION}")));
        }
        let n = r.len("config length")?;
        let config = String::from_utf8(r.take(n, "config")?.to_vec()).map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
        let best_metric = f64::from_le_bytes(r.take(8, "best metric")?.try_into().expect("8 bytes"));
        let epoch = r.u64("epoch")?;
        let count = r.len("record count")?;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let nl = r.u32("name length")? as usize;
            let name = String::from_utf8(r.take(nl, "name")?.to_vec()).map_err(|_| Error::Checkpoint(format!("record {i} name is not UTF-8")))?;
            let rank = r.u32("rank")? as usize;
            if rank != 4 {
                return Err(Error::Checkpoint(format!("tensor {name} has rank {rank}, expected 4")));
            }
            let mut dims = [0usize; 4];
            for d in &mut dims {
                *d = r.len("dims")?;
            }
            let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Checkpoint(format!("tensor {name} is too large")))?;
            let bytes = r.take(numel.checked_mul(4).ok_or_else(|| Error::Checkpoint(format!("tensor {name} is too large")))?, "payload")?;
            let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            tensors.push((name, Tensor4::from_vec(dims, data)?));
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Checkpoint { config, best_metric, epoch, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            config: "base_c = 8\n".into(),
            best_metric: 0.875,
            epoch: 12,
            tensors: vec![
                ("a.weight".into(), Tensor4::from_fn([2, 3, 1, 1], |n, c, _, _| (n * 3 + c) as f32 * 0.1 - 0.25)),
                ("b.bias".into(), Tensor4::from_vec([1, 2, 1, 1], vec![f32::MIN_POSITIVE, -0.0]).unwrap()),
            ],
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        for ((_, a), (_, b)) in c.tensors.iter().zip(&back.tensors) {
            let bits = |t: &Tensor4<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(back.config, c.config);
        assert_eq!(back.epoch, 12);
    }

    #[test]
    fn layout_header() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), VERSION);
        assert_eq!(u64::from_le_bytes(bytes[12..20].try_into().unwrap()), 11);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).unwrap_err().to_string().contains("truncated"));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("version"));
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }
}
