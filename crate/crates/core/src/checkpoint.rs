//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian, all floats f64 little-endian):
//!
//! ```text
//! magic     8 bytes  "LPDCKPT\x01"
//! topology  1 byte   0 = feature-specific, 1 = parallel-heads
//! k1        u32
//! k2        u32
//! d         u32
//! dims      (k1+k2) x u32   text feature dims then video feature dims
//! params    f64 x param_count, flattening order:
//!           per text feature: W (d_i x d, row-major), b (d)
//!           per video feature: W, b
//!           per head: u (d), c (1)
//!           head count = k1+k2 (feature-specific) or 2(k1+k2) (parallel)
//! state?    1 byte   0 = model only, 1 = trainer state follows
//!   epoch                   u64
//!   step                    u64
//!   lr                      f64
//!   best_val_map            f64
//!   epochs_since_improvement u64
//!   accumulators            f64 x param_count (same layout as params)
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelParams, Topology};

const MAGIC: &[u8; 8] = b"LPDCKPT\x01";

/// Optimizer and early-stopping state carried alongside the model for
/// bit-exact resume.
#[derive(Debug, Clone)]
pub struct TrainerState {
    pub epoch: u64,
    pub step: u64,
    pub lr: f64,
    pub best_val_map: f64,
    pub epochs_since_improvement: u64,
    /// RMSProp squared-gradient accumulators, same shapes as the params.
    pub accumulators: ModelParams,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub state: Option<TrainerState>,
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);

    w.write_all(MAGIC).map_err(io)?;
    let topo: u8 = match ckpt.params.topology {
        Topology::FeatureSpecific => 0,
        Topology::ParallelHeads => 1,
    };
    w.write_all(&[topo]).map_err(io)?;
    w.write_all(&(ckpt.params.k1() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&(ckpt.params.k2() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&(ckpt.params.d as u32).to_le_bytes()).map_err(io)?;
    for dim in ckpt.params.text_dims().iter().chain(&ckpt.params.video_dims()) {
        w.write_all(&(*dim as u32).to_le_bytes()).map_err(io)?;
    }
    for v in ckpt.params.flatten() {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    match &ckpt.state {
        None => w.write_all(&[0u8]).map_err(io)?,
        Some(s) => {
            w.write_all(&[1u8]).map_err(io)?;
            w.write_all(&s.epoch.to_le_bytes()).map_err(io)?;
            w.write_all(&s.step.to_le_bytes()).map_err(io)?;
            w.write_all(&s.lr.to_le_bytes()).map_err(io)?;
            w.write_all(&s.best_val_map.to_le_bytes()).map_err(io)?;
            w.write_all(&s.epochs_since_improvement.to_le_bytes()).map_err(io)?;
            for v in s.accumulators.flatten() {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, "checkpoint truncated"));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.take(n * 8)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        path,
        bytes: &bytes,
        pos: 0,
    };
    if r.take(8)? != MAGIC {
        return Err(Error::format(path, "bad magic: not a checkpoint file"));
    }
    let topology = match r.u8()? {
        0 => Topology::FeatureSpecific,
        1 => Topology::ParallelHeads,
        t => return Err(Error::format(path, format!("unknown topology tag {t}"))),
    };
    let k1 = r.u32()? as usize;
    let k2 = r.u32()? as usize;
    let d = r.u32()? as usize;
    if k1 == 0 || k2 == 0 || d == 0 {
        return Err(Error::format(path, "zero dimensions in header"));
    }
    let mut dims = Vec::with_capacity(k1 + k2);
    for _ in 0..k1 + k2 {
        dims.push(r.u32()? as usize);
    }
    let (text_dims, video_dims) = dims.split_at(k1);

    let mut params = ModelParams::init(topology, text_dims, video_dims, d, 0)?;
    let count = params.param_count();
    params.set_from_flat(&r.f64_vec(count)?);
    if !params.is_finite() {
        return Err(Error::format(path, "non-finite parameter value"));
    }

    let state = match r.u8()? {
        0 => None,
        1 => {
            let epoch = r.u64()?;
            let step = r.u64()?;
            let lr = r.f64()?;
            let best_val_map = r.f64()?;
            let epochs_since_improvement = r.u64()?;
            let mut accumulators = params.zeros_like();
            accumulators.set_from_flat(&r.f64_vec(count)?);
            Some(TrainerState {
                epoch,
                step,
                lr,
                best_val_map,
                epochs_since_improvement,
                accumulators,
            })
        }
        t => return Err(Error::format(path, format!("unknown state tag {t}"))),
    };
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after checkpoint"));
    }
    Ok(Checkpoint { params, state })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    #[test]
    fn roundtrip_model_only() {
        let params =
            ModelParams::init(Topology::FeatureSpecific, &[5, 7], &[6, 4, 9], 8, 42).unwrap();
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("m.bin");
        save(
            &path,
            &Checkpoint {
                params: params.clone(),
                state: None,
            },
        )
        .unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.params, params);
        assert!(loaded.state.is_none());
    }

    #[test]
    fn roundtrip_with_trainer_state() {
        let params = ModelParams::init(Topology::ParallelHeads, &[3], &[4, 5], 6, 1).unwrap();
        let mut acc = params.zeros_like();
        acc.tensors_mut(|i, s| {
            for (k, v) in s.iter_mut().enumerate() {
                *v = (i * 100 + k) as f64 * 0.5;
            }
        });
        let state = TrainerState {
            epoch: 17,
            step: 420,
            lr: 9.5e-5,
            best_val_map: 0.625,
            epochs_since_improvement: 3,
            accumulators: acc,
        };
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("s.bin");
        save(
            &path,
            &Checkpoint {
                params: params.clone(),
                state: Some(state.clone()),
            },
        )
        .unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.params, params);
        let got = loaded.state.unwrap();
        assert_eq!(got.epoch, 17);
        assert_eq!(got.step, 420);
        assert_eq!(got.lr, 9.5e-5);
        assert_eq!(got.best_val_map, 0.625);
        assert_eq!(got.epochs_since_improvement, 3);
        assert_eq!(got.accumulators, state.accumulators);
    }

    #[test]
    fn rejects_corrupt_files() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"NOTACKPT").unwrap();
        assert!(load(&path).is_err());

        let params = ModelParams::init(Topology::FeatureSpecific, &[3], &[4], 5, 0).unwrap();
        let good = dir.path().join("good.bin");
        save(
            &good,
            &Checkpoint {
                params,
                state: None,
            },
        )
        .unwrap();
        let mut bytes = std::fs::read(&good).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        assert!(load(&path).unwrap_err().to_string().contains("truncated"));
    }
}
