//! Fixed-header binary checkpoints (`.pssflow`).
//!
//! Layout, all little-endian: an 8-byte magic, u32 version, u32 dimension,
//! u32 layer count, u32 hidden width, u32 residual blocks, f64 wrapper
//! padding, f64 scale bound, one status byte for the running statistics,
//! then every parameter array and every running-statistics array as raw f64
//! in canonical declaration order. Round trips are bit exact.

use super::{FlowModel, NetConfig, N_LAYERS};
use crate::nnet::Mode;
use crate::{Error, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"PSSFLOW\0";
const VERSION: u32 = 1;

fn ck<T>(r: std::io::Result<T>, what: &str) -> Result<T> {
    r.map_err(|e| Error::Checkpoint(format!("{}: {}", what, e)))
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    ck(w.write_all(&v.to_le_bytes()), "write header")
}

fn write_f64(w: &mut impl Write, v: f64) -> Result<()> {
    ck(w.write_all(&v.to_le_bytes()), "write header")
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    ck(r.read_exact(&mut b), "truncated header")?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    ck(r.read_exact(&mut b), "truncated header")?;
    Ok(f64::from_le_bytes(b))
}

impl FlowModel {
    /// Serialize a frozen model. Training-mode models cannot be saved: the
    /// statistics a checkpoint freezes would still be moving.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        if self.mode() != Mode::Inference {
            return Err(Error::Mode(
                "save requires a frozen (inference-mode) model".into(),
            ));
        }
        let mut w = BufWriter::new(File::create(path)?);
        ck(w.write_all(MAGIC), "write magic")?;
        write_u32(&mut w, VERSION)?;
        write_u32(&mut w, self.dim as u32)?;
        write_u32(&mut w, self.layers.len() as u32)?;
        write_u32(&mut w, self.cfg.hidden as u32)?;
        write_u32(&mut w, self.cfg.blocks as u32)?;
        write_f64(&mut w, self.cfg.alpha)?;
        write_f64(&mut w, self.cfg.s_max)?;
        let stats_ready = self
            .layers
            .iter()
            .all(|l| l.net.s_net.stats_initialized() && l.net.t_net.stats_initialized());
        ck(w.write_all(&[stats_ready as u8]), "write header")?;
        for p in self.params() {
            for v in p.as_slice() {
                write_f64(&mut w, *v)?;
            }
        }
        for s in self.stats() {
            for v in s.as_slice() {
                write_f64(&mut w, *v)?;
            }
        }
        ck(w.flush(), "flush")
    }

    /// Load a checkpoint saved by [`FlowModel::save`]. The file is
    /// self-describing; the reconstructed model is already frozen.
    pub fn load(path: impl AsRef<Path>) -> Result<FlowModel> {
        let mut r = BufReader::new(File::open(path.as_ref())?);
        let mut magic = [0u8; 8];
        ck(r.read_exact(&mut magic), "truncated file")?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a flow checkpoint".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "version {} unsupported (expected {})",
                version, VERSION
            )));
        }
        let dim = read_u32(&mut r)? as usize;
        let n_layers = read_u32(&mut r)? as usize;
        if n_layers != N_LAYERS {
            return Err(Error::Checkpoint(format!(
                "layer count {} unsupported (expected {})",
                n_layers, N_LAYERS
            )));
        }
        let hidden = read_u32(&mut r)? as usize;
        let blocks = read_u32(&mut r)? as usize;
        let alpha = read_f64(&mut r)?;
        let s_max = read_f64(&mut r)?;
        let mut flag = [0u8; 1];
        ck(r.read_exact(&mut flag), "truncated header")?;
        let stats_ready = flag[0] != 0;

        let cfg = NetConfig {
            hidden,
            blocks,
            s_max,
            alpha,
        };
        let mut model = FlowModel::new(dim, cfg, 0)?;
        for p in model.params_mut() {
            for v in p.as_mut_slice() {
                *v = read_f64(&mut r)?;
            }
        }
        for s in model.stats_mut() {
            for v in s.as_mut_slice() {
                *v = read_f64(&mut r)?;
            }
        }
        let mut trailing = [0u8; 1];
        if ck(r.read(&mut trailing), "read")? != 0 {
            return Err(Error::Checkpoint("trailing bytes after parameters".into()));
        }
        for l in &mut model.layers {
            l.net.s_net.mark_stats_initialized(stats_ready);
            l.net.t_net.mark_stats_initialized(stats_ready);
        }
        model.freeze()?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::admath::Array2;
    use crate::flow::TrainConfig;
    use crate::rng::pss_stream;
    use rand::Rng;

    fn trained_model(seed: u64) -> FlowModel {
        let mut model = FlowModel::new(2, NetConfig { hidden: 8, blocks: 1, ..NetConfig::default() }, seed).unwrap();
        let mut rng = pss_stream(seed, 9);
        let data = Array2::from_fn(1024, 2, |_, _| rng.gen());
        let cfg = TrainConfig { epochs: 1, batch_size: 128, seed, ..TrainConfig::default() };
        model.train(&data, &cfg).unwrap();
        model
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let model = trained_model(7);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.pssflow");
        model.save(&path).unwrap();
        let loaded = FlowModel::load(&path).unwrap();
        let mut rng = pss_stream(8, 0);
        let z = Array2::from_fn(64, 2, |_, _| rng.gen());
        let (y1, d1) = model.warp_with_density(&z).unwrap();
        let (y2, d2) = loaded.warp_with_density(&z).unwrap();
        assert_eq!(y1.as_slice(), y2.as_slice());
        assert_eq!(d1, d2);
    }

    #[test]
    fn identity_checkpoint_roundtrips() {
        let mut model = FlowModel::new(3, NetConfig { hidden: 8, blocks: 1, ..NetConfig::default() }, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("identity.pssflow");
        assert!(model.save(&path).is_err(), "train-mode save must fail");
        model.freeze().unwrap();
        model.save(&path).unwrap();
        let loaded = FlowModel::load(&path).unwrap();
        assert!(loaded.is_identity());
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("magic.pssflow");
        std::fs::write(&path, b"NOTAFLOW________junk").unwrap();
        assert!(matches!(FlowModel::load(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let model = trained_model(9);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.pssflow");
        model.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(FlowModel::load(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn loaded_dimension_is_enforced_at_eval() {
        let model = trained_model(10);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dim.pssflow");
        model.save(&path).unwrap();
        let loaded = FlowModel::load(&path).unwrap();
        let z5 = Array2::filled(4, 5, 0.5);
        assert!(matches!(loaded.warp_forward(&z5), Err(Error::Shape { .. })));
    }
}
