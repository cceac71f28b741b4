//! Little-endian checkpoint files.
//!
//! ```text
//! magic "SWRMCKPT" | version u32 | family u8 | base_channels u32 | levels u32
//! | emb_dim u32 | mean f64 | sigma_data f64 | rows u32 | cols u32
//! | sigma_min f64 | sigma_max f64 | n_steps u32 | iterations u64 | seed u64
//! | final_loss f64 | n_weights u64 | weights f64 * n_weights
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::network::EMB_DIM;
use super::{ArchSpec, Family, Preconditioning, ScoreModelParams, TrainingMeta};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SWRMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint(params: &ScoreModelParams, out: &mut impl Write) -> Result<()> {
    params.validate()?;
    let mut buf = Vec::with_capacity(128 + 8 * params.weights.len());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.push(match params.family {
        Family::Srm => 0,
        Family::Shd => 1,
    });
    let u32s = |v: usize| -> Result<[u8; 4]> {
        u32::try_from(v)
            .map(u32::to_le_bytes)
            .map_err(|_| Error::config(format!("{v} does not fit a checkpoint field")))
    };
    buf.extend_from_slice(&u32s(params.arch.base_channels)?);
    buf.extend_from_slice(&u32s(params.arch.levels)?);
    buf.extend_from_slice(&u32s(EMB_DIM)?);
    buf.extend_from_slice(&params.precond.mean.to_le_bytes());
    buf.extend_from_slice(&params.precond.sigma_data.to_le_bytes());
    let m = &params.meta;
    buf.extend_from_slice(&u32s(m.input_shape.0)?);
    buf.extend_from_slice(&u32s(m.input_shape.1)?);
    buf.extend_from_slice(&m.sigma_min.to_le_bytes());
    buf.extend_from_slice(&m.sigma_max.to_le_bytes());
    buf.extend_from_slice(&u32s(m.n_steps)?);
    buf.extend_from_slice(&m.iterations.to_le_bytes());
    buf.extend_from_slice(&m.seed.to_le_bytes());
    buf.extend_from_slice(&m.final_loss.to_le_bytes());
    buf.extend_from_slice(&(params.weights.len() as u64).to_le_bytes());
    for w in &params.weights {
        buf.extend_from_slice(&w.to_le_bytes());
    }
    out.write_all(&buf).map_err(|e| Error::io("writing checkpoint", e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::config("checkpoint is truncated"))?;
        self.pos = end;
        Ok(slice.try_into().expect("slice length checked"))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take()?) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }
}

pub fn read_checkpoint(input: &mut impl Read) -> Result<ScoreModelParams> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io("reading checkpoint", e))?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if &c.take::<8>()? != CHECKPOINT_MAGIC {
        return Err(Error::config("not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(c.take()?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::config(format!("unsupported checkpoint version {version}")));
    }
    let family = match c.take::<1>()?[0] {
        0 => Family::Srm,
        1 => Family::Shd,
        other => return Err(Error::config(format!("unknown family tag {other} in checkpoint"))),
    };
    let arch = ArchSpec {
        base_channels: c.u32()?,
        levels: c.u32()?,
    };
    let emb = c.u32()?;
    if emb != EMB_DIM {
        return Err(Error::config(format!("checkpoint noise embedding {emb}, expected {EMB_DIM}")));
    }
    let precond = Preconditioning {
        mean: c.f64()?,
        sigma_data: c.f64()?,
    };
    let meta = TrainingMeta {
        input_shape: (c.u32()?, c.u32()?),
        sigma_min: c.f64()?,
        sigma_max: c.f64()?,
        n_steps: c.u32()?,
        iterations: c.u64()?,
        seed: c.u64()?,
        final_loss: c.f64()?,
    };
    let n = c.u64()? as usize;
    arch.validate()?;
    if n != arch.n_weights() {
        return Err(Error::config(format!(
            "checkpoint declares {n} weights, architecture needs {}",
            arch.n_weights()
        )));
    }
    if bytes.len() - c.pos != 8 * n {
        return Err(Error::config("checkpoint weight block has the wrong length"));
    }
    let mut weights = Vec::with_capacity(n);
    for _ in 0..n {
        weights.push(c.f64()?);
    }
    let params = ScoreModelParams {
        arch,
        family,
        precond,
        weights,
        meta,
    };
    params.validate()?;
    Ok(params)
}

/// Write through a temporary sibling and rename into place.
pub fn save_checkpoint(params: &ScoreModelParams, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    write_checkpoint(params, &mut bytes)?;
    crate::io::write_atomic(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<ScoreModelParams> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    read_checkpoint(&mut file)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::build_score_network;

    fn sample() -> ScoreModelParams {
        let mut p = build_score_network(
            ArchSpec {
                base_channels: 3,
                levels: 3,
            },
            Family::Shd,
            42,
        )
        .unwrap();
        p.precond = Preconditioning {
            mean: -0.125,
            sigma_data: 1.0 / 3.0,
        };
        p.meta.input_shape = (32, 46);
        p.meta.final_loss = 0.1 + 0.2;
        p
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = sample();
        let mut bytes = Vec::new();
        write_checkpoint(&p, &mut bytes).unwrap();
        let q = read_checkpoint(&mut bytes.as_slice()).unwrap();
        assert_eq!(p.weights.len(), q.weights.len());
        assert!(p.weights.iter().zip(&q.weights).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(p.meta.final_loss.to_bits(), q.meta.final_loss.to_bits());
        assert_eq!(p.arch, q.arch);
        assert_eq!(p.family, q.family);
        assert_eq!(p.precond, q.precond);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let p = sample();
        save_checkpoint(&p, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), p);
        assert!(load_checkpoint(&dir.path().join("missing")).is_err());
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let p = sample();
        let mut bytes = Vec::new();
        write_checkpoint(&p, &mut bytes).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(&mut bad.as_slice()).is_err());
        let truncated = &bytes[..bytes.len() - 3];
        assert!(read_checkpoint(&mut &truncated[..]).is_err());
        let mut wrong_version = bytes.clone();
        wrong_version[8] = 9;
        assert!(read_checkpoint(&mut wrong_version.as_slice()).is_err());
    }
}
