//! Binary parameter file.
//!
//! ```text
//! offset  size  field
//! 0       8     magic "TOKUQRM1"
//! 8       8     vocab_size     u64 LE
//! 16      8     dim            u64 LE
//! 24      8     num_layers     u64 LE
//! 32      8     num_heads      u64 LE
//! 40      8     ffn_dim        u64 LE
//! 48      8     max_positions  u64 LE
//! 56      8     init_seed      u64 LE
//! 64      8     init_scale     f64 LE
//! 72      8     param_count    u64 LE
//! 80      8*N   parameters     f64 LE, in layout order
//! ```

use std::io::{Read, Write};

use super::{ReferenceModel, TinyTransformerConfig};
use crate::error::{Error, Result};

pub const PARAM_MAGIC: &[u8; 8] = b"TOKUQRM1";

pub fn write_params<W: Write>(model: &ReferenceModel, mut out: W) -> Result<()> {
    let c = model.config();
    out.write_all(PARAM_MAGIC)?;
    for v in [
        c.vocab_size,
        c.dim,
        c.num_layers,
        c.num_heads,
        c.ffn_dim,
        c.max_positions,
    ] {
        out.write_all(&(v as u64).to_le_bytes())?;
    }
    out.write_all(&c.init_seed.to_le_bytes())?;
    out.write_all(&c.init_scale.to_le_bytes())?;
    out.write_all(&(model.num_params() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(model.num_params() * 8);
    for p in model.params() {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|e| Error::ParamFile(format!("truncated header: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

fn to_usize(v: u64, name: &str) -> Result<usize> {
    usize::try_from(v).map_err(|_| Error::ParamFile(format!("{name} {v} does not fit in usize")))
}

pub fn read_params<R: Read>(mut input: R) -> Result<ReferenceModel> {
    let mut magic = [0u8; 8];
    input
        .read_exact(&mut magic)
        .map_err(|e| Error::ParamFile(format!("truncated magic: {e}")))?;
    if &magic != PARAM_MAGIC {
        return Err(Error::ParamFile(format!("bad magic {magic:?}")));
    }
    let mut fields = [0usize; 6];
    let names = ["vocab_size", "dim", "num_layers", "num_heads", "ffn_dim", "max_positions"];
    for (f, name) in fields.iter_mut().zip(names) {
        *f = to_usize(read_u64(&mut input)?, name)?;
    }
    let init_seed = read_u64(&mut input)?;
    let init_scale = f64::from_bits(read_u64(&mut input)?);
    let count = to_usize(read_u64(&mut input)?, "param_count")?;
    let config = TinyTransformerConfig {
        vocab_size: fields[0],
        dim: fields[1],
        num_layers: fields[2],
        num_heads: fields[3],
        ffn_dim: fields[4],
        max_positions: fields[5],
        init_seed,
        init_scale,
    };
    config.validate()?;
    let expected = super::ParamLayout::new(&config).total;
    if count != expected {
        return Err(Error::ParamFile(format!(
            "header declares {count} parameters, config needs {expected}"
        )));
    }
    let mut bytes = Vec::with_capacity(count * 8);
    input.read_to_end(&mut bytes)?;
    if bytes.len() != count * 8 {
        return Err(Error::ParamFile(format!(
            "expected {} parameter bytes, found {}",
            count * 8,
            bytes.len()
        )));
    }
    let params = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    ReferenceModel::from_params(config, params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_round_trip_is_bit_exact() {
        let cfg = TinyTransformerConfig {
            vocab_size: 5,
            dim: 4,
            num_layers: 1,
            num_heads: 2,
            ffn_dim: 6,
            max_positions: 7,
            init_seed: 11,
            init_scale: 0.3,
        };
        let m = ReferenceModel::init(cfg.clone()).unwrap();
        let mut buf = Vec::new();
        write_params(&m, &mut buf).unwrap();
        assert_eq!(&buf[..8], PARAM_MAGIC);
        assert_eq!(buf.len(), 80 + 8 * m.num_params());
        let back = read_params(buf.as_slice()).unwrap();
        assert_eq!(back.config(), &cfg);
        assert_eq!(back.params(), m.params());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let m = ReferenceModel::init(TinyTransformerConfig::default()).unwrap();
        let mut buf = Vec::new();
        write_params(&m, &mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_params(buf.as_slice()), Err(Error::ParamFile(_))));
        assert!(read_params(&b"NOTMAGIC"[..]).is_err());
    }
}
