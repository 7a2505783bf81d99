//! `CCKP` checkpoint files.
//!
//! Layout (little-endian): magic `CCKP`, `u32` version, the model config
//! (`d_img`, `d_embed`, `hidden`, `layers` as `u32`; `bidirectional` as `u8`;
//! `vocab_size`, `n` as `u32`; precision bits 32/64 as `u8`), a `u32` tensor
//! count, then per tensor: `u32` name length, UTF-8 name, `u32` rank, `rank`
//! dims as `u32`, and a row-major `f32` payload. 64-bit models are narrowed
//! to `f32` on save.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{ModelConfig, ModelParams, Precision, Scalar};
use crate::error::{Error, Result};

pub const CCKP_MAGIC: &[u8; 4] = b"CCKP";
pub const CCKP_VERSION: u32 = 1;

/// Parameters loaded from a checkpoint, in the precision it declares.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyParams {
    F32(ModelParams<f32>),
    F64(ModelParams<f64>),
}

impl AnyParams {
    pub fn config(&self) -> &ModelConfig {
        match self {
            AnyParams::F32(p) => &p.config,
            AnyParams::F64(p) => &p.config,
        }
    }

    pub fn write_to(&self, out: impl Write) -> Result<()> {
        match self {
            AnyParams::F32(p) => write_checkpoint(p, out),
            AnyParams::F64(p) => write_checkpoint(p, out),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        match self {
            AnyParams::F32(p) => save_checkpoint(p, path),
            AnyParams::F64(p) => save_checkpoint(p, path),
        }
    }
}

impl From<ModelParams<f32>> for AnyParams {
    fn from(p: ModelParams<f32>) -> Self {
        AnyParams::F32(p)
    }
}

impl From<ModelParams<f64>> for AnyParams {
    fn from(p: ModelParams<f64>) -> Self {
        AnyParams::F64(p)
    }
}

fn write_config(cfg: &ModelConfig, out: &mut impl Write) -> std::io::Result<()> {
    out.write_u32::<LittleEndian>(cfg.d_img as u32)?;
    out.write_u32::<LittleEndian>(cfg.d_embed as u32)?;
    out.write_u32::<LittleEndian>(cfg.hidden as u32)?;
    out.write_u32::<LittleEndian>(cfg.layers as u32)?;
    out.write_u8(u8::from(cfg.bidirectional))?;
    out.write_u32::<LittleEndian>(cfg.vocab_size as u32)?;
    out.write_u32::<LittleEndian>(cfg.n as u32)?;
    out.write_u8(cfg.precision.bits())
}

pub fn write_checkpoint<F: Scalar>(params: &ModelParams<F>, mut out: impl Write) -> Result<()> {
    let io = |e| Error::format("CCKP", format!("write failed: {e}"));
    out.write_all(CCKP_MAGIC).map_err(io)?;
    out.write_u32::<LittleEndian>(CCKP_VERSION).map_err(io)?;
    write_config(&params.config, &mut out).map_err(io)?;
    let tensors = params.named_tensors();
    out.write_u32::<LittleEndian>(tensors.len() as u32).map_err(io)?;
    for (name, t) in tensors {
        out.write_u32::<LittleEndian>(name.len() as u32).map_err(io)?;
        out.write_all(name.as_bytes()).map_err(io)?;
        out.write_u32::<LittleEndian>(t.ndim() as u32).map_err(io)?;
        for &d in t.shape() {
            out.write_u32::<LittleEndian>(d as u32).map_err(io)?;
        }
        for &v in t.iter() {
            out.write_f32::<LittleEndian>(v.to_f32().expect("float to f32")).map_err(io)?;
        }
    }
    Ok(())
}

pub fn checkpoint_bytes<F: Scalar>(params: &ModelParams<F>) -> Vec<u8> {
    let mut buf = Vec::new();
    write_checkpoint(params, &mut buf).expect("write to Vec");
    buf
}

pub fn save_checkpoint<F: Scalar>(params: &ModelParams<F>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, checkpoint_bytes(params)).map_err(|e| Error::io(path, e))
}

fn read_config(input: &mut impl Read) -> std::io::Result<(ModelConfig, u8)> {
    let d_img = input.read_u32::<LittleEndian>()? as usize;
    let d_embed = input.read_u32::<LittleEndian>()? as usize;
    let hidden = input.read_u32::<LittleEndian>()? as usize;
    let layers = input.read_u32::<LittleEndian>()? as usize;
    let bidirectional = input.read_u8()?;
    let vocab_size = input.read_u32::<LittleEndian>()? as usize;
    let n = input.read_u32::<LittleEndian>()? as usize;
    let precision = input.read_u8()?;
    let cfg = ModelConfig {
        d_img,
        d_embed,
        hidden,
        layers,
        bidirectional: bidirectional != 0,
        vocab_size,
        n,
        precision: Precision::F32,
    };
    if bidirectional > 1 {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("bidirectional flag must be 0 or 1, got {bidirectional}"),
        ));
    }
    Ok((cfg, precision))
}

/// Reads a checkpoint in whatever precision it declares.
pub fn read_checkpoint(mut input: impl Read) -> Result<AnyParams> {
    let truncated = |e: std::io::Error| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::format("CCKP", "truncated file"),
        _ => Error::format("CCKP", e.to_string()),
    };
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(truncated)?;
    if &magic != CCKP_MAGIC {
        return Err(Error::format("CCKP", format!("bad magic {magic:?}")));
    }
    let version = input.read_u32::<LittleEndian>().map_err(truncated)?;
    if version != CCKP_VERSION {
        return Err(Error::format("CCKP", format!("unsupported version {version}")));
    }
    let (mut cfg, bits) = read_config(&mut input).map_err(truncated)?;
    cfg.precision = Precision::from_bits(u32::from(bits))
        .ok_or_else(|| Error::format("CCKP", format!("unsupported precision {bits}")))?;
    cfg.validate()?;
    Ok(match cfg.precision {
        Precision::F32 => AnyParams::F32(read_tensors(cfg, &mut input)?),
        Precision::F64 => AnyParams::F64(read_tensors(cfg, &mut input)?),
    })
}

fn read_tensors<F: Scalar>(cfg: ModelConfig, input: &mut impl Read) -> Result<ModelParams<F>> {
    let truncated = |e: std::io::Error| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::format("CCKP", "truncated file"),
        _ => Error::format("CCKP", e.to_string()),
    };
    let mut params = ModelParams::<F>::zeros(cfg)?;
    let count = input.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    let mut slots: HashMap<String, _> = params
        .named_tensors_mut()
        .into_iter()
        .collect();
    if count != slots.len() {
        return Err(Error::format(
            "CCKP",
            format!("expected {} tensors, found {count}", slots.len()),
        ));
    }
    for _ in 0..count {
        let name_len = input.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        let mut name = vec![0u8; name_len];
        input.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::format("CCKP", "tensor name is not UTF-8"))?;
        let mut slot = slots
            .remove(&name)
            .ok_or_else(|| Error::format("CCKP", format!("unexpected or repeated tensor `{name}`")))?;
        let rank = input.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        let dims = (0..rank)
            .map(|_| input.read_u32::<LittleEndian>().map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(truncated)?;
        if dims != slot.shape() {
            return Err(Error::format(
                "CCKP",
                format!("tensor `{name}` has shape {dims:?}, expected {:?}", slot.shape()),
            ));
        }
        let mut payload = vec![0f32; slot.len()];
        input
            .read_f32_into::<LittleEndian>(&mut payload)
            .map_err(truncated)?;
        for (dst, &src) in slot.iter_mut().zip(&payload) {
            if !src.is_finite() {
                return Err(Error::format("CCKP", format!("tensor `{name}` has non-finite values")));
            }
            *dst = F::from_f32(src).expect("f32 to float");
        }
    }
    drop(slots);
    let mut rest = [0u8; 1];
    if input.read(&mut rest).map_err(truncated)? != 0 {
        return Err(Error::format("CCKP", "trailing bytes after last tensor"));
    }
    Ok(params)
}

/// The vocabulary file written next to a checkpoint: `<checkpoint>.vocab`.
pub fn vocab_sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.as_os_str().to_owned();
    name.push(".vocab");
    PathBuf::from(name)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<AnyParams> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn config(precision: Precision, bidirectional: bool) -> ModelConfig {
        ModelConfig {
            d_img: 5,
            d_embed: 6,
            hidden: 3,
            layers: 2,
            bidirectional,
            vocab_size: 9,
            n: 4,
            precision,
        }
    }

    #[test]
    fn header_layout() {
        let p = init_params::<f32>(config(Precision::F32, true), 1).unwrap();
        let bytes = checkpoint_bytes(&p);
        assert_eq!(&bytes[..4], b"CCKP");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &5u32.to_le_bytes());
        assert_eq!(bytes[24], 1); // bidirectional
        assert_eq!(bytes[33], 32); // precision
        assert_eq!(&bytes[34..38], &17u32.to_le_bytes());
        assert_eq!(&bytes[38..42], &1u32.to_le_bytes());
        assert_eq!(&bytes[42..43], b"E");
        // 17 tensors: header + names + dims + 4 bytes per component.
        let names: usize = p.named_tensors().iter().map(|(n, t)| 4 + n.len() + 4 + 4 * t.ndim()).sum();
        assert_eq!(bytes.len(), 38 + names + 4 * p.num_params());
    }

    #[test]
    fn round_trip_f32_is_exact() {
        let p = init_params::<f32>(config(Precision::F32, true), 4).unwrap();
        let bytes = checkpoint_bytes(&p);
        let back = read_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(back, AnyParams::F32(p));
    }

    #[test]
    fn f64_is_narrowed_then_stable() {
        let p = init_params::<f64>(config(Precision::F64, false), 4).unwrap();
        let bytes = checkpoint_bytes(&p);
        let AnyParams::F64(back) = read_checkpoint(bytes.as_slice()).unwrap() else {
            panic!("precision lost");
        };
        for (a, b) in p.to_flat().iter().zip(back.to_flat()) {
            assert_eq!(*a as f32 as f64, b);
        }
        assert_eq!(checkpoint_bytes(&back), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let p = init_params::<f32>(config(Precision::F32, true), 4).unwrap();
        let bytes = checkpoint_bytes(&p);
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(read_checkpoint(bad.as_slice()).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(read_checkpoint(bad.as_slice()).is_err());
        let mut bad = bytes.clone();
        bad[33] = 16;
        assert!(read_checkpoint(bad.as_slice()).is_err());
        let mut bad = bytes.clone();
        bad[20] = 3; // layers
        assert!(read_checkpoint(bad.as_slice()).is_err());
        assert!(read_checkpoint(&bytes[..bytes.len() - 2]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(read_checkpoint(long.as_slice()).is_err());
        let mut bad = bytes;
        bad[42] = b'Q';
        assert!(read_checkpoint(bad.as_slice()).is_err());
    }
}
