//! Model checkpoint container.
//!
//! ```text
//! magic        "CTSEG1\0"                      7 bytes
//! real width   u8 (4 = f32, 8 = f64)
//! config       in_channels u32, num_classes u32, group_channels 3×u32,
//!              blocks_per_group u32, kernel u32, seed u64
//! count        u32
//! per param    name_len u32, name bytes (UTF-8), ndim u32, dims ndim×u32,
//!              values (little-endian, real width bytes each)
//! ```
//!
//! All integers are little-endian.

use std::fs;
use std::path::Path;

use super::{make_plan, ModelParams, NetConfig, Param, ParamKind};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"CTSEG1\0";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RealWidth {
    F32,
    F64,
}

impl RealWidth {
    fn code(self) -> u8 {
        match self {
            RealWidth::F32 => 4,
            RealWidth::F64 => 8,
        }
    }
}

pub fn encode_params(params: &ModelParams, width: RealWidth) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(width.code());
    let c = &params.config;
    for v in [c.in_channels, c.num_classes, c.group_channels[0], c.group_channels[1], c.group_channels[2], c.blocks_per_group, c.kernel] {
        put_u32(&mut out, v);
    }
    out.extend_from_slice(&c.seed.to_le_bytes());
    put_u32(&mut out, params.len());
    for p in params.iter() {
        put_u32(&mut out, p.name.len());
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, p.shape.len());
        for &d in &p.shape {
            put_u32(&mut out, d);
        }
        match width {
            RealWidth::F32 => {
                for &v in &p.data {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            RealWidth::F64 => {
                for &v in &p.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    out
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format("checkpoint truncated".into())),
        }
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn remaining(&self) -> &'a [u8] {
        &self.buf[self.pos..]
    }
}

/// Decodes a checkpoint and reports the real width it was stored with.
pub fn decode_params(bytes: &[u8]) -> Result<(ModelParams, RealWidth)> {
    let (params, width, rest) = decode_prefix(bytes)?;
    if !rest.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after parameters", rest.len())));
    }
    Ok((params, width))
}

/// Decodes the model part and returns any bytes that follow it.
pub(crate) fn decode_prefix(bytes: &[u8]) -> Result<(ModelParams, RealWidth, &[u8])> {
    let mut r = ByteReader::new(bytes);
    if r.take(CHECKPOINT_MAGIC.len()).ok() != Some(&CHECKPOINT_MAGIC[..]) {
        return Err(Error::Format("not a model checkpoint (bad magic)".into()));
    }
    let width = match r.u8()? {
        4 => RealWidth::F32,
        8 => RealWidth::F64,
        w => return Err(Error::Unsupported(format!("real width {w}"))),
    };
    let config = NetConfig {
        in_channels: r.u32()?,
        num_classes: r.u32()?,
        group_channels: [r.u32()?, r.u32()?, r.u32()?],
        blocks_per_group: r.u32()?,
        kernel: r.u32()?,
        seed: r.u64()?,
    };
    config.validate().map_err(|e| Error::Format(format!("stored config invalid: {e}")))?;
    let count = r.u32()?;
    let mut params = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let kind = ParamKind::from_name(&name)
            .ok_or_else(|| Error::Format(format!("unknown parameter kind in {name}")))?;
        let ndim = r.u32()?;
        let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = match width {
            RealWidth::F32 => r
                .take(n.checked_mul(4).ok_or_else(|| Error::Format("shape overflow".into()))?)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect(),
            RealWidth::F64 => r
                .take(n.checked_mul(8).ok_or_else(|| Error::Format("shape overflow".into()))?)?
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        };
        params.push(Param { name, shape, data, kind });
    }
    let model = ModelParams { config, params };
    // the stored list must be exactly the plan the config describes
    let (_, fresh) = make_plan(&config, Some(&model))?;
    debug_assert!(fresh.is_empty());
    let expected = super::build(&config)?;
    if expected.len() != model.len()
        || expected.iter().zip(model.iter()).any(|(a, b)| a.name != b.name)
    {
        return Err(Error::Format("parameter list does not match the stored config".into()));
    }
    Ok((model, width, r.remaining()))
}

pub fn save_params(params: &ModelParams, width: RealWidth, path: &Path) -> Result<()> {
    fs::write(path, encode_params(params, width))?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<ModelParams> {
    Ok(decode_params(&fs::read(path)?)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segnet::build;

    fn cfg() -> NetConfig {
        NetConfig {
            group_channels: [2, 2, 3],
            blocks_per_group: 1,
            seed: 3,
            ..NetConfig::default()
        }
    }

    #[test]
    fn f64_round_trip_exact() {
        let p = build(&cfg()).unwrap();
        let bytes = encode_params(&p, RealWidth::F64);
        assert_eq!(&bytes[..7], b"CTSEG1\0");
        let (q, w) = decode_params(&bytes).unwrap();
        assert_eq!(w, RealWidth::F64);
        assert_eq!(p, q);
    }

    #[test]
    fn f32_file_round_trip_exact() {
        let p = build(&cfg()).unwrap();
        let bytes = encode_params(&p, RealWidth::F32);
        let (q, _) = decode_params(&bytes).unwrap();
        assert_eq!(encode_params(&q, RealWidth::F32), bytes);
        for (a, b) in p.iter().zip(q.iter()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
    }

    #[test]
    fn rejects_corruption() {
        let p = build(&cfg()).unwrap();
        let mut bytes = encode_params(&p, RealWidth::F32);
        assert!(matches!(decode_params(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        bytes[0] = b'X';
        assert!(matches!(decode_params(&bytes), Err(Error::Format(_))));
        let mut bytes = encode_params(&p, RealWidth::F32);
        bytes[7] = 2;
        assert!(matches!(decode_params(&bytes), Err(Error::Unsupported(_))));
    }
}
