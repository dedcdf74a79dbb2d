//! Single-file NIfTI-1 (`.nii`) subset: uncompressed, little-endian, 3D,
//! int16 or float32 voxels, axis-aligned geometry.

use std::fs;
use std::path::Path;

use super::{BinaryMask, Volume, VoxelType};
use crate::error::{Error, Result};

pub const NIFTI_HEADER_SIZE: usize = 348;
pub const NIFTI_MAGIC: &[u8; 4] = b"n+1\0";
/// Header plus the four-byte extension flag.
const VOX_OFFSET: usize = 352;

const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;
const NIFTI_UNITS_MM: u8 = 2;

struct Header<'a>(&'a [u8]);

impl Header<'_> {
    fn i16(&self, off: usize) -> i16 {
        i16::from_le_bytes([self.0[off], self.0[off + 1]])
    }

    fn i32(&self, off: usize) -> i32 {
        i32::from_le_bytes(self.0[off..off + 4].try_into().unwrap())
    }

    fn f32(&self, off: usize) -> f32 {
        f32::from_le_bytes(self.0[off..off + 4].try_into().unwrap())
    }
}

fn put_i16(buf: &mut [u8], off: usize, v: i16) {
    buf[off..off + 2].copy_from_slice(&v.to_le_bytes());
}

fn put_i32(buf: &mut [u8], off: usize, v: i32) {
    buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

fn put_f32(buf: &mut [u8], off: usize, v: f32) {
    buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

/// Serializes a volume using its preferred storage type.
pub fn encode_nifti(volume: &Volume) -> Result<Vec<u8>> {
    let [nx, ny, nz] = volume.dims();
    let dims: Vec<i16> = [nx, ny, nz]
        .iter()
        .map(|&d| i16::try_from(d).map_err(|_| Error::Unsupported(format!("extent {d} exceeds NIfTI-1 limit"))))
        .collect::<Result<_>>()?;
    let (datatype, bitpix) = match volume.storage {
        VoxelType::Int16 => (DT_INT16, 16),
        VoxelType::Float32 => (DT_FLOAT32, 32),
    };
    let bytes_per = bitpix as usize / 8;
    let mut buf = vec![0u8; VOX_OFFSET + volume.len() * bytes_per];
    put_i32(&mut buf, 0, NIFTI_HEADER_SIZE as i32);
    buf[38] = b'r';
    put_i16(&mut buf, 40, 3);
    for (k, &d) in dims.iter().enumerate() {
        put_i16(&mut buf, 42 + 2 * k, d);
    }
    for k in 3..7 {
        put_i16(&mut buf, 42 + 2 * k, 1);
    }
    put_i16(&mut buf, 70, datatype);
    put_i16(&mut buf, 72, bitpix);
    put_f32(&mut buf, 76, 1.0); // qfac
    for (k, &s) in volume.spacing.iter().enumerate() {
        put_f32(&mut buf, 80 + 4 * k, s as f32);
    }
    put_f32(&mut buf, 108, VOX_OFFSET as f32);
    put_f32(&mut buf, 112, 1.0); // scl_slope
    buf[123] = NIFTI_UNITS_MM;
    // qform: identity rotation, origin as offset; sform: scaled identity
    put_i16(&mut buf, 252, 1);
    put_i16(&mut buf, 254, 1);
    for (k, &o) in volume.origin.iter().enumerate() {
        put_f32(&mut buf, 268 + 4 * k, o as f32);
    }
    for row in 0..3 {
        put_f32(&mut buf, 280 + 16 * row + 4 * row, volume.spacing[row] as f32);
        put_f32(&mut buf, 280 + 16 * row + 12, volume.origin[row] as f32);
    }
    buf[344..348].copy_from_slice(NIFTI_MAGIC);

    let body = &mut buf[VOX_OFFSET..];
    match volume.storage {
        VoxelType::Int16 => {
            for (chunk, &v) in body.chunks_exact_mut(2).zip(volume.data()) {
                if v.fract() != 0.0 || v < i16::MIN as f64 || v > i16::MAX as f64 {
                    return Err(Error::data(format!("value {v} is not representable as int16")));
                }
                chunk.copy_from_slice(&(v as i16).to_le_bytes());
            }
        }
        VoxelType::Float32 => {
            for (chunk, &v) in body.chunks_exact_mut(4).zip(volume.data()) {
                chunk.copy_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    Ok(buf)
}

pub fn decode_nifti(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < NIFTI_HEADER_SIZE {
        return Err(Error::Format(format!("{} bytes is shorter than a NIfTI-1 header", bytes.len())));
    }
    let h = Header(bytes);
    let sizeof_hdr = h.i32(0);
    if sizeof_hdr != NIFTI_HEADER_SIZE as i32 {
        if sizeof_hdr.swap_bytes() == NIFTI_HEADER_SIZE as i32 {
            return Err(Error::Unsupported("big-endian NIfTI".into()));
        }
        return Err(Error::Format(format!("sizeof_hdr is {sizeof_hdr}, expected 348")));
    }
    match &bytes[344..348] {
        m if m == NIFTI_MAGIC => {}
        b"ni1\0" => return Err(Error::Unsupported("two-file (.hdr/.img) NIfTI".into())),
        _ => return Err(Error::Format("bad NIfTI magic".into())),
    }
    let ndim = h.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::Format(format!("dim[0] = {ndim}")));
    }
    let mut dims = [1usize; 3];
    for k in 0..ndim as usize {
        let d = h.i16(42 + 2 * k);
        if d < 1 {
            return Err(Error::Format(format!("dim[{}] = {d}", k + 1)));
        }
        if k < 3 {
            dims[k] = d as usize;
        } else if d != 1 {
            return Err(Error::Unsupported(format!("non-singleton dimension {} of extent {d}", k + 1)));
        }
    }
    let datatype = h.i16(70);
    let storage = match datatype {
        DT_INT16 => VoxelType::Int16,
        DT_FLOAT32 => VoxelType::Float32,
        other => return Err(Error::Unsupported(format!("NIfTI datatype {other}"))),
    };
    let spacing = [h.f32(80) as f64, h.f32(84) as f64, h.f32(88) as f64];
    let vox_offset = h.f32(108);
    if !(vox_offset >= VOX_OFFSET as f32) || vox_offset.fract() != 0.0 {
        return Err(Error::Format(format!("vox_offset {vox_offset}")));
    }
    let vox_offset = vox_offset as usize;

    let qform = h.i16(252);
    let sform = h.i16(254);
    let origin = if qform > 0 {
        if [h.f32(256), h.f32(260), h.f32(264)] != [0.0; 3] {
            return Err(Error::Unsupported("rotated qform".into()));
        }
        [h.f32(268) as f64, h.f32(272) as f64, h.f32(276) as f64]
    } else if sform > 0 {
        let mut origin = [0.0; 3];
        for row in 0..3 {
            for col in 0..3 {
                if row != col && h.f32(280 + 16 * row + 4 * col) != 0.0 {
                    return Err(Error::Unsupported("sheared or rotated sform".into()));
                }
            }
            origin[row] = h.f32(280 + 16 * row + 12) as f64;
        }
        origin
    } else {
        [0.0; 3]
    };

    let n: usize = dims.iter().product();
    let bytes_per = if storage == VoxelType::Int16 { 2 } else { 4 };
    let body = bytes
        .get(vox_offset..vox_offset + n * bytes_per)
        .ok_or_else(|| Error::Format("voxel data truncated".into()))?;
    let mut data: Vec<f64> = match storage {
        VoxelType::Int16 => body
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64)
            .collect(),
        VoxelType::Float32 => body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    };
    let slope = h.f32(112) as f64;
    let inter = h.f32(116) as f64;
    let mut storage = storage;
    if slope != 0.0 && (slope != 1.0 || inter != 0.0) {
        for v in &mut data {
            *v = *v * slope + inter;
        }
        storage = VoxelType::Float32;
    }
    let mut vol = Volume::new(dims, data, spacing)
        .map_err(|e| Error::Format(format!("invalid geometry: {e}")))?
        .with_storage(storage);
    vol.origin = origin;
    Ok(vol)
}

pub fn read_nifti(path: &Path) -> Result<Volume> {
    decode_nifti(&fs::read(path)?)
}

pub fn write_nifti(volume: &Volume, path: &Path) -> Result<()> {
    fs::write(path, encode_nifti(volume)?)?;
    Ok(())
}

/// Interprets a volume whose voxels are exactly 0 or 1 as a mask.
pub fn mask_from_volume(volume: &Volume) -> Result<BinaryMask> {
    let data = volume
        .data()
        .iter()
        .map(|&v| match v {
            0.0 => Ok(false),
            1.0 => Ok(true),
            other => Err(Error::data(format!("mask voxel value {other} is not 0 or 1"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let mut mask = BinaryMask::new(volume.dims(), data, volume.spacing)?;
    mask.origin = volume.origin;
    Ok(mask)
}

pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    mask_from_volume(&read_nifti(path)?)
}

/// Writes a mask as an int16 0/1 volume.
pub fn write_mask(mask: &BinaryMask, path: &Path) -> Result<()> {
    let data = mask.data().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let mut vol = Volume::new(mask.dims(), data, mask.spacing)?.with_storage(VoxelType::Int16);
    vol.origin = mask.origin;
    write_nifti(&vol, path)
}
