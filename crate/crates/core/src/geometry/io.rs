//! Volume and transform file formats.
//!
//! Native raw volume (`IPVOL1`):
//!
//! ```text
//! "IPVOL1\n" | u32 nx ny nz | f64 sx sy sz ox oy oz | nx*ny*nz f32 (x fastest)
//! ```
//!
//! Displacement fields (`IPDSP1`) share the header and store three f32
//! components per voxel, interleaved. Affine files (`IPAFF1`) hold the
//! homogeneous matrix as 16 f64, row-major. Everything is little-endian.
//!
//! NIfTI-1 single-file (`n+1`) and header/image pair (`ni1`) volumes can be
//! read for the uint8, int16, float32 and float64 datatypes.

use std::fs;
use std::path::Path;

use nalgebra::Matrix4;

use super::transform::{AffineTransform, DisplacementField, MapTransform};
use super::volume::{Grid, Volume};
use crate::error::{Error, Result};

pub const VOLUME_MAGIC: &[u8; 7] = b"IPVOL1\n";
pub const DISPLACEMENT_MAGIC: &[u8; 7] = b"IPDSP1\n";
pub const AFFINE_MAGIC: &[u8; 7] = b"IPAFF1\n";

const GRID_HEADER_LEN: usize = 7 + 3 * 4 + 6 * 8;
const NIFTI_HEADER_LEN: usize = 348;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io_at(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io_at(path, e))
}

fn encode_grid(magic: &[u8; 7], grid: &Grid, out: &mut Vec<u8>) {
    out.extend_from_slice(magic);
    for n in grid.shape {
        out.extend_from_slice(&(n as u32).to_le_bytes());
    }
    for v in grid.spacing.iter().chain(&grid.origin) {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn decode_grid(magic: &[u8; 7], bytes: &[u8], what: &str) -> Result<Grid> {
    if bytes.len() < 7 || &bytes[..7] != magic {
        return Err(Error::MalformedMagic(what.to_string()));
    }
    if bytes.len() < GRID_HEADER_LEN {
        return Err(Error::TruncatedPayload {
            expected: GRID_HEADER_LEN,
            found: bytes.len(),
        });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let shape = [u32_at(7), u32_at(11), u32_at(15)];
    let spacing = [f64_at(19), f64_at(27), f64_at(35)];
    let origin = [f64_at(43), f64_at(51), f64_at(59)];
    Grid::new(shape, spacing, origin)
}

fn f32_payload(bytes: &[u8], count: usize) -> Result<Vec<f32>> {
    let expected = count * 4;
    if bytes.len() != expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: bytes.len(),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Serializes a volume in the native raw format. Values are stored as f32.
pub fn encode_volume(vol: &Volume) -> Vec<u8> {
    let mut out = Vec::with_capacity(GRID_HEADER_LEN + vol.data().len() * 4);
    encode_grid(VOLUME_MAGIC, vol.grid(), &mut out);
    for &v in vol.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    let grid = decode_grid(VOLUME_MAGIC, bytes, "raw volume")?;
    let values = f32_payload(&bytes[GRID_HEADER_LEN..], grid.len())?;
    Volume::new(grid, values.into_iter().map(f64::from).collect())
}

pub fn write_volume(vol: &Volume, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_volume(vol))
}

/// Reads a native raw volume or a NIfTI-1 file, chosen by content.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    if bytes.starts_with(VOLUME_MAGIC) {
        return decode_volume(&bytes);
    }
    if bytes.len() >= 4 {
        let size = &bytes[..4];
        if size == 348i32.to_le_bytes() || size == 348i32.to_be_bytes() {
            return read_nifti_bytes(&bytes, path);
        }
    }
    Err(Error::MalformedMagic(path.display().to_string()))
}

pub fn encode_displacement(field: &DisplacementField) -> Vec<u8> {
    let mut out = Vec::with_capacity(GRID_HEADER_LEN + field.vectors().len() * 12);
    encode_grid(DISPLACEMENT_MAGIC, field.grid(), &mut out);
    for v in field.vectors() {
        for c in v {
            out.extend_from_slice(&(*c as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_displacement(bytes: &[u8]) -> Result<DisplacementField> {
    let grid = decode_grid(DISPLACEMENT_MAGIC, bytes, "displacement field")?;
    let values = f32_payload(&bytes[GRID_HEADER_LEN..], grid.len() * 3)?;
    let vectors = values
        .chunks_exact(3)
        .map(|c| [c[0] as f64, c[1] as f64, c[2] as f64])
        .collect();
    DisplacementField::new(grid, vectors)
}

pub fn write_displacement(field: &DisplacementField, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_displacement(field))
}

pub fn read_displacement(path: impl AsRef<Path>) -> Result<DisplacementField> {
    decode_displacement(&read_file(path.as_ref())?)
}

pub fn encode_affine(t: &AffineTransform) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 128);
    out.extend_from_slice(AFFINE_MAGIC);
    for r in 0..4 {
        for c in 0..4 {
            out.extend_from_slice(&t.matrix()[(r, c)].to_le_bytes());
        }
    }
    out
}

pub fn decode_affine(bytes: &[u8]) -> Result<AffineTransform> {
    if !bytes.starts_with(AFFINE_MAGIC) {
        return Err(Error::MalformedMagic("affine".into()));
    }
    let body = &bytes[7..];
    if body.len() != 128 {
        return Err(Error::TruncatedPayload {
            expected: 128,
            found: body.len(),
        });
    }
    let mut m = Matrix4::zeros();
    for (i, c) in body.chunks_exact(8).enumerate() {
        m[(i / 4, i % 4)] = f64::from_le_bytes(c.try_into().unwrap());
    }
    AffineTransform::from_matrix(m)
}

pub fn write_affine(t: &AffineTransform, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_affine(t))
}

pub fn read_affine(path: impl AsRef<Path>) -> Result<AffineTransform> {
    decode_affine(&read_file(path.as_ref())?)
}

/// Reads an `IPAFF1` or `IPDSP1` file.
pub fn read_transform(path: impl AsRef<Path>) -> Result<MapTransform> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    if bytes.starts_with(AFFINE_MAGIC) {
        Ok(MapTransform::Affine(decode_affine(&bytes)?))
    } else if bytes.starts_with(DISPLACEMENT_MAGIC) {
        Ok(MapTransform::Dense(decode_displacement(&bytes)?))
    } else {
        Err(Error::MalformedMagic(path.display().to_string()))
    }
}

/// The NIfTI-1 header fields needed to decode a scalar volume.
#[derive(Clone, Debug, PartialEq)]
pub struct NiftiHeader {
    pub little_endian: bool,
    pub dim: [i16; 8],
    pub datatype: i16,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub magic: [u8; 4],
}

impl NiftiHeader {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < NIFTI_HEADER_LEN {
            return Err(Error::TruncatedPayload {
                expected: NIFTI_HEADER_LEN,
                found: bytes.len(),
            });
        }
        let little_endian = match &bytes[..4] {
            b if b == 348i32.to_le_bytes() => true,
            b if b == 348i32.to_be_bytes() => false,
            _ => return Err(Error::MalformedMagic("nifti sizeof_hdr".into())),
        };
        let i16_at = |o: usize| {
            let b = [bytes[o], bytes[o + 1]];
            if little_endian {
                i16::from_le_bytes(b)
            } else {
                i16::from_be_bytes(b)
            }
        };
        let f32_at = |o: usize| {
            let b: [u8; 4] = bytes[o..o + 4].try_into().unwrap();
            if little_endian {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            }
        };
        let magic: [u8; 4] = bytes[344..348].try_into().unwrap();
        if &magic != b"n+1\0" && &magic != b"ni1\0" {
            return Err(Error::MalformedMagic("nifti".into()));
        }
        Ok(NiftiHeader {
            little_endian,
            dim: std::array::from_fn(|i| i16_at(40 + 2 * i)),
            datatype: i16_at(70),
            bitpix: i16_at(72),
            pixdim: std::array::from_fn(|i| f32_at(76 + 4 * i)),
            vox_offset: f32_at(108),
            scl_slope: f32_at(112),
            scl_inter: f32_at(116),
            magic,
        })
    }

    pub fn is_single_file(&self) -> bool {
        &self.magic == b"n+1\0"
    }

    fn bytes_per_voxel(&self) -> Result<usize> {
        match self.datatype {
            2 => Ok(1),
            4 => Ok(2),
            16 => Ok(4),
            64 => Ok(8),
            other => Err(Error::UnsupportedDatatype(other)),
        }
    }

    fn shape(&self) -> Result<[usize; 3]> {
        let ndim = self.dim[0];
        if !(1..=7).contains(&ndim) {
            return Err(Error::UnsupportedLayout(format!("dim[0] = {ndim}")));
        }
        let d = |i: usize| if (i as i16) <= ndim { self.dim[i] } else { 1 };
        if (4..=ndim as usize).any(|i| self.dim[i] > 1) {
            return Err(Error::UnsupportedLayout(format!(
                "only 3D volumes are supported, dim = {:?}",
                self.dim
            )));
        }
        let shape = [d(1), d(2), d(3)];
        if shape.iter().any(|&n| n < 1) {
            return Err(Error::UnsupportedLayout(format!("dim = {:?}", self.dim)));
        }
        Ok(shape.map(|n| n as usize))
    }
}

fn read_nifti_bytes(bytes: &[u8], path: &Path) -> Result<Volume> {
    let header = NiftiHeader::parse(bytes)?;
    if header.is_single_file() {
        let offset = header.vox_offset.max(NIFTI_HEADER_LEN as f32) as usize;
        decode_nifti_payload(&header, bytes.get(offset..).unwrap_or(&[]))
    } else {
        let image = read_file(&path.with_extension("img"))?;
        let offset = header.vox_offset.max(0.0) as usize;
        decode_nifti_payload(&header, image.get(offset..).unwrap_or(&[]))
    }
}

/// Decodes the voxel payload that follows `vox_offset`.
pub fn decode_nifti_payload(header: &NiftiHeader, payload: &[u8]) -> Result<Volume> {
    let width = header.bytes_per_voxel()?;
    let shape = header.shape()?;
    let spacing = [1, 2, 3].map(|i| {
        let s = header.pixdim[i].abs() as f64;
        if s > 0.0 && s.is_finite() {
            s
        } else {
            1.0
        }
    });
    let grid = Grid::new(shape, spacing, [0.0; 3])?;
    let expected = grid.len() * width;
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    let le = header.little_endian;
    let raw = payload[..expected].chunks_exact(width).map(|c| match header.datatype {
        2 => c[0] as f64,
        4 => {
            let b = [c[0], c[1]];
            (if le {
                i16::from_le_bytes(b)
            } else {
                i16::from_be_bytes(b)
            }) as f64
        }
        16 => {
            let b = c.try_into().unwrap();
            (if le {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            }) as f64
        }
        _ => {
            let b = c.try_into().unwrap();
            if le {
                f64::from_le_bytes(b)
            } else {
                f64::from_be_bytes(b)
            }
        }
    });
    let (slope, inter) = (header.scl_slope as f64, header.scl_inter as f64);
    let data = if slope != 0.0 && slope.is_finite() && inter.is_finite() {
        raw.map(|v| slope * v + inter).collect()
    } else {
        raw.collect()
    };
    Volume::new(grid, data)
}
