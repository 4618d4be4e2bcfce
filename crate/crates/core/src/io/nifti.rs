//! Minimal single-file NIfTI-1 (`.nii`) support.
//!
//! Reads uncompressed little-endian float32 or int16 images, applying
//! `scl_slope`/`scl_inter` when set. Writes float32. Displacement fields use
//! the vector intent with the component on the fifth axis. Anything else is
//! rejected as an unsupported format.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::field::DisplacementField;
use crate::scalar::{lit, to_f64, Real};
use crate::volume::{Grid, Volume};

const HEADER_LEN: usize = 348;
const DATA_OFFSET: usize = 352;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;
const INTENT_VECTOR: i16 = 1007;
/// `xyzt_units`: millimetres.
const UNITS_MM: u8 = 2;

struct Header {
    dims: [usize; 3],
    components: usize,
    spacing: [f64; 3],
    datatype: i16,
    offset: usize,
    slope: f64,
    inter: f64,
}

fn i16_at(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn f32_at(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

fn unsupported(path: &Path, what: &str) -> Error {
    Error::UnsupportedFormat(format!("{}: {what}", path.display()))
}

fn parse_header(path: &Path, b: &[u8]) -> Result<Header> {
    if b.len() >= 2 && b[0] == 0x1f && b[1] == 0x8b {
        return Err(unsupported(path, "compressed NIfTI is not supported"));
    }
    if b.len() < HEADER_LEN {
        return Err(unsupported(path, "file shorter than a NIfTI-1 header"));
    }
    let sizeof_hdr = i32::from_le_bytes([b[0], b[1], b[2], b[3]]);
    if sizeof_hdr != HEADER_LEN as i32 {
        if i32::from_be_bytes([b[0], b[1], b[2], b[3]]) == HEADER_LEN as i32 {
            return Err(unsupported(path, "big-endian NIfTI is not supported"));
        }
        return Err(unsupported(path, "not a NIfTI-1 file"));
    }
    if &b[344..348] != b"n+1\0" {
        return Err(unsupported(path, "only single-file NIfTI-1 (magic n+1) is supported"));
    }
    let dim: [i16; 8] = std::array::from_fn(|k| i16_at(b, 40 + 2 * k));
    let ndim = dim[0];
    let components = match ndim {
        3 => 1,
        4 if dim[4] == 1 => 1,
        5 if dim[4] == 1 => dim[5].max(1) as usize,
        _ => return Err(unsupported(path, &format!("unsupported dimensionality {dim:?}"))),
    };
    if dim[1..4].iter().any(|&d| d < 1) {
        return Err(unsupported(path, &format!("invalid dims {dim:?}")));
    }
    let datatype = i16_at(b, 70);
    if datatype != DT_FLOAT32 && datatype != DT_INT16 {
        return Err(unsupported(path, &format!("datatype {datatype} (only float32 and int16)")));
    }
    let pix: [f32; 8] = std::array::from_fn(|k| f32_at(b, 76 + 4 * k));
    // Widen through the shortest decimal so 0.8 reads back as 0.8, not 0.800000011920929.
    let widen = |x: f32| x.to_string().parse::<f64>().unwrap_or(x as f64);
    let spacing = [1, 2, 3].map(|k| if pix[k] > 0.0 { widen(pix[k]) } else { 1.0 });
    let vox_offset = f32_at(b, 108);
    if !(vox_offset >= HEADER_LEN as f32) || vox_offset.fract() != 0.0 {
        return Err(unsupported(path, &format!("invalid vox_offset {vox_offset}")));
    }
    let slope = f32_at(b, 112) as f64;
    let inter = f32_at(b, 116) as f64;
    let (slope, inter) = if slope == 0.0 || !slope.is_finite() { (1.0, 0.0) } else { (slope, inter) };
    Ok(Header {
        dims: [1, 2, 3].map(|k| dim[k] as usize),
        components,
        spacing,
        datatype,
        offset: vox_offset as usize,
        slope,
        inter,
    })
}

fn read_values(path: &Path) -> Result<(Header, Vec<f64>)> {
    let bytes = fs::read(path)?;
    let h = parse_header(path, &bytes)?;
    let n = h.dims.iter().product::<usize>() * h.components;
    let width = if h.datatype == DT_FLOAT32 { 4 } else { 2 };
    let body = bytes.get(h.offset..h.offset + n * width).ok_or_else(|| unsupported(path, "truncated voxel data"))?;
    let values = if h.datatype == DT_FLOAT32 {
        body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect::<Vec<_>>()
    } else {
        body.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]]) as f64).collect()
    };
    let (s, i) = (h.slope, h.inter);
    let values = if s == 1.0 && i == 0.0 { values } else { values.into_iter().map(|v| v * s + i).collect() };
    Ok((h, values))
}

fn header_bytes(grid: &Grid, components: usize) -> Vec<u8> {
    let mut b = vec![0u8; DATA_OFFSET];
    b[0..4].copy_from_slice(&(HEADER_LEN as i32).to_le_bytes());
    b[38] = b'r';
    let mut dim = [0i16; 8];
    dim[0] = if components == 1 { 3 } else { 5 };
    for k in 0..3 {
        dim[k + 1] = grid.dims[k] as i16;
    }
    dim[4] = 1;
    dim[5] = if components == 1 { 1 } else { components as i16 };
    dim[6] = 1;
    dim[7] = 1;
    for (k, d) in dim.iter().enumerate() {
        b[40 + 2 * k..42 + 2 * k].copy_from_slice(&d.to_le_bytes());
    }
    if components > 1 {
        b[68..70].copy_from_slice(&INTENT_VECTOR.to_le_bytes());
    }
    b[70..72].copy_from_slice(&DT_FLOAT32.to_le_bytes());
    b[72..74].copy_from_slice(&32i16.to_le_bytes());
    let mut pix = [1.0f32; 8];
    for k in 0..3 {
        pix[k + 1] = grid.spacing[k] as f32;
    }
    for (k, p) in pix.iter().enumerate() {
        b[76 + 4 * k..80 + 4 * k].copy_from_slice(&p.to_le_bytes());
    }
    b[108..112].copy_from_slice(&(DATA_OFFSET as f32).to_le_bytes());
    b[112..116].copy_from_slice(&1.0f32.to_le_bytes());
    b[123] = UNITS_MM;
    // Scanner-style affine (sform) from the spacing alone.
    b[254..256].copy_from_slice(&1i16.to_le_bytes());
    for (row, off) in [280usize, 296, 312].into_iter().enumerate() {
        let v = grid.spacing[row] as f32;
        b[off + 4 * row..off + 4 * row + 4].copy_from_slice(&v.to_le_bytes());
    }
    b[344..348].copy_from_slice(b"n+1\0");
    b
}

fn too_large(grid: &Grid) -> Result<()> {
    if grid.dims.iter().any(|&d| d > i16::MAX as usize) {
        return Err(Error::UnsupportedFormat(format!("dims {:?} exceed the NIfTI-1 limit", grid.dims)));
    }
    Ok(())
}

pub fn write_volume<T: Real>(path: impl AsRef<Path>, v: &Volume<T>) -> Result<()> {
    too_large(v.grid())?;
    let mut b = header_bytes(v.grid(), 1);
    b.extend(v.data().iter().flat_map(|&x| (to_f64(x) as f32).to_le_bytes()));
    fs::write(path, b)?;
    Ok(())
}

pub fn read_volume<T: Real>(path: impl AsRef<Path>) -> Result<Volume<T>> {
    let path = path.as_ref();
    let (h, values) = read_values(path)?;
    if h.components != 1 {
        return Err(unsupported(path, &format!("expected a scalar image, found {} components", h.components)));
    }
    Volume::new(Grid::new(h.dims, h.spacing)?, values.into_iter().map(lit).collect())
}

/// Components are stored as three consecutive x-fastest volumes.
pub fn write_field<T: Real>(path: impl AsRef<Path>, u: &DisplacementField<T>) -> Result<()> {
    too_large(u.grid())?;
    let mut b = header_bytes(u.grid(), 3);
    for c in 0..3 {
        b.extend(u.data().iter().flat_map(|v| (to_f64(v[c]) as f32).to_le_bytes()));
    }
    fs::write(path, b)?;
    Ok(())
}

pub fn read_field<T: Real>(path: impl AsRef<Path>) -> Result<DisplacementField<T>> {
    let path = path.as_ref();
    let (h, values) = read_values(path)?;
    if h.components != 3 {
        return Err(unsupported(path, &format!("expected 3 components, found {}", h.components)));
    }
    let n = h.dims.iter().product::<usize>();
    let comps: [Vec<T>; 3] = std::array::from_fn(|c| values[c * n..(c + 1) * n].iter().map(|&v| lit(v)).collect());
    DisplacementField::from_components(Grid::new(h.dims, h.spacing)?, comps)
}
