//! Little-endian `f32` voxel stream plus a JSON sidecar describing the grid.
//!
//! The sidecar lives next to the data file with a `.json` extension. Voxels
//! are stored x-fastest; fields interleave their three components per voxel.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::DisplacementField;
use crate::scalar::{lit, to_f64, Real};
use crate::volume::{Grid, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub order: String,
    #[serde(default = "one")]
    pub components: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub units: Option<String>,
}

fn one() -> usize {
    1
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn write_stream(path: &Path, values: impl Iterator<Item = f64>, sidecar: &Sidecar) -> Result<()> {
    let bytes: Vec<u8> = values.flat_map(|v| (v as f32).to_le_bytes()).collect();
    fs::write(path, bytes)?;
    fs::write(sidecar_path(path), serde_json::to_string_pretty(sidecar)?)?;
    Ok(())
}

fn read_stream(path: &Path) -> Result<(Sidecar, Vec<f32>)> {
    let sidecar: Sidecar = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
    if sidecar.order != "xyz" {
        return Err(Error::UnsupportedFormat(format!("voxel order {:?}, expected \"xyz\"", sidecar.order)));
    }
    let bytes = fs::read(path)?;
    let expected = sidecar.dims.iter().product::<usize>() * sidecar.components * 4;
    if bytes.len() != expected {
        return Err(Error::UnsupportedFormat(format!(
            "{}: {} bytes, sidecar implies {expected}",
            path.display(),
            bytes.len()
        )));
    }
    let values = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok((sidecar, values))
}

pub fn write_volume<T: Real>(path: impl AsRef<Path>, v: &Volume<T>) -> Result<()> {
    let sidecar = Sidecar { dims: v.dims(), spacing: v.spacing(), order: "xyz".into(), components: 1, units: None };
    write_stream(path.as_ref(), v.data().iter().map(|&x| to_f64(x)), &sidecar)
}

pub fn read_volume<T: Real>(path: impl AsRef<Path>) -> Result<Volume<T>> {
    let (sc, values) = read_stream(path.as_ref())?;
    if sc.components != 1 {
        return Err(Error::UnsupportedFormat(format!("expected a scalar volume, found {} components", sc.components)));
    }
    Volume::new(Grid::new(sc.dims, sc.spacing)?, values.into_iter().map(|x| lit(x as f64)).collect())
}

pub fn write_field<T: Real>(path: impl AsRef<Path>, u: &DisplacementField<T>) -> Result<()> {
    let g = u.grid();
    let sidecar =
        Sidecar { dims: g.dims, spacing: g.spacing, order: "xyz".into(), components: 3, units: Some("voxel".into()) };
    write_stream(path.as_ref(), u.data().iter().flat_map(|v| v.map(to_f64)), &sidecar)
}

pub fn read_field<T: Real>(path: impl AsRef<Path>) -> Result<DisplacementField<T>> {
    let (sc, values) = read_stream(path.as_ref())?;
    if sc.components != 3 {
        return Err(Error::UnsupportedFormat(format!("expected 3 components, found {}", sc.components)));
    }
    if let Some(u) = sc.units.as_deref().filter(|&u| u != "voxel") {
        return Err(Error::UnsupportedFormat(format!("displacement units {u:?}, expected \"voxel\"")));
    }
    let data = values.chunks_exact(3).map(|c| [0, 1, 2].map(|k| lit(c[k] as f64))).collect();
    DisplacementField::new(Grid::new(sc.dims, sc.spacing)?, data)
}
