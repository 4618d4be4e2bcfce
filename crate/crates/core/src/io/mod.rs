//! Volume, field and mask persistence. The format follows the file
//! extension: `.nii` for NIfTI-1, `.raw` for the raw stream with a JSON
//! sidecar.

pub mod nifti;
pub mod raw;

use std::path::Path;

use crate::error::{Error, Result};
use crate::field::DisplacementField;
use crate::scalar::Real;
use crate::volume::{Mask, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Nifti,
    Raw,
}

impl Format {
    pub fn from_path(path: &Path) -> Result<Self> {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_ascii_lowercase();
        if name.ends_with(".nii") {
            Ok(Format::Nifti)
        } else if name.ends_with(".raw") {
            Ok(Format::Raw)
        } else {
            Err(Error::UnsupportedFormat(format!("{}: expected a .nii or .raw extension", path.display())))
        }
    }
}

pub fn load_volume<T: Real>(path: impl AsRef<Path>) -> Result<Volume<T>> {
    let path = path.as_ref();
    match Format::from_path(path)? {
        Format::Nifti => nifti::read_volume(path),
        Format::Raw => raw::read_volume(path),
    }
}

pub fn save_volume<T: Real>(path: impl AsRef<Path>, v: &Volume<T>) -> Result<()> {
    let path = path.as_ref();
    match Format::from_path(path)? {
        Format::Nifti => nifti::write_volume(path, v),
        Format::Raw => raw::write_volume(path, v),
    }
}

pub fn load_field<T: Real>(path: impl AsRef<Path>) -> Result<DisplacementField<T>> {
    let path = path.as_ref();
    match Format::from_path(path)? {
        Format::Nifti => nifti::read_field(path),
        Format::Raw => raw::read_field(path),
    }
}

pub fn save_field<T: Real>(path: impl AsRef<Path>, u: &DisplacementField<T>) -> Result<()> {
    let path = path.as_ref();
    match Format::from_path(path)? {
        Format::Nifti => nifti::write_field(path, u),
        Format::Raw => raw::write_field(path, u),
    }
}

/// Masks are stored as 0/1 float volumes.
pub fn save_mask(path: impl AsRef<Path>, m: &Mask) -> Result<()> {
    save_volume(path, &m.to_volume::<f32>())
}

/// Voxels at or above 0.5 are set.
pub fn load_mask(path: impl AsRef<Path>) -> Result<Mask> {
    Ok(Mask::from_volume(&load_volume::<f32>(path)?))
}
