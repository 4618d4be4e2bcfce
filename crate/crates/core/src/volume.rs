//! Scalar volumes, the grid they live on, and boolean voxel masks.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interp::Cell;
use crate::scalar::{lit, Real};

/// Regular voxel grid: counts per axis and physical spacing in mm.
///
/// Voxel `(i, j, k)` sits at physical position `(i·sx, j·sy, k·sz)`; data is
/// stored x fastest, then y, then z.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d < 2) {
            return Err(Error::invalid(format!("grid dims must be >= 2 per axis, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::invalid(format!("spacing must be finite and > 0, got {spacing:?}")));
        }
        Ok(Self { dims, spacing })
    }

    /// Unit-spacing grid.
    pub fn unit(dims: [usize; 3]) -> Result<Self> {
        Self::new(dims, [1.0; 3])
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    /// Half of the mean voxel count per axis.
    pub fn mean_half_extent(&self) -> f64 {
        (self.dims[0] + self.dims[1] + self.dims[2]) as f64 / 6.0
    }

    pub fn same_shape(&self, other: &Grid) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::DimensionMismatch { expected: self.dims, found: other.dims });
        }
        Ok(())
    }

    pub fn voxel_to_mm(&self, v: [f64; 3]) -> [f64; 3] {
        [v[0] * self.spacing[0], v[1] * self.spacing[1], v[2] * self.spacing[2]]
    }

    pub fn mm_to_voxel(&self, p: [f64; 3]) -> [f64; 3] {
        [p[0] / self.spacing[0], p[1] / self.spacing[1], p[2] / self.spacing[2]]
    }

    /// True when a continuous voxel coordinate lies in `[0, n-1]` on every axis.
    pub fn contains_voxel(&self, v: [f64; 3]) -> bool {
        (0..3).all(|a| v[a].is_finite() && v[a] >= 0.0 && v[a] <= (self.dims[a] - 1) as f64)
    }

    /// Grid with new voxel counts covering the same physical extent.
    pub fn resized(&self, new_dims: [usize; 3]) -> Result<Grid> {
        let spacing = std::array::from_fn(|a| self.spacing[a] * self.dims[a] as f64 / new_dims[a] as f64);
        Grid::new(new_dims, spacing)
    }

    /// Continuous coordinate in this grid of voxel `i` along `axis` of a grid
    /// resized to `new_n` voxels (voxel-centre alignment).
    #[inline]
    pub(crate) fn resample_coord(old_n: usize, new_n: usize, i: usize) -> f64 {
        if old_n == new_n {
            i as f64
        } else {
            (i as f64 + 0.5) * old_n as f64 / new_n as f64 - 0.5
        }
    }
}

/// Scalar 3D image.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    grid: Grid,
    data: Vec<T>,
}

impl<T: Real> Volume<T> {
    pub fn new(grid: Grid, data: Vec<T>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::invalid(format!("data length {} does not match dims {:?}", data.len(), grid.dims)));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite intensity at voxel {i}")));
        }
        Ok(Self { grid, data })
    }

    pub(crate) fn from_parts_unchecked(grid: Grid, data: Vec<T>) -> Self {
        debug_assert_eq!(grid.len(), data.len());
        Self { grid, data }
    }

    pub fn constant(grid: Grid, value: T) -> Self {
        Self { grid, data: vec![value; grid.len()] }
    }

    pub fn from_fn(grid: Grid, f: impl Fn(usize, usize, usize) -> T) -> Result<Self> {
        let data = (0..grid.len())
            .map(|i| {
                let [x, y, z] = grid.coords(i);
                f(x, y, z)
            })
            .collect();
        Self::new(grid, data)
    }

    #[inline]
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    #[inline]
    pub fn spacing(&self) -> [f64; 3] {
        self.grid.spacing
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.grid.index(x, y, z)]
    }

    pub fn min_max(&self) -> (T, T) {
        self.data.iter().fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Trilinear interpolation at a continuous voxel coordinate, clamping to
    /// the boundary outside `[0, n-1]`.
    pub fn trilinear_sample(&self, point: [T; 3]) -> Result<T> {
        if point.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("sample point must be finite"));
        }
        Ok(Cell::locate(self.grid.dims, point).sample(&self.data))
    }

    /// Voxels with intensity strictly above zero.
    pub fn foreground(&self) -> Mask {
        Mask { grid: self.grid, data: self.data.iter().map(|&v| v > T::zero()).collect() }
    }

    /// Trilinear resampling to `new_dims`, preserving the physical extent.
    pub fn resample(&self, new_dims: [usize; 3]) -> Result<Self> {
        let grid = self.grid.resized(new_dims)?;
        let data = resample_channel(&self.data, self.grid.dims, new_dims);
        Ok(Self { grid, data })
    }

    /// Min-max normalisation to `[0, 1]` using the range over the foreground
    /// (intensity > 0). Values outside that range are clipped.
    pub fn normalized_foreground(&self) -> Self {
        let (lo, hi) = self
            .data
            .iter()
            .filter(|v| **v > T::zero())
            .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if !(hi > lo) {
            let data = self.data.iter().map(|&v| if v > T::zero() { T::one() } else { T::zero() }).collect();
            return Self { grid: self.grid, data };
        }
        let span = hi - lo;
        let data = self
            .data
            .iter()
            .map(|&v| if v > T::zero() { ((v - lo) / span).max(T::zero()).min(T::one()) } else { T::zero() })
            .collect();
        Self { grid: self.grid, data }
    }

    /// Maps every voxel through `f`, keeping the grid.
    pub fn map(&self, f: impl Fn(T) -> T + Sync) -> Result<Self> {
        Self::new(self.grid, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn cast<U: Real>(&self) -> Volume<U> {
        Volume { grid: self.grid, data: self.data.iter().map(|v| lit(v.to_f64().unwrap_or(0.0))).collect() }
    }
}

/// Trilinear resampling of one x-fastest scalar channel.
pub(crate) fn resample_channel<T: Real>(src: &[T], old: [usize; 3], new: [usize; 3]) -> Vec<T> {
    let cx: Vec<T> = (0..new[0]).map(|i| lit(Grid::resample_coord(old[0], new[0], i))).collect();
    let cy: Vec<T> = (0..new[1]).map(|i| lit(Grid::resample_coord(old[1], new[1], i))).collect();
    let cz: Vec<T> = (0..new[2]).map(|i| lit(Grid::resample_coord(old[2], new[2], i))).collect();
    let mut out = vec![T::zero(); new[0] * new[1] * new[2]];
    out.par_chunks_mut(new[0] * new[1]).enumerate().for_each(|(z, slab)| {
        for y in 0..new[1] {
            for x in 0..new[0] {
                slab[x + new[0] * y] = Cell::locate(old, [cx[x], cy[y], cz[z]]).sample(src);
            }
        }
    });
    out
}

/// Boolean voxel mask on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    grid: Grid,
    data: Vec<bool>,
}

/// Voxels with positive intensity.
pub type ForegroundMask = Mask;

/// Voxels flagged as having no valid counterpart in the other image.
pub type CorrespondenceMask = Mask;

impl Mask {
    pub fn new(grid: Grid, data: Vec<bool>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::invalid("mask length does not match grid"));
        }
        Ok(Self { grid, data })
    }

    pub fn empty(grid: Grid) -> Self {
        Self { grid, data: vec![false; grid.len()] }
    }

    pub fn full(grid: Grid) -> Self {
        Self { grid, data: vec![true; grid.len()] }
    }

    pub fn from_fn(grid: Grid, f: impl Fn(usize, usize, usize) -> bool) -> Self {
        let data = (0..grid.len())
            .map(|i| {
                let [x, y, z] = grid.coords(i);
                f(x, y, z)
            })
            .collect();
        Self { grid, data }
    }

    #[inline]
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    #[inline]
    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[self.grid.index(x, y, z)]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.data.len() as f64
    }

    pub fn complement(&self) -> Mask {
        Mask { grid: self.grid, data: self.data.iter().map(|b| !b).collect() }
    }

    pub fn union(&self, other: &Mask) -> Result<Mask> {
        self.grid.same_shape(&other.grid)?;
        Ok(Mask { grid: self.grid, data: self.data.iter().zip(&other.data).map(|(a, b)| *a || *b).collect() })
    }

    pub fn intersection_count(&self, other: &Mask) -> Result<usize> {
        self.grid.same_shape(&other.grid)?;
        Ok(self.data.iter().zip(&other.data).filter(|(a, b)| **a && **b).count())
    }

    /// Sørensen–Dice overlap; two empty masks score 1.
    pub fn dice(&self, other: &Mask) -> Result<f64> {
        let inter = self.intersection_count(other)?;
        let total = self.count() + other.count();
        Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
    }

    /// 0/1 intensity volume.
    pub fn to_volume<T: Real>(&self) -> Volume<T> {
        Volume { grid: self.grid, data: self.data.iter().map(|&b| if b { T::one() } else { T::zero() }).collect() }
    }

    /// Voxels of `vol` at or above one half.
    pub fn from_volume<T: Real>(vol: &Volume<T>) -> Mask {
        let half = lit::<T>(0.5);
        Mask { grid: vol.grid, data: vol.data.iter().map(|&v| v >= half).collect() }
    }
}
