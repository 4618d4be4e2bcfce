//! Displacement fields and the geometric operators built on them.
//!
//! Displacements are stored in voxel units of the grid they live on. The
//! deformation is `φ(x) = x + u(x)`, so warping a moving image by `u`
//! samples it at `x + u(x)` for every target voxel `x`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::interp::Cell;
use crate::scalar::{lit, Real};
use crate::volume::{resample_channel, Grid, Mask, Volume};

#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField<T> {
    grid: Grid,
    data: Vec<[T; 3]>,
}

impl<T: Real> DisplacementField<T> {
    pub fn new(grid: Grid, data: Vec<[T; 3]>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::invalid(format!("field length {} does not match dims {:?}", data.len(), grid.dims)));
        }
        if let Some(i) = data.iter().position(|v| v.iter().any(|c| !c.is_finite())) {
            return Err(Error::invalid(format!("non-finite displacement at voxel {i}")));
        }
        Ok(Self { grid, data })
    }

    pub(crate) fn from_parts_unchecked(grid: Grid, data: Vec<[T; 3]>) -> Self {
        debug_assert_eq!(grid.len(), data.len());
        Self { grid, data }
    }

    pub fn zeros(grid: Grid) -> Self {
        Self { grid, data: vec![[T::zero(); 3]; grid.len()] }
    }

    pub fn constant(grid: Grid, v: [T; 3]) -> Self {
        Self { grid, data: vec![v; grid.len()] }
    }

    pub fn from_fn(grid: Grid, f: impl Fn(usize, usize, usize) -> [T; 3]) -> Result<Self> {
        let data = (0..grid.len())
            .map(|i| {
                let [x, y, z] = grid.coords(i);
                f(x, y, z)
            })
            .collect();
        Self::new(grid, data)
    }

    /// Builds a field from three x-fastest component arrays.
    pub fn from_components(grid: Grid, comps: [Vec<T>; 3]) -> Result<Self> {
        if comps.iter().any(|c| c.len() != grid.len()) {
            return Err(Error::invalid("component length does not match grid"));
        }
        let data = (0..grid.len()).map(|i| [comps[0][i], comps[1][i], comps[2][i]]).collect();
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
    pub fn data(&self) -> &[[T; 3]] {
        &self.data
    }

    #[inline]
    pub(crate) fn data_mut(&mut self) -> &mut [[T; 3]] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> [T; 3] {
        self.data[self.grid.index(x, y, z)]
    }

    pub fn component(&self, c: usize) -> Vec<T> {
        self.data.iter().map(|v| v[c]).collect()
    }

    pub fn norms(&self) -> Vec<T> {
        self.data.iter().map(|v| norm3(*v)).collect()
    }

    pub fn max_norm(&self) -> T {
        self.data.iter().map(|v| norm3(*v)).fold(T::zero(), T::max)
    }

    pub fn mean_norm(&self) -> T {
        let s = crate::scalar::ordered_sum(self.data.iter().map(|v| norm3(*v)));
        s / crate::scalar::count(self.data.len())
    }

    /// Interpolated displacement at a continuous voxel coordinate.
    pub fn sample_at(&self, p: [T; 3]) -> [T; 3] {
        Cell::locate(self.grid.dims, p).sample_vec(&self.data)
    }

    pub fn scaled(&self, s: T) -> Self {
        Self { grid: self.grid, data: self.data.iter().map(|v| [v[0] * s, v[1] * s, v[2] * s]).collect() }
    }

    pub fn cast<U: Real>(&self) -> DisplacementField<U> {
        let c = |v: T| lit::<U>(v.to_f64().unwrap_or(0.0));
        DisplacementField { grid: self.grid, data: self.data.iter().map(|v| [c(v[0]), c(v[1]), c(v[2])]).collect() }
    }

    /// `x + u(x)` for every voxel, in voxel units.
    pub fn deformed_points(&self) -> Vec<[T; 3]> {
        let g = self.grid;
        self.data
            .iter()
            .enumerate()
            .map(|(i, u)| {
                let [x, y, z] = g.coords(i);
                [lit::<T>(x as f64) + u[0], lit::<T>(y as f64) + u[1], lit::<T>(z as f64) + u[2]]
            })
            .collect()
    }
}

#[inline(always)]
pub(crate) fn norm3<T: Real>(v: [T; 3]) -> T {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

#[inline(always)]
pub(crate) fn voxel_point<T: Real>(coords: [usize; 3], u: [T; 3]) -> [T; 3] {
    [lit::<T>(coords[0] as f64) + u[0], lit::<T>(coords[1] as f64) + u[1], lit::<T>(coords[2] as f64) + u[2]]
}

/// `out(x) = vol(x + u(x))` with trilinear sampling.
pub fn warp<T: Real>(vol: &Volume<T>, u: &DisplacementField<T>) -> Result<Volume<T>> {
    vol.grid().same_shape(u.grid())?;
    let g = *vol.grid();
    let src = vol.data();
    let mut out = vec![T::zero(); g.len()];
    out.par_chunks_mut(g.dims[0] * g.dims[1]).enumerate().for_each(|(z, slab)| {
        let off = z * slab.len();
        for (k, o) in slab.iter_mut().enumerate() {
            let i = off + k;
            let p = voxel_point(g.coords(i), u.data[i]);
            *o = Cell::locate(g.dims, p).sample(src);
        }
    });
    Ok(Volume::from_parts_unchecked(g, out))
}

/// Warped intensities together with the derivative of the moving image's
/// interpolant at each deformed point.
pub(crate) fn warp_with_gradient<T: Real>(vol: &Volume<T>, u: &DisplacementField<T>) -> (Vec<T>, Vec<[T; 3]>) {
    let g = *vol.grid();
    let src = vol.data();
    let pairs: Vec<(T, [T; 3])> = (0..g.len())
        .into_par_iter()
        .map(|i| {
            let p = voxel_point(g.coords(i), u.data[i]);
            Cell::locate(g.dims, p).sample_with_gradient(src)
        })
        .collect();
    pairs.into_iter().unzip()
}

/// Warps a mask by sampling its 0/1 indicator and keeping values ≥ 0.5.
pub fn warp_mask<T: Real>(mask: &Mask, u: &DisplacementField<T>) -> Result<Mask> {
    let w = warp(&mask.to_volume::<T>(), u)?;
    Ok(Mask::from_volume(&w))
}

/// Samples every component of `u` at one continuous point per voxel.
pub fn sample_field<T: Real>(u: &DisplacementField<T>, points: &[[T; 3]]) -> Result<DisplacementField<T>> {
    if points.len() != u.grid.len() {
        return Err(Error::invalid(format!("expected {} sample points, got {}", u.grid.len(), points.len())));
    }
    if points.iter().any(|p| p.iter().any(|c| !c.is_finite())) {
        return Err(Error::invalid("sample points must be finite"));
    }
    let dims = u.grid.dims;
    let data = points.par_iter().map(|&p| Cell::locate(dims, p).sample_vec(&u.data)).collect();
    Ok(DisplacementField { grid: u.grid, data })
}

/// `det(I + ∇u)` per voxel, central differences inside and one-sided
/// differences on the border, voxel units.
pub fn jacobian_det<T: Real>(u: &DisplacementField<T>) -> Volume<T> {
    let g = u.grid;
    let [nx, ny, nz] = g.dims;
    let strides = [1, nx, nx * ny];
    let n = [nx, ny, nz];
    let half = lit::<T>(0.5);
    let data: Vec<T> = (0..g.len())
        .into_par_iter()
        .map(|i| {
            let c = g.coords(i);
            // jac[comp][axis]
            let mut jac = [[T::zero(); 3]; 3];
            for a in 0..3 {
                let (lo, hi, scale) = if c[a] == 0 {
                    (i, i + strides[a], T::one())
                } else if c[a] == n[a] - 1 {
                    (i - strides[a], i, T::one())
                } else {
                    (i - strides[a], i + strides[a], half)
                };
                for (comp, row) in jac.iter_mut().enumerate() {
                    row[a] = (u.data[hi][comp] - u.data[lo][comp]) * scale;
                }
            }
            for (k, row) in jac.iter_mut().enumerate() {
                row[k] += T::one();
            }
            det3(&jac)
        })
        .collect();
    Volume::from_parts_unchecked(g, data)
}

#[inline]
pub(crate) fn det3<T: Real>(m: &[[T; 3]; 3]) -> T {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Trilinear resampling of every component onto `new_dims`, with vectors
/// rescaled by the per-axis dimension ratio so they stay in voxel units.
pub fn resample_field<T: Real>(u: &DisplacementField<T>, new_dims: [usize; 3]) -> Result<DisplacementField<T>> {
    let grid = u.grid.resized(new_dims)?;
    if new_dims == u.grid.dims {
        return Ok(DisplacementField { grid, data: u.data.clone() });
    }
    let old = u.grid.dims;
    let comps: [Vec<T>; 3] = std::array::from_fn(|c| {
        let ratio = lit::<T>(new_dims[c] as f64 / old[c] as f64);
        resample_channel(&u.component(c), old, new_dims).into_iter().map(|v| v * ratio).collect()
    });
    let data = (0..grid.len()).map(|i| [comps[0][i], comps[1][i], comps[2][i]]).collect();
    Ok(DisplacementField { grid, data })
}

/// Pyramid upsampling: [`resample_field`] restricted to non-shrinking dims.
pub fn upsample_field<T: Real>(u: &DisplacementField<T>, new_dims: [usize; 3]) -> Result<DisplacementField<T>> {
    if (0..3).any(|a| new_dims[a] < u.grid.dims[a]) {
        return Err(Error::invalid(format!("upsample target {new_dims:?} is smaller than {:?}", u.grid.dims)));
    }
    resample_field(u, new_dims)
}
