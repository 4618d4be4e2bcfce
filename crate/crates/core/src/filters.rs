//! Separable neighbourhood filters over x-fastest 3D arrays.

use rayon::prelude::*;

use crate::scalar::{lit, Real};

/// Sum over the in-bounds part of the `(2r+1)^3` cube centred on each voxel.
///
/// Out-of-bounds neighbours contribute nothing, so this equals a convolution
/// with a box kernel under zero padding.
pub fn box_sum<T: Real>(data: &[T], dims: [usize; 3], r: usize) -> Vec<T> {
    debug_assert_eq!(data.len(), dims[0] * dims[1] * dims[2]);
    if r == 0 {
        return data.to_vec();
    }
    let a = sum_pass(data, dims, 0, r);
    let b = sum_pass(&a, dims, 1, r);
    sum_pass(&b, dims, 2, r)
}

/// Number of in-bounds voxels of the box around each voxel, per axis.
pub fn box_counts(n: usize, r: usize) -> Vec<usize> {
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(r);
            let hi = (i + r).min(n - 1);
            hi - lo + 1
        })
        .collect()
}

fn sum_pass<T: Real>(src: &[T], dims: [usize; 3], axis: usize, r: usize) -> Vec<T> {
    let [nx, ny, _] = dims;
    let stride = [1, nx, nx * ny][axis];
    let n = dims[axis];
    let mut out = vec![T::zero(); src.len()];
    out.par_chunks_mut(nx * ny).enumerate().for_each(|(z, slab)| {
        for y in 0..ny {
            for x in 0..nx {
                let pos = [x, y, z][axis];
                let lo = pos.saturating_sub(r);
                let hi = (pos + r).min(n - 1);
                let center = x + nx * (y + ny * z);
                let start = center - (pos - lo) * stride;
                let mut acc = T::zero();
                for k in 0..=(hi - lo) {
                    acc += src[start + k * stride];
                }
                slab[x + nx * y] = acc;
            }
        }
    });
    out
}

/// Normalised 1D Gaussian taps covering `±ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let half = (3.0 * sigma).ceil().max(1.0) as usize;
    let mut k: Vec<f64> = (0..=2 * half)
        .map(|i| {
            let d = i as f64 - half as f64;
            (-0.5 * d * d / (sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian smoothing with clamp-to-edge boundaries.
pub fn gaussian_smooth<T: Real>(data: &[T], dims: [usize; 3], sigma: f64) -> Vec<T> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let taps: Vec<T> = gaussian_kernel(sigma).into_iter().map(lit).collect();
    let a = conv_pass(data, dims, 0, &taps);
    let b = conv_pass(&a, dims, 1, &taps);
    conv_pass(&b, dims, 2, &taps)
}

fn conv_pass<T: Real>(src: &[T], dims: [usize; 3], axis: usize, taps: &[T]) -> Vec<T> {
    let [nx, ny, _] = dims;
    let stride = [1, nx, nx * ny][axis];
    let n = dims[axis] as isize;
    let half = (taps.len() / 2) as isize;
    let mut out = vec![T::zero(); src.len()];
    out.par_chunks_mut(nx * ny).enumerate().for_each(|(z, slab)| {
        for y in 0..ny {
            for x in 0..nx {
                let pos = [x, y, z][axis] as isize;
                let center = x + nx * (y + ny * z);
                let line_start = center - pos as usize * stride;
                let mut acc = T::zero();
                for (k, &w) in taps.iter().enumerate() {
                    let q = (pos + k as isize - half).clamp(0, n - 1) as usize;
                    acc += w * src[line_start + q * stride];
                }
                slab[x + nx * y] = acc;
            }
        }
    });
    out
}
