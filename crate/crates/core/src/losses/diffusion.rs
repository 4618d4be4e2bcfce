//! Diffusion regulariser: mean squared forward difference of the field.

use rayon::prelude::*;

use crate::field::DisplacementField;
use crate::scalar::{count, lit, ordered_sum, Real};

/// `E = 1/(3N) Σ_x Σ_c Σ_a (u_c(x+e_a) − u_c(x))²`, with the far-border
/// differences omitted, and `∂E/∂u`.
pub fn diffusion_energy<T: Real>(u: &DisplacementField<T>) -> (T, Vec<[T; 3]>) {
    let g = *u.grid();
    let d = u.data();
    let strides = [1, g.dims[0], g.dims[0] * g.dims[1]];
    let norm = T::one() / count::<T>(3 * g.len());
    let two_norm = lit::<T>(2.0) * norm;

    let per_voxel: Vec<T> = (0..g.len())
        .into_par_iter()
        .map(|i| {
            let c = g.coords(i);
            let mut acc = T::zero();
            for a in 0..3 {
                if c[a] + 1 < g.dims[a] {
                    let nb = d[i + strides[a]];
                    for k in 0..3 {
                        let diff = nb[k] - d[i][k];
                        acc += diff * diff;
                    }
                }
            }
            acc
        })
        .collect();
    let energy = ordered_sum(per_voxel) * norm;

    let grad = (0..g.len())
        .into_par_iter()
        .map(|i| {
            let c = g.coords(i);
            let mut out = [T::zero(); 3];
            for a in 0..3 {
                if c[a] > 0 {
                    let prev = d[i - strides[a]];
                    for k in 0..3 {
                        out[k] += d[i][k] - prev[k];
                    }
                }
                if c[a] + 1 < g.dims[a] {
                    let next = d[i + strides[a]];
                    for k in 0..3 {
                        out[k] -= next[k] - d[i][k];
                    }
                }
            }
            out.map(|v| v * two_norm)
        })
        .collect();
    (energy, grad)
}
