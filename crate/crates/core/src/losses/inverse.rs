//! Inverse-consistency loss on voxels with valid correspondence.

use rayon::prelude::*;

use crate::error::Result;
use crate::fbc::FbError;
use crate::field::{voxel_point, DisplacementField};
use crate::interp::Cell;
use crate::scalar::{count, lit, ordered_sum, Real};
use crate::volume::CorrespondenceMask;

/// Below this residual norm the (non-smooth) gradient is taken as zero.
const RESIDUAL_FLOOR: f64 = 1e-12;

/// Loss value with gradients for `u_bf` and `u_fb`.
pub type ValueAndGrads<T> = (T, Vec<[T; 3]>, Vec<[T; 3]>);

/// `1/N Σ_x δ_bf(x)(1 − m_bf(x)) + δ_fb(x)(1 − m_fb(x))` and its gradient
/// with respect to both fields. The masks are treated as constants.
pub fn inverse_consistency_loss<T: Real>(
    delta_bf: &FbError<T>,
    delta_fb: &FbError<T>,
    m_bf: &CorrespondenceMask,
    m_fb: &CorrespondenceMask,
    u_bf: &DisplacementField<T>,
    u_fb: &DisplacementField<T>,
) -> Result<ValueAndGrads<T>> {
    let g = *u_bf.grid();
    for other in [delta_bf.grid(), delta_fb.grid(), m_bf.grid(), m_fb.grid(), u_fb.grid()] {
        g.same_shape(other)?;
    }
    let n = g.len();
    let inv_n = T::one() / count::<T>(n);
    let masked = |d: &FbError<T>, m: &CorrespondenceMask| -> T {
        ordered_sum(d.data().iter().zip(m.data()).map(|(&v, &absent)| if absent { T::zero() } else { v }))
    };
    let value = (masked(delta_bf, m_bf) + masked(delta_fb, m_fb)) * inv_n;

    let mut grad_bf = vec![[T::zero(); 3]; n];
    let mut grad_fb = vec![[T::zero(); 3]; n];
    accumulate(u_bf, u_fb, m_bf, inv_n, &mut grad_bf, &mut grad_fb);
    accumulate(u_fb, u_bf, m_fb, inv_n, &mut grad_fb, &mut grad_bf);
    Ok((value, grad_bf, grad_fb))
}

/// Adds `scale · ∂/∂u Σ_x (1−m(x)) ‖u_fwd(x) + u_bwd(x + u_fwd(x))‖`.
fn accumulate<T: Real>(
    u_fwd: &DisplacementField<T>,
    u_bwd: &DisplacementField<T>,
    mask: &CorrespondenceMask,
    scale: T,
    grad_fwd: &mut [[T; 3]],
    grad_bwd: &mut [[T; 3]],
) {
    let g = *u_fwd.grid();
    let fwd = u_fwd.data();
    let bwd = u_bwd.data();
    let absent = mask.data();
    let floor = lit::<T>(RESIDUAL_FLOOR);

    // Unit residual direction (scaled) per voxel; zero where masked or δ≈0.
    let dirs: Vec<[T; 3]> = (0..g.len())
        .into_par_iter()
        .zip(grad_fwd.par_iter_mut())
        .map(|(i, gf)| {
            if absent[i] {
                return [T::zero(); 3];
            }
            let cell = Cell::locate(g.dims, voxel_point(g.coords(i), fwd[i]));
            let (ub, jac) = cell.sample_vec_with_jacobian(bwd);
            let r = [fwd[i][0] + ub[0], fwd[i][1] + ub[1], fwd[i][2] + ub[2]];
            let delta = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
            if delta <= floor {
                return [T::zero(); 3];
            }
            let s = scale / delta;
            let dir = [r[0] * s, r[1] * s, r[2] * s];
            for a in 0..3 {
                gf[a] += dir[a] + dir[0] * jac[0][a] + dir[1] * jac[1][a] + dir[2] * jac[2][a];
            }
            dir
        })
        .collect();

    // Scatter into the sampled field through the trilinear weights.
    for (i, dir) in dirs.iter().enumerate() {
        if dir[0] == T::zero() && dir[1] == T::zero() && dir[2] == T::zero() {
            continue;
        }
        let cell = Cell::locate(g.dims, voxel_point(g.coords(i), fwd[i]));
        for (j, w) in cell.corners() {
            grad_bwd[j][0] += w * dir[0];
            grad_bwd[j][1] += w * dir[1];
            grad_bwd[j][2] += w * dir[2];
        }
    }
}
