//! Windowed squared normalised cross-correlation with centre-voxel masking,
//! and the similarity term built from it.
//!
//! For a window `w(x)` of side `2r+1` (clipped at the volume border) the
//! local score is
//!
//! ```text
//! cc(x) = [Σ (T−T̄)(W−W̄)]² / (Σ (T−T̄)² · Σ (W−W̄)² + ε)
//! ```
//!
//! and the masked NCC is the mean of `cc` over centres marked valid. All
//! window sums come from separable box filters, so value and gradient cost
//! O(N) regardless of the radius.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{warp_with_gradient, DisplacementField};
use crate::filters::{box_counts, box_sum};
use crate::scalar::{count, lit, ordered_sum, Real};
use crate::volume::{CorrespondenceMask, Mask, Volume};

/// Stabiliser in the correlation denominator.
pub const NCC_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct NccResult<T> {
    pub value: T,
    /// `∂ value / ∂ warped(y)` for every voxel `y`.
    pub grad: Vec<T>,
    pub valid_count: usize,
    /// Set when no centre is valid; value and gradient are then zero.
    pub degenerate: bool,
}

struct WindowStats<T> {
    n: Vec<T>,
    st: Vec<T>,
    sw: Vec<T>,
    stt: Vec<T>,
    sww: Vec<T>,
    stw: Vec<T>,
}

fn window_stats<T: Real>(t: &[T], w: &[T], dims: [usize; 3], r: usize) -> WindowStats<T> {
    let prod = |f: &dyn Fn(T, T) -> T| -> Vec<T> { t.iter().zip(w).map(|(&a, &b)| f(a, b)).collect() };
    let [cx, cy, cz] = [box_counts(dims[0], r), box_counts(dims[1], r), box_counts(dims[2], r)];
    let n = (0..t.len())
        .map(|i| {
            let x = i % dims[0];
            let y = (i / dims[0]) % dims[1];
            let z = i / (dims[0] * dims[1]);
            count::<T>(cx[x] * cy[y] * cz[z])
        })
        .collect();
    WindowStats {
        n,
        st: box_sum(t, dims, r),
        sw: box_sum(w, dims, r),
        stt: box_sum(&prod(&|a, _| a * a), dims, r),
        sww: box_sum(&prod(&|_, b| b * b), dims, r),
        stw: box_sum(&prod(&|a, b| a * b), dims, r),
    }
}

#[derive(Clone, Copy)]
struct Local<T> {
    cc: T,
    tbar: T,
    wbar: T,
    /// `∂cc/∂W(y) = a·(T(y) − T̄) − b·(W(y) − W̄)`.
    a: T,
    b: T,
}

#[inline]
fn local<T: Real>(s: &WindowStats<T>, i: usize, eps: T) -> Local<T> {
    let n = s.n[i];
    let tbar = s.st[i] / n;
    let wbar = s.sw[i] / n;
    let cross = s.stw[i] - s.st[i] * wbar;
    let vt = (s.stt[i] - s.st[i] * tbar).max(T::zero());
    let vw = (s.sww[i] - s.sw[i] * wbar).max(T::zero());
    let d = vt * vw + eps;
    let two = lit::<T>(2.0);
    let cc = cross * cross / d;
    Local { cc, tbar, wbar, a: two * cross / d, b: two * cc * vt / d }
}

fn check_pair<T: Real>(target: &Volume<T>, warped: &Volume<T>, r: usize) -> Result<()> {
    target.grid().same_shape(warped.grid())?;
    if r == 0 {
        return Err(Error::invalid("NCC window radius must be >= 1"));
    }
    Ok(())
}

/// Local squared correlation `cc(x)` at every voxel.
pub fn local_cc<T: Real>(target: &Volume<T>, warped: &Volume<T>, r: usize) -> Result<Vec<T>> {
    check_pair(target, warped, r)?;
    let s = window_stats(target.data(), warped.data(), target.dims(), r);
    let eps = lit::<T>(NCC_EPS);
    Ok((0..s.n.len()).into_par_iter().map(|i| local(&s, i, eps).cc).collect())
}

/// Mean of `cc` over valid centres and its gradient with respect to the
/// warped intensities.
pub fn masked_ncc<T: Real>(target: &Volume<T>, warped: &Volume<T>, valid: &Mask, r: usize) -> Result<NccResult<T>> {
    check_pair(target, warped, r)?;
    target.grid().same_shape(valid.grid())?;
    let dims = target.dims();
    let n_vox = target.data().len();
    let valid_count = valid.count();
    if valid_count == 0 {
        return Ok(NccResult { value: T::zero(), grad: vec![T::zero(); n_vox], valid_count, degenerate: true });
    }
    let t = target.data();
    let w = warped.data();
    let s = window_stats(t, w, dims, r);
    let eps = lit::<T>(NCC_EPS);
    let vmask = valid.data();

    let locals: Vec<Local<T>> = (0..n_vox).into_par_iter().map(|i| local(&s, i, eps)).collect();
    let inv_v = T::one() / count::<T>(valid_count);
    let value = ordered_sum(locals.iter().zip(vmask).filter(|(_, &v)| v).map(|(l, _)| l.cc)) * inv_v;

    let pick = |f: &dyn Fn(&Local<T>) -> T| -> Vec<T> {
        locals.iter().zip(vmask).map(|(l, &v)| if v { f(l) } else { T::zero() }).collect()
    };
    let sa = box_sum(&pick(&|l| l.a), dims, r);
    let sat = box_sum(&pick(&|l| l.a * l.tbar), dims, r);
    let sb = box_sum(&pick(&|l| l.b), dims, r);
    let sbw = box_sum(&pick(&|l| l.b * l.wbar), dims, r);
    let grad = (0..n_vox).into_par_iter().map(|y| (t[y] * sa[y] - sat[y] - w[y] * sb[y] + sbw[y]) * inv_v).collect();
    Ok(NccResult { value, grad, valid_count, degenerate: false })
}

/// Value and field gradients of the symmetric masked similarity term.
#[derive(Clone, Debug)]
pub struct SimilarityTerms<T> {
    /// `−NCC_bf − NCC_fb`, in `[−2, 0]`.
    pub value: T,
    pub ncc_bf: T,
    pub ncc_fb: T,
    pub grad_bf: Vec<[T; 3]>,
    pub grad_fb: Vec<[T; 3]>,
    pub degenerate_bf: bool,
    pub degenerate_fb: bool,
}

/// `−NCC(F, B∘φ_bf, 1−m_bf) − NCC(B, F∘φ_fb, 1−m_fb)`.
pub fn similarity_loss<T: Real>(
    b: &Volume<T>,
    f: &Volume<T>,
    u_bf: &DisplacementField<T>,
    u_fb: &DisplacementField<T>,
    m_bf: &CorrespondenceMask,
    m_fb: &CorrespondenceMask,
    r: usize,
) -> Result<SimilarityTerms<T>> {
    similarity_loss_channels(std::slice::from_ref(b), std::slice::from_ref(f), u_bf, u_fb, m_bf, m_fb, r)
}

/// Multi-channel form: each direction's NCC is the mean over channels, all
/// channels sharing the same fields and masks.
pub fn similarity_loss_channels<T: Real>(
    b: &[Volume<T>],
    f: &[Volume<T>],
    u_bf: &DisplacementField<T>,
    u_fb: &DisplacementField<T>,
    m_bf: &CorrespondenceMask,
    m_fb: &CorrespondenceMask,
    r: usize,
) -> Result<SimilarityTerms<T>> {
    if b.is_empty() || b.len() != f.len() {
        return Err(Error::invalid(format!("channel count mismatch: baseline {}, follow-up {}", b.len(), f.len())));
    }
    let (ncc_bf, grad_bf, degenerate_bf) = direction(f, b, u_bf, &m_bf.complement(), r)?;
    let (ncc_fb, grad_fb, degenerate_fb) = direction(b, f, u_fb, &m_fb.complement(), r)?;
    Ok(SimilarityTerms { value: -ncc_bf - ncc_fb, ncc_bf, ncc_fb, grad_bf, grad_fb, degenerate_bf, degenerate_fb })
}

/// Mean NCC of `targets` against `moving ∘ (Id + u)` and the gradient of
/// `−NCC` with respect to `u`.
fn direction<T: Real>(
    targets: &[Volume<T>],
    moving: &[Volume<T>],
    u: &DisplacementField<T>,
    valid: &Mask,
    r: usize,
) -> Result<(T, Vec<[T; 3]>, bool)> {
    let n = u.grid().len();
    let mut grad = vec![[T::zero(); 3]; n];
    let mut total = T::zero();
    let mut degenerate = false;
    for (tgt, mov) in targets.iter().zip(moving) {
        tgt.grid().same_shape(u.grid())?;
        mov.grid().same_shape(u.grid())?;
        let (warped, dmov) = warp_with_gradient(mov, u);
        let warped = Volume::from_parts_unchecked(*mov.grid(), warped);
        let res = masked_ncc(tgt, &warped, valid, r)?;
        degenerate |= res.degenerate;
        total += res.value;
        grad.par_iter_mut().zip(res.grad.par_iter().zip(dmov.par_iter())).for_each(|(g, (&s, d))| {
            g[0] -= s * d[0];
            g[1] -= s * d[1];
            g[2] -= s * d[2];
        });
    }
    let inv_c = T::one() / count::<T>(targets.len());
    grad.par_iter_mut().for_each(|g| {
        g[0] *= inv_c;
        g[1] *= inv_c;
        g[2] *= inv_c;
    });
    Ok((total * inv_c, grad, degenerate))
}
