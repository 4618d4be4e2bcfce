//! Forward-backward consistency: residual of composing the two displacement
//! fields, an adaptive threshold on it, and the smoothed binary mask of
//! voxels that have no valid counterpart.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{norm3, voxel_point, DisplacementField};
use crate::filters::box_sum;
use crate::interp::Cell;
use crate::scalar::{count, lit, ordered_sum, Real};
use crate::volume::{CorrespondenceMask, ForegroundMask, Grid, Mask, Volume};

/// Tolerance added to the mean forward-backward error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alpha {
    /// Fraction of the mean half-extent of the grid, in voxels. Tracks the
    /// value a normalised `[-1, 1]` coordinate system would use.
    GridRelative(f64),
    /// Absolute tolerance in voxels, independent of resolution.
    Voxels(f64),
}

impl Alpha {
    pub fn resolve(&self, grid: &Grid) -> f64 {
        match *self {
            Alpha::GridRelative(a) => a * grid.mean_half_extent(),
            Alpha::Voxels(a) => a,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FbcParams {
    pub alpha: Alpha,
    /// Half-width of the averaging filter; the window is `(2p+1)^3`.
    pub p: usize,
}

impl Default for FbcParams {
    fn default() -> Self {
        Self { alpha: Alpha::GridRelative(0.015), p: 4 }
    }
}

impl FbcParams {
    pub fn validate(&self) -> Result<()> {
        let a = match self.alpha {
            Alpha::GridRelative(a) | Alpha::Voxels(a) => a,
        };
        if !(a.is_finite() && a > 0.0) {
            return Err(Error::Config(format!("alpha must be > 0, got {a}")));
        }
        Ok(())
    }
}

/// Per-voxel forward-backward error, non-negative, voxel units.
#[derive(Clone, Debug, PartialEq)]
pub struct FbError<T>(Volume<T>);

impl<T: Real> FbError<T> {
    pub fn volume(&self) -> &Volume<T> {
        &self.0
    }

    pub fn into_volume(self) -> Volume<T> {
        self.0
    }

    pub fn data(&self) -> &[T] {
        self.0.data()
    }

    pub fn grid(&self) -> &Grid {
        self.0.grid()
    }

    /// Wraps externally computed errors; values must be finite and ≥ 0.
    pub fn from_volume(v: Volume<T>) -> Result<Self> {
        if v.data().iter().any(|&d| d < T::zero()) {
            return Err(Error::invalid("forward-backward error must be non-negative"));
        }
        Ok(Self(v))
    }
}

/// `δ(x) = ‖u_fwd(x) + u_bwd(x + u_fwd(x))‖₂`, with `u_bwd` sampled trilinearly.
pub fn fb_error<T: Real>(u_fwd: &DisplacementField<T>, u_bwd: &DisplacementField<T>) -> Result<FbError<T>> {
    u_fwd.grid().same_shape(u_bwd.grid())?;
    let g = *u_fwd.grid();
    let fwd = u_fwd.data();
    let bwd = u_bwd.data();
    let delta: Vec<T> = (0..g.len())
        .into_par_iter()
        .map(|i| {
            let uf = fwd[i];
            let ub = Cell::locate(g.dims, voxel_point(g.coords(i), uf)).sample_vec(bwd);
            norm3([uf[0] + ub[0], uf[1] + ub[1], uf[2] + ub[2]])
        })
        .collect();
    Ok(FbError(Volume::from_parts_unchecked(g, delta)))
}

/// `τ = mean of δ over the foreground + α`.
pub fn fb_threshold<T: Real>(delta: &FbError<T>, fg: &ForegroundMask, params: &FbcParams) -> Result<T> {
    delta.grid().same_shape(fg.grid())?;
    let n_f = fg.count();
    if n_f == 0 {
        return Err(Error::DegenerateForeground);
    }
    let sum = ordered_sum(delta.data().iter().zip(fg.data()).filter(|(_, &f)| f).map(|(&d, _)| d));
    Ok(sum / count::<T>(n_f) + lit(params.alpha.resolve(delta.grid())))
}

/// Mean filter of size `(2p+1)^3` with zero padding; border sums are divided
/// by the full kernel volume.
pub fn mean_filter<T: Real>(delta: &FbError<T>, p: usize) -> Vec<T> {
    let side = 2 * p + 1;
    let inv = T::one() / count::<T>(side * side * side);
    box_sum(delta.data(), delta.grid().dims, p).into_iter().map(|s| s * inv).collect()
}

/// `m(x) = [(A ⋆ δ)(x) ≥ τ]`.
pub fn absent_mask<T: Real>(delta: &FbError<T>, tau: T, params: &FbcParams) -> Result<CorrespondenceMask> {
    if !(tau.is_finite() && tau > T::zero()) {
        return Err(Error::invalid(format!("threshold must be finite and > 0, got {tau}")));
    }
    let smoothed = mean_filter(delta, params.p);
    Mask::new(*delta.grid(), smoothed.into_iter().map(|s| s >= tau).collect())
}

/// Masks, errors and thresholds for both directions.
#[derive(Clone, Debug)]
pub struct MaskEstimate<T> {
    /// Absent correspondences on the follow-up grid (B warped onto F).
    pub m_bf: CorrespondenceMask,
    /// Absent correspondences on the baseline grid (F warped onto B).
    pub m_fb: CorrespondenceMask,
    pub delta_bf: FbError<T>,
    pub delta_fb: FbError<T>,
    pub tau_bf: T,
    pub tau_fb: T,
}

impl<T: Real> MaskEstimate<T> {
    /// Errors computed but masks forced empty; thresholds are `α` only.
    pub fn without_masks(u_bf: &DisplacementField<T>, u_fb: &DisplacementField<T>, params: &FbcParams) -> Result<Self> {
        let delta_bf = fb_error(u_bf, u_fb)?;
        let delta_fb = fb_error(u_fb, u_bf)?;
        let g = *u_bf.grid();
        let a = lit(params.alpha.resolve(&g));
        Ok(Self { m_bf: Mask::empty(g), m_fb: Mask::empty(g), delta_bf, delta_fb, tau_bf: a, tau_fb: a })
    }
}

/// Symmetric mask estimation. `τ_bf` averages over the follow-up foreground,
/// `τ_fb` over the baseline foreground.
pub fn estimate_masks<T: Real>(
    u_bf: &DisplacementField<T>,
    u_fb: &DisplacementField<T>,
    fg_f: &ForegroundMask,
    fg_b: &ForegroundMask,
    params: &FbcParams,
) -> Result<MaskEstimate<T>> {
    let delta_bf = fb_error(u_bf, u_fb)?;
    let delta_fb = fb_error(u_fb, u_bf)?;
    let tau_bf = fb_threshold(&delta_bf, fg_f, params)?;
    let tau_fb = fb_threshold(&delta_fb, fg_b, params)?;
    let m_bf = absent_mask(&delta_bf, tau_bf, params)?;
    let m_fb = absent_mask(&delta_fb, tau_fb, params)?;
    Ok(MaskEstimate { m_bf, m_fb, delta_bf, delta_fb, tau_bf, tau_fb })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> Grid {
        Grid::unit([n, n, n]).unwrap()
    }

    fn err(g: Grid, f: impl Fn(usize, usize, usize) -> f64) -> FbError<f64> {
        FbError(Volume::from_fn(g, f).unwrap())
    }

    #[test]
    fn translations_that_cancel_have_zero_error() {
        let g = grid(8);
        let f = DisplacementField::constant(g, [2.0f64, 0.0, 0.0]);
        let b = DisplacementField::constant(g, [-2.0f64, 0.0, 0.0]);
        assert!(fb_error(&f, &b).unwrap().data().iter().all(|&d| d == 0.0));
        let z = DisplacementField::zeros(g);
        let f = DisplacementField::constant(g, [1.5f64, 0.0, 0.0]);
        assert!(fb_error(&f, &z).unwrap().data().iter().all(|&d| d == 1.5));
    }

    #[test]
    fn linear_backward_field_composition() {
        let g = grid(12);
        let f = DisplacementField::constant(g, [1.0f64, 0.0, 0.0]);
        let b = DisplacementField::from_fn(g, |x, _, _| [-(x as f64) / 10.0, 0.0, 0.0]).unwrap();
        let d = fb_error(&f, &b).unwrap();
        for x in 0..11 {
            let want = (1.0 - (x as f64 + 1.0) / 10.0).abs();
            assert!((d.volume().get(x, 5, 5) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn threshold_cases() {
        let g = grid(4);
        let params = FbcParams { alpha: Alpha::Voxels(0.25), p: 1 };
        let fg = Mask::full(g);
        assert_eq!(fb_threshold(&err(g, |_, _, _| 0.0), &fg, &params).unwrap(), 0.25);
        assert_eq!(fb_threshold(&err(g, |_, _, _| 1.0), &fg, &params).unwrap(), 1.25);
        let half = err(g, |x, _, _| if x < 2 { 2.0 } else { 0.0 });
        assert_eq!(fb_threshold(&half, &fg, &params).unwrap(), 1.25);
        assert!(matches!(fb_threshold(&half, &Mask::empty(g), &params), Err(Error::DegenerateForeground)));
    }

    #[test]
    fn single_impulse_survives_filter() {
        let g = grid(15);
        let p = 4;
        let tau = 0.3;
        let params = FbcParams { alpha: Alpha::Voxels(0.1), p };
        let big = 2.0 * tau * 729.0;
        let d = err(g, |x, y, z| if (x, y, z) == (7, 7, 7) { big } else { 0.0 });
        let sm = mean_filter(&d, p);
        assert!((sm[g.index(7, 7, 7)] - 2.0 * tau).abs() < 1e-12);
        let m = absent_mask(&d, tau, &params).unwrap();
        assert!(m.get(7, 7, 7));
    }

    #[test]
    fn p_zero_is_direct_threshold() {
        let g = grid(5);
        let d = err(g, |x, y, z| ((x * 3 + y * 5 + z * 7) % 9) as f64 * 0.1);
        let params = FbcParams { alpha: Alpha::Voxels(0.1), p: 0 };
        let m = absent_mask(&d, 0.4, &params).unwrap();
        for (i, &v) in d.data().iter().enumerate() {
            assert_eq!(m.data()[i], v >= 0.4);
        }
    }

    #[test]
    fn zero_fields_give_empty_masks_and_alpha_thresholds() {
        let g = grid(10);
        let z = DisplacementField::<f64>::zeros(g);
        let fg = Mask::full(g);
        let params = FbcParams::default();
        let est = estimate_masks(&z, &z, &fg, &fg, &params).unwrap();
        assert_eq!(est.m_bf.count() + est.m_fb.count(), 0);
        let alpha = 0.015 * 5.0;
        assert!((est.tau_bf - alpha).abs() < 1e-15 && (est.tau_fb - alpha).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_positive_tau() {
        let g = grid(4);
        let d = err(g, |_, _, _| 0.0);
        assert!(absent_mask(&d, 0.0, &FbcParams::default()).is_err());
    }
}
