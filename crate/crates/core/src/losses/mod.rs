//! Differentiable loss terms and the full registration objective.
//!
//! Every term is normalised per voxel (means rather than sums) so loss
//! magnitudes, and therefore the default weights, stay comparable across
//! pyramid levels.

mod diffusion;
mod inverse;
mod ncc;

pub use diffusion::diffusion_energy;
pub use inverse::inverse_consistency_loss;
pub use ncc::{local_cc, masked_ncc, similarity_loss, similarity_loss_channels, NccResult, SimilarityTerms, NCC_EPS};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fbc::{fb_error, MaskEstimate};
use crate::field::DisplacementField;
use crate::scalar::{count, to_f64, Real};
use crate::volume::{CorrespondenceMask, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_reg: f64,
    pub lambda_inv: f64,
    pub lambda_m: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_reg: 0.3, lambda_inv: 0.5, lambda_m: 0.01 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_reg) {
            return Err(Error::Config(format!("lambda_reg must be in [0, 1], got {}", self.lambda_reg)));
        }
        if !(self.lambda_inv >= 0.0 && self.lambda_inv.is_finite()) {
            return Err(Error::Config(format!("lambda_inv must be >= 0, got {}", self.lambda_inv)));
        }
        if !(self.lambda_m >= 0.0 && self.lambda_m.is_finite()) {
            return Err(Error::Config(format!("lambda_m must be >= 0, got {}", self.lambda_m)));
        }
        Ok(())
    }
}

/// Unweighted loss parts and the weighted total.
///
/// `total = (1−λ_reg)·sim + λ_reg·reg + λ_inv·inv + λ_m·mask_mag`, where
/// `mask_mag = (‖m_bf‖₁ + ‖m_fb‖₁) / N`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sim: f64,
    pub reg: f64,
    pub inv: f64,
    pub mask_mag: f64,
    pub total: f64,
    #[serde(rename = "N")]
    pub n: usize,
    pub mask_fraction_bf: f64,
    pub mask_fraction_fb: f64,
}

#[derive(Clone, Debug)]
pub struct LossEvaluation<T> {
    pub breakdown: LossBreakdown,
    pub grad_bf: Vec<[T; 3]>,
    pub grad_fb: Vec<[T; 3]>,
}

/// Images and settings shared by every evaluation of one registration level.
#[derive(Clone, Copy, Debug)]
pub struct Objective<'a, T> {
    pub baseline: &'a [Volume<T>],
    pub followup: &'a [Volume<T>],
    pub weights: LossWeights,
    pub ncc_radius: usize,
}

impl<T: Real> Objective<'_, T> {
    /// Loss and gradients for the given fields under fixed masks. The mask
    /// term contributes a value only.
    pub fn evaluate(
        &self,
        u_bf: &DisplacementField<T>,
        u_fb: &DisplacementField<T>,
        masks: &MaskEstimate<T>,
    ) -> Result<LossEvaluation<T>> {
        let w = self.weights;
        let sim = similarity_loss_channels(
            self.baseline,
            self.followup,
            u_bf,
            u_fb,
            &masks.m_bf,
            &masks.m_fb,
            self.ncc_radius,
        )?;
        let (reg_bf, g_reg_bf) = diffusion_energy(u_bf);
        let (reg_fb, g_reg_fb) = diffusion_energy(u_fb);
        let (inv, g_inv_bf, g_inv_fb) =
            inverse_consistency_loss(&masks.delta_bf, &masks.delta_fb, &masks.m_bf, &masks.m_fb, u_bf, u_fb)?;

        let n = u_bf.grid().len();
        let mask_count = masks.m_bf.count() + masks.m_fb.count();
        let mask_mag = count::<T>(mask_count) / count::<T>(n);
        let reg = reg_bf + reg_fb;

        let ws = lit_t::<T>(1.0 - w.lambda_reg);
        let wr = lit_t::<T>(w.lambda_reg);
        let wi = lit_t::<T>(w.lambda_inv);
        let wm = lit_t::<T>(w.lambda_m);
        let total = ws * sim.value + wr * reg + wi * inv + wm * mask_mag;

        let combine = |gs: &[[T; 3]], gr: &[[T; 3]], gi: &[[T; 3]]| -> Vec<[T; 3]> {
            gs.iter()
                .zip(gr)
                .zip(gi)
                .map(|((s, r), i)| std::array::from_fn(|k| ws * s[k] + wr * r[k] + wi * i[k]))
                .collect()
        };
        let grad_bf = combine(&sim.grad_bf, &g_reg_bf, &g_inv_bf);
        let grad_fb = combine(&sim.grad_fb, &g_reg_fb, &g_inv_fb);

        Ok(LossEvaluation {
            breakdown: LossBreakdown {
                sim: to_f64(sim.value),
                reg: to_f64(reg),
                inv: to_f64(inv),
                mask_mag: to_f64(mask_mag),
                total: to_f64(total),
                n,
                mask_fraction_bf: masks.m_bf.fraction(),
                mask_fraction_fb: masks.m_fb.fraction(),
            },
            grad_bf,
            grad_fb,
        })
    }
}

#[inline]
fn lit_t<T: Real>(v: f64) -> T {
    crate::scalar::lit(v)
}

/// Full objective for one image pair with the given masks.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<T: Real>(
    b: &Volume<T>,
    f: &Volume<T>,
    u_bf: &DisplacementField<T>,
    u_fb: &DisplacementField<T>,
    m_bf: &CorrespondenceMask,
    m_fb: &CorrespondenceMask,
    weights: &LossWeights,
    r: usize,
) -> Result<LossEvaluation<T>> {
    weights.validate()?;
    let masks = MaskEstimate {
        m_bf: m_bf.clone(),
        m_fb: m_fb.clone(),
        delta_bf: fb_error(u_bf, u_fb)?,
        delta_fb: fb_error(u_fb, u_bf)?,
        tau_bf: T::zero(),
        tau_fb: T::zero(),
    };
    let obj = Objective {
        baseline: std::slice::from_ref(b),
        followup: std::slice::from_ref(f),
        weights: *weights,
        ncc_radius: r,
    };
    obj.evaluate(u_bf, u_fb, &masks)
}
