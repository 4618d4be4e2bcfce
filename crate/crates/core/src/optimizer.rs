//! Coarse-to-fine per-pair minimisation of the registration objective over
//! both displacement fields, with masks re-estimated from the current
//! fields before every step.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adam::{Adam, AdamParams};
use crate::error::{Error, Result};
use crate::fbc::{estimate_masks, FbError, FbcParams, MaskEstimate};
use crate::field::{upsample_field, DisplacementField};
use crate::filters::gaussian_smooth;
use crate::losses::{LossBreakdown, LossWeights, Objective};
use crate::scalar::{to_f64, Real};
use crate::volume::{CorrespondenceMask, Mask, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistrationConfig {
    /// Resolution of each level relative to the input, strictly increasing
    /// and ending at 1.
    pub pyramid_scales: Vec<f64>,
    pub iters_per_level: Vec<usize>,
    /// Iterations at the start of the coarsest level run with empty masks.
    pub mask_warmup_iters: usize,
    pub step: AdamParams,
    pub weights: LossWeights,
    pub fbc: FbcParams,
    pub ncc_radius: usize,
    pub seed: u64,
    /// When false the masks are forced empty throughout (ablation mode).
    pub masking: bool,
    /// Gaussian σ (voxels) applied to the loss gradient before each update.
    pub grad_smoothing_sigma: Option<f64>,
    /// Largest admissible displacement norm, as a fraction of the mean grid
    /// extent. Exceeding it aborts the run.
    pub max_displacement_fraction: f64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            pyramid_scales: vec![0.25, 0.5, 1.0],
            iters_per_level: vec![200, 150, 100],
            mask_warmup_iters: 50,
            step: AdamParams::default(),
            weights: LossWeights::default(),
            fbc: FbcParams::default(),
            ncc_radius: 3,
            seed: 0,
            masking: true,
            grad_smoothing_sigma: None,
            max_displacement_fraction: 0.5,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        let s = &self.pyramid_scales;
        if s.is_empty() || s.iter().any(|&x| !(x > 0.0 && x <= 1.0)) {
            return Err(Error::Config("pyramid scales must lie in (0, 1]".into()));
        }
        if s.windows(2).any(|w| w[1] <= w[0]) || *s.last().unwrap() != 1.0 {
            return Err(Error::Config("pyramid scales must be strictly increasing and end at 1".into()));
        }
        if self.iters_per_level.len() != s.len() {
            return Err(Error::Config(format!(
                "{} pyramid levels but {} iteration counts",
                s.len(),
                self.iters_per_level.len()
            )));
        }
        if self.iters_per_level.contains(&0) {
            return Err(Error::Config("every level needs at least one iteration".into()));
        }
        if self.ncc_radius == 0 {
            return Err(Error::Config("NCC radius must be >= 1".into()));
        }
        if !(self.max_displacement_fraction > 0.0) {
            return Err(Error::Config("displacement cap must be > 0".into()));
        }
        if let Some(sig) = self.grad_smoothing_sigma {
            if !(sig >= 0.0 && sig.is_finite()) {
                return Err(Error::Config("gradient smoothing sigma must be >= 0".into()));
            }
        }
        self.step.validate()?;
        self.weights.validate()?;
        self.fbc.validate()
    }

    /// Voxel counts at every level for an input of `dims`.
    pub fn level_dims(&self, dims: [usize; 3]) -> Vec<[usize; 3]> {
        self.pyramid_scales
            .iter()
            .map(|&s| dims.map(|d| if s == 1.0 { d } else { ((d as f64 * s).round() as usize).max(2) }))
            .collect()
    }
}

/// One line of the optimisation trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub level: usize,
    pub iter: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub tau_bf: f64,
    pub tau_fb: f64,
}

#[derive(Clone, Debug)]
pub struct RegistrationResult<T> {
    /// Warps the baseline onto the follow-up grid: `B(x + u_bf(x)) ≈ F(x)`.
    pub u_bf: DisplacementField<T>,
    /// Warps the follow-up onto the baseline grid.
    pub u_fb: DisplacementField<T>,
    pub m_bf: CorrespondenceMask,
    pub m_fb: CorrespondenceMask,
    pub delta_bf: FbError<T>,
    pub delta_fb: FbError<T>,
    pub tau_bf: f64,
    pub tau_fb: f64,
    pub trace: Vec<TraceEntry>,
    pub wall_time: f64,
}

/// Registers a single-channel baseline/follow-up pair.
pub fn register_pair<T: Real>(b: &Volume<T>, f: &Volume<T>, cfg: &RegistrationConfig) -> Result<RegistrationResult<T>> {
    run_multimodal(std::slice::from_ref(b), std::slice::from_ref(f), cfg)
}

/// Registers channel-stacked scans. The similarity term averages the
/// per-channel NCC; the fields and masks are shared by all channels, and the
/// foreground used for thresholds is the union over channels.
pub fn run_multimodal<T: Real>(
    b: &[Volume<T>],
    f: &[Volume<T>],
    cfg: &RegistrationConfig,
) -> Result<RegistrationResult<T>> {
    cfg.validate()?;
    if b.is_empty() || b.len() != f.len() {
        return Err(Error::invalid(format!(
            "channel mismatch: {} baseline vs {} follow-up channels",
            b.len(),
            f.len()
        )));
    }
    let grid = *b[0].grid();
    for v in b.iter().chain(f) {
        grid.same_shape(v.grid())?;
        if v.spacing() != grid.spacing {
            return Err(Error::invalid("all channels must share one spacing"));
        }
    }

    let start = Instant::now();
    let mut trace = Vec::new();
    let mut fields: Option<(DisplacementField<T>, DisplacementField<T>)> = None;

    let levels = cfg.level_dims(grid.dims);
    for (level, (&dims, &iters)) in levels.iter().zip(&cfg.iters_per_level).enumerate() {
        let b_l: Vec<Volume<T>> = b.iter().map(|v| pyramid_image(v, dims)).collect::<Result<_>>()?;
        let f_l: Vec<Volume<T>> = f.iter().map(|v| pyramid_image(v, dims)).collect::<Result<_>>()?;
        let grid_l = *b_l[0].grid();
        let fg_b = channel_foreground(&b_l)?;
        let fg_f = channel_foreground(&f_l)?;

        let (mut u_bf, mut u_fb) = match fields.take() {
            None => (DisplacementField::zeros(grid_l), DisplacementField::zeros(grid_l)),
            Some((ubf, ufb)) => (
                DisplacementField::from_parts_unchecked(grid_l, upsample_field(&ubf, dims)?.data().to_vec()),
                DisplacementField::from_parts_unchecked(grid_l, upsample_field(&ufb, dims)?.data().to_vec()),
            ),
        };

        let objective = Objective { baseline: &b_l, followup: &f_l, weights: cfg.weights, ncc_radius: cfg.ncc_radius };
        let n_params = grid_l.len() * 3;
        let mut opt_bf = Adam::<T>::new(cfg.step, n_params);
        let mut opt_fb = Adam::<T>::new(cfg.step, n_params);
        let cap = cfg.max_displacement_fraction * grid_l.dims.iter().sum::<usize>() as f64 / 3.0;

        for iter in 0..iters {
            let warm = level == 0 && iter < cfg.mask_warmup_iters;
            let masks = if !cfg.masking || warm {
                MaskEstimate::without_masks(&u_bf, &u_fb, &cfg.fbc)?
            } else {
                estimate_masks(&u_bf, &u_fb, &fg_f, &fg_b, &cfg.fbc)?
            };
            let eval = objective.evaluate(&u_bf, &u_fb, &masks)?;
            trace.push(TraceEntry {
                level,
                iter,
                loss: eval.breakdown,
                tau_bf: to_f64(masks.tau_bf),
                tau_fb: to_f64(masks.tau_fb),
            });
            if !eval.breakdown.total.is_finite() {
                return Err(Error::Diverged { level, iteration: iter, reason: "non-finite loss".into(), trace });
            }

            let mut g_bf = eval.grad_bf;
            let mut g_fb = eval.grad_fb;
            if let Some(sigma) = cfg.grad_smoothing_sigma.filter(|&s| s > 0.0) {
                g_bf = smooth_vectors(&g_bf, dims, sigma);
                g_fb = smooth_vectors(&g_fb, dims, sigma);
            }
            opt_bf.step(u_bf.data_mut().as_flattened_mut(), g_bf.as_flattened());
            opt_fb.step(u_fb.data_mut().as_flattened_mut(), g_fb.as_flattened());

            for u in [&u_bf, &u_fb] {
                let m = to_f64(u.max_norm());
                if !m.is_finite() || m > cap {
                    return Err(Error::Diverged {
                        level,
                        iteration: iter,
                        reason: format!("displacement norm {m:.3} exceeds cap {cap:.3} voxels"),
                        trace,
                    });
                }
            }
        }
        fields = Some((u_bf, u_fb));
    }

    let (u_bf, u_fb) = fields.expect("at least one level");
    let final_masks = if cfg.masking {
        estimate_masks(&u_bf, &u_fb, &channel_foreground(f)?, &channel_foreground(b)?, &cfg.fbc)?
    } else {
        MaskEstimate::without_masks(&u_bf, &u_fb, &cfg.fbc)?
    };

    Ok(RegistrationResult {
        u_bf,
        u_fb,
        m_bf: final_masks.m_bf,
        m_fb: final_masks.m_fb,
        delta_bf: final_masks.delta_bf,
        delta_fb: final_masks.delta_fb,
        tau_bf: to_f64(final_masks.tau_bf),
        tau_fb: to_f64(final_masks.tau_fb),
        trace,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Image at pyramid resolution `dims`: Gaussian anti-aliasing proportional
/// to the shrink factor, then trilinear resampling.
pub fn pyramid_image<T: Real>(v: &Volume<T>, dims: [usize; 3]) -> Result<Volume<T>> {
    if dims == v.dims() {
        return Ok(v.clone());
    }
    let factor = (0..3).map(|a| v.dims()[a] as f64 / dims[a] as f64).fold(0.0, f64::max);
    let sigma = 0.5 * (factor - 1.0).max(0.0);
    let smoothed = Volume::from_parts_unchecked(*v.grid(), gaussian_smooth(v.data(), v.dims(), sigma));
    smoothed.resample(dims)
}

/// Union of the per-channel foregrounds.
fn channel_foreground<T: Real>(channels: &[Volume<T>]) -> Result<Mask> {
    let mut fg = channels[0].foreground();
    for c in &channels[1..] {
        fg = fg.union(&c.foreground())?;
    }
    Ok(fg)
}

fn smooth_vectors<T: Real>(g: &[[T; 3]], dims: [usize; 3], sigma: f64) -> Vec<[T; 3]> {
    let comps: [Vec<T>; 3] =
        std::array::from_fn(|c| gaussian_smooth(&g.iter().map(|v| v[c]).collect::<Vec<_>>(), dims, sigma));
    (0..g.len()).map(|i| [comps[0][i], comps[1][i], comps[2][i]]).collect()
}
