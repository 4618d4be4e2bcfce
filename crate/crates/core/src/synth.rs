//! Synthetic registration pairs with known deformation, known lesions and
//! exact landmark correspondences.
//!
//! A textured base image `B₀` is warped by a smooth random field to give
//! `F₀ = B₀ ∘ (Id + u)`. A bright tumour is then painted into `B = B₀` and a
//! dark cavity into `F = F₀` at the corresponding site, so both images hold
//! a region with no valid counterpart in the other while the ground-truth
//! field stays exact everywhere else.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{Frame, Landmark, LandmarkSet};
use crate::field::{jacobian_det, warp, DisplacementField};
use crate::filters::gaussian_smooth;
use crate::io;
use crate::scalar::{lit, to_f64, Real};
use crate::volume::{Grid, Mask, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Texture {
    /// Sum of random anisotropic Gaussian bumps.
    Blobs,
    /// Smooth product-of-sines checkerboard.
    CheckerSmooth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub seed: u64,
    /// Largest displacement norm of the ground-truth field, voxels.
    pub field_amplitude: f64,
    /// Gaussian σ (voxels) used to smooth the white-noise field.
    pub field_smoothness: f64,
    pub lesion_count: usize,
    pub lesion_radius: f64,
    /// Cavity radius is the tumour radius times a factor drawn from
    /// `[1 − v, 1 + v]`.
    pub cavity_radius_variation: f64,
    pub tumor_intensity: f64,
    pub cavity_intensity: f64,
    pub n_landmarks: usize,
    pub texture: Texture,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dims: [64, 64, 64],
            spacing: [1.0; 3],
            seed: 0,
            field_amplitude: 4.0,
            field_smoothness: 8.0,
            lesion_count: 1,
            lesion_radius: 6.0,
            cavity_radius_variation: 0.3,
            tumor_intensity: 1.0,
            cavity_intensity: 0.05,
            n_landmarks: 30,
            texture: Texture::Blobs,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        Grid::new(self.dims, self.spacing)?;
        let min_dim = *self.dims.iter().min().unwrap() as f64;
        if !(self.field_amplitude >= 0.0 && self.field_amplitude < min_dim / 8.0) {
            return Err(Error::Config(format!(
                "field amplitude must lie in [0, {}) voxels for dims {:?}, got {}",
                min_dim / 8.0,
                self.dims,
                self.field_amplitude
            )));
        }
        if !(self.field_smoothness > 0.0) {
            return Err(Error::Config("field smoothness must be > 0".into()));
        }
        if self.lesion_count > 0 && !(self.lesion_radius > 0.0) {
            return Err(Error::Config("lesion radius must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.cavity_radius_variation) {
            return Err(Error::Config("cavity radius variation must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.cavity_intensity) || !(0.0..=1.0).contains(&self.tumor_intensity) {
            return Err(Error::Config("lesion intensities must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SynthCase<T> {
    pub b: Volume<T>,
    pub f: Volume<T>,
    /// Ground truth with `B(x + u(x)) = F(x)` outside lesions; maps follow-up
    /// positions to their baseline counterparts.
    pub gt_u_bf: DisplacementField<T>,
    pub lesion_mask_b: Mask,
    pub lesion_mask_f: Mask,
    pub lms_b: LandmarkSet,
    pub lms_f: LandmarkSet,
    pub config: SynthConfig,
}

/// File names inside a case directory, without the image extension.
pub mod files {
    pub const BASELINE: &str = "B";
    pub const FOLLOWUP: &str = "F";
    pub const GT_FIELD: &str = "gt_u_bf";
    pub const LESION_B: &str = "lesion_mask_B";
    pub const LESION_F: &str = "lesion_mask_F";
    pub const LANDMARKS_B: &str = "lms_B.csv";
    pub const LANDMARKS_F: &str = "lms_F.csv";
    pub const CONFIG: &str = "config.json";
}

impl<T: Real> SynthCase<T> {
    /// Writes images with extension `ext` (`"nii"` or `"raw"`), landmark CSVs
    /// and the generating config into `dir`, creating it if needed. Returns
    /// the written paths.
    pub fn write_dir(&self, dir: impl AsRef<Path>, ext: &str) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let img = |name: &str| dir.join(format!("{name}.{ext}"));
        let mut out = Vec::new();
        for (name, v) in [(files::BASELINE, &self.b), (files::FOLLOWUP, &self.f)] {
            io::save_volume(img(name), v)?;
            out.push(img(name));
        }
        io::save_field(img(files::GT_FIELD), &self.gt_u_bf)?;
        out.push(img(files::GT_FIELD));
        for (name, m) in [(files::LESION_B, &self.lesion_mask_b), (files::LESION_F, &self.lesion_mask_f)] {
            io::save_mask(img(name), m)?;
            out.push(img(name));
        }
        for (name, l) in [(files::LANDMARKS_B, &self.lms_b), (files::LANDMARKS_F, &self.lms_f)] {
            l.write_csv(dir.join(name))?;
            out.push(dir.join(name));
        }
        fs::write(dir.join(files::CONFIG), serde_json::to_string_pretty(&self.config)?)?;
        out.push(dir.join(files::CONFIG));
        Ok(out)
    }
}

const MAX_FIELD_TRIES: u64 = 10;
const MIN_JACOBIAN: f64 = 0.1;

/// Gaussian-smoothed white noise rescaled to a maximum norm of `amplitude`,
/// redrawn (up to ten times) until its Jacobian determinant exceeds 0.1
/// everywhere.
pub fn random_smooth_field<T: Real>(grid: Grid, amplitude: f64, sigma: f64, seed: u64) -> Result<DisplacementField<T>> {
    if !(sigma > 0.0) {
        return Err(Error::Config("smoothing sigma must be > 0".into()));
    }
    if amplitude == 0.0 {
        return Ok(DisplacementField::zeros(grid));
    }
    for attempt in 0..MAX_FIELD_TRIES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15)));
        // Noise is drawn on a padded box and cropped after smoothing, so the
        // statistics do not change near the border.
        let pad = (3.0 * sigma).ceil() as usize;
        let pd = grid.dims.map(|d| d + 2 * pad);
        let comps: [Vec<f64>; 3] = std::array::from_fn(|_| {
            let noise: Vec<f64> = (0..pd[0] * pd[1] * pd[2]).map(|_| StandardNormal.sample(&mut rng)).collect();
            let smooth = gaussian_smooth(&noise, pd, sigma);
            (0..grid.len())
                .map(|i| {
                    let [x, y, z] = grid.coords(i);
                    smooth[(x + pad) + pd[0] * ((y + pad) + pd[1] * (z + pad))]
                })
                .collect()
        });
        let max = (0..grid.len())
            .map(|i| (comps[0][i].powi(2) + comps[1][i].powi(2) + comps[2][i].powi(2)).sqrt())
            .fold(0.0, f64::max);
        let s = amplitude / max;
        let field =
            DisplacementField::from_components(grid, comps.map(|c| c.into_iter().map(|v| lit::<T>(v * s)).collect()))?;
        let min_det = jacobian_det(&field).data().iter().map(|&d| to_f64(d)).fold(f64::INFINITY, f64::min);
        if min_det > MIN_JACOBIAN {
            return Ok(field);
        }
    }
    Err(Error::Config(format!(
        "could not draw a field with Jacobian > {MIN_JACOBIAN} in {MAX_FIELD_TRIES} tries; amplitude {amplitude} is too large for sigma {sigma}"
    )))
}

/// Base texture with intensities in `[0.1, 0.8]`.
pub fn texture_volume<T: Real>(grid: Grid, texture: Texture, rng: &mut impl Rng) -> Volume<T> {
    let [nx, ny, nz] = grid.dims;
    let scale = [nx, ny, nz].map(|d| d as f64 / 64.0);
    let raw: Vec<f64> = match texture {
        Texture::Blobs => {
            let n_bumps = ((1500.0 * scale[0] * scale[1] * scale[2]).round() as usize).max(8);
            let bumps: Vec<([f64; 3], [f64; 3], f64)> = (0..n_bumps)
                .map(|_| {
                    let c = std::array::from_fn(|a| rng.random::<f64>() * (grid.dims[a] - 1) as f64);
                    let s = std::array::from_fn(|a| (1.2 + 1.6 * rng.random::<f64>()) * scale[a].max(0.25));
                    let sign = if rng.random::<f64>() < 0.35 { -1.0 } else { 1.0 };
                    (c, s, sign * (0.4 + 0.6 * rng.random::<f64>()))
                })
                .collect();
            (0..grid.len())
                .map(|i| {
                    let p = grid.coords(i).map(|c| c as f64);
                    bumps
                        .iter()
                        .map(|(c, s, a)| {
                            let q: f64 = (0..3).map(|k| ((p[k] - c[k]) / s[k]).powi(2)).sum();
                            if q > 25.0 {
                                0.0
                            } else {
                                a * (-0.5 * q).exp()
                            }
                        })
                        .sum()
                })
                .collect()
        }
        Texture::CheckerSmooth => {
            let period: [f64; 3] = std::array::from_fn(|a| (6.0 + 4.0 * rng.random::<f64>()) * scale[a].max(0.25));
            let phase: [f64; 3] = std::array::from_fn(|_| rng.random::<f64>() * std::f64::consts::TAU);
            (0..grid.len())
                .map(|i| {
                    let p = grid.coords(i).map(|c| c as f64);
                    (0..3).map(|k| (std::f64::consts::TAU * p[k] / period[k] + phase[k]).sin()).product::<f64>()
                        + 0.3 * (std::f64::consts::TAU * (p[0] + p[1] + p[2]) / (3.0 * period[0])).cos()
                })
                .collect()
        }
    };
    let (lo, hi) = raw.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let data = raw.iter().map(|&v| lit::<T>(0.1 + 0.7 * (v - lo) / span)).collect();
    Volume::from_parts_unchecked(grid, data)
}

struct Lesion {
    center: [f64; 3],
    radius: f64,
}

impl Lesion {
    fn distance(&self, p: [f64; 3]) -> f64 {
        ((p[0] - self.center[0]).powi(2) + (p[1] - self.center[1]).powi(2) + (p[2] - self.center[2]).powi(2)).sqrt()
    }

    /// 1 inside, linear fall-off across a one-voxel rim, 0 beyond.
    fn weight(&self, p: [f64; 3]) -> f64 {
        (self.radius + 1.0 - self.distance(p)).clamp(0.0, 1.0)
    }
}

fn paint<T: Real>(vol: &Volume<T>, lesions: &[Lesion], intensity: f64) -> (Volume<T>, Mask) {
    let g = *vol.grid();
    let mut data = vol.data().to_vec();
    let mut mask = vec![false; g.len()];
    for (i, v) in data.iter_mut().enumerate() {
        let p = g.coords(i).map(|c| c as f64);
        let w = lesions.iter().map(|l| l.weight(p)).fold(0.0, f64::max);
        if w > 0.0 {
            *v = lit::<T>((1.0 - w) * to_f64(*v) + w * intensity);
        }
        mask[i] = lesions.iter().any(|l| l.distance(p) <= l.radius);
    }
    (Volume::from_parts_unchecked(g, data), Mask::new(g, mask).expect("same grid"))
}

fn gradient_magnitude<T: Real>(v: &Volume<T>) -> Vec<f64> {
    let g = *v.grid();
    let d = v.data();
    let strides = [1, g.dims[0], g.dims[0] * g.dims[1]];
    (0..g.len())
        .map(|i| {
            let c = g.coords(i);
            (0..3)
                .map(|a| {
                    if c[a] == 0 || c[a] + 1 == g.dims[a] {
                        0.0
                    } else {
                        let diff = 0.5 * (to_f64(d[i + strides[a]]) - to_f64(d[i - strides[a]]));
                        diff * diff
                    }
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

/// Builds a full synthetic case from `cfg`.
pub fn make_case<T: Real>(cfg: &SynthConfig) -> Result<SynthCase<T>> {
    cfg.validate()?;
    let grid = Grid::new(cfg.dims, cfg.spacing)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let base: Volume<T> = texture_volume(grid, cfg.texture, &mut rng);
    let field_seed = rng.random::<u64>();
    let gt: DisplacementField<T> = random_smooth_field(grid, cfg.field_amplitude, cfg.field_smoothness, field_seed)?;
    let f0 = warp(&base, &gt)?;

    // Lesion sites are drawn in the follow-up frame and mapped through the
    // ground truth into the baseline frame.
    let margin_l = cfg.lesion_radius * (1.0 + cfg.cavity_radius_variation) + cfg.field_amplitude + 3.0;
    let mut tumors = Vec::new();
    let mut cavities = Vec::new();
    let mut tries = 0;
    while cavities.len() < cfg.lesion_count {
        tries += 1;
        if tries > 1000 {
            return Err(Error::Config("cannot place lesions inside the volume".into()));
        }
        let c: [f64; 3] = std::array::from_fn(|a| {
            let lo = margin_l;
            let hi = (cfg.dims[a] - 1) as f64 - margin_l;
            lo + rng.random::<f64>() * (hi - lo).max(0.0)
        });
        if (0..3).any(|a| c[a] < margin_l || c[a] > (cfg.dims[a] - 1) as f64 - margin_l) {
            continue;
        }
        let factor = 1.0 + cfg.cavity_radius_variation * (2.0 * rng.random::<f64>() - 1.0);
        let cavity = Lesion { center: c, radius: cfg.lesion_radius * factor };
        if cavities.iter().any(|o: &Lesion| o.distance(c) < o.radius + cavity.radius + 4.0) {
            continue;
        }
        let u = gt.sample_at(c.map(lit::<T>)).map(to_f64);
        tumors.push(Lesion { center: [c[0] + u[0], c[1] + u[1], c[2] + u[2]], radius: cfg.lesion_radius });
        cavities.push(cavity);
    }

    let (b, lesion_mask_b) = paint(&base, &tumors, cfg.tumor_intensity);
    let (f, lesion_mask_f) = paint(&f0, &cavities, cfg.cavity_intensity);

    let (lms_f, lms_b) = place_landmarks(cfg, &grid, &f, &gt, &tumors, &cavities, &mut rng)?;
    Ok(SynthCase { b, f, gt_u_bf: gt, lesion_mask_b, lesion_mask_f, lms_b, lms_f, config: cfg.clone() })
}

/// Landmarks on high-gradient follow-up voxels away from the border and
/// from both lesions; baseline positions follow the ground truth exactly.
fn place_landmarks<T: Real>(
    cfg: &SynthConfig,
    grid: &Grid,
    f: &Volume<T>,
    gt: &DisplacementField<T>,
    tumors: &[Lesion],
    cavities: &[Lesion],
    rng: &mut ChaCha8Rng,
) -> Result<(LandmarkSet, LandmarkSet)> {
    let border = (cfg.field_amplitude.ceil() as usize + 3).max(4);
    let grad = gradient_magnitude(f);
    let clearance = 3.0;
    let mut candidates: Vec<usize> = (0..grid.len())
        .filter(|&i| {
            let c = grid.coords(i);
            if (0..3).any(|a| c[a] < border || c[a] + border >= grid.dims[a]) {
                return false;
            }
            let p = c.map(|v| v as f64);
            let u = gt.data()[i].map(to_f64);
            let q = [p[0] + u[0], p[1] + u[1], p[2] + u[2]];
            cavities.iter().all(|l| l.distance(p) > l.radius + clearance)
                && tumors.iter().all(|l| l.distance(q) > l.radius + clearance)
        })
        .collect();
    if candidates.len() < cfg.n_landmarks {
        return Err(Error::Config("not enough room to place landmarks".into()));
    }
    // Keep the top quartile by gradient magnitude.
    candidates.sort_by(|&a, &b| grad[b].total_cmp(&grad[a]).then(a.cmp(&b)));
    candidates.truncate((candidates.len() / 4).max(cfg.n_landmarks));

    let min_sep = 4.0;
    let mut chosen: Vec<usize> = Vec::new();
    let mut pool = candidates;
    while chosen.len() < cfg.n_landmarks && !pool.is_empty() {
        let k = rng.random_range(0..pool.len());
        let i = pool.swap_remove(k);
        let p = grid.coords(i).map(|v| v as f64);
        let far_enough = chosen.iter().all(|&j| {
            let q = grid.coords(j).map(|v| v as f64);
            ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt() >= min_sep
        });
        if far_enough {
            chosen.push(i);
        }
    }
    if chosen.len() < cfg.n_landmarks {
        return Err(Error::Config("not enough separated landmark sites".into()));
    }
    let mut f_entries = Vec::new();
    let mut b_entries = Vec::new();
    for (k, &i) in chosen.iter().enumerate() {
        let id = k as u32 + 1;
        let p = grid.coords(i).map(|v| v as f64);
        let u = gt.data()[i].map(to_f64);
        f_entries.push(Landmark::new(id, grid.voxel_to_mm(p)));
        b_entries.push(Landmark::new(id, grid.voxel_to_mm([p[0] + u[0], p[1] + u[1], p[2] + u[2]])));
    }
    Ok((LandmarkSet::new(Frame::Followup, f_entries)?, LandmarkSet::new(Frame::Baseline, b_entries)?))
}
