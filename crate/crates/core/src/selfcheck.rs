//! Bundled correctness checks: analytic gradients against central finite
//! differences, and the mask pipeline against a naive per-voxel oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::fbc::{absent_mask, fb_error, fb_threshold, FbError, FbcParams};
use crate::field::DisplacementField;
use crate::losses::{diffusion_energy, inverse_consistency_loss, similarity_loss, total_loss, LossWeights};
use crate::synth::{random_smooth_field, texture_volume, Texture};
use crate::volume::{Grid, Mask, Volume};

/// Deliberate defects used to prove that the checks can fail.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Fault {
    #[default]
    None,
    /// Negates the analytic diffusion gradient.
    DiffusionSignFlip,
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

const FD_STEP: f64 = 1e-4;

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn max_abs(g: &[[f64; 3]]) -> f64 {
    g.iter().flat_map(|v| v.iter()).fold(0.0, |m, x| m.max(x.abs()))
}

fn rough_field(g: Grid, amp: f64, rng: &mut ChaCha8Rng) -> DisplacementField<f64> {
    let smooth: DisplacementField<f64> = random_smooth_field(g, amp, 2.0, rng.random()).expect("small amplitude");
    let data = smooth.data().iter().map(|v| v.map(|c| c + 0.05 * (rng.random::<f64>() - 0.5))).collect();
    DisplacementField::new(g, data).expect("finite")
}

fn random_mask(g: Grid, p: f64, rng: &mut ChaCha8Rng) -> Mask {
    Mask::new(g, (0..g.len()).map(|_| rng.random::<f64>() < p).collect()).expect("same grid")
}

fn perturbed(u: &DisplacementField<f64>, i: usize, k: usize, d: f64) -> DisplacementField<f64> {
    let mut data = u.data().to_vec();
    data[i][k] += d;
    DisplacementField::new(*u.grid(), data).expect("finite")
}

/// Worst relative error of `analytic` against central differences of
/// `value` over `samples` random (direction, voxel, component) picks.
fn fd_worst(
    rng: &mut ChaCha8Rng,
    u: [&DisplacementField<f64>; 2],
    analytic: [&[[f64; 3]]; 2],
    samples: usize,
    value: impl Fn(&DisplacementField<f64>, &DisplacementField<f64>) -> f64,
) -> f64 {
    let n = u[0].grid().len();
    let floor = 1e-3 * max_abs(analytic[0]).max(max_abs(analytic[1]));
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let dir = rng.random_range(0..2);
        let i = rng.random_range(0..n);
        let k = rng.random_range(0..3);
        let eval = |d: f64| {
            if dir == 0 {
                value(&perturbed(u[0], i, k, d), u[1])
            } else {
                value(u[0], &perturbed(u[1], i, k, d))
            }
        };
        let fd = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic[dir][i][k], fd, floor));
    }
    worst
}

fn outcome(name: &'static str, worst: f64, limit: f64) -> CheckOutcome {
    CheckOutcome {
        name,
        passed: worst < limit,
        detail: format!("worst relative error {worst:.3e} (limit {limit:.0e})"),
    }
}

/// Diffusion gradient, optionally sabotaged by `fault`.
fn diffusion_gradient(u: &DisplacementField<f64>, fault: Fault) -> Vec<[f64; 3]> {
    let (_, g) = diffusion_energy(u);
    match fault {
        Fault::DiffusionSignFlip => g.into_iter().map(|v| v.map(|c| -c)).collect(),
        Fault::None => g,
    }
}

fn check_diffusion(instances: usize, fault: Fault, rng: &mut ChaCha8Rng) -> CheckOutcome {
    let g = Grid::unit([10, 10, 10]).expect("valid");
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let u = rough_field(g, 2.0, rng);
        let grad = diffusion_gradient(&u, fault);
        let zero = vec![[0.0; 3]; g.len()];
        worst = worst.max(fd_worst(rng, [&u, &u], [&grad, &zero], 25, |a, _| diffusion_energy(a).0));
    }
    outcome("diffusion gradient vs finite differences", worst, 1e-6)
}

fn check_similarity(instances: usize, rng: &mut ChaCha8Rng) -> CheckOutcome {
    let g = Grid::unit([10, 10, 10]).expect("valid");
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let b: Volume<f64> = texture_volume(g, Texture::CheckerSmooth, rng);
        let f: Volume<f64> = texture_volume(g, Texture::Blobs, rng);
        let (u_bf, u_fb) = (rough_field(g, 1.5, rng), rough_field(g, 1.5, rng));
        let (m_bf, m_fb) = (random_mask(g, 0.2, rng), random_mask(g, 0.2, rng));
        let s = similarity_loss(&b, &f, &u_bf, &u_fb, &m_bf, &m_fb, 2).expect("consistent");
        let w = fd_worst(rng, [&u_bf, &u_fb], [&s.grad_bf, &s.grad_fb], 25, |a, c| {
            similarity_loss(&b, &f, a, c, &m_bf, &m_fb, 2).expect("consistent").value
        });
        worst = worst.max(w);
    }
    outcome("masked NCC gradient vs finite differences", worst, 1e-3)
}

fn check_inverse(instances: usize, rng: &mut ChaCha8Rng) -> CheckOutcome {
    let g = Grid::unit([10, 10, 10]).expect("valid");
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (u_bf, u_fb) = (rough_field(g, 1.5, rng), rough_field(g, 1.5, rng));
        let (m_bf, m_fb) = (random_mask(g, 0.2, rng), random_mask(g, 0.2, rng));
        let loss = |a: &DisplacementField<f64>, c: &DisplacementField<f64>| {
            let (d_bf, d_fb) = (fb_error(a, c).expect("same grid"), fb_error(c, a).expect("same grid"));
            inverse_consistency_loss(&d_bf, &d_fb, &m_bf, &m_fb, a, c).expect("same grid")
        };
        let (_, g_bf, g_fb) = loss(&u_bf, &u_fb);
        worst = worst.max(fd_worst(rng, [&u_bf, &u_fb], [&g_bf, &g_fb], 25, |a, c| loss(a, c).0));
    }
    outcome("inverse-consistency gradient vs finite differences", worst, 1e-3)
}

/// The whole objective; the mask-magnitude term is constant in the fields.
fn check_total(instances: usize, rng: &mut ChaCha8Rng) -> CheckOutcome {
    let g = Grid::unit([10, 10, 10]).expect("valid");
    let w = LossWeights::default();
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let b: Volume<f64> = texture_volume(g, Texture::Blobs, rng);
        let f: Volume<f64> = texture_volume(g, Texture::CheckerSmooth, rng);
        let (u_bf, u_fb) = (rough_field(g, 1.5, rng), rough_field(g, 1.5, rng));
        let (m_bf, m_fb) = (random_mask(g, 0.1, rng), random_mask(g, 0.1, rng));
        let l = total_loss(&b, &f, &u_bf, &u_fb, &m_bf, &m_fb, &w, 2).expect("consistent");
        worst = worst.max(fd_worst(rng, [&u_bf, &u_fb], [&l.grad_bf, &l.grad_fb], 25, |a, c| {
            total_loss(&b, &f, a, c, &m_bf, &m_fb, &w, 2).expect("consistent").breakdown.total
        }));
    }
    outcome("total objective gradient vs finite differences", worst, 1e-3)
}

/// Trilinear clamp-to-edge sample written out corner by corner.
fn naive_sample(u: &DisplacementField<f64>, p: [f64; 3]) -> [f64; 3] {
    let d = u.dims();
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut t = [0.0; 3];
    for a in 0..3 {
        let c = p[a].clamp(0.0, (d[a] - 1) as f64);
        lo[a] = (c.floor() as usize).min(d[a] - 1);
        hi[a] = (lo[a] + 1).min(d[a] - 1);
        t[a] = c - lo[a] as f64;
    }
    let mut out = [0.0; 3];
    for corner in 0..8 {
        let pick = |a: usize| corner >> a & 1 == 1;
        let (mut w, mut idx) = (1.0, [0usize; 3]);
        for a in 0..3 {
            if pick(a) {
                w *= t[a];
                idx[a] = hi[a];
            } else {
                w *= 1.0 - t[a];
                idx[a] = lo[a];
            }
        }
        let v = u.get(idx[0], idx[1], idx[2]);
        for k in 0..3 {
            out[k] += w * v[k];
        }
    }
    out
}

fn naive_masks(
    u_fwd: &DisplacementField<f64>,
    u_bwd: &DisplacementField<f64>,
    fg: &Mask,
    alpha: f64,
    p: usize,
) -> (Vec<f64>, f64, Vec<bool>) {
    let g = *u_fwd.grid();
    let [nx, ny, nz] = g.dims;
    let delta: Vec<f64> = (0..g.len())
        .map(|i| {
            let c = g.coords(i);
            let a = u_fwd.data()[i];
            let q = [0, 1, 2].map(|k| c[k] as f64 + a[k]);
            let b = naive_sample(u_bwd, q);
            ((a[0] + b[0]).powi(2) + (a[1] + b[1]).powi(2) + (a[2] + b[2]).powi(2)).sqrt()
        })
        .collect();
    let nf = fg.count();
    let tau = (0..g.len()).filter(|&i| fg.data()[i]).map(|i| delta[i]).sum::<f64>() / nf as f64 + alpha;
    let side = (2 * p + 1) as f64;
    let p = p as isize;
    let mask = (0..g.len())
        .map(|i| {
            let c = g.coords(i).map(|v| v as isize);
            let mut s = 0.0;
            for dz in -p..=p {
                for dy in -p..=p {
                    for dx in -p..=p {
                        let (x, y, z) = (c[0] + dx, c[1] + dy, c[2] + dz);
                        if x >= 0 && y >= 0 && z >= 0 && x < nx as isize && y < ny as isize && z < nz as isize {
                            s += delta[g.index(x as usize, y as usize, z as usize)];
                        }
                    }
                }
            }
            s / (side * side * side) >= tau
        })
        .collect();
    (delta, tau, mask)
}

fn check_mask_oracle(instances: usize, rng: &mut ChaCha8Rng) -> CheckOutcome {
    let g = Grid::unit([12, 12, 12]).expect("valid");
    let mut worst = 0.0f64;
    let mut mask_mismatch = 0usize;
    for _ in 0..instances {
        let u_fwd = rough_field(g, 2.0, rng);
        let u_bwd = rough_field(g, 2.0, rng);
        let fg = random_mask(g, 0.7, rng);
        let params = FbcParams { p: rng.random_range(0..4), ..Default::default() };
        let alpha = params.alpha.resolve(&g);
        let delta = fb_error(&u_fwd, &u_bwd).expect("same grid");
        let tau = fb_threshold(&delta, &fg, &params).expect("non-empty foreground");
        let mask = absent_mask(&delta, tau, &params).expect("positive threshold");
        let (nd, ntau, nmask) = naive_masks(&u_fwd, &u_bwd, &fg, alpha, params.p);
        worst = delta.data().iter().zip(&nd).fold(worst, |m, (a, b)| m.max((a - b).abs()));
        worst = worst.max((tau - ntau).abs());
        mask_mismatch += mask.data().iter().zip(&nmask).filter(|(a, b)| a != b).count();
    }
    CheckOutcome {
        name: "forward-backward error, threshold and mask vs naive oracle",
        passed: worst <= 1e-10 && mask_mismatch == 0,
        detail: format!("max |difference| {worst:.3e}, {mask_mismatch} mask voxels differ"),
    }
}

fn check_uniform_delta(rng: &mut ChaCha8Rng) -> CheckOutcome {
    let g = Grid::unit([9, 9, 9]).expect("valid");
    let mut set = 0usize;
    for _ in 0..10 {
        let level: f64 = rng.random_range(0.0..5.0);
        let delta = FbError::from_volume(Volume::constant(g, level)).expect("non-negative");
        let params = FbcParams { p: rng.random_range(0..5), ..Default::default() };
        let tau = fb_threshold(&delta, &Mask::full(g), &params).expect("full foreground");
        set += absent_mask(&delta, tau, &params).expect("positive threshold").count();
    }
    CheckOutcome { name: "uniform error gives empty masks", passed: set == 0, detail: format!("{set} voxels set") }
}

/// Runs every check; `quick` uses fewer random instances.
pub fn run(quick: bool, fault: Fault) -> Vec<CheckOutcome> {
    let n = if quick { 3 } else { 20 };
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e1f_c4ec);
    vec![
        check_diffusion(n, fault, &mut rng),
        check_similarity(if quick { 2 } else { n }, &mut rng),
        check_inverse(n, &mut rng),
        check_total(if quick { 2 } else { n }, &mut rng),
        check_mask_oracle(if quick { 5 } else { 50 }, &mut rng),
        check_uniform_delta(&mut rng),
    ]
}
