//! Analytic gradients against central finite differences, and the NCC value
//! against a direct window-by-window evaluation.

use absentreg::fbc::fb_error;
use absentreg::losses::{
    diffusion_energy, inverse_consistency_loss, masked_ncc, similarity_loss, total_loss, LossWeights,
};
use absentreg::synth::{random_smooth_field, texture_volume, Texture};
use absentreg::{DisplacementField, Grid, Mask, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-4;

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn random_volume(g: Grid, rng: &mut ChaCha8Rng) -> Volume<f64> {
    texture_volume(g, Texture::Blobs, rng)
}

fn noisy_field(g: Grid, amp: f64, rng: &mut ChaCha8Rng) -> DisplacementField<f64> {
    let smooth: DisplacementField<f64> = random_smooth_field(g, amp, 2.0, rng.random()).unwrap();
    DisplacementField::new(g, smooth.data().iter().map(|v| v.map(|c| c + 0.05 * (rng.random::<f64>() - 0.5))).collect())
        .unwrap()
}

fn random_mask(g: Grid, p: f64, rng: &mut ChaCha8Rng) -> Mask {
    Mask::new(g, (0..g.len()).map(|_| rng.random::<f64>() < p).collect()).unwrap()
}

/// Direct evaluation of the mean windowed squared correlation.
fn brute_ncc(t: &Volume<f64>, w: &Volume<f64>, valid: &Mask, r: usize) -> f64 {
    let g = *t.grid();
    let [nx, ny, nz] = g.dims;
    let r = r as isize;
    let mut total = 0.0;
    let mut count = 0usize;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !valid.get(x, y, z) {
                    continue;
                }
                let mut tv = Vec::new();
                let mut wv = Vec::new();
                for dz in -r..=r {
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let (a, b, c) = (x as isize + dx, y as isize + dy, z as isize + dz);
                            if a < 0 || b < 0 || c < 0 || a >= nx as isize || b >= ny as isize || c >= nz as isize {
                                continue;
                            }
                            tv.push(t.get(a as usize, b as usize, c as usize));
                            wv.push(w.get(a as usize, b as usize, c as usize));
                        }
                    }
                }
                let n = tv.len() as f64;
                let tm = tv.iter().sum::<f64>() / n;
                let wm = wv.iter().sum::<f64>() / n;
                let cross: f64 = tv.iter().zip(&wv).map(|(a, b)| (a - tm) * (b - wm)).sum();
                let vt: f64 = tv.iter().map(|a| (a - tm).powi(2)).sum();
                let vw: f64 = wv.iter().map(|b| (b - wm).powi(2)).sum();
                total += cross * cross / (vt * vw + 1e-5);
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

#[test]
fn ncc_single_window_matches_brute_force_and_fd() {
    let g = Grid::unit([5, 5, 5]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let t = Volume::from_fn(g, |_, _, _| 0.0).unwrap().map(|_| 0.0).unwrap();
    let t = Volume::new(g, t.data().iter().map(|_| rng.random::<f64>()).collect()).unwrap();
    let w = Volume::new(g, (0..125).map(|_| rng.random::<f64>()).collect()).unwrap();
    let valid = Mask::from_fn(g, |x, y, z| (x, y, z) == (2, 2, 2));
    let res = masked_ncc(&t, &w, &valid, 1).unwrap();
    let brute = brute_ncc(&t, &w, &valid, 1);
    assert!((res.value - brute).abs() < 1e-8, "{} vs {}", res.value, brute);
    for i in 0..125 {
        let mut up = w.data().to_vec();
        let mut dn = w.data().to_vec();
        up[i] += H;
        dn[i] -= H;
        let fd = (brute_ncc(&t, &Volume::new(g, up).unwrap(), &valid, 1)
            - brute_ncc(&t, &Volume::new(g, dn).unwrap(), &valid, 1))
            / (2.0 * H);
        let e = rel_err(res.grad[i], fd, 1e-7);
        assert!(e < 1e-4, "voxel {i}: analytic {} fd {} rel {e}", res.grad[i], fd);
    }
}

#[test]
fn masked_ncc_matches_brute_force_on_random_masks() {
    let g = Grid::unit([7, 6, 8]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for r in [1, 2, 3] {
        let t = random_volume(g, &mut rng);
        let w = random_volume(g, &mut rng);
        let valid = random_mask(g, 0.6, &mut rng);
        let fast = masked_ncc(&t, &w, &valid, r).unwrap().value;
        let slow = brute_ncc(&t, &w, &valid, r);
        assert!((fast - slow).abs() < 1e-10, "r={r}: {fast} vs {slow}");
    }
}

#[test]
fn similarity_gradient_matches_finite_differences() {
    let g = Grid::unit([10, 10, 10]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst = 0.0f64;
    for _ in 0..4 {
        let b = random_volume(g, &mut rng);
        let f = random_volume(g, &mut rng);
        let u_bf = noisy_field(g, 1.5, &mut rng);
        let u_fb = noisy_field(g, 1.5, &mut rng);
        let m_bf = random_mask(g, 0.2, &mut rng);
        let m_fb = random_mask(g, 0.2, &mut rng);
        let s = similarity_loss(&b, &f, &u_bf, &u_fb, &m_bf, &m_fb, 2).unwrap();
        let scale = s.grad_bf.iter().chain(&s.grad_fb).flat_map(|v| v.iter()).fold(0.0f64, |m, x| m.max(x.abs()));
        for _ in 0..50 {
            let dir = rng.random_range(0..2);
            let i = rng.random_range(0..g.len());
            let k = rng.random_range(0..3);
            let eval = |delta: f64| {
                let (mut a, mut c) = (u_bf.clone(), u_fb.clone());
                let target = if dir == 0 { &mut a } else { &mut c };
                let mut d = target.data().to_vec();
                d[i][k] += delta;
                *target = DisplacementField::new(g, d).unwrap();
                similarity_loss(&b, &f, &a, &c, &m_bf, &m_fb, 2).unwrap().value
            };
            let fd = (eval(H) - eval(-H)) / (2.0 * H);
            let an = if dir == 0 { s.grad_bf[i][k] } else { s.grad_fb[i][k] };
            let e = rel_err(an, fd, 1e-3 * scale);
            worst = worst.max(e);
        }
    }
    assert!(worst < 1e-3, "worst relative error {worst}");
}

#[test]
fn diffusion_gradient_matches_finite_differences() {
    let g = Grid::unit([10, 10, 10]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let u = noisy_field(g, 2.0, &mut rng);
    let (_, grad) = diffusion_energy(&u);
    let scale = grad.iter().flat_map(|v| v.iter()).fold(0.0f64, |m, x| m.max(x.abs()));
    let mut worst = 0.0f64;
    for _ in 0..60 {
        let i = rng.random_range(0..g.len());
        let k = rng.random_range(0..3);
        let eval = |delta: f64| {
            let mut d = u.data().to_vec();
            d[i][k] += delta;
            diffusion_energy(&DisplacementField::new(g, d).unwrap()).0
        };
        let fd = (eval(H) - eval(-H)) / (2.0 * H);
        worst = worst.max(rel_err(grad[i][k], fd, 1e-3 * scale));
    }
    assert!(worst < 1e-6, "worst relative error {worst}");
}

#[test]
fn inverse_consistency_gradient_matches_finite_differences() {
    let g = Grid::unit([10, 10, 10]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    for _ in 0..4 {
        let u_bf = noisy_field(g, 1.5, &mut rng);
        let u_fb = noisy_field(g, 1.5, &mut rng);
        let m_bf = random_mask(g, 0.2, &mut rng);
        let m_fb = random_mask(g, 0.2, &mut rng);
        let loss = |a: &DisplacementField<f64>, c: &DisplacementField<f64>| {
            inverse_consistency_loss(&fb_error(a, c).unwrap(), &fb_error(c, a).unwrap(), &m_bf, &m_fb, a, c).unwrap()
        };
        let (_, g_bf, g_fb) = loss(&u_bf, &u_fb);
        let scale = g_bf.iter().chain(&g_fb).flat_map(|v| v.iter()).fold(0.0f64, |m, x| m.max(x.abs()));
        for _ in 0..50 {
            let dir = rng.random_range(0..2);
            let i = rng.random_range(0..g.len());
            let k = rng.random_range(0..3);
            let eval = |delta: f64| {
                let (mut a, mut c) = (u_bf.clone(), u_fb.clone());
                let target = if dir == 0 { &mut a } else { &mut c };
                let mut d = target.data().to_vec();
                d[i][k] += delta;
                *target = DisplacementField::new(g, d).unwrap();
                loss(&a, &c).0
            };
            let fd = (eval(H) - eval(-H)) / (2.0 * H);
            let an = if dir == 0 { g_bf[i][k] } else { g_fb[i][k] };
            worst = worst.max(rel_err(an, fd, 1e-3 * scale));
        }
    }
    assert!(worst < 1e-3, "worst relative error {worst}");
}

#[test]
fn total_gradient_matches_finite_differences() {
    let g = Grid::unit([10, 10, 10]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let b = random_volume(g, &mut rng);
    let f = random_volume(g, &mut rng);
    let u_bf = noisy_field(g, 1.0, &mut rng);
    let u_fb = noisy_field(g, 1.0, &mut rng);
    let m_bf = random_mask(g, 0.1, &mut rng);
    let m_fb = random_mask(g, 0.1, &mut rng);
    let w = LossWeights::default();
    let out = total_loss(&b, &f, &u_bf, &u_fb, &m_bf, &m_fb, &w, 2).unwrap();
    let scale = out.grad_bf.iter().chain(&out.grad_fb).flat_map(|v| v.iter()).fold(0.0f64, |m, x| m.max(x.abs()));
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let dir = rng.random_range(0..2);
        let i = rng.random_range(0..g.len());
        let k = rng.random_range(0..3);
        let eval = |delta: f64| {
            let (mut a, mut c) = (u_bf.clone(), u_fb.clone());
            let target = if dir == 0 { &mut a } else { &mut c };
            let mut d = target.data().to_vec();
            d[i][k] += delta;
            *target = DisplacementField::new(g, d).unwrap();
            total_loss(&b, &f, &a, &c, &m_bf, &m_fb, &w, 2).unwrap().breakdown.total
        };
        let fd = (eval(H) - eval(-H)) / (2.0 * H);
        let an = if dir == 0 { out.grad_bf[i][k] } else { out.grad_fb[i][k] };
        worst = worst.max(rel_err(an, fd, 1e-3 * scale));
    }
    assert!(worst < 1e-3, "worst relative error {worst}");
}
