//! Geometry, mask and metric operations against independent naive
//! implementations and hand-derived values.

use absentreg::eval::{neg_jacobian_pct, propagate_landmarks, robustness, tre, Frame, Landmark, LandmarkSet};
use absentreg::fbc::{absent_mask, estimate_masks, fb_error, fb_threshold, FbError};
use absentreg::field::{jacobian_det, resample_field, sample_field, upsample_field, warp};
use absentreg::losses::{masked_ncc, similarity_loss, total_loss, LossWeights};
use absentreg::synth::{make_case, random_smooth_field, texture_volume, SynthConfig, Texture};
use absentreg::{Alpha, DisplacementField, FbcParams, Grid, Mask, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Eight-corner trilinear sum with explicit clamping.
fn corner_sum(data: &[f64], d: [usize; 3], p: [f64; 3]) -> f64 {
    let mut lo = [0usize; 3];
    let mut t = [0.0; 3];
    for a in 0..3 {
        let c = p[a].clamp(0.0, (d[a] - 1) as f64);
        lo[a] = (c.floor() as usize).min(d[a] - 1);
        t[a] = c - lo[a] as f64;
    }
    let mut s = 0.0;
    for dz in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                let x = (lo[0] + dx).min(d[0] - 1);
                let y = (lo[1] + dy).min(d[1] - 1);
                let z = (lo[2] + dz).min(d[2] - 1);
                let w = (if dx == 1 { t[0] } else { 1.0 - t[0] })
                    * (if dy == 1 { t[1] } else { 1.0 - t[1] })
                    * (if dz == 1 { t[2] } else { 1.0 - t[2] });
                s += w * data[x + d[0] * (y + d[1] * z)];
            }
        }
    }
    s
}

fn random_volume(g: Grid, rng: &mut ChaCha8Rng) -> Volume<f64> {
    Volume::new(g, (0..g.len()).map(|_| rng.random::<f64>()).collect()).unwrap()
}

fn smooth_field(g: Grid, amp: f64, seed: u64) -> DisplacementField<f64> {
    random_smooth_field(g, amp, 2.0, seed).unwrap()
}

#[test]
fn trilinear_sample_hand_cases() {
    let g = Grid::unit([4, 5, 3]).unwrap();
    let v = Volume::from_fn(g, |x, y, z| if (x, y, z) == (2, 3, 1) { 5.0 } else { 0.0 }).unwrap();
    assert_eq!(v.trilinear_sample([2.0, 3.0, 1.0]).unwrap(), 5.0);
    let ramp = Volume::from_fn(g, |x, _, _| if x == 0 { 0.0 } else { 10.0 }).unwrap();
    assert_eq!(ramp.trilinear_sample([0.5, 2.0, 1.0]).unwrap(), 5.0);
    assert!(v.trilinear_sample([f64::NAN, 0.0, 0.0]).is_err());
}

#[test]
fn trilinear_sample_matches_corner_sum() {
    let g = Grid::unit([4, 4, 4]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let v = random_volume(g, &mut rng);
    for _ in 0..100 {
        let p = [0, 1, 2].map(|_| rng.random_range(-0.5..3.5));
        let got = v.trilinear_sample(p).unwrap();
        assert!((got - corner_sum(v.data(), g.dims, p)).abs() < 1e-12);
    }
}

#[test]
fn warp_matches_per_voxel_oracle() {
    let g = Grid::unit([9, 8, 7]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let v = random_volume(g, &mut rng);
    let u = smooth_field(g, 2.0, 3);
    let w = warp(&v, &u).unwrap();
    for i in 0..g.len() {
        let c = g.coords(i);
        let p = [0, 1, 2].map(|k| c[k] as f64 + u.data()[i][k]);
        assert!((w.data()[i] - corner_sum(v.data(), g.dims, p)).abs() < 1e-12);
    }
    assert_eq!(warp(&v, &DisplacementField::zeros(g)).unwrap(), v);
}

#[test]
fn sample_field_matches_scalar_oracle_and_linear_case() {
    let g = Grid::unit([10, 6, 6]).unwrap();
    let u = smooth_field(g, 2.0, 4);
    let pts: Vec<[f64; 3]> = (0..g.len())
        .map(|i| {
            let c = g.coords(i);
            [c[0] as f64 + 0.3, c[1] as f64 - 0.7, c[2] as f64 + 1.2]
        })
        .collect();
    let s = sample_field(&u, &pts).unwrap();
    for c in 0..3 {
        let comp = u.component(c);
        for (i, p) in pts.iter().enumerate() {
            assert!((s.data()[i][c] - corner_sum(&comp, g.dims, *p)).abs() < 1e-12);
        }
    }
    let lin = DisplacementField::from_fn(g, |x, _, _| [x as f64 / 10.0, 0.0, 0.0]).unwrap();
    let shifted: Vec<[f64; 3]> =
        (0..g.len()).map(|i| g.coords(i).map(|v| v as f64)).map(|p| [p[0] + 1.0, p[1], p[2]]).collect();
    let s = sample_field(&lin, &shifted).unwrap();
    for i in 0..g.len() {
        let x = g.coords(i)[0];
        if x + 1 < g.dims[0] {
            assert!((s.data()[i][0] - (x as f64 + 1.0) / 10.0).abs() < 1e-12);
        }
    }
    let same: Vec<[f64; 3]> = (0..g.len()).map(|i| g.coords(i).map(|v| v as f64)).collect();
    assert_eq!(sample_field(&u, &same).unwrap(), u);
}

#[test]
fn jacobian_analytic_cases() {
    let g = Grid::unit([8, 8, 8]).unwrap();
    let interior = |x: usize, y: usize, z: usize| (1..7).contains(&x) && (1..7).contains(&y) && (1..7).contains(&z);
    let expand = DisplacementField::from_fn(g, |x, y, z| [0.1 * x as f64, 0.1 * y as f64, 0.1 * z as f64]).unwrap();
    let det = jacobian_det(&expand);
    for i in 0..g.len() {
        let [x, y, z] = g.coords(i);
        if interior(x, y, z) {
            assert!((det.data()[i] - 1.331).abs() < 1e-10);
        }
    }
    let fold = DisplacementField::from_fn(g, |x, _, _| [-2.0 * x as f64, 0.0, 0.0]).unwrap();
    let det = jacobian_det(&fold);
    assert!(det.data().iter().all(|&d| (d + 1.0).abs() < 1e-10));
    assert_eq!(neg_jacobian_pct(&fold), 100.0);
    assert!(jacobian_det(&DisplacementField::constant(g, [1.5, -2.0, 0.3])).data().iter().all(|&d| d == 1.0));
    // Affine fields: central and one-sided differences are exact everywhere.
    let a = [[0.1, -0.2, 0.05], [0.0, 0.3, -0.1], [0.2, 0.1, -0.15]];
    let aff = DisplacementField::from_fn(g, |x, y, z| {
        let p = [x as f64, y as f64, z as f64];
        [0, 1, 2].map(|r| a[r][0] * p[0] + a[r][1] * p[1] + a[r][2] * p[2])
    })
    .unwrap();
    let m = [[1.0 + a[0][0], a[0][1], a[0][2]], [a[1][0], 1.0 + a[1][1], a[1][2]], [a[2][0], a[2][1], 1.0 + a[2][2]]];
    let expected = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    assert!(jacobian_det(&aff).data().iter().all(|&d| (d - expected).abs() < 1e-10));
}

#[test]
fn upsampling_scales_vectors_and_round_trips() {
    let g8 = Grid::unit([8, 8, 8]).unwrap();
    let up = upsample_field(&DisplacementField::constant(g8, [1.0f64, 0.0, 0.0]), [16, 16, 16]).unwrap();
    assert!(up.data().iter().all(|v| (v[0] - 2.0).abs() < 1e-12 && v[1] == 0.0 && v[2] == 0.0));
    let u = random_smooth_field::<f64>(Grid::unit([16, 16, 16]).unwrap(), 1.5, 6.0, 9).unwrap();
    assert_eq!(upsample_field(&u, [16, 16, 16]).unwrap(), u);
    let back = resample_field(&upsample_field(&u, [32, 32, 32]).unwrap(), [16, 16, 16]).unwrap();
    let worst = back
        .data()
        .iter()
        .zip(u.data())
        .flat_map(|(a, b)| (0..3).map(move |k| (a[k] - b[k]).abs()))
        .fold(0.0, f64::max);
    assert!(worst < 0.05, "round trip error {worst}");
}

#[test]
fn resample_identity_constant_and_ramp() {
    let g = Grid::new([10, 12, 8], [1.0, 2.0, 1.5]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let v = random_volume(g, &mut rng);
    assert_eq!(v.resample([10, 12, 8]).unwrap(), v);
    let c = Volume::constant(g, 0.7f64).resample([5, 17, 4]).unwrap();
    assert!(c.data().iter().all(|&x| (x - 0.7).abs() < 1e-12));
    assert_eq!(c.spacing(), [2.0, 12.0 * 2.0 / 17.0, 3.0]);
    let ramp = Volume::from_fn(Grid::unit([32, 32, 32]).unwrap(), |x, y, _| (x + y) as f64).unwrap();
    let rt = ramp.resample([16, 16, 16]).unwrap().resample([32, 32, 32]).unwrap();
    let worst = rt.data().iter().zip(ramp.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst < 0.05 * 62.0, "ramp error {worst}");
}

#[test]
fn foreground_counts() {
    let g = Grid::unit([5, 5, 5]).unwrap();
    assert_eq!(Volume::constant(g, 0.0).foreground().count(), 0);
    assert_eq!(Volume::constant(g, 0.2).foreground().count(), 125);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let picks: Vec<bool> = (0..125).map(|_| rng.random::<f64>() < 0.3).collect();
    let k = picks.iter().filter(|&&b| b).count();
    let v = Volume::new(g, picks.iter().map(|&b| if b { 0.5 } else { 0.0 }).collect()).unwrap();
    assert_eq!(v.foreground().count(), k);
    assert_eq!(v.resample([5, 5, 5]).unwrap().foreground(), v.foreground());
}

#[test]
fn fb_error_hand_cases() {
    let g = Grid::unit([12, 6, 6]).unwrap();
    let d =
        fb_error(&DisplacementField::constant(g, [2.0, 0.0, 0.0]), &DisplacementField::constant(g, [-2.0, 0.0, 0.0]))
            .unwrap();
    assert!(d.data().iter().all(|&v| v == 0.0));
    let d = fb_error(&DisplacementField::constant(g, [1.5, 0.0, 0.0]), &DisplacementField::zeros(g)).unwrap();
    assert!(d.data().iter().all(|&v| v == 1.5));
    let bwd = DisplacementField::from_fn(g, |x, _, _| [-(x as f64) / 10.0, 0.0, 0.0]).unwrap();
    let d = fb_error(&DisplacementField::constant(g, [1.0, 0.0, 0.0]), &bwd).unwrap();
    for i in 0..g.len() {
        let x = g.coords(i)[0];
        if x + 1 < g.dims[0] {
            assert!((d.data()[i] - (1.0 - (x as f64 + 1.0) / 10.0).abs()).abs() < 1e-12);
        }
    }
}

#[test]
fn threshold_hand_cases() {
    let g = Grid::unit([6, 6, 6]).unwrap();
    let fg = Mask::full(g);
    let params = FbcParams { alpha: Alpha::Voxels(0.25), p: 4 };
    let tau = |vals: Vec<f64>| {
        fb_threshold(&FbError::from_volume(Volume::new(g, vals).unwrap()).unwrap(), &fg, &params).unwrap()
    };
    assert_eq!(tau(vec![0.0; 216]), 0.25);
    assert_eq!(tau(vec![1.0; 216]), 1.25);
    assert_eq!(tau((0..216).map(|i| if i % 2 == 0 { 2.0 } else { 0.0 }).collect()), 1.25);
    let empty = fb_threshold(&FbError::from_volume(Volume::constant(g, 1.0)).unwrap(), &Mask::empty(g), &params);
    assert!(empty.is_err());
}

#[test]
fn absent_mask_impulse_and_p_zero() {
    let g = Grid::unit([11, 11, 11]).unwrap();
    let params = FbcParams { alpha: Alpha::Voxels(0.1), p: 4 };
    let tau = 0.3;
    let impulse = Volume::from_fn(g, |x, y, z| if (x, y, z) == (5, 5, 5) { 2.0 * tau * 729.0 } else { 0.0 }).unwrap();
    let m = absent_mask(&FbError::from_volume(impulse).unwrap(), tau, &params).unwrap();
    assert!(m.get(5, 5, 5));
    // Every voxel within the 9³ box sees the impulse, nothing beyond.
    assert!(m.get(1, 9, 5) && !m.get(0, 5, 5));
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let delta =
        FbError::from_volume(Volume::new(g, (0..g.len()).map(|_| rng.random::<f64>()).collect()).unwrap()).unwrap();
    let p0 = FbcParams { p: 0, ..params };
    let m = absent_mask(&delta, 0.5, &p0).unwrap();
    for i in 0..g.len() {
        assert_eq!(m.data()[i], delta.data()[i] >= 0.5);
    }
    assert!(absent_mask(&delta, 0.0, &p0).is_err());
}

#[test]
fn estimate_masks_trivial_cases() {
    let g = Grid::unit([10, 10, 10]).unwrap();
    let fg = Mask::full(g);
    let params = FbcParams::default();
    let z = DisplacementField::<f64>::zeros(g);
    let m = estimate_masks(&z, &z, &fg, &fg, &params).unwrap();
    assert_eq!(m.m_bf.count() + m.m_fb.count(), 0);
    assert_eq!(m.tau_bf, params.alpha.resolve(&g));
    let a = DisplacementField::constant(g, [1.0, -0.5, 0.25]);
    let b = DisplacementField::constant(g, [-1.0, 0.5, -0.25]);
    let m = estimate_masks(&a, &b, &fg, &fg, &params).unwrap();
    assert_eq!(m.m_bf.count() + m.m_fb.count(), 0);
}

#[test]
fn similarity_and_total_hand_cases() {
    let g = Grid::unit([10, 10, 10]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let v: Volume<f64> = texture_volume(g, Texture::CheckerSmooth, &mut rng);
    let z = DisplacementField::zeros(g);
    let (empty, full) = (Mask::empty(g), Mask::full(g));
    let self_ncc = masked_ncc(&v, &v, &full, 3).unwrap().value;
    assert!(self_ncc > 0.999, "self NCC {self_ncc}");
    let s = similarity_loss(&v, &v, &z, &z, &empty, &empty, 3).unwrap();
    assert!((s.value + 2.0 * self_ncc).abs() < 1e-12);
    let s = similarity_loss(&v, &v, &z, &z, &full, &full, 3).unwrap();
    assert_eq!(s.value, 0.0);
    assert!(s.degenerate_bf && s.degenerate_fb);
    let w = LossWeights::default();
    let t = total_loss(&v, &v, &z, &z, &empty, &empty, &w, 3).unwrap();
    assert!((t.breakdown.total - 0.7 * s_value(&v)).abs() < 1e-12);
    assert!(t.breakdown.total <= -1.39);
    let t = total_loss(&v, &v, &z, &z, &full, &full, &w, 3).unwrap();
    assert_eq!(t.breakdown.sim, 0.0);
    assert_eq!(t.breakdown.inv, 0.0);
    assert!((t.breakdown.total - 2.0 * w.lambda_m).abs() < 1e-15);
}

fn s_value(v: &Volume<f64>) -> f64 {
    let g = *v.grid();
    -2.0 * masked_ncc(v, v, &Mask::full(g), 3).unwrap().value
}

#[test]
fn ncc_uses_only_valid_centres() {
    let g = Grid::unit([9, 9, 9]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (t, w) = (random_volume(g, &mut rng), random_volume(g, &mut rng));
    let all = absentreg::losses::local_cc(&t, &w, 2).unwrap();
    let keep = Mask::new(g, (0..g.len()).map(|_| rng.random::<f64>() < 0.4).collect()).unwrap();
    let expected: f64 =
        all.iter().zip(keep.data()).filter(|(_, &k)| k).map(|(c, _)| c).sum::<f64>() / keep.count() as f64;
    let got = masked_ncc(&t, &w, &keep, 2).unwrap().value;
    assert!((got - expected).abs() < 1e-12);
}

#[test]
fn metric_hand_cases() {
    let a = LandmarkSet::new(Frame::Baseline, vec![Landmark::new(1, [1.0, 2.0, 3.0])]).unwrap();
    let b = LandmarkSet::new(Frame::Baseline, vec![Landmark::new(1, [4.0, 6.0, 3.0])]).unwrap();
    assert_eq!(tre(&a, &b).unwrap().mean, 5.0);
    assert_eq!(robustness(&[2.0, 3.0, 4.0, 5.0], &[1.0, 2.0, 3.0, 6.0]).unwrap(), 0.75);
    assert_eq!(robustness(&[1.0, 2.0], &[0.5, 0.1]).unwrap(), 1.0);
    assert_eq!(robustness(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
    assert!(robustness(&[1.0], &[1.0, 2.0]).is_err());
    let c = LandmarkSet::new(Frame::Baseline, vec![Landmark::new(2, [0.0; 3])]).unwrap();
    assert!(tre(&a, &c).is_err());
}

#[test]
fn propagation_unit_conversion() {
    let g = Grid::new([10, 10, 10], [1.5, 1.5, 1.94]).unwrap();
    let lms =
        LandmarkSet::new(Frame::Followup, vec![Landmark::new(1, [3.0, 4.5, 3.88]), Landmark::new(2, [99.0, 0.0, 0.0])])
            .unwrap();
    let p = propagate_landmarks(&lms, &DisplacementField::<f64>::constant(g, [2.0, 0.0, 0.0]));
    assert_eq!(p.excluded, vec![2]);
    let e = p.landmarks.entries()[0].position();
    assert!((e[0] - 6.0).abs() < 1e-12 && (e[1] - 4.5).abs() < 1e-12 && (e[2] - 3.88).abs() < 1e-12);
    let p = propagate_landmarks(&lms, &DisplacementField::<f64>::zeros(g));
    assert_eq!(p.landmarks.entries()[0].position(), [3.0, 4.5, 3.88]);
}

#[test]
fn synth_ground_truth_is_exact() {
    let cfg = SynthConfig {
        dims: [32, 32, 32],
        field_amplitude: 2.0,
        field_smoothness: 5.0,
        lesion_radius: 4.0,
        n_landmarks: 12,
        ..Default::default()
    };
    let case = make_case::<f64>(&cfg).unwrap();
    // Landmark pairs follow the field exactly.
    let p = propagate_landmarks(&case.lms_f, &case.gt_u_bf);
    assert!(p.excluded.is_empty());
    assert!(tre(&p.landmarks, &case.lms_b).unwrap().per_landmark.iter().all(|&(_, d)| d < 1e-9));
    // Outside the lesion and its rim, F is the warped baseline texture.
    let clean = make_case::<f64>(&SynthConfig { lesion_count: 0, ..cfg.clone() }).unwrap();
    assert_eq!(clean.f, warp(&clean.b, &clean.gt_u_bf).unwrap());
    assert!(case.lesion_mask_b.count() > 0 && case.lesion_mask_f.count() > 0);
    for l in case.lms_f.entries() {
        let v = l.position().map(|c| c.round() as usize);
        assert!(!case.lesion_mask_f.get(v[0], v[1], v[2]));
    }
    let zero = make_case::<f64>(&SynthConfig { lesion_count: 0, field_amplitude: 0.0, ..cfg }).unwrap();
    assert_eq!(zero.b, zero.f);
    assert_eq!(zero.lms_b.entries(), zero.lms_f.entries());
}

#[test]
fn random_field_respects_amplitude_and_jacobian() {
    let g = Grid::unit([24, 24, 24]).unwrap();
    for seed in 0..3 {
        let u: DisplacementField<f64> = random_smooth_field(g, 2.5, 4.0, seed).unwrap();
        assert!((u.max_norm() - 2.5).abs() < 1e-6);
        assert!(jacobian_det(&u).data().iter().all(|&d| d > 0.1));
        assert_eq!(u, random_smooth_field(g, 2.5, 4.0, seed).unwrap());
    }
    assert!(random_smooth_field::<f64>(g, 0.0, 4.0, 1).unwrap().data().iter().all(|v| *v == [0.0; 3]));
}
