//! Registers one synthetic lesion case and reports landmark error and how
//! well the masks find the lesions.
//!
//! cargo run --release --example synthetic_pair -- [seed]

use absentreg::eval::{evaluate, LesionSplit};
use absentreg::field::warp_mask;
use absentreg::synth::{make_case, SynthConfig};
use absentreg::{register_pair, RegistrationConfig};

fn main() -> absentreg::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let case = make_case::<f32>(&SynthConfig { seed, ..Default::default() })?;
    let res = register_pair(&case.b, &case.f, &RegistrationConfig::default())?;

    let split = LesionSplit { mask: &case.lesion_mask_b, distance_mm: 12.0 };
    let report = evaluate(&res.u_bf, &case.lms_f, &case.lms_b, Some(split), res.wall_time)?;
    println!(
        "TRE {:.3} mm (initial {:.3}), |J|<=0 {:.3}%, {:.1}s",
        report.tre_mean, report.initial_tre_mean, report.neg_jac_pct, res.wall_time
    );

    let found = res.m_bf.union(&warp_mask(&res.m_fb, &res.u_bf)?)?;
    let truth = case.lesion_mask_f.union(&warp_mask(&case.lesion_mask_b, &case.gt_u_bf)?)?;
    println!("mask voxels {}, lesion voxels {}, Dice {:.3}", found.count(), truth.count(), found.dice(&truth)?);
    Ok(())
}
