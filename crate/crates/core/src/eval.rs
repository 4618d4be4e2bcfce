//! Landmark-based evaluation: target registration error, robustness, and
//! the fraction of folded voxels.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{jacobian_det, DisplacementField};
use crate::scalar::{lit, to_f64, Real};
use crate::volume::{Grid, Mask};

/// Default radius of the "near lesion" zone.
pub const NEAR_DISTANCE_MM: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Frame {
    Baseline,
    Followup,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub id: u32,
    pub x_mm: f64,
    pub y_mm: f64,
    pub z_mm: f64,
}

impl Landmark {
    pub fn new(id: u32, p: [f64; 3]) -> Self {
        Self { id, x_mm: p[0], y_mm: p[1], z_mm: p[2] }
    }

    pub fn position(&self) -> [f64; 3] {
        [self.x_mm, self.y_mm, self.z_mm]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSet {
    pub frame: Frame,
    entries: Vec<Landmark>,
}

impl LandmarkSet {
    pub fn new(frame: Frame, entries: Vec<Landmark>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for l in &entries {
            if !seen.insert(l.id) {
                return Err(Error::invalid(format!("duplicate landmark id {}", l.id)));
            }
            if l.position().iter().any(|c| !c.is_finite()) {
                return Err(Error::invalid(format!("landmark {} has a non-finite position", l.id)));
            }
        }
        Ok(Self { frame, entries })
    }

    pub fn entries(&self) -> &[Landmark] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> Vec<u32> {
        self.entries.iter().map(|l| l.id).collect()
    }

    /// Same set with every position moved by `offset` mm.
    pub fn translated(&self, offset: [f64; 3]) -> Self {
        let entries = self
            .entries
            .iter()
            .map(|l| Landmark::new(l.id, std::array::from_fn(|a| l.position()[a] + offset[a])))
            .collect();
        Self { frame: self.frame, entries }
    }

    /// Reads `id,x_mm,y_mm,z_mm` CSV.
    pub fn from_csv_reader(frame: Frame, r: impl Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
        let headers = rdr.headers()?.clone();
        let want = ["id", "x_mm", "y_mm", "z_mm"];
        if headers.iter().collect::<Vec<_>>() != want {
            return Err(Error::invalid(format!("landmark CSV header must be {}, got {:?}", want.join(","), headers)));
        }
        let entries = rdr.deserialize().collect::<std::result::Result<Vec<Landmark>, _>>()?;
        Self::new(frame, entries)
    }

    pub fn read_csv(frame: Frame, path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv_reader(frame, std::fs::File::open(path)?)
    }

    pub fn to_csv_writer(&self, w: impl Write) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        for l in &self.entries {
            wtr.serialize(l)?;
        }
        if self.entries.is_empty() {
            wtr.write_record(["id", "x_mm", "y_mm", "z_mm"])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_csv_writer(std::fs::File::create(path)?)
    }
}

/// Propagated landmarks plus the ids skipped for lying outside the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Propagation {
    pub landmarks: LandmarkSet,
    pub excluded: Vec<u32>,
}

/// Maps follow-up landmarks into the baseline frame: `x ↦ x + u_bf(x)`,
/// with the field interpolated trilinearly and spacing taken from its grid.
pub fn propagate_landmarks<T: Real>(lms_f: &LandmarkSet, u_bf: &DisplacementField<T>) -> Propagation {
    let g = u_bf.grid();
    let mut entries = Vec::with_capacity(lms_f.len());
    let mut excluded = Vec::new();
    for l in lms_f.entries() {
        let v = g.mm_to_voxel(l.position());
        if !g.contains_voxel(v) {
            excluded.push(l.id);
            continue;
        }
        let u = u_bf.sample_at(v.map(lit::<T>));
        let moved = [v[0] + to_f64(u[0]), v[1] + to_f64(u[1]), v[2] + to_f64(u[2])];
        entries.push(Landmark::new(l.id, g.voxel_to_mm(moved)));
    }
    Propagation { landmarks: LandmarkSet { frame: Frame::Baseline, entries }, excluded }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreStats {
    /// `(id, distance mm)` in ascending id order.
    pub per_landmark: Vec<(u32, f64)>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Euclidean distance per matched id. Every id must appear in both sets.
pub fn tre(a: &LandmarkSet, b: &LandmarkSet) -> Result<TreStats> {
    let ma: BTreeMap<u32, [f64; 3]> = a.entries().iter().map(|l| (l.id, l.position())).collect();
    let mb: BTreeMap<u32, [f64; 3]> = b.entries().iter().map(|l| (l.id, l.position())).collect();
    let only_in_first: Vec<u32> = ma.keys().filter(|k| !mb.contains_key(k)).copied().collect();
    let only_in_second: Vec<u32> = mb.keys().filter(|k| !ma.contains_key(k)).copied().collect();
    if !only_in_first.is_empty() || !only_in_second.is_empty() {
        return Err(Error::LandmarkMismatch { only_in_first, only_in_second });
    }
    let per_landmark: Vec<(u32, f64)> = ma.iter().map(|(id, p)| (*id, dist(*p, mb[id]))).collect();
    let (mean, std) = mean_std(&per_landmark.iter().map(|x| x.1).collect::<Vec<_>>());
    Ok(TreStats { per_landmark, mean, std })
}

/// Fraction of landmarks whose error strictly decreased.
pub fn robustness(tre_before: &[f64], tre_after: &[f64]) -> Result<f64> {
    if tre_before.len() != tre_after.len() {
        return Err(Error::invalid(format!(
            "robustness needs equal lengths, got {} and {}",
            tre_before.len(),
            tre_after.len()
        )));
    }
    if tre_before.is_empty() {
        return Ok(f64::NAN);
    }
    let ok = tre_before.iter().zip(tre_after).filter(|(b, a)| a < b).count();
    Ok(ok as f64 / tre_before.len() as f64)
}

/// Percentage of voxels whose Jacobian determinant is ≤ 0.
pub fn neg_jacobian_pct<T: Real>(u: &DisplacementField<T>) -> f64 {
    let det = jacobian_det(u);
    let folded = det.data().iter().filter(|&&d| d <= T::zero()).count();
    100.0 * folded as f64 / det.data().len() as f64
}

/// Distance in mm from `p_mm` to the nearest voxel of `mask`; infinite for
/// an empty mask.
pub fn distance_to_mask_mm(mask: &Mask, p_mm: [f64; 3]) -> f64 {
    let g: &Grid = mask.grid();
    mask.data()
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| {
            let c = g.coords(i);
            dist(g.voxel_to_mm([c[0] as f64, c[1] as f64, c[2] as f64]), p_mm)
        })
        .fold(f64::INFINITY, f64::min)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkError {
    pub id: u32,
    pub initial_mm: f64,
    pub tre_mm: f64,
    /// Distance from the baseline landmark to the lesion mask, when given.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lesion_distance_mm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub n: usize,
    pub initial_tre_mean: f64,
    pub tre_mean: f64,
    pub tre_std: f64,
    pub robustness: f64,
}

impl GroupMetrics {
    fn from_errors<'a>(errs: impl Iterator<Item = &'a LandmarkError>) -> Self {
        let errs: Vec<&LandmarkError> = errs.collect();
        let before: Vec<f64> = errs.iter().map(|e| e.initial_mm).collect();
        let after: Vec<f64> = errs.iter().map(|e| e.tre_mm).collect();
        let (tre_mean, tre_std) = mean_std(&after);
        Self {
            n: errs.len(),
            initial_tre_mean: mean_std(&before).0,
            tre_mean,
            tre_std,
            robustness: robustness(&before, &after).unwrap_or(f64::NAN),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tre_per_landmark: Vec<LandmarkError>,
    pub initial_tre_mean: f64,
    pub tre_mean: f64,
    pub tre_std: f64,
    pub robustness: f64,
    pub neg_jac_pct: f64,
    pub wall_time: f64,
    pub excluded: Vec<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub near: Option<GroupMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub far: Option<GroupMetrics>,
}

/// Optional near/far split around a lesion mask given on the baseline grid.
#[derive(Clone, Copy, Debug)]
pub struct LesionSplit<'a> {
    pub mask: &'a Mask,
    pub distance_mm: f64,
}

/// Full report for a follow-up→baseline field and paired landmarks.
pub fn evaluate<T: Real>(
    u_bf: &DisplacementField<T>,
    lms_f: &LandmarkSet,
    lms_b: &LandmarkSet,
    split: Option<LesionSplit<'_>>,
    wall_time: f64,
) -> Result<MetricsReport> {
    let prop = propagate_landmarks(lms_f, u_bf);
    let kept: BTreeSet<u32> = prop.landmarks.ids().into_iter().collect();
    let restrict = |s: &LandmarkSet| -> Result<LandmarkSet> {
        LandmarkSet::new(s.frame, s.entries().iter().filter(|l| kept.contains(&l.id)).copied().collect())
    };
    let gt_b = restrict(lms_b)?;
    let after = tre(&prop.landmarks, &gt_b)?;
    let before = tre(&restrict(lms_f)?, &gt_b)?;
    let b_pos: BTreeMap<u32, [f64; 3]> = gt_b.entries().iter().map(|l| (l.id, l.position())).collect();

    let errors: Vec<LandmarkError> = after
        .per_landmark
        .iter()
        .zip(&before.per_landmark)
        .map(|(&(id, t), &(_, init))| LandmarkError {
            id,
            initial_mm: init,
            tre_mm: t,
            lesion_distance_mm: split.map(|s| distance_to_mask_mm(s.mask, b_pos[&id])),
        })
        .collect();
    let all = GroupMetrics::from_errors(errors.iter());
    let (near, far) = match split {
        Some(s) => (
            Some(GroupMetrics::from_errors(errors.iter().filter(|e| e.lesion_distance_mm.unwrap() <= s.distance_mm))),
            Some(GroupMetrics::from_errors(errors.iter().filter(|e| e.lesion_distance_mm.unwrap() > s.distance_mm))),
        ),
        None => (None, None),
    };
    Ok(MetricsReport {
        tre_per_landmark: errors,
        initial_tre_mean: all.initial_tre_mean,
        tre_mean: all.tre_mean,
        tre_std: all.tre_std,
        robustness: all.robustness,
        neg_jac_pct: neg_jacobian_pct(u_bf),
        wall_time,
        excluded: prop.excluded,
        near,
        far,
    })
}

impl MetricsReport {
    pub const CSV_HEADER: [&'static str; 14] = [
        "n_landmarks",
        "initial_tre_mean",
        "tre_mean",
        "tre_std",
        "robustness",
        "neg_jac_pct",
        "wall_time",
        "near_n",
        "near_tre_mean",
        "near_robustness",
        "far_n",
        "far_tre_mean",
        "far_robustness",
        "excluded",
    ];

    /// Header plus one data row, for aggregating cases into a table.
    pub fn write_csv_row(&self, w: impl Write) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(Self::CSV_HEADER)?;
        let opt = |g: &Option<GroupMetrics>, f: fn(&GroupMetrics) -> String| g.as_ref().map(f).unwrap_or_default();
        wtr.write_record([
            self.tre_per_landmark.len().to_string(),
            self.initial_tre_mean.to_string(),
            self.tre_mean.to_string(),
            self.tre_std.to_string(),
            self.robustness.to_string(),
            self.neg_jac_pct.to_string(),
            self.wall_time.to_string(),
            opt(&self.near, |g| g.n.to_string()),
            opt(&self.near, |g| g.tre_mean.to_string()),
            opt(&self.near, |g| g.robustness.to_string()),
            opt(&self.far, |g| g.n.to_string()),
            opt(&self.far, |g| g.tre_mean.to_string()),
            opt(&self.far, |g| g.robustness.to_string()),
            self.excluded.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(";"),
        ])?;
        wtr.flush()?;
        Ok(())
    }
}
