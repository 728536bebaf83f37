//! Registration quality metrics: landmark TRE, masked MAE and NCC, bone DSC
//! and a Jacobian-determinant fold check.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::transform::Dvf;
use crate::volume::{index, threshold_mask, Mask, Volume, BODY_HU, BONE_HU};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub id: u32,
    /// Physical position relative to the centre of voxel (0, 0, 0).
    pub position_mm: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LandmarkSet {
    entries: Vec<Landmark>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LandmarkRow {
    id: u32,
    x_mm: f64,
    y_mm: f64,
    z_mm: f64,
}

impl LandmarkSet {
    pub fn new(entries: Vec<Landmark>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.id) {
                return Err(Error::Landmark(format!("duplicate landmark id {}", e.id)));
            }
            if e.position_mm.iter().any(|v| !v.is_finite()) {
                return Err(Error::Landmark(format!("landmark {} is not finite", e.id)));
            }
        }
        Ok(Self { entries })
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

    /// Checks that every landmark lies inside the physical extent of a grid.
    pub fn check_inside(&self, dims: [usize; 3], spacing: [f64; 3]) -> Result<()> {
        for e in &self.entries {
            for a in 0..3 {
                let hi = (dims[a] - 1) as f64 * spacing[a];
                let p = e.position_mm[a];
                if p < -0.5 * spacing[a] || p > hi + 0.5 * spacing[a] {
                    return Err(Error::Landmark(format!(
                        "landmark {} at {:?} mm lies outside the volume",
                        e.id, e.position_mm
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["id", "x_mm", "y_mm", "z_mm"] {
            return Err(Error::Landmark(format!(
                "{} must have header id,x_mm,y_mm,z_mm",
                path.display()
            )));
        }
        let mut entries = Vec::new();
        for row in rdr.deserialize() {
            let row: LandmarkRow = row?;
            entries.push(Landmark {
                id: row.id,
                position_mm: [row.x_mm, row.y_mm, row.z_mm],
            });
        }
        Self::new(entries)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        for e in &self.entries {
            wtr.serialize(LandmarkRow {
                id: e.id,
                x_mm: e.position_mm[0],
                y_mm: e.position_mm[1],
                z_mm: e.position_mm[2],
            })?;
        }
        let bytes = wtr
            .into_inner()
            .map_err(|e| Error::Landmark(e.to_string()))?;
        write_atomic(path, &bytes)
    }
}

/// Carry moving-image landmarks into the deformed (target) frame.
///
/// The DVF is a pull-back field, so the image of a moving point `m` is the
/// point `p` with `p + u(p) = m`; it is found by fixed-point iteration on the
/// trilinearly sampled field.
pub fn map_landmarks(moving: &LandmarkSet, dvf: &Dvf, spacing: [f64; 3]) -> LandmarkSet {
    let entries = moving
        .entries
        .iter()
        .map(|lm| {
            let m: [f64; 3] = std::array::from_fn(|a| lm.position_mm[a] / spacing[a]);
            let mut p = m;
            for _ in 0..200 {
                let u = dvf.sample(p);
                let next: [f64; 3] = std::array::from_fn(|a| m[a] - u[a]);
                let step = (0..3).map(|a| (next[a] - p[a]).abs()).fold(0.0, f64::max);
                p = next;
                if step < 1e-10 {
                    break;
                }
            }
            Landmark {
                id: lm.id,
                position_mm: std::array::from_fn(|a| p[a] * spacing[a]),
            }
        })
        .collect();
    LandmarkSet { entries }
}

/// Euclidean distance (mm) per landmark id, in the order of `target`.
pub fn tre(deformed: &LandmarkSet, target: &LandmarkSet) -> Result<Vec<f64>> {
    if deformed.len() != target.len() {
        return Err(Error::Landmark(format!(
            "{} deformed vs {} target landmarks",
            deformed.len(),
            target.len()
        )));
    }
    let by_id: HashMap<u32, [f64; 3]> = deformed
        .entries
        .iter()
        .map(|e| (e.id, e.position_mm))
        .collect();
    target
        .entries
        .iter()
        .map(|t| {
            let d = by_id
                .get(&t.id)
                .ok_or_else(|| Error::Landmark(format!("landmark id {} has no partner", t.id)))?;
            Ok((0..3)
                .map(|a| (d[a] - t.position_mm[a]).powi(2))
                .sum::<f64>()
                .sqrt())
        })
        .collect()
}

fn check_dims(a: [usize; 3], b: [usize; 3], what: &str) -> Result<()> {
    if a != b {
        return Err(Error::DimMismatch(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Mean absolute HU difference over the body mask.
pub fn mae(deformed: &Volume, target: &Volume, body: &Mask) -> Result<f64> {
    check_dims(deformed.dims(), target.dims(), "mae volumes")?;
    check_dims(deformed.dims(), body.dims(), "mae mask")?;
    let count = body.count();
    if count == 0 {
        return Err(Error::Degenerate("MAE over an empty mask".into()));
    }
    let sum: f64 = deformed
        .voxels()
        .iter()
        .zip(target.voxels())
        .zip(body.bits())
        .filter(|(_, &m)| m)
        .map(|((&d, &t), _)| (d as f64 - t as f64).abs())
        .sum();
    Ok(sum / count as f64)
}

/// Pearson correlation of the two images over the body mask.
pub fn ncc_metric(deformed: &Volume, target: &Volume, body: &Mask) -> Result<f64> {
    check_dims(deformed.dims(), target.dims(), "ncc volumes")?;
    check_dims(deformed.dims(), body.dims(), "ncc mask")?;
    let pairs: Vec<(f64, f64)> = deformed
        .voxels()
        .iter()
        .zip(target.voxels())
        .zip(body.bits())
        .filter(|(_, &m)| m)
        .map(|((&d, &t), _)| (d as f64, t as f64))
        .collect();
    if pairs.is_empty() {
        return Err(Error::Degenerate("NCC over an empty mask".into()));
    }
    let n = pairs.len() as f64;
    let md = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mt = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut cov, mut vd, mut vt) = (0.0, 0.0, 0.0);
    for (d, t) in &pairs {
        cov += (d - md) * (t - mt);
        vd += (d - md).powi(2);
        vt += (t - mt).powi(2);
    }
    if vd == 0.0 || vt == 0.0 {
        return Err(Error::Degenerate("zero masked variance in NCC".into()));
    }
    Ok((cov / (vd * vt).sqrt()).clamp(-1.0, 1.0))
}

/// Dice overlap `2|A∩B| / (|A| + |B|)`.
pub fn dsc(a: &Mask, b: &Mask) -> Result<f64> {
    check_dims(a.dims(), b.dims(), "dsc masks")?;
    let na = a.count();
    let nb = b.count();
    if na + nb == 0 {
        return Err(Error::Degenerate("DSC of two empty masks".into()));
    }
    let inter = a
        .bits()
        .iter()
        .zip(b.bits())
        .filter(|(&x, &y)| x && y)
        .count();
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JacobianReport {
    pub min_determinant: f64,
    pub fold_fraction: f64,
}

/// det(I + ∇u) on interior voxels with central differences. Grids without
/// interior voxels report the identity (det 1, no folds).
pub fn jacobian_report(dvf: &Dvf) -> JacobianReport {
    let d = dvf.dims();
    if d.iter().any(|&n| n < 3) {
        return JacobianReport {
            min_determinant: 1.0,
            fold_fraction: 0.0,
        };
    }
    let comp: Vec<&[f32]> = (0..3).map(|c| dvf.component(c)).collect();
    let mut min_det = f64::INFINITY;
    let mut folds = 0usize;
    let mut count = 0usize;
    for z in 1..d[2] - 1 {
        for y in 1..d[1] - 1 {
            for x in 1..d[0] - 1 {
                let mut j = [[0.0f64; 3]; 3];
                for (c, u) in comp.iter().enumerate() {
                    j[c][0] = (u[index(d, x + 1, y, z)] as f64 - u[index(d, x - 1, y, z)] as f64) / 2.0;
                    j[c][1] = (u[index(d, x, y + 1, z)] as f64 - u[index(d, x, y - 1, z)] as f64) / 2.0;
                    j[c][2] = (u[index(d, x, y, z + 1)] as f64 - u[index(d, x, y, z - 1)] as f64) / 2.0;
                    j[c][c] += 1.0;
                }
                let det = j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
                    - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
                    + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]);
                min_det = min_det.min(det);
                if det <= 0.0 {
                    folds += 1;
                }
                count += 1;
            }
        }
    }
    JacobianReport {
        min_determinant: min_det,
        fold_fraction: folds as f64 / count as f64,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub fraction: String,
    pub tre_per_landmark: Vec<f64>,
    pub tre_mean: f64,
    /// Sample standard deviation (n - 1).
    pub tre_std: f64,
    pub mae: f64,
    pub ncc: f64,
    pub dsc: f64,
    pub jacobian_min: f64,
    pub fold_fraction: f64,
    pub body_hu: f32,
    pub bone_hu: f32,
}

pub const REPORT_CSV_HEADER: &str = "fraction,tre_mean,tre_std,mae,ncc,dsc,jac_min,fold_frac";

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

impl MetricReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.fraction,
            self.tre_mean,
            self.tre_std,
            self.mae,
            self.ncc,
            self.dsc,
            self.jacobian_min,
            self.fold_fraction
        )
    }

    /// Per-fraction rows followed by an overall row, table style. The overall
    /// TRE pools all landmarks; the image metrics are averaged.
    pub fn to_csv(reports: &[MetricReport]) -> String {
        let mut out = String::from(REPORT_CSV_HEADER);
        out.push('\n');
        for r in reports {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        if let Some(overall) = Self::overall(reports) {
            out.push_str(&overall.csv_row());
            out.push('\n');
        }
        out
    }

    pub fn overall(reports: &[MetricReport]) -> Option<MetricReport> {
        let first = reports.first()?;
        let all_tre: Vec<f64> = reports
            .iter()
            .flat_map(|r| r.tre_per_landmark.iter().cloned())
            .collect();
        let (tre_mean, tre_std) = mean_std(&all_tre);
        let avg = |f: fn(&MetricReport) -> f64| {
            reports.iter().map(f).sum::<f64>() / reports.len() as f64
        };
        Some(MetricReport {
            fraction: "overall".into(),
            tre_per_landmark: all_tre,
            tre_mean,
            tre_std,
            mae: avg(|r| r.mae),
            ncc: avg(|r| r.ncc),
            dsc: avg(|r| r.dsc),
            jacobian_min: reports
                .iter()
                .map(|r| r.jacobian_min)
                .fold(f64::INFINITY, f64::min),
            fold_fraction: avg(|r| r.fold_fraction),
            body_hu: first.body_hu,
            bone_hu: first.bone_hu,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Thresholds {
    pub body_hu: f32,
    pub bone_hu: f32,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            body_hu: BODY_HU,
            bone_hu: BONE_HU,
        }
    }
}

/// All metrics for one registered pair. The body mask comes from the target
/// and is applied to both images.
pub fn evaluate(
    fraction: &str,
    deformed: &Volume,
    target: &Volume,
    dvf: &Dvf,
    landmarks_moving: &LandmarkSet,
    landmarks_target: &LandmarkSet,
    thresholds: Thresholds,
) -> Result<MetricReport> {
    check_dims(deformed.dims(), target.dims(), "evaluate volumes")?;
    check_dims(deformed.dims(), dvf.dims(), "evaluate DVF")?;
    let body = threshold_mask(target, thresholds.body_hu);
    let mapped = map_landmarks(landmarks_moving, dvf, target.spacing());
    let tre_per_landmark = tre(&mapped, landmarks_target)?;
    let (tre_mean, tre_std) = mean_std(&tre_per_landmark);
    let jac = jacobian_report(dvf);
    Ok(MetricReport {
        fraction: fraction.to_string(),
        tre_per_landmark,
        tre_mean,
        tre_std,
        mae: mae(deformed, target, &body)?,
        ncc: ncc_metric(deformed, target, &body)?,
        dsc: dsc(
            &threshold_mask(deformed, thresholds.bone_hu),
            &threshold_mask(target, thresholds.bone_hu),
        )?,
        jacobian_min: jac.min_determinant,
        fold_fraction: jac.fold_fraction,
        body_hu: thresholds.body_hu,
        bone_hu: thresholds.bone_hu,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{make_phantom, Deformation, PhantomSpec};
    use proptest::prelude::*;

    fn set(points: &[(u32, [f64; 3])]) -> LandmarkSet {
        LandmarkSet::new(
            points
                .iter()
                .map(|&(id, position_mm)| Landmark { id, position_mm })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn tre_examples() {
        let a = set(&[(1, [0.0, 0.0, 0.0])]);
        let b = set(&[(1, [3.0, 4.0, 0.0])]);
        assert_eq!(tre(&a, &b).unwrap(), vec![5.0]);
        let c = set(&[(1, [1.0, 2.0, 3.0]), (2, [4.0, 5.0, 6.0])]);
        assert_eq!(tre(&c, &c).unwrap(), vec![0.0, 0.0]);
        assert!(tre(&a, &set(&[(2, [0.0; 3])])).is_err());
        assert!(LandmarkSet::new(vec![
            Landmark { id: 1, position_mm: [0.0; 3] },
            Landmark { id: 1, position_mm: [1.0; 3] },
        ])
        .is_err());
    }

    #[test]
    fn truth_field_maps_landmarks_exactly() {
        let spec = PhantomSpec::new(
            [32, 32, 16],
            11,
            Deformation::GaussianBump {
                center_mm: [14.4, 13.5, 16.0],
                peak_mm: [3.0, 0.0, 0.0],
                sigma_mm: 12.0,
            },
        );
        let p = make_phantom(&spec).unwrap();
        let mapped = map_landmarks(&p.landmarks_moving, &p.truth_dvf, spec.spacing_mm);
        let errs = tre(&mapped, &p.landmarks_target).unwrap();
        assert!(errs.iter().all(|&e| e <= 1e-3), "{errs:?}");
    }

    #[test]
    fn mae_examples() {
        let d = [5, 5, 4];
        let zero = Volume::filled(d, [1.0; 3], 0.0).unwrap();
        let ten = Volume::filled(d, [1.0; 3], 10.0).unwrap();
        let m = Mask::full(d);
        assert_eq!(m.count(), 100);
        assert_eq!(mae(&zero, &zero, &m).unwrap(), 0.0);
        assert_eq!(mae(&ten, &zero, &m).unwrap(), 10.0);
        let empty = Mask::new(d, vec![false; 100]).unwrap();
        assert!(matches!(mae(&ten, &zero, &empty), Err(Error::Degenerate(_))));
    }

    #[test]
    fn ncc_examples() {
        let d = [4, 3, 2];
        let x = Volume::from_fn(d, [1.0; 3], |a, b, c| (a * a + 3 * b + c) as f32).unwrap();
        let full = Mask::full(d);
        assert!((ncc_metric(&x, &x, &full).unwrap() - 1.0).abs() < 1e-12);
        let y = Volume::new(d, [1.0; 3], x.voxels().iter().map(|v| 2.0 * v + 50.0).collect()).unwrap();
        assert!((ncc_metric(&y, &x, &full).unwrap() - 1.0).abs() < 1e-12);
        let flat = Volume::filled(d, [1.0; 3], 3.0).unwrap();
        assert!(ncc_metric(&flat, &x, &full).is_err());
    }

    #[test]
    fn dsc_examples() {
        let d = [10, 4, 1];
        let mk = |f: &dyn Fn(usize) -> bool| Mask::new(d, (0..40).map(f).collect()).unwrap();
        let a = mk(&|i| i < 10);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        let disjoint = mk(&|i| i >= 10);
        assert_eq!(dsc(&a, &disjoint).unwrap(), 0.0);
        let b = mk(&|i| i < 30);
        assert_eq!(dsc(&a, &b).unwrap(), 0.5);
        let none = mk(&|_| false);
        assert!(dsc(&none, &none).is_err());
    }

    #[test]
    fn jacobian_examples() {
        let d = [6, 5, 4];
        let r = jacobian_report(&Dvf::zeros(d));
        assert_eq!(r.min_determinant, 1.0);
        assert_eq!(r.fold_fraction, 0.0);
        let r = jacobian_report(&Dvf::uniform(d, [2.5, -1.0, 0.3]));
        assert_eq!(r.min_determinant, 1.0);
        let lin = Dvf::from_fn(d, |x, _, _| [0.5 * x as f32, 0.0, 0.0]);
        let r = jacobian_report(&lin);
        assert!((r.min_determinant - 1.5).abs() < 1e-12);
        let fold = Dvf::from_fn(d, |x, _, _| [-2.0 * x as f32, 0.0, 0.0]);
        assert_eq!(jacobian_report(&fold).fold_fraction, 1.0);
    }

    #[test]
    fn phantom_truth_fields_do_not_fold() {
        for (i, def) in [
            Deformation::RigidShift { shift_mm: [1.8, -0.9, 2.0] },
            Deformation::GaussianBump {
                center_mm: [14.0, 14.0, 15.0],
                peak_mm: [0.0, 3.2, 0.0],
                sigma_mm: 8.0,
            },
        ]
        .into_iter()
        .enumerate()
        {
            let p = make_phantom(&PhantomSpec::new([24, 24, 16], i as u64, def)).unwrap();
            assert_eq!(jacobian_report(&p.truth_dvf).fold_fraction, 0.0);
        }
    }

    #[test]
    fn landmark_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = set(&[(3, [1.5, 2.25, -0.125]), (7, [10.0, 0.0, 4.0])]);
        let p = dir.path().join("lm.csv");
        s.save_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("id,x_mm,y_mm,z_mm\n"));
        assert_eq!(LandmarkSet::load_csv(&p).unwrap(), s);
    }

    #[test]
    fn report_csv_has_overall_row() {
        let r = MetricReport {
            fraction: "1".into(),
            tre_per_landmark: vec![1.0, 3.0],
            tre_mean: 2.0,
            tre_std: 2f64.sqrt(),
            mae: 10.0,
            ncc: 0.9,
            dsc: 0.8,
            jacobian_min: 0.7,
            fold_fraction: 0.0,
            body_hu: -300.0,
            bone_hu: 300.0,
        };
        let csv = MetricReport::to_csv(&[r.clone(), r]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], REPORT_CSV_HEADER);
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("overall,2.000000"));
    }

    proptest! {
        #[test]
        fn dsc_symmetric_and_bounded(a in proptest::collection::vec(any::<bool>(), 27),
                                     b in proptest::collection::vec(any::<bool>(), 27)) {
            let ma = Mask::new([3, 3, 3], a).unwrap();
            let mb = Mask::new([3, 3, 3], b).unwrap();
            if ma.count() + mb.count() > 0 {
                let x = dsc(&ma, &mb).unwrap();
                prop_assert_eq!(x, dsc(&mb, &ma).unwrap());
                prop_assert!((0.0..=1.0).contains(&x));
            }
        }

        #[test]
        fn mae_symmetric_and_triangle(a in proptest::collection::vec(-1000.0f32..1000.0, 27),
                                      b in proptest::collection::vec(-1000.0f32..1000.0, 27),
                                      c in proptest::collection::vec(-1000.0f32..1000.0, 27),
                                      m in proptest::collection::vec(any::<bool>(), 27)) {
            prop_assume!(m.iter().any(|&x| x));
            let v = |d: Vec<f32>| Volume::new([3, 3, 3], [1.0; 3], d).unwrap();
            let (a, b, c) = (v(a), v(b), v(c));
            let m = Mask::new([3, 3, 3], m).unwrap();
            let ab = mae(&a, &b, &m).unwrap();
            prop_assert_eq!(ab, mae(&b, &a, &m).unwrap());
            prop_assert!(mae(&a, &c, &m).unwrap() <= ab + mae(&b, &c, &m).unwrap() + 1e-9);
        }

        #[test]
        fn ncc_affine_invariant(a in proptest::collection::vec(-1000.0f32..1000.0, 27),
                                b in proptest::collection::vec(-1000.0f32..1000.0, 27),
                                s in 0.1f32..10.0, c in -500.0f32..500.0) {
            let v = |d: Vec<f32>| Volume::new([3, 3, 3], [1.0; 3], d).unwrap();
            let full = Mask::full([3, 3, 3]);
            let base = ncc_metric(&v(a.clone()), &v(b.clone()), &full).unwrap();
            let mapped = ncc_metric(&v(a.iter().map(|x| s * x + c).collect()), &v(b), &full).unwrap();
            prop_assert!((base - mapped).abs() < 1e-4);
        }

        #[test]
        fn tre_ignores_relabeling(pts in proptest::collection::vec((-50.0f64..50.0, -50.0f64..50.0, -50.0f64..50.0), 1..8),
                                  shift in -5.0f64..5.0) {
            let a: Vec<_> = pts.iter().enumerate().map(|(i, p)| (i as u32, [p.0, p.1, p.2])).collect();
            let b: Vec<_> = pts.iter().enumerate().map(|(i, p)| (i as u32, [p.0 + shift * i as f64, p.1, p.2])).collect();
            let base = tre(&set(&a), &set(&b)).unwrap();
            // relabel: reverse id assignment consistently on both sides
            let n = pts.len() as u32;
            let ra: Vec<_> = a.iter().rev().map(|&(i, p)| (n - 1 - i, p)).collect();
            let rb: Vec<_> = b.iter().map(|&(i, p)| (n - 1 - i, p)).collect();
            let mut relabeled = tre(&set(&ra), &set(&rb)).unwrap();
            let mut sorted = base.clone();
            sorted.sort_by(f64::total_cmp);
            relabeled.sort_by(f64::total_cmp);
            prop_assert_eq!(sorted, relabeled);
        }
    }
}
