//! Synthetic abdominal phantoms with an analytic deformation, used as
//! ground truth in place of clinical CBCT pairs.
//!
//! The target image is an analytic function `f` of physical position. With a
//! displacement `u` (mm), the moving image is `f(φ⁻¹(y))` where
//! `φ(p) = p + u(p)`, so that `target(p) = moving(p + u(p))` holds exactly and
//! `u / spacing` is the voxel-unit field the registration should recover.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Volume, DEFAULT_SPACING};
use crate::error::{Error, Result};
use crate::metrics::{Landmark, LandmarkSet};
use crate::transform::Dvf;

const AIR_HU: f64 = -1000.0;
const TISSUE_HU: f64 = 0.0;
const BONE_HU: f64 = 700.0;
const FIDUCIAL_HU: f64 = 1000.0;
const FIDUCIAL_RADIUS_MM: f64 = 2.0;
const EDGE_WIDTH_MM: f64 = 1.0;
/// max over t of t·exp(-t²/2)
const GAUSS_SLOPE: f64 = 0.606_530_659_712_633_4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Deformation {
    RigidShift {
        shift_mm: [f64; 3],
    },
    GaussianBump {
        center_mm: [f64; 3],
        peak_mm: [f64; 3],
        sigma_mm: f64,
    },
    Composite(Vec<Deformation>),
}

impl Deformation {
    /// Displacement in mm at physical position `p`.
    pub fn displacement(&self, p: [f64; 3]) -> [f64; 3] {
        match self {
            Deformation::RigidShift { shift_mm } => *shift_mm,
            Deformation::GaussianBump {
                center_mm,
                peak_mm,
                sigma_mm,
            } => {
                let r2: f64 = (0..3).map(|a| (p[a] - center_mm[a]).powi(2)).sum();
                let g = (-r2 / (2.0 * sigma_mm * sigma_mm)).exp();
                [peak_mm[0] * g, peak_mm[1] * g, peak_mm[2] * g]
            }
            Deformation::Composite(parts) => parts.iter().fold([0.0; 3], |acc, d| {
                let u = d.displacement(p);
                [acc[0] + u[0], acc[1] + u[1], acc[2] + u[2]]
            }),
        }
    }

    /// Upper bound on the operator norm of the displacement gradient.
    fn gradient_bound(&self) -> f64 {
        match self {
            Deformation::RigidShift { .. } => 0.0,
            Deformation::GaussianBump {
                peak_mm, sigma_mm, ..
            } => norm(*peak_mm) / sigma_mm * GAUSS_SLOPE,
            Deformation::Composite(parts) => parts.iter().map(|d| d.gradient_bound()).sum(),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Deformation::RigidShift { shift_mm } => {
                if shift_mm.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidArgument("non-finite rigid shift".into()));
                }
            }
            Deformation::GaussianBump {
                center_mm,
                peak_mm,
                sigma_mm,
            } => {
                if !(*sigma_mm > 0.0 && sigma_mm.is_finite()) {
                    return Err(Error::InvalidArgument(format!(
                        "bump sigma must be positive, got {sigma_mm}"
                    )));
                }
                if center_mm.iter().chain(peak_mm).any(|v| !v.is_finite()) {
                    return Err(Error::InvalidArgument("non-finite bump parameter".into()));
                }
                if norm(*peak_mm) > 0.4 * sigma_mm {
                    return Err(Error::InvalidArgument(format!(
                        "bump peak {:.3} mm exceeds 0.4·sigma = {:.3} mm",
                        norm(*peak_mm),
                        0.4 * sigma_mm
                    )));
                }
            }
            Deformation::Composite(parts) => {
                for p in parts {
                    p.validate()?;
                }
            }
        }
        if self.gradient_bound() >= 1.0 {
            return Err(Error::InvalidArgument(
                "combined deformation may fold (gradient bound ≥ 1)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    #[serde(default = "default_spacing")]
    pub spacing_mm: [f64; 3],
    #[serde(default)]
    pub seed: u64,
    pub deformation: Deformation,
    #[serde(default = "default_landmarks")]
    pub landmark_count: usize,
}

fn default_spacing() -> [f64; 3] {
    DEFAULT_SPACING
}

fn default_landmarks() -> usize {
    8
}

impl PhantomSpec {
    pub fn new(dims: [usize; 3], seed: u64, deformation: Deformation) -> Self {
        Self {
            dims,
            spacing_mm: DEFAULT_SPACING,
            seed,
            deformation,
            landmark_count: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 8) {
            return Err(Error::InvalidArgument(format!(
                "phantom dims must be at least 8 per axis, got {:?}",
                self.dims
            )));
        }
        if self.spacing_mm.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument("spacing must be positive".into()));
        }
        if self.landmark_count < 4 {
            return Err(Error::InvalidArgument(format!(
                "landmark_count must be at least 4, got {}",
                self.landmark_count
            )));
        }
        self.deformation.validate()
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub moving: Volume,
    pub target: Volume,
    /// Pull-back field on the target grid: `target(p) = moving(p + truth(p))`.
    pub truth_dvf: Dvf,
    pub landmarks_moving: LandmarkSet,
    pub landmarks_target: LandmarkSet,
}

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    center: [f64; 3],
    semi: [f64; 3],
}

impl Ellipsoid {
    /// Smooth indicator: ~1 inside, ~0 outside, tanh edge of `EDGE_WIDTH_MM`.
    fn inside(&self, p: [f64; 3]) -> f64 {
        let r = (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.semi[a]).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = self.semi.iter().cloned().fold(f64::INFINITY, f64::min);
        let d = (r - 1.0) * scale;
        0.5 * (1.0 - (d / EDGE_WIDTH_MM).tanh())
    }

    fn normalized_radius(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.semi[a]).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, Copy)]
struct Blob {
    center: [f64; 3],
    sigma: f64,
    amplitude: f64,
}

struct Anatomy {
    body: Ellipsoid,
    organs: Vec<(Ellipsoid, f64)>,
    blobs: Vec<Blob>,
    bones: Vec<Ellipsoid>,
    fiducials: Vec<[f64; 3]>,
}

impl Anatomy {
    fn generate(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Result<(Self, Vec<[usize; 3]>)> {
        let ext: [f64; 3] = std::array::from_fn(|a| (spec.dims[a] - 1) as f64 * spec.spacing_mm[a]);
        let c: [f64; 3] = std::array::from_fn(|a| ext[a] / 2.0);
        let body = Ellipsoid {
            center: c,
            semi: [0.40 * ext[0], 0.32 * ext[1], 0.65 * ext[2]],
        };

        let mut organs = Vec::new();
        for hu in [55.0, -70.0, 35.0] {
            let center = random_inside(rng, &body, 0.55);
            let semi = [
                rng.gen_range(0.10..0.18) * ext[0],
                rng.gen_range(0.08..0.14) * ext[1],
                rng.gen_range(0.12..0.25) * ext[2],
            ];
            organs.push((Ellipsoid { center, semi }, hu));
        }

        let voxel = spec.spacing_mm.iter().cloned().fold(f64::INFINITY, f64::min);
        let blobs = (0..36)
            .map(|_| Blob {
                center: random_inside(rng, &body, 0.9),
                sigma: rng.gen_range(2.5..6.0) * voxel.max(0.9),
                amplitude: rng.gen_range(20.0..45.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
            })
            .collect();

        // posterior spine plus two lateral rods, all running along z
        let bones = vec![
            Ellipsoid {
                center: [c[0], c[1] + 0.20 * ext[1], c[2]],
                semi: [0.08 * ext[0], 0.08 * ext[1], 0.8 * ext[2]],
            },
            Ellipsoid {
                center: [c[0] - 0.30 * ext[0], c[1] + 0.10 * ext[1], c[2]],
                semi: [0.04 * ext[0], 0.06 * ext[1], 0.8 * ext[2]],
            },
            Ellipsoid {
                center: [c[0] + 0.30 * ext[0], c[1] + 0.10 * ext[1], c[2]],
                semi: [0.04 * ext[0], 0.06 * ext[1], 0.8 * ext[2]],
            },
        ];

        // fiducials sit on voxel centres so trilinear sampling of the truth
        // field at a landmark is exact
        let min_sep = (0.22 * ext[0].min(ext[1])).max(4.0 * FIDUCIAL_RADIUS_MM);
        let mut fid_idx: Vec<[usize; 3]> = Vec::new();
        let mut attempts = 0;
        while fid_idx.len() < spec.landmark_count {
            attempts += 1;
            if attempts > 20_000 {
                return Err(Error::InvalidArgument(format!(
                    "could not place {} fiducials in a {:?} phantom",
                    spec.landmark_count, spec.dims
                )));
            }
            let sep = if attempts > 5_000 { min_sep * 0.5 } else { min_sep };
            let p = random_inside(rng, &body, 0.72);
            let idx: [usize; 3] = std::array::from_fn(|a| {
                ((p[a] / spec.spacing_mm[a]).round() as usize).min(spec.dims[a] - 1)
            });
            let q: [f64; 3] = std::array::from_fn(|a| idx[a] as f64 * spec.spacing_mm[a]);
            if bones.iter().any(|b| b.normalized_radius(q) < 1.6) {
                continue;
            }
            if fid_idx.iter().any(|o| {
                let po: [f64; 3] = std::array::from_fn(|a| o[a] as f64 * spec.spacing_mm[a]);
                dist(po, q) < sep
            }) {
                continue;
            }
            fid_idx.push(idx);
        }
        let fiducials = fid_idx
            .iter()
            .map(|i| std::array::from_fn(|a| i[a] as f64 * spec.spacing_mm[a]))
            .collect();

        Ok((
            Self {
                body,
                organs,
                blobs,
                bones,
                fiducials,
            },
            fid_idx,
        ))
    }

    fn value(&self, p: [f64; 3]) -> f64 {
        let inside = self.body.inside(p);
        let mut tissue = TISSUE_HU;
        for (o, hu) in &self.organs {
            tissue += hu * o.inside(p);
        }
        for b in &self.blobs {
            let r2: f64 = (0..3).map(|a| (p[a] - b.center[a]).powi(2)).sum();
            tissue += b.amplitude * (-r2 / (2.0 * b.sigma * b.sigma)).exp();
        }
        let mut v = AIR_HU + inside * (tissue - AIR_HU);
        for b in &self.bones {
            v += b.inside(p) * (BONE_HU - v);
        }
        for f in &self.fiducials {
            let d = dist(*f, p) - FIDUCIAL_RADIUS_MM;
            let s = 0.5 * (1.0 - (d / (0.5 * EDGE_WIDTH_MM)).tanh());
            v += s * (FIDUCIAL_HU - v);
        }
        v
    }
}

fn random_inside(rng: &mut ChaCha8Rng, e: &Ellipsoid, fraction: f64) -> [f64; 3] {
    loop {
        let u: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        if u.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
            // keep the z range within the field of view
            let semi_z = e.semi[2].min(e.center[2]);
            return [
                e.center[0] + fraction * e.semi[0] * u[0],
                e.center[1] + fraction * e.semi[1] * u[1],
                e.center[2] + fraction * semi_z * u[2],
            ];
        }
    }
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    norm([a[0] - b[0], a[1] - b[1], a[2] - b[2]])
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Solve `p + u(p) = y` by fixed-point iteration; converges because the
/// displacement gradient is bounded below 1.
fn invert(def: &Deformation, y: [f64; 3]) -> [f64; 3] {
    let mut p = y;
    for _ in 0..100 {
        let u = def.displacement(p);
        let next = [y[0] - u[0], y[1] - u[1], y[2] - u[2]];
        let step = dist(next, p);
        p = next;
        if step < 1e-12 {
            break;
        }
    }
    p
}

pub fn make_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (anatomy, fid_idx) = Anatomy::generate(spec, &mut rng)?;
    let sp = spec.spacing_mm;
    let pos = |x: usize, y: usize, z: usize| [x as f64 * sp[0], y as f64 * sp[1], z as f64 * sp[2]];

    // integer HU without negative zeros, as scanners report; keeps global HU
    // offsets exact in f32
    let target = Volume::from_fn(spec.dims, sp, |x, y, z| anatomy.value(pos(x, y, z)).round() as f32 + 0.0)?;
    let moving = Volume::from_fn(spec.dims, sp, |x, y, z| {
        anatomy.value(invert(&spec.deformation, pos(x, y, z))).round() as f32 + 0.0
    })?;

    let mut truth_dvf = Dvf::zeros(spec.dims);
    for z in 0..spec.dims[2] {
        for y in 0..spec.dims[1] {
            for x in 0..spec.dims[0] {
                let u = spec.deformation.displacement(pos(x, y, z));
                truth_dvf.set(
                    x,
                    y,
                    z,
                    [
                        (u[0] / sp[0]) as f32,
                        (u[1] / sp[1]) as f32,
                        (u[2] / sp[2]) as f32,
                    ],
                );
            }
        }
    }

    let mut lm_target = Vec::new();
    let mut lm_moving = Vec::new();
    for (i, idx) in fid_idx.iter().enumerate() {
        let p = pos(idx[0], idx[1], idx[2]);
        // the stored field is f32, so landmark pairs are consistent with it
        let u = truth_dvf.at(idx[0], idx[1], idx[2]);
        let q = [
            p[0] + u[0] as f64 * sp[0],
            p[1] + u[1] as f64 * sp[1],
            p[2] + u[2] as f64 * sp[2],
        ];
        let id = i as u32 + 1;
        lm_target.push(Landmark { id, position_mm: p });
        lm_moving.push(Landmark { id, position_mm: q });
    }

    Ok(Phantom {
        moving,
        target,
        truth_dvf,
        landmarks_moving: LandmarkSet::new(lm_moving)?,
        landmarks_target: LandmarkSet::new(lm_target)?,
    })
}
