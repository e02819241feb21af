//! Synthetic image pairs with known smooth ground-truth deformations.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::deformation::{DeformationField, LabelField};
use crate::error::{Error, Result};
use crate::field::{GridShape, ScalarField, VectorField};
use crate::objectives::dice;

/// Ground-truth displacement bound as a fraction of the smallest extent.
pub const DEFAULT_AMPLITUDE: f64 = 0.07;
pub const NOISE_SIGMA: f64 = 0.02;
pub const BASELINE_BAND: (f64, f64) = (0.4, 0.8);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairKind {
    /// Textured body (label 1) with an off-centre nucleus (label 2).
    Blob,
    /// Open ring (label 1) around a disk (label 2).
    CShape,
    /// Three ellipsoids with distinct intensities (labels 1..=3).
    MultiOrgan,
}

impl fmt::Display for PairKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PairKind::Blob => "blob",
            PairKind::CShape => "c-shape",
            PairKind::MultiOrgan => "multi-organ",
        })
    }
}

impl FromStr for PairKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blob" => Ok(PairKind::Blob),
            "c-shape" => Ok(PairKind::CShape),
            "multi-organ" => Ok(PairKind::MultiOrgan),
            _ => Err(Error::Config(format!("unknown dataset kind {s:?}"))),
        }
    }
}

/// `y` is `x` resampled through `truth` (`y(p) = x(p + d(p))`) with fresh
/// noise, and `mask_y` the nearest-neighbour warp of `mask_x`.
#[derive(Clone, Debug)]
pub struct SyntheticPair {
    pub x: ScalarField,
    pub y: ScalarField,
    pub mask_x: LabelField,
    pub mask_y: LabelField,
    pub truth: DeformationField,
}

impl SyntheticPair {
    /// Mean Dice over the labels of both masks before registration.
    pub fn baseline_dice(&self) -> Result<f64> {
        mean_dice(&self.mask_x, &self.mask_y)
    }
}

fn mean_dice(a: &LabelField, b: &LabelField) -> Result<f64> {
    let mut labels = a.labels();
    labels.extend(b.labels());
    labels.sort_unstable();
    labels.dedup();
    if labels.is_empty() {
        return Ok(1.0);
    }
    let mut s = 0.0;
    for &l in &labels {
        s += dice(a, b, l)?;
    }
    Ok(s / labels.len() as f64)
}

/// Per-index seed derived from a base seed (splitmix64 finalizer).
pub fn pair_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Smoothed zero-mean noise scaled to unit max magnitude.
fn wobble(shape: &GridShape, sigma: f64, rng: &mut ChaCha8Rng) -> Result<ScalarField> {
    let f = ScalarField::from_fn(shape, |_| rng.gen_range(-1.0..1.0)).gaussian_smooth(sigma)?;
    let m = f.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    Ok(if m > 0.0 { f.map(|v| v / m) } else { f })
}

fn coords(idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| i as f64).collect()
}

fn dist(p: &[f64], c: &[f64]) -> f64 {
    p.iter()
        .zip(c)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Labels and per-voxel base intensities for one kind.
fn draw_shapes(
    kind: PairKind,
    shape: &GridShape,
    rng: &mut ChaCha8Rng,
) -> Result<(LabelField, ScalarField)> {
    let dims = shape.dims();
    let d = dims.len();
    let n = *dims.iter().min().expect("non-empty shape") as f64;
    let centre: Vec<f64> = dims
        .iter()
        .map(|&e| (e as f64 - 1.0) / 2.0 + rng.gen_range(-0.06..0.06) * n)
        .collect();
    let w = wobble(shape, 0.12 * n, rng)?;
    let texture = wobble(shape, 0.06 * n, rng)?;
    let mut labels = vec![0u32; shape.len()];
    let mut level = vec![0.0f64; shape.len()];
    match kind {
        PairKind::Blob => {
            let r = 0.22 * n * rng.gen_range(0.9..1.1);
            let dir = random_unit(d, rng);
            let nuc: Vec<f64> = centre
                .iter()
                .zip(&dir)
                .map(|(c, u)| c + 0.3 * r * u)
                .collect();
            let rn = 0.4 * r;
            for v in 0..shape.len() {
                let p = coords(&shape.unravel(v));
                if dist(&p, &nuc) / rn + 0.1 * w.data()[v] < 1.0 {
                    labels[v] = 2;
                    level[v] = 1.0;
                } else if dist(&p, &centre) / r + 0.15 * w.data()[v] < 1.0 {
                    labels[v] = 1;
                    level[v] = 0.5;
                }
            }
        }
        PairKind::CShape => {
            let (ro, ri) = (0.3 * n, 0.18 * n);
            let gap = rng.gen_range(0.0..std::f64::consts::TAU);
            let half = 50f64.to_radians();
            for v in 0..shape.len() {
                let p = coords(&shape.unravel(v));
                let (a, b) = (p[0] - centre[0], p[1] - centre[1]);
                let rho = (a * a + b * b).sqrt() * (1.0 + 0.08 * w.data()[v]);
                let mut ang = b.atan2(a) - gap;
                ang = (ang + std::f64::consts::PI).rem_euclid(std::f64::consts::TAU)
                    - std::f64::consts::PI;
                let slab = d == 2 || (p[2] - centre[2]).abs() < 0.3 * n;
                if !slab {
                    continue;
                }
                if rho < 0.1 * n {
                    labels[v] = 2;
                    level[v] = 1.0;
                } else if rho > ri && rho < ro && ang.abs() > half {
                    labels[v] = 1;
                    level[v] = 0.6;
                }
            }
        }
        PairKind::MultiOrgan => {
            let intensity = [0.4, 0.7, 1.0];
            let mut placed: Vec<(Vec<f64>, f64)> = Vec::new();
            for (k, &value) in intensity.iter().enumerate() {
                let axes: Vec<f64> = (0..d).map(|_| rng.gen_range(0.1..0.16) * n).collect();
                let rmax = axes.iter().cloned().fold(0.0, f64::max);
                let mut c = centre.clone();
                for _ in 0..32 {
                    c = centre
                        .iter()
                        .map(|&m| m + rng.gen_range(-0.22..0.22) * n)
                        .collect();
                    if placed.iter().all(|(q, rq)| dist(&c, q) > rmax + rq + 1.0) {
                        break;
                    }
                }
                placed.push((c.clone(), rmax));
                for v in 0..shape.len() {
                    let p = coords(&shape.unravel(v));
                    let q: f64 = p
                        .iter()
                        .zip(&c)
                        .zip(&axes)
                        .map(|((a, b), s)| ((a - b) / s).powi(2))
                        .sum();
                    if q.sqrt() + 0.1 * w.data()[v] < 1.0 {
                        labels[v] = k as u32 + 1;
                        level[v] = value;
                    }
                }
            }
        }
    }
    let img: Vec<f64> = level
        .iter()
        .zip(texture.data())
        .map(|(&l, &t)| l * (1.0 + 0.15 * t))
        .collect();
    Ok((
        LabelField::new(shape.clone(), labels)?,
        ScalarField::new(shape.clone(), img)?.gaussian_smooth(1.0)?,
    ))
}

fn random_unit(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let m = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if m > 0.1 && m <= 1.0 {
            return v.into_iter().map(|x| x / m).collect();
        }
    }
}

fn add_noise(f: &ScalarField, rng: &mut ChaCha8Rng) -> ScalarField {
    let normal = Normal::new(0.0, NOISE_SIGMA).expect("positive sigma");
    let mut out = f.clone();
    out.data_mut()
        .iter_mut()
        .for_each(|v| *v += normal.sample(rng));
    out
}

/// Builds a pair. The ground truth is a translation plus a smooth random
/// field with magnitude at most `amplitude * min extent`, shrunk until it
/// has no folds and rescaled (at most a few times) so the unregistered
/// mean Dice lands in [`BASELINE_BAND`].
pub fn make_synthetic_pair(
    seed: u64,
    kind: PairKind,
    shape: &GridShape,
    amplitude: f64,
) -> Result<SyntheticPair> {
    if !(amplitude > 0.0) || !amplitude.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "amplitude must be positive, got {amplitude}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = shape.ndim();
    let n = *shape.dims().iter().min().expect("non-empty shape") as f64;
    let (mask_x, base) = draw_shapes(kind, shape, &mut rng)?;
    let shift = random_unit(d, &mut rng);
    let comps: Vec<ScalarField> = (0..d)
        .map(|_| wobble(shape, 0.15 * n, &mut rng))
        .collect::<Result<_>>()?;
    let smooth = VectorField::new(comps)?;
    let smax = smooth.max_norm().max(1e-12);
    let unit = VectorField::from_fn(shape, |idx| {
        let v = shape.ravel(idx);
        (0..d)
            .map(|a| 0.65 * shift[a] + 0.35 * smooth.component(a).data()[v] / smax)
            .collect()
    });
    let mut scale = amplitude * n;
    let mut truth = DeformationField::from_displacement(unit.scale(scale));
    for _ in 0..8 {
        while truth.jacobian().fold_fraction > 0.0 {
            scale *= 0.8;
            truth = DeformationField::from_displacement(unit.scale(scale));
        }
        let b = mean_dice(&mask_x, &truth.warp_labels(&mask_x)?)?;
        if b > BASELINE_BAND.1 {
            scale *= 1.2;
        } else if b < BASELINE_BAND.0 {
            scale *= 0.8;
        } else {
            break;
        }
        truth = DeformationField::from_displacement(unit.scale(scale));
    }
    while truth.jacobian().fold_fraction > 0.0 {
        scale *= 0.8;
        truth = DeformationField::from_displacement(unit.scale(scale));
    }
    let mask_y = truth.warp_labels(&mask_x)?;
    let y_clean = truth.warp(&base)?;
    let x = add_noise(&base, &mut rng);
    let y = add_noise(&y_clean, &mut rng);
    Ok(SyntheticPair {
        x,
        y,
        mask_x,
        mask_y,
        truth,
    })
}
