use serde::{Deserialize, Serialize};

use crate::deformation::{DeformationField, LabelField};
use crate::error::{Error, Result};
use crate::field::{GridShape, ScalarField};

const K1: f64 = 0.01;
const K2: f64 = 0.03;
const SSIM_WINDOW: usize = 8;

fn same_grid(a: &GridShape, b: &GridShape) -> Result<()> {
    if a != b {
        return Err(Error::mismatch(a.dims(), b.dims()));
    }
    Ok(())
}

/// `2|A ∩ B| / (|A| + |B|)` for one label; 1 when the label is absent
/// from both.
pub fn dice(a: &LabelField, b: &LabelField, label: u32) -> Result<f64> {
    same_grid(a.shape(), b.shape())?;
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (ia, ib) = (x == label, y == label);
        na += ia as usize;
        nb += ib as usize;
        both += (ia && ib) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Voxels of the label with a face neighbour outside the label or
/// outside the grid.
fn boundary(m: &LabelField, label: u32) -> Vec<Vec<usize>> {
    let g = m.shape();
    let dims = g.dims();
    let st = g.strides();
    let mut out = Vec::new();
    for v in 0..g.len() {
        if m.data()[v] != label {
            continue;
        }
        let idx = g.unravel(v);
        let edge = idx.iter().enumerate().any(|(a, &i)| {
            i == 0
                || i + 1 == dims[a]
                || m.data()[v - st[a]] != label
                || m.data()[v + st[a]] != label
        });
        if edge {
            out.push(idx);
        }
    }
    out
}

fn directed(from: &[Vec<usize>], to: &[Vec<usize>]) -> f64 {
    let mut worst = 0.0f64;
    for p in from {
        let mut best = f64::INFINITY;
        for q in to {
            let d2: f64 = p
                .iter()
                .zip(q)
                .map(|(&a, &b)| {
                    let t = a as f64 - b as f64;
                    t * t
                })
                .sum();
            if d2 < best {
                best = d2;
                if best == 0.0 {
                    break;
                }
            }
        }
        worst = worst.max(best);
    }
    worst.sqrt()
}

/// Symmetric Hausdorff distance in voxels between the label boundaries.
/// 0 when the label is absent from both; the grid diagonal when it is
/// absent from exactly one.
pub fn hausdorff(a: &LabelField, b: &LabelField, label: u32) -> Result<f64> {
    same_grid(a.shape(), b.shape())?;
    let (ba, bb) = (boundary(a, label), boundary(b, label));
    match (ba.is_empty(), bb.is_empty()) {
        (true, true) => Ok(0.0),
        (false, false) => Ok(directed(&ba, &bb).max(directed(&bb, &ba))),
        _ => Ok(a
            .shape()
            .dims()
            .iter()
            .map(|&n| ((n - 1) * (n - 1)) as f64)
            .sum::<f64>()
            .sqrt()),
    }
}

/// Odometer step over `0..limits`; false once every index wrapped.
fn advance(idx: &mut [usize], limits: &[usize]) -> bool {
    for a in (0..idx.len()).rev() {
        idx[a] += 1;
        if idx[a] < limits[a] {
            return true;
        }
        idx[a] = 0;
    }
    false
}

/// Mean structural similarity over all fully contained windows of 8
/// voxels per axis (the whole axis when shorter), uniform weights.
pub fn ssim(x: &ScalarField, y: &ScalarField) -> Result<f64> {
    same_grid(x.shape(), y.shape())?;
    let g = x.shape();
    let dims = g.dims();
    let lo = x.min().min(y.min());
    let hi = x.max().max(y.max());
    let range = if hi > lo { hi - lo } else { 1.0 };
    let c1 = (K1 * range).powi(2);
    let c2 = (K2 * range).powi(2);
    let win: Vec<usize> = dims.iter().map(|&n| n.min(SSIM_WINDOW)).collect();
    let starts: Vec<usize> = dims.iter().zip(&win).map(|(&n, &w)| n - w + 1).collect();
    let (xd, yd) = (x.data(), y.data());
    let mut total = 0.0;
    let mut count = 0usize;
    let mut origin = vec![0usize; dims.len()];
    loop {
        let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let mut off = vec![0usize; dims.len()];
        loop {
            let idx: Vec<usize> = origin.iter().zip(&off).map(|(a, b)| a + b).collect();
            let v = g.ravel(&idx);
            let (a, b) = (xd[v], yd[v]);
            sx += a;
            sy += b;
            sxx += a * a;
            syy += b * b;
            sxy += a * b;
            if !advance(&mut off, &win) {
                break;
            }
        }
        let n = win.iter().product::<usize>() as f64;
        let (mx, my) = (sx / n, sy / n);
        let vx = (sxx / n - mx * mx).max(0.0);
        let vy = (syy / n - my * my).max(0.0);
        let cov = sxy / n - mx * my;
        total +=
            ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        count += 1;
        if !advance(&mut origin, &starts) {
            break;
        }
    }
    Ok(total / count as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelScore {
    pub label: u32,
    pub dice: f64,
    pub hd: f64,
}

/// Metrics of one registration direction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dsc: f64,
    pub hd: f64,
    pub ssim: f64,
    pub fold_fraction: f64,
    pub labels: Vec<LabelScore>,
}

impl MetricReport {
    pub fn label(&self, label: u32) -> Option<&LabelScore> {
        self.labels.iter().find(|s| s.label == label)
    }
}

/// Warps the moving image and labels by `phi` and scores them against
/// the fixed ones. DSC and HD are averaged over the non-zero labels
/// present in either mask.
pub fn direction_report(
    moving: &ScalarField,
    fixed: &ScalarField,
    moving_labels: &LabelField,
    fixed_labels: &LabelField,
    phi: &DeformationField,
) -> Result<MetricReport> {
    let warped = phi.warp(moving)?;
    let warped_labels = phi.warp_labels(moving_labels)?;
    let mut labels = warped_labels.labels();
    labels.extend(fixed_labels.labels());
    labels.sort_unstable();
    labels.dedup();
    let mut scores = Vec::with_capacity(labels.len());
    for &l in &labels {
        scores.push(LabelScore {
            label: l,
            dice: dice(&warped_labels, fixed_labels, l)?,
            hd: hausdorff(&warped_labels, fixed_labels, l)?,
        });
    }
    let k = scores.len().max(1) as f64;
    let (dsc, hd) = if scores.is_empty() {
        (1.0, 0.0)
    } else {
        (
            scores.iter().map(|s| s.dice).sum::<f64>() / k,
            scores.iter().map(|s| s.hd).sum::<f64>() / k,
        )
    };
    Ok(MetricReport {
        dsc,
        hd,
        ssim: ssim(&warped, fixed)?,
        fold_fraction: phi.jacobian().fold_fraction,
        labels: scores,
    })
}
