//! Differentiable loss terms on a [`Tape`].
//!
//! Images are `[1, spatial..]` nodes and displacements `[d, spatial..]`.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::field::{self, GridShape};
use crate::network::{PathTrace, SrOutput};

use super::LossWeights;

pub const NCC_EPS: f64 = 1e-5;

fn check_window(window: usize) -> Result<()> {
    if window.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "window must be odd, got {window}"
        )));
    }
    Ok(())
}

/// Per-voxel local squared correlation `cross^2 / (var_x var_y + eps)`,
/// with window statistics accumulated over the in-domain part of each
/// window.
pub fn ncc_map(tape: &mut Tape, x: Var, y: Var, window: usize) -> Result<Var> {
    check_window(window)?;
    if tape.shape(x) != tape.shape(y) {
        return Err(Error::mismatch(tape.shape(x), tape.shape(y)));
    }
    let shape = tape.shape(x).to_vec();
    let ones = vec![1.0; shape.iter().product()];
    let counts = field::box_sum_raw(&ones, &shape, 1, window);
    let inv_n = tape.constant(Tensor::new(
        shape,
        counts.iter().map(|c| 1.0 / c).collect(),
    )?);
    let xx = tape.square(x);
    let yy = tape.square(y);
    let xy = tape.mul(x, y)?;
    let sx = tape.box_sum(x, window)?;
    let sy = tape.box_sum(y, window)?;
    let sxx = tape.box_sum(xx, window)?;
    let syy = tape.box_sum(yy, window)?;
    let sxy = tape.box_sum(xy, window)?;
    let centered = |tape: &mut Tape, s2: Var, a: Var, b: Var| -> Result<Var> {
        let ab = tape.mul(a, b)?;
        let m = tape.mul(ab, inv_n)?;
        tape.sub(s2, m)
    };
    let cross = centered(tape, sxy, sx, sy)?;
    let vx = centered(tape, sxx, sx, sx)?;
    let vy = centered(tape, syy, sy, sy)?;
    let num = tape.square(cross);
    let den = tape.mul(vx, vy)?;
    let den = tape.add_scalar(den, NCC_EPS);
    tape.div(num, den)
}

/// `-mean(ncc_map)`.
pub fn ncc(tape: &mut Tape, x: Var, y: Var, window: usize) -> Result<Var> {
    let m = ncc_map(tape, x, y, window)?;
    let mean = tape.mean(m);
    Ok(tape.neg(mean))
}

/// Sum of squared forward differences of every component along every axis.
pub fn smooth(tape: &mut Tape, disp: Var) -> Result<Var> {
    let d = tape.shape(disp).len() - 1;
    let mut terms = Vec::with_capacity(d);
    for axis in 0..d {
        let g = tape.forward_diff(disp, axis)?;
        let sq = tape.square(g);
        terms.push((1.0, tape.sum(sq)));
    }
    tape.weighted_sum(&terms)
}

/// Determinant of `I + grad(disp)` per voxel, `[1, spatial..]`.
pub fn jacobian_det(tape: &mut Tape, disp: Var) -> Result<Var> {
    let d = tape.shape(disp).len() - 1;
    if tape.value(disp).channels() != d || !(2..=3).contains(&d) {
        return Err(Error::InvalidShape(format!(
            "displacement shape {:?}",
            tape.shape(disp)
        )));
    }
    let mut m = vec![vec![disp; d]; d];
    for i in 0..d {
        let c = tape.narrow(disp, i, 1)?;
        for j in 0..d {
            let g = tape.central_diff(c, j)?;
            m[i][j] = if i == j { tape.add_scalar(g, 1.0) } else { g };
        }
    }
    let det2 = |tape: &mut Tape, a: Var, b: Var, c: Var, e: Var| -> Result<Var> {
        let p = tape.mul(a, e)?;
        let q = tape.mul(b, c)?;
        tape.sub(p, q)
    };
    if d == 2 {
        return det2(tape, m[0][0], m[0][1], m[1][0], m[1][1]);
    }
    let c0 = det2(tape, m[1][1], m[1][2], m[2][1], m[2][2])?;
    let c1 = det2(tape, m[1][0], m[1][2], m[2][0], m[2][2])?;
    let c2 = det2(tape, m[1][0], m[1][1], m[2][0], m[2][1])?;
    let t0 = tape.mul(m[0][0], c0)?;
    let t1 = tape.mul(m[0][1], c1)?;
    let t2 = tape.mul(m[0][2], c2)?;
    let s = tape.sub(t0, t1)?;
    tape.add(s, t2)
}

/// `sum(relu(-det))`.
pub fn jdet(tape: &mut Tape, disp: Var) -> Result<Var> {
    let det = jacobian_det(tape, disp)?;
    let neg = tape.neg(det);
    let r = tape.relu(neg);
    Ok(tape.sum(r))
}

/// Displacement of `outer(inner(x))`.
pub fn compose(tape: &mut Tape, outer: Var, inner: Var) -> Result<Var> {
    let s = tape.warp(outer, inner)?;
    tape.add(inner, s)
}

/// `ncc(x, x o phi o phi_inv) + ncc(y, y o phi_inv o phi)`; `-2` when both
/// round trips are exact.
pub fn cycle(
    tape: &mut Tape,
    x: Var,
    y: Var,
    phi: Var,
    phi_inv: Var,
    window: usize,
) -> Result<Var> {
    let fb = compose(tape, phi, phi_inv)?;
    let bf = compose(tape, phi_inv, phi)?;
    let xr = tape.warp(x, fb)?;
    let yr = tape.warp(y, bf)?;
    let a = ncc(tape, x, xr, window)?;
    let b = ncc(tape, y, yr, window)?;
    tape.add(a, b)
}

fn boundary_mask(spatial: &[usize]) -> Result<Tensor> {
    let g = GridShape::new(spatial)?;
    let data = (0..g.len())
        .map(|v| {
            if g.on_boundary(&g.unravel(v)) {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let mut shape = vec![1];
    shape.extend_from_slice(spatial);
    Tensor::new(shape, data)
}

/// Per-voxel `|div(u) + (h_curr - h_prev)/dt|` plus `|u|` on the faces.
pub fn cic_map(tape: &mut Tape, u: Var, h_prev: Var, h_curr: Var, dt: f64) -> Result<Var> {
    let d = tape.value(u).channels();
    let sp = tape.value(u).spatial().to_vec();
    let mut terms = Vec::with_capacity(d);
    for i in 0..d {
        let c = tape.narrow(u, i, 1)?;
        terms.push(tape.central_diff(c, i)?);
    }
    let mut div = terms[0];
    for &t in &terms[1..] {
        div = tape.add(div, t)?;
    }
    let dh = tape.sub(h_curr, h_prev)?;
    let dh = tape.scale(dh, 1.0 / dt);
    let r = tape.add(div, dh)?;
    let r = tape.abs(r);
    let mut sq = Vec::with_capacity(d);
    for i in 0..d {
        let c = tape.narrow(u, i, 1)?;
        sq.push(tape.square(c));
    }
    let mut n2 = sq[0];
    for &s in &sq[1..] {
        n2 = tape.add(n2, s)?;
    }
    let norm = tape.sqrt(n2);
    let mask = tape.constant(boundary_mask(&sp)?);
    let edge = tape.mul(norm, mask)?;
    tape.add(r, edge)
}

/// Mean over every step of both paths and every scale of the mean
/// per-voxel continuity residual.
pub fn cic(tape: &mut Tape, traces: &[&PathTrace], dt: f64) -> Result<Var> {
    let mut terms = Vec::new();
    for p in traces {
        for (n, &u) in p.increments.iter().enumerate() {
            let m = cic_map(tape, u, p.homotopy[n], p.homotopy[n + 1], dt)?;
            terms.push(tape.mean(m));
        }
    }
    let k = terms.len().max(1) as f64;
    let weighted: Vec<(f64, Var)> = terms.into_iter().map(|v| (1.0 / k, v)).collect();
    if weighted.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    tape.weighted_sum(&weighted)
}

/// Brings a coarse displacement to `levels` doublings finer, rescaling
/// to the fine voxel unit each time.
pub fn upsample_displacement(tape: &mut Tape, disp: Var, levels: usize) -> Var {
    let mut v = disp;
    for _ in 0..levels {
        let up = tape.upsample2(v);
        v = tape.scale(up, 2.0);
    }
    v
}

/// Scalar nodes of every loss term.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub sim: Var,
    pub jdet: Var,
    pub smooth: Var,
    pub cycle: Var,
    pub cic: Var,
    pub total: Var,
}

/// Weighted sum of all loss terms for the output of the cascade.
pub fn total(
    tape: &mut Tape,
    x: Var,
    y: Var,
    out: &SrOutput,
    weights: &LossWeights,
    window: usize,
    dt: f64,
) -> Result<LossTerms> {
    let l = out.scales.len();
    if weights.lambda1.len() != l {
        return Err(Error::Config(format!(
            "{} similarity weights for {l} scales",
            weights.lambda1.len()
        )));
    }
    let mut sim = Vec::with_capacity(2 * l);
    let mut jd = Vec::with_capacity(2 * l);
    let mut sm = Vec::with_capacity(2 * l);
    let mut traces = Vec::with_capacity(2 * l);
    for (lvl, s) in out.scales.iter().enumerate() {
        let f = *s.forward.displacements.last().expect("trace has a start");
        let b = *s.backward.displacements.last().expect("trace has a start");
        let fu = upsample_displacement(tape, f, l - 1 - lvl);
        let bu = upsample_displacement(tape, b, l - 1 - lvl);
        let xw = tape.warp(x, fu)?;
        let yw = tape.warp(y, bu)?;
        let a = ncc(tape, xw, y, window)?;
        let c = ncc(tape, yw, x, window)?;
        sim.push((weights.lambda1[lvl], a));
        sim.push((weights.lambda1[lvl], c));
        for v in [f, b] {
            jd.push((1.0, jdet(tape, v)?));
            sm.push((1.0, smooth(tape, v)?));
        }
        traces.push(&s.forward);
        traces.push(&s.backward);
    }
    let sim = tape.weighted_sum(&sim)?;
    let jdet = tape.weighted_sum(&jd)?;
    let smooth = tape.weighted_sum(&sm)?;
    let cycle = cycle(tape, x, y, out.phi, out.phi_inv, window)?;
    let cic = cic(tape, &traces, dt)?;
    let total = tape.weighted_sum(&[
        (1.0, sim),
        (weights.lambda2, jdet),
        (weights.lambda3, smooth),
        (weights.lambda4, cycle),
        (weights.lambda5, cic),
    ])?;
    Ok(LossTerms {
        sim,
        jdet,
        smooth,
        cycle,
        cic,
        total,
    })
}
