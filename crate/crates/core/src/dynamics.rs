//! Control-increment dynamics.
//!
//! The deformation evolves as `phi_n = phi_{n-1} + dt * u_n / h(phi_{n-1})`
//! where `h` is a Gaussian-smoothed indicator of the domain evaluated at
//! the current mapped position. The continuity residual
//! `div(u) + dh/dt` and the determinant identity `det(grad phi) = h_0 / h`
//! are diagnostics for how close an increment sequence is to the
//! diffeomorphic system. Scaling-and-squaring of a stationary velocity is
//! kept as the reference integrator.

use crate::deformation::DeformationField;
use crate::error::{Error, Result};
use crate::field::{GridShape, ScalarField, VectorField};

pub const DEFAULT_SIGMA: f64 = 2.0;
pub const DEFAULT_H_MIN: f64 = 1e-3;

/// Homotopy map state for one grid.
#[derive(Clone, Debug)]
pub struct HomotopyState {
    smoothed_h0: ScalarField,
    sigma: f64,
    h_min: f64,
    t: f64,
}

impl HomotopyState {
    pub fn new(shape: &GridShape, sigma: f64, h_min: f64) -> Result<Self> {
        if !(h_min > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "h_min must be positive, got {h_min}"
            )));
        }
        let smoothed_h0 = ScalarField::filled(shape, 1.0).gaussian_smooth(sigma)?;
        Ok(Self {
            smoothed_h0,
            sigma,
            h_min,
            t: 0.0,
        })
    }

    pub fn with_defaults(shape: &GridShape) -> Result<Self> {
        Self::new(shape, DEFAULT_SIGMA, DEFAULT_H_MIN)
    }

    pub fn smoothed_h0(&self) -> &ScalarField {
        &self.smoothed_h0
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn h_min(&self) -> f64 {
        self.h_min
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn at_time(mut self, t: f64) -> Self {
        self.t = t;
        self
    }

    /// `h(x) = max(h_min, smoothed_h0(x + d(x)))`.
    pub fn eval(&self, phi: &DeformationField) -> Result<ScalarField> {
        let warped = phi.warp(&self.smoothed_h0)?;
        Ok(warped.map(|v| v.max(self.h_min)))
    }
}

/// One explicit Euler step of the control-increment system.
pub fn euler_step(
    phi: &DeformationField,
    u: &VectorField,
    h: &ScalarField,
    dt: f64,
    h_min: f64,
) -> Result<DeformationField> {
    let shape = phi.shape();
    if u.shape() != shape {
        return Err(Error::mismatch(u.shape().dims(), shape.dims()));
    }
    if h.shape() != shape {
        return Err(Error::mismatch(h.shape().dims(), shape.dims()));
    }
    if !(dt > 0.0 && dt <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "dt must lie in (0, 1], got {dt}"
        )));
    }
    if let Some(&value) = h.data().iter().find(|&&v| !(v >= h_min)) {
        return Err(Error::HomotopyUnderflow {
            value,
            floor: h_min,
        });
    }
    let comps = phi
        .displacement()
        .components()
        .iter()
        .zip(u.components())
        .map(|(d, ui)| {
            let data = d
                .data()
                .iter()
                .zip(ui.data())
                .zip(h.data())
                .map(|((&dv, &uv), &hv)| dv + dt * uv / hv)
                .collect();
            ScalarField::new(shape.clone(), data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DeformationField::from_displacement(VectorField::new(
        comps,
    )?))
}

/// `sum_i d(u_i)/d(x_i)`, central differences inside, one-sided on faces.
pub fn divergence(u: &VectorField) -> ScalarField {
    let mut acc = ScalarField::zeros(u.shape());
    for (axis, c) in u.components().iter().enumerate() {
        let p = c.partial(axis);
        for (a, v) in acc.data_mut().iter_mut().zip(p.data()) {
            *a += v;
        }
    }
    acc
}

/// Continuity residual `div(u) + (h_curr - h_prev)/dt`. On boundary-face
/// voxels the value is `|div(u) + dh/dt| + |u|`, folding in the
/// zero-increment boundary condition.
pub fn cic_residual(
    u: &VectorField,
    h_prev: &ScalarField,
    h_curr: &ScalarField,
    dt: f64,
) -> Result<ScalarField> {
    let shape = u.shape();
    for h in [h_prev, h_curr] {
        if h.shape() != shape {
            return Err(Error::mismatch(h.shape().dims(), shape.dims()));
        }
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "dt must be positive, got {dt}"
        )));
    }
    let div = divergence(u);
    let data = (0..shape.len())
        .map(|v| {
            let r = div.data()[v] + (h_curr.data()[v] - h_prev.data()[v]) / dt;
            if shape.on_boundary(&shape.unravel(v)) {
                let norm = u.at(v).iter().map(|x| x * x).sum::<f64>().sqrt();
                r.abs() + norm
            } else {
                r
            }
        })
        .collect();
    ScalarField::new(shape.clone(), data)
}

/// Flow of a stationary velocity by halving `steps` times and composing
/// the result with itself `steps` times.
pub fn scaling_and_squaring(v: &VectorField, steps: u32) -> Result<DeformationField> {
    if steps < 1 {
        return Err(Error::InvalidArgument(
            "scaling-and-squaring needs T >= 1".into(),
        ));
    }
    let mut phi = DeformationField::from_displacement(v.scale(1.0 / 2f64.powi(steps as i32)));
    for _ in 0..steps {
        phi = DeformationField::compose(&phi, &phi)?;
    }
    Ok(phi)
}

/// Mean interior `|det(grad phi) - h_0 / h(phi)|`.
pub fn det_identity_gap(phi: &DeformationField, state: &HomotopyState) -> Result<f64> {
    let shape = phi.shape();
    let h0 = state.eval(&DeformationField::identity(shape))?;
    let h = state.eval(phi)?;
    let det = phi.jacobian().det_field;
    let mut sum = 0.0;
    let mut count = 0usize;
    for v in 0..shape.len() {
        if shape.on_boundary(&shape.unravel(v)) {
            continue;
        }
        sum += (det.data()[v] - h0.data()[v] / h.data()[v]).abs();
        count += 1;
    }
    Ok(sum / count.max(1) as f64)
}

/// One recorded step of an increment integration.
#[derive(Clone, Debug)]
pub struct TraceStep {
    pub t: f64,
    pub increment: VectorField,
    /// Homotopy values `h(phi_{n-1})` used for this step.
    pub homotopy: ScalarField,
    pub phi: DeformationField,
}

#[derive(Clone, Debug)]
pub struct IntegrationTrace {
    pub dt: f64,
    pub steps: Vec<TraceStep>,
    /// `h(phi_N)`, closing the backward difference of the last step.
    pub final_homotopy: ScalarField,
}

impl IntegrationTrace {
    /// Integrates `n_steps` Euler steps with `dt = 1/n_steps`, asking
    /// `increment` for `u_n` given the step index, `phi_{n-1}` and
    /// `h(phi_{n-1})`.
    pub fn integrate(
        phi0: DeformationField,
        state: &HomotopyState,
        n_steps: usize,
        mut increment: impl FnMut(usize, &DeformationField, &ScalarField) -> Result<VectorField>,
    ) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::InvalidArgument("at least one step required".into()));
        }
        let dt = 1.0 / n_steps as f64;
        let mut phi = phi0;
        let mut steps = Vec::with_capacity(n_steps);
        for n in 1..=n_steps {
            let h = state.eval(&phi)?;
            let u = increment(n, &phi, &h)?;
            phi = euler_step(&phi, &u, &h, dt, state.h_min())?;
            steps.push(TraceStep {
                t: n as f64 * dt,
                increment: u,
                homotopy: h,
                phi: phi.clone(),
            });
        }
        let final_homotopy = state.eval(&phi)?;
        Ok(Self {
            dt,
            steps,
            final_homotopy,
        })
    }

    pub fn final_phi(&self) -> &DeformationField {
        &self.steps.last().expect("trace has at least one step").phi
    }

    /// Continuity residual of every step (backward difference in time).
    pub fn residuals(&self) -> Result<Vec<ScalarField>> {
        (0..self.steps.len())
            .map(|n| {
                let h_curr = self
                    .steps
                    .get(n + 1)
                    .map(|s| &s.homotopy)
                    .unwrap_or(&self.final_homotopy);
                cic_residual(
                    &self.steps[n].increment,
                    &self.steps[n].homotopy,
                    h_curr,
                    self.dt,
                )
            })
            .collect()
    }
}
