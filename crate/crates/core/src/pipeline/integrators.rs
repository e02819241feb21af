//! Scaling-and-squaring versus Euler control-increment integration on
//! affine flows with a closed-form solution.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::deformation::DeformationField;
use crate::dynamics::{scaling_and_squaring, HomotopyState, IntegrationTrace};
use crate::error::{Error, Result};
use crate::field::{GridShape, VectorField};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlowKind {
    /// `v = b`, a uniform translation.
    Constant,
    /// General linear `v = A (x - c)` with shear and rotation parts.
    Linear,
    /// Isotropic expansion about the centre.
    Radial,
    /// Rigid rotation in the plane of the first two axes.
    Vortex,
}

impl fmt::Display for FlowKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FlowKind::Constant => "constant",
            FlowKind::Linear => "linear",
            FlowKind::Radial => "radial",
            FlowKind::Vortex => "vortex",
        })
    }
}

impl FromStr for FlowKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(FlowKind::Constant),
            "linear" => Ok(FlowKind::Linear),
            "radial" => Ok(FlowKind::Radial),
            "vortex" => Ok(FlowKind::Vortex),
            other => Err(Error::InvalidArgument(format!(
                "unknown flow `{other}` (expected constant, linear, radial or vortex)"
            ))),
        }
    }
}

/// Stationary affine velocity `v(x) = A (x - c) + b` about the grid centre.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VelocitySpec {
    pub kind: FlowKind,
    pub strength: f64,
}

impl VelocitySpec {
    pub fn new(kind: FlowKind, strength: f64) -> Self {
        Self { kind, strength }
    }

    /// `(A, b)` for a `d`-dimensional grid.
    pub fn affine(&self, d: usize) -> (DMatrix<f64>, Vec<f64>) {
        let s = self.strength;
        let mut a = DMatrix::zeros(d, d);
        let mut b = vec![0.0; d];
        match self.kind {
            FlowKind::Constant => b
                .iter_mut()
                .enumerate()
                .for_each(|(i, v)| *v = s * (1.0 - 0.25 * i as f64)),
            FlowKind::Linear => {
                for i in 0..d {
                    for j in 0..d {
                        a[(i, j)] =
                            s * [[0.4, 1.0, -0.2], [-0.6, -0.3, 0.5], [0.3, -0.4, 0.1]][i][j];
                    }
                }
            }
            FlowKind::Radial => a.fill_diagonal(s),
            FlowKind::Vortex => {
                a[(0, 1)] = -s;
                a[(1, 0)] = s;
            }
        }
        (a, b)
    }

    pub fn velocity(&self, shape: &GridShape) -> VectorField {
        let d = shape.ndim();
        let (a, b) = self.affine(d);
        let c = centre(shape);
        VectorField::from_fn(shape, |idx| {
            (0..d)
                .map(|i| {
                    b[i] + (0..d)
                        .map(|j| a[(i, j)] * (idx[j] as f64 - c[j]))
                        .sum::<f64>()
                })
                .collect()
        })
    }

    /// Time-one flow from the exponential of the augmented matrix
    /// `[[A, b], [0, 0]]`.
    pub fn closed_form(&self, shape: &GridShape) -> DeformationField {
        let d = shape.ndim();
        let (a, b) = self.affine(d);
        let mut aug = DMatrix::zeros(d + 1, d + 1);
        aug.view_mut((0, 0), (d, d)).copy_from(&a);
        for i in 0..d {
            aug[(i, d)] = b[i];
        }
        let e = aug.exp();
        let c = centre(shape);
        DeformationField::from_displacement(VectorField::from_fn(shape, |idx| {
            (0..d)
                .map(|i| {
                    let y = e[(i, d)]
                        + (0..d)
                            .map(|j| e[(i, j)] * (idx[j] as f64 - c[j]))
                            .sum::<f64>();
                    y - (idx[i] as f64 - c[i])
                })
                .collect()
        }))
    }
}

fn centre(shape: &GridShape) -> Vec<f64> {
    shape
        .dims()
        .iter()
        .map(|&n| (n as f64 - 1.0) / 2.0)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegratorRun {
    pub method: String,
    pub steps: usize,
    pub interior_max_error: f64,
    pub interior_mean_error: f64,
    pub fold_fraction: f64,
    /// Whole-field resampling passes performed.
    pub interpolations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegratorReport {
    pub spec: VelocitySpec,
    pub dims: Vec<usize>,
    /// Voxels at least this far from every face are scored; the true
    /// trajectory of such a voxel never leaves the grid.
    pub margin: usize,
    pub scaling_squaring: IntegratorRun,
    pub euler: IntegratorRun,
}

impl fmt::Display for IntegratorReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "flow {} strength {} grid {:?} interior margin {}",
            self.spec.kind, self.spec.strength, self.dims, self.margin
        )?;
        writeln!(f, "method steps max_err mean_err fold interpolations")?;
        for r in [&self.scaling_squaring, &self.euler] {
            writeln!(
                f,
                "{} {} {:.3e} {:.3e} {:.6} {}",
                r.method,
                r.steps,
                r.interior_max_error,
                r.interior_mean_error,
                r.fold_fraction,
                r.interpolations
            )?;
        }
        Ok(())
    }
}

/// Runs scaling-and-squaring with `t` halvings and `n` Euler steps of the
/// control-increment system with `u = v h`, against the exact flow.
pub fn compare_integrators(
    spec: VelocitySpec,
    shape: &GridShape,
    t: u32,
    n: usize,
) -> Result<IntegratorReport> {
    let v = spec.velocity(shape);
    let truth = spec.closed_form(shape);
    // Exact paths are straight-line bounded by the endpoint displacement
    // along a monotone flow; one extra voxel absorbs rotation.
    let max_truth = truth.displacement().max_norm().max(v.max_norm());
    let margin = max_truth.ceil() as usize + 2;
    if shape.dims().iter().any(|&e| e <= 2 * margin) {
        return Err(Error::InvalidArgument(format!(
            "flow moves voxels up to {max_truth:.2}; grid {:?} has no interior",
            shape.dims()
        )));
    }

    let ss = scaling_and_squaring(&v, t)?;
    let state = HomotopyState::with_defaults(shape)?;
    let trace =
        IntegrationTrace::integrate(DeformationField::identity(shape), &state, n, |_, phi, h| {
            let d = shape.ndim();
            let mut comps = Vec::with_capacity(d);
            let (a, b) = spec.affine(d);
            let c = centre(shape);
            for i in 0..d {
                let mut comp = h.clone();
                for (flat, hv) in comp.data_mut().iter_mut().enumerate() {
                    let p = phi.map_voxel(flat);
                    let vi = b[i] + (0..d).map(|j| a[(i, j)] * (p[j] - c[j])).sum::<f64>();
                    *hv *= vi;
                }
                comps.push(comp);
            }
            VectorField::new(comps)
        })?;

    let score = |method: &str, steps: usize, phi: &DeformationField, interpolations: usize| {
        let (max, mean) = interior_error(phi, &truth, margin);
        IntegratorRun {
            method: method.into(),
            steps,
            interior_max_error: max,
            interior_mean_error: mean,
            fold_fraction: phi.jacobian().fold_fraction,
            interpolations,
        }
    };
    Ok(IntegratorReport {
        spec,
        dims: shape.dims().to_vec(),
        margin,
        // One self-composition per halving.
        scaling_squaring: score("scaling-squaring", t as usize, &ss, t as usize),
        // One homotopy resampling per step; the velocity is analytic.
        euler: score("euler", n, trace.final_phi(), n),
    })
}

fn interior_error(phi: &DeformationField, truth: &DeformationField, margin: usize) -> (f64, f64) {
    let shape = phi.shape();
    let (mut max, mut sum, mut count) = (0.0f64, 0.0, 0usize);
    for v in 0..shape.len() {
        if !shape.is_interior(&shape.unravel(v), margin) {
            continue;
        }
        let e = phi
            .displacement()
            .at(v)
            .iter()
            .zip(truth.displacement().at(v))
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        max = max.max(e);
        sum += e;
        count += 1;
    }
    (max, sum / count.max(1) as f64)
}
