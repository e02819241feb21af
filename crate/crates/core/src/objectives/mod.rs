//! Training losses and evaluation metrics.
//!
//! [`graph`] builds the differentiable terms on a tape; the free
//! functions here evaluate the same terms on plain fields.

pub mod graph;
mod metrics;

pub use metrics::{dice, direction_report, hausdorff, ssim, LabelScore, MetricReport};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::deformation::DeformationField;
use crate::error::{Error, Result};
use crate::field::ScalarField;

pub const DEFAULT_NCC_WINDOW: usize = 9;

/// Weights of the five loss terms; `lambda1` holds one weight per scale,
/// coarsest first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: Vec<f64>,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda5: f64,
}

impl LossWeights {
    pub fn defaults(scales: usize) -> Self {
        Self {
            lambda1: vec![0.8; scales],
            lambda2: 1e5,
            lambda3: 1.0,
            lambda4: 0.1,
            lambda5: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all =
            self.lambda1
                .iter()
                .chain([&self.lambda2, &self.lambda3, &self.lambda4, &self.lambda5]);
        for &w in all {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Config(format!(
                    "loss weights must be finite and non-negative, got {w}"
                )));
            }
        }
        Ok(())
    }
}

/// Values of every loss term for one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sim: f64,
    pub jdet: f64,
    pub smooth: f64,
    pub cycle: f64,
    pub cic: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn read(tape: &Tape, t: &graph::LossTerms) -> Self {
        let v = |x| tape.value(x).item();
        Self {
            sim: v(t.sim),
            jdet: v(t.jdet),
            smooth: v(t.smooth),
            cycle: v(t.cycle),
            cic: v(t.cic),
            total: v(t.total),
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.sim,
            self.jdet,
            self.smooth,
            self.cycle,
            self.cic,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

impl std::fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "total={:.6} sim={:.6} jdet={:.6} smooth={:.6} cycle={:.6} cic={:.6}",
            self.total, self.sim, self.jdet, self.smooth, self.cycle, self.cic
        )
    }
}

fn image(tape: &mut Tape, f: &ScalarField) -> crate::autodiff::Var {
    tape.constant(Tensor::from_scalar_field(f))
}

fn disp(tape: &mut Tape, phi: &DeformationField) -> crate::autodiff::Var {
    tape.constant(Tensor::from_vector_field(phi.displacement()))
}

/// Negated mean local NCC.
pub fn ncc_loss(x: &ScalarField, y: &ScalarField, window: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let (a, b) = (image(&mut tape, x), image(&mut tape, y));
    let l = graph::ncc(&mut tape, a, b, window)?;
    Ok(tape.value(l).item())
}

pub fn smooth_loss(phi: &DeformationField) -> Result<f64> {
    let mut tape = Tape::new();
    let d = disp(&mut tape, phi);
    let l = graph::smooth(&mut tape, d)?;
    Ok(tape.value(l).item())
}

pub fn jdet_loss(phi: &DeformationField) -> Result<f64> {
    let mut tape = Tape::new();
    let d = disp(&mut tape, phi);
    let l = graph::jdet(&mut tape, d)?;
    Ok(tape.value(l).item())
}

pub fn cycle_loss(
    x: &ScalarField,
    y: &ScalarField,
    phi: &DeformationField,
    phi_inv: &DeformationField,
    window: usize,
) -> Result<f64> {
    let mut tape = Tape::new();
    let (a, b) = (image(&mut tape, x), image(&mut tape, y));
    let (f, g) = (disp(&mut tape, phi), disp(&mut tape, phi_inv));
    let l = graph::cycle(&mut tape, a, b, f, g, window)?;
    Ok(tape.value(l).item())
}
