//! Training, registration and evaluation drivers.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Tape, Tensor};
use crate::deformation::{DeformationField, LabelField};
use crate::error::{Error, Result};
use crate::field::{GridShape, ScalarField};
use crate::network::Network;
use crate::objectives::{direction_report, graph, LossBreakdown, MetricReport};

use super::config::{DatasetSpec, RunConfig};
use super::synth::{make_synthetic_pair, pair_seed, SyntheticPair};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub iteration: usize,
    pub pair_seed: u64,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: Network,
    pub history: Vec<HistoryEntry>,
}

pub fn grid(config: &RunConfig) -> Result<GridShape> {
    GridShape::new(&config.dims)
}

/// Training pair `i` of a run.
pub fn training_pair(config: &RunConfig, i: usize) -> Result<(u64, SyntheticPair)> {
    let seed = pair_seed(config.seed, i as u64);
    let p = make_synthetic_pair(
        seed,
        config.dataset.kind,
        &grid(config)?,
        config.dataset.amplitude,
    )?;
    Ok((seed, p))
}

/// Held-out pair `i`; drawn from the dataset seed, never the run seed.
pub fn evaluation_pair(
    dataset: &DatasetSpec,
    shape: &GridShape,
    i: usize,
) -> Result<(u64, SyntheticPair)> {
    let seed = pair_seed(dataset.seed, i as u64);
    Ok((
        seed,
        make_synthetic_pair(seed, dataset.kind, shape, dataset.amplitude)?,
    ))
}

/// Fresh weights seeded by the run seed, then [`train_from`].
pub fn train(config: &RunConfig, on_step: impl FnMut(&HistoryEntry)) -> Result<TrainOutcome> {
    config.validate()?;
    let net = Network::new(config.sr.clone(), config.dims.len(), config.seed)?;
    train_from(config, net, on_step)
}

/// One synthetic pair per iteration, batch size 1, Adam on the total
/// loss. A non-finite loss aborts with its breakdown.
pub fn train_from(
    config: &RunConfig,
    mut net: Network,
    mut on_step: impl FnMut(&HistoryEntry),
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut opt = Adam::new(config.lr);
    let mut history = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let (seed, pair) = training_pair(config, it)?;
        let mut tape = Tape::new();
        let p = net.bind(&mut tape);
        let x = tape.constant(Tensor::from_scalar_field(&pair.x));
        let y = tape.constant(Tensor::from_scalar_field(&pair.y));
        let out = net.forward(&mut tape, &p, x, y)?;
        let terms = graph::total(
            &mut tape,
            x,
            y,
            &out,
            &config.weights,
            config.ncc_window,
            config.sr.dt(),
        )?;
        let loss = LossBreakdown::read(&tape, &terms);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: it,
                breakdown: loss.to_string(),
            });
        }
        let grads = tape.backward(terms.total)?;
        opt.step(net.store_mut(), &grads);
        let entry = HistoryEntry {
            iteration: it,
            pair_seed: seed,
            loss,
        };
        on_step(&entry);
        history.push(entry);
    }
    Ok(TrainOutcome { net, history })
}

/// Output of one no-grad forward pass.
#[derive(Clone, Debug)]
pub struct RegistrationResult {
    pub phi: DeformationField,
    pub phi_inv: DeformationField,
    /// Final field of each scale at its own resolution, coarsest first.
    pub scales: Vec<(DeformationField, DeformationField)>,
    pub warped_x: ScalarField,
    pub warped_y: ScalarField,
    pub loss: LossBreakdown,
    pub forward: Option<MetricReport>,
    pub backward: Option<MetricReport>,
}

/// Registers `x` to `y`: `phi` warps `x` onto `y` and `phi_inv` warps `y`
/// onto `x`. Metrics need both label maps.
pub fn register(
    net: &Network,
    config: &RunConfig,
    x: &ScalarField,
    y: &ScalarField,
    labels: Option<(&LabelField, &LabelField)>,
) -> Result<RegistrationResult> {
    for f in [x, y] {
        if f.shape().dims() != config.dims.as_slice() {
            return Err(Error::InvalidShape(format!(
                "expected extents {:?}, got {:?}",
                config.dims,
                f.shape().dims()
            )));
        }
    }
    let mut tape = Tape::new();
    let p = net.bind(&mut tape);
    let xv = tape.constant(Tensor::from_scalar_field(x));
    let yv = tape.constant(Tensor::from_scalar_field(y));
    let out = net.forward(&mut tape, &p, xv, yv)?;
    let terms = graph::total(
        &mut tape,
        xv,
        yv,
        &out,
        &config.weights,
        config.ncc_window,
        config.sr.dt(),
    )?;
    let loss = LossBreakdown::read(&tape, &terms);
    let (phi, phi_inv) = out.fields(&tape)?;
    let field = |v| -> Result<DeformationField> {
        Ok(DeformationField::from_displacement(
            tape.value(v).to_vector_field()?,
        ))
    };
    let mut scales = Vec::with_capacity(out.scales.len());
    for s in &out.scales {
        scales.push((
            field(*s.forward.displacements.last().expect("trace has a start"))?,
            field(*s.backward.displacements.last().expect("trace has a start"))?,
        ));
    }
    let (forward, backward) = match labels {
        Some((mx, my)) => (
            Some(direction_report(x, y, mx, my, &phi)?),
            Some(direction_report(y, x, my, mx, &phi_inv)?),
        ),
        None => (None, None),
    };
    Ok(RegistrationResult {
        warped_x: phi.warp(x)?,
        warped_y: phi_inv.warp(y)?,
        phi,
        phi_inv,
        scales,
        loss,
        forward,
        backward,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub index: usize,
    pub seed: u64,
    /// Mean Dice of the unregistered masks.
    pub baseline_dsc: f64,
    pub forward: MetricReport,
    pub backward: MetricReport,
    /// Mean displacement norm of `phi(phi_inv(x))`.
    pub cycle_error: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(v: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = v.into_iter().collect();
        if v.is_empty() {
            return Self::default();
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionSummary {
    pub dsc: MeanStd,
    pub hd: MeanStd,
    pub ssim: MeanStd,
    pub fold_fraction: MeanStd,
    /// Mean Dice per label, sorted by label.
    pub label_dsc: Vec<(u32, f64)>,
}

impl DirectionSummary {
    fn of(reports: &[&MetricReport]) -> Self {
        let mut labels: Vec<u32> = reports
            .iter()
            .flat_map(|r| r.labels.iter().map(|s| s.label))
            .collect();
        labels.sort_unstable();
        labels.dedup();
        let label_dsc = labels
            .into_iter()
            .map(|l| {
                let v: Vec<f64> = reports
                    .iter()
                    .filter_map(|r| r.label(l))
                    .map(|s| s.dice)
                    .collect();
                (l, v.iter().sum::<f64>() / v.len() as f64)
            })
            .collect();
        Self {
            dsc: MeanStd::of(reports.iter().map(|r| r.dsc)),
            hd: MeanStd::of(reports.iter().map(|r| r.hd)),
            ssim: MeanStd::of(reports.iter().map(|r| r.ssim)),
            fold_fraction: MeanStd::of(reports.iter().map(|r| r.fold_fraction)),
            label_dsc,
        }
    }

    pub fn label(&self, label: u32) -> Option<f64> {
        self.label_dsc
            .iter()
            .find(|(l, _)| *l == label)
            .map(|(_, v)| *v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalTable {
    pub rows: Vec<EvalRow>,
    pub baseline_dsc: MeanStd,
    pub forward: DirectionSummary,
    pub backward: DirectionSummary,
    pub cycle_error: MeanStd,
}

impl EvalTable {
    /// Plain-text table, one line per pair then the summaries.
    pub fn to_text(&self) -> String {
        let mut s = String::from("pair seed baseline fwd_dsc bwd_dsc fwd_hd bwd_hd fwd_ssim bwd_ssim fwd_fold bwd_fold cycle\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{} {} {:.4} {:.4} {:.4} {:.3} {:.3} {:.4} {:.4} {:.6} {:.6} {:.4}\n",
                r.index,
                r.seed,
                r.baseline_dsc,
                r.forward.dsc,
                r.backward.dsc,
                r.forward.hd,
                r.backward.hd,
                r.forward.ssim,
                r.backward.ssim,
                r.forward.fold_fraction,
                r.backward.fold_fraction,
                r.cycle_error
            ));
        }
        let ms = |m: MeanStd| format!("{:.4}±{:.4}", m.mean, m.std);
        for (name, d) in [("forward", &self.forward), ("backward", &self.backward)] {
            s.push_str(&format!(
                "{name}: dsc {} hd {} ssim {} fold {}",
                ms(d.dsc),
                ms(d.hd),
                ms(d.ssim),
                ms(d.fold_fraction)
            ));
            for (l, v) in &d.label_dsc {
                s.push_str(&format!(" label{l} {v:.4}"));
            }
            s.push('\n');
        }
        s.push_str(&format!(
            "baseline dsc {} cycle {}\n",
            ms(self.baseline_dsc),
            ms(self.cycle_error)
        ));
        s
    }
}

/// Registers every held-out pair of `config.dataset`, in pair order.
pub fn evaluate(config: &RunConfig, net: &Network) -> Result<EvalTable> {
    if config.dataset.pairs == 0 {
        return Err(Error::InvalidArgument("evaluation dataset is empty".into()));
    }
    let shape = grid(config)?;
    let mut rows = Vec::with_capacity(config.dataset.pairs);
    for i in 0..config.dataset.pairs {
        let (seed, pair) = evaluation_pair(&config.dataset, &shape, i)?;
        let r = register(
            net,
            config,
            &pair.x,
            &pair.y,
            Some((&pair.mask_x, &pair.mask_y)),
        )?;
        let (cycle_error, _) = r.phi.inverse_consistency(&r.phi_inv)?;
        rows.push(EvalRow {
            index: i,
            seed,
            baseline_dsc: pair.baseline_dice()?,
            forward: r.forward.expect("labels given"),
            backward: r.backward.expect("labels given"),
            cycle_error,
        });
    }
    let fwd: Vec<&MetricReport> = rows.iter().map(|r| &r.forward).collect();
    let bwd: Vec<&MetricReport> = rows.iter().map(|r| &r.backward).collect();
    Ok(EvalTable {
        baseline_dsc: MeanStd::of(rows.iter().map(|r| r.baseline_dsc)),
        forward: DirectionSummary::of(&fwd),
        backward: DirectionSummary::of(&bwd),
        cycle_error: MeanStd::of(rows.iter().map(|r| r.cycle_error)),
        rows,
    })
}
