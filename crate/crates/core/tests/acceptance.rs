//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Runs without the libtest harness so the lines always
//! reach the console.

use std::f64::consts::PI;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use diffeoreg::autodiff::{Tape, Tensor};
use diffeoreg::dynamics::{cic_residual, det_identity_gap, scaling_and_squaring, HomotopyState};
use diffeoreg::network::{Network, SrConfig};
use diffeoreg::pipeline::integrators::{compare_integrators, FlowKind, VelocitySpec};
use diffeoreg::pipeline::selftest::{self, GRAD_TOLERANCE};
use diffeoreg::pipeline::tensorfile::{self, Dtype};
use diffeoreg::pipeline::{
    checkpoint, evaluate, evaluation_pair, register, train, EvalTable, PairKind, RunConfig,
};
use diffeoreg::{GridShape, Result, ScalarField, VectorField};

/// Iteration budget shared by the efficacy and cascade-ablation runs.
const TRAIN_ITERATIONS: usize = 800;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

/// Training setup for the desk-scale runs: 64x64 blob pairs, three scales.
/// The summed smoothness penalty is weighted by about one over the voxel
/// count so it does not swamp the mean NCC; the learning rate is raised
/// for the short budget.
fn training_config(cascades: usize) -> RunConfig {
    let mut c = RunConfig::default();
    c.dims = vec![64, 64];
    c.sr.scales = 3;
    c.sr.cascades = cascades;
    c.lr = 1e-3;
    c.weights.lambda3 = 2.5e-4;
    c.iterations = TRAIN_ITERATIONS;
    c.dataset.kind = PairKind::Blob;
    c.dataset.pairs = 20;
    c
}

struct Trained {
    table: EvalTable,
    elapsed: Duration,
    iterations: usize,
}

fn train_and_evaluate(config: &RunConfig) -> Result<Trained> {
    let start = Instant::now();
    let out = train(config, |_| {})?;
    let elapsed = start.elapsed();
    Ok(Trained {
        table: evaluate(config, &out.net)?,
        elapsed,
        iterations: out.history.len(),
    })
}

fn criterion_1() -> Result<Outcome> {
    let start = Instant::now();
    let mut checks = selftest::primitive_gradchecks()?;
    checks.push(selftest::toy_total_gradcheck()?);
    let secs = start.elapsed().as_secs_f64();
    let worst = checks.iter().map(|c| c.value).fold(0.0, f64::max);
    let failed: Vec<_> = checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| c.name.clone())
        .collect();
    let toy = checks.last().expect("toy check present").value;
    Ok(outcome(
        failed.is_empty() && worst < GRAD_TOLERANCE && secs < 120.0,
        format!(
            "{} gradchecks, worst rel err {worst:.2e} (toy total {toy:.2e}), {secs:.1}s{}",
            checks.len(),
            if failed.is_empty() {
                String::new()
            } else {
                format!(", failed: {failed:?}")
            }
        ),
    ))
}

fn criterion_2() -> Result<Outcome> {
    let config = training_config(4);
    let net = Network::new(config.sr.clone(), 2, 17)?;
    let shape = GridShape::new(&config.dims)?;
    let mut worst_disp = 0.0f64;
    let mut worst_fold = 0.0f64;
    let mut dice_mismatch = 0usize;
    for i in 0..20 {
        let (_, pair) = evaluation_pair(&config.dataset, &shape, i)?;
        let r = register(
            &net,
            &config,
            &pair.x,
            &pair.y,
            Some((&pair.mask_x, &pair.mask_y)),
        )?;
        for f in [&r.phi, &r.phi_inv] {
            worst_disp = worst_disp.max(f.displacement().max_norm());
        }
        let (fwd, bwd) = (r.forward.expect("labels"), r.backward.expect("labels"));
        worst_fold = worst_fold.max(fwd.fold_fraction).max(bwd.fold_fraction);
        let base = pair.baseline_dice()?;
        if fwd.dsc != base || bwd.dsc != base {
            dice_mismatch += 1;
        }
    }
    Ok(outcome(
        worst_disp == 0.0 && worst_fold == 0.0 && dice_mismatch == 0,
        format!("20 pairs: max |d| {worst_disp:e}, max fold {worst_fold}, dice != baseline on {dice_mismatch}"),
    ))
}

fn random_image(shape: &GridShape, rng: &mut ChaCha8Rng) -> Result<ScalarField> {
    ScalarField::from_fn(shape, |_| rng.gen_range(0.0..1.0)).gaussian_smooth(1.5)
}

fn criterion_3() -> Result<Outcome> {
    // Random weights everywhere, gates included, so the check is not
    // satisfied trivially by the zero-initialized identity.
    let mut net = Network::new(SrConfig::default(), 2, 5)?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ids: Vec<_> = net.store().iter().map(|(id, _, _)| id).collect();
    for id in ids {
        for v in net.store_mut().value_mut(id).data_mut() {
            *v = rng.gen_range(-0.15..0.15);
        }
    }
    let shape = GridShape::new(&[64, 64])?;
    let mut compared = 0usize;
    let mut mismatched = 0usize;
    let mut moved = 0.0f64;
    for _ in 0..20 {
        let x = random_image(&shape, &mut rng)?;
        let y = random_image(&shape, &mut rng)?;
        let run = |a: &ScalarField, b: &ScalarField| -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
            let mut tape = Tape::new();
            let p = net.bind(&mut tape);
            let av = tape.constant(Tensor::from_scalar_field(a));
            let bv = tape.constant(Tensor::from_scalar_field(b));
            let o = net.forward(&mut tape, &p, av, bv)?;
            let collect = |fwd: bool| {
                let mut vals = vec![tape
                    .value(if fwd { o.phi } else { o.phi_inv })
                    .data()
                    .to_vec()];
                for s in &o.scales {
                    let path = if fwd { &s.forward } else { &s.backward };
                    for v in path
                        .displacements
                        .iter()
                        .chain(&path.increments)
                        .chain(&path.homotopy)
                    {
                        vals.push(tape.value(*v).data().to_vec());
                    }
                }
                vals
            };
            Ok((collect(true), collect(false)))
        };
        let (f, b) = run(&x, &y)?;
        let (f2, b2) = run(&y, &x)?;
        moved = moved.max(f[0].iter().fold(0.0, |m, v| m.max(v.abs())));
        for (p, q) in f.iter().zip(&b2).chain(b.iter().zip(&f2)) {
            compared += p.len();
            mismatched += p
                .iter()
                .zip(q)
                .filter(|(a, b)| a.to_bits() != b.to_bits())
                .count();
        }
    }
    Ok(outcome(
        mismatched == 0 && moved > 0.0,
        format!("20 pairs, {compared} values compared (fields and per-step traces), {mismatched} differ; max |d| {moved:.3}"),
    ))
}

fn criterion_4(n4: &Trained, config: &RunConfig) -> Outcome {
    let t = &n4.table;
    let gain = t.forward.dsc.mean - t.baseline_dsc.mean;
    let blob = t.forward.label(1).unwrap_or(0.0);
    let fold = t
        .forward
        .fold_fraction
        .mean
        .max(t.backward.fold_fraction.mean);
    let gap = (t.forward.dsc.mean - t.backward.dsc.mean).abs();
    let mins = n4.elapsed.as_secs_f64() / 60.0;
    let budget_ok =
        n4.iterations <= 2000 && config.sr.scales == 3 && config.sr.cascades == 4 && mins < 30.0;
    outcome(
        gain >= 0.15 && blob >= 0.90 && fold <= 1e-4 && gap < 0.05 && budget_ok,
        format!(
            "dsc {:.4} -> {:.4} (gain {gain:.4}), blob label {blob:.4}, fold {fold:.2e}, fwd/bwd gap {gap:.4}, {} iters in {mins:.1} min",
            t.baseline_dsc.mean, t.forward.dsc.mean, n4.iterations
        ),
    )
}

fn criterion_5(n4: &Trained) -> Outcome {
    let c = n4.table.cycle_error;
    outcome(
        c.mean < 0.5,
        format!(
            "mean |phi(phi_inv(x)) - x| {:.4} ± {:.4} voxels",
            c.mean, c.std
        ),
    )
}

fn criterion_6() -> Result<Outcome> {
    let shape = GridShape::new(&[64, 64])?;
    let linear = compare_integrators(VelocitySpec::new(FlowKind::Linear, 0.05), &shape, 7, 4)?;
    let err = linear.scaling_squaring.interior_max_error;
    let shift = [1.75, -0.6];
    let phi = scaling_and_squaring(&VectorField::from_fn(&shape, |_| shift.to_vec()), 7)?;
    let mut shift_err = 0.0f64;
    for v in 0..shape.len() {
        // Samples stay inside the grid once 2 voxels from every face.
        if shape.is_interior(&shape.unravel(v), 2) {
            let d = phi.displacement().at(v);
            shift_err = shift_err
                .max((d[0] - shift[0]).abs())
                .max((d[1] - shift[1]).abs());
        }
    }
    // Exact up to rounding of the interpolation weights.
    Ok(outcome(
        err < 1e-3 && shift_err < 1e-12,
        format!("linear T=7 interior max error {err:.2e} voxels; constant field translation error {shift_err:e}"),
    ))
}

/// `psi(s) = c F(s0) G(s1)` with `F = sin^2(pi s)` and `G = sin^4(pi s)` on
/// unit coordinates `s = x/(n-1)`; velocity in voxels is
/// `(n-1) (d psi/d s1, -d psi/d s0)`, so the same physical flow is sampled
/// at every resolution. Mixing two Fourier modes in `G` keeps the central
/// difference truncation error from cancelling between the two terms.
const PSI_C: f64 = 0.015;

fn f0(t: f64) -> f64 {
    t.sin().powi(2)
}
fn f1(t: f64) -> f64 {
    PI * (2.0 * t).sin()
}
fn f3(t: f64) -> f64 {
    -4.0 * PI.powi(3) * (2.0 * t).sin()
}
fn g0(t: f64) -> f64 {
    t.sin().powi(4)
}
fn g1(t: f64) -> f64 {
    PI * ((2.0 * t).sin() - 0.5 * (4.0 * t).sin())
}
fn g3(t: f64) -> f64 {
    PI.powi(3) * (-4.0 * (2.0 * t).sin() + 8.0 * (4.0 * t).sin())
}

fn stream_velocity(n: usize) -> Result<VectorField> {
    let shape = GridShape::new(&[n, n])?;
    let l = (n - 1) as f64;
    Ok(VectorField::from_fn(&shape, |i| {
        let (a, b) = (PI * i[0] as f64 / l, PI * i[1] as f64 / l);
        vec![l * PSI_C * f0(a) * g1(b), -l * PSI_C * f1(a) * g0(b)]
    }))
}

fn criterion_7() -> Result<Outcome> {
    let gap = |n: usize| -> Result<f64> {
        let v = stream_velocity(n)?;
        let phi = scaling_and_squaring(&v, 7)?;
        det_identity_gap(&phi, &HomotopyState::with_defaults(phi.shape())?)
    };
    let (g64, g128) = (gap(64)?, gap(128)?);
    Ok(outcome(
        g64 < 5e-2 && g128 < g64,
        format!("divergence-free flow: gap {g64:.3e} at 64², {g128:.3e} at 128²"),
    ))
}

fn criterion_8() -> Result<Outcome> {
    // The analytic divergence is zero, so the discrete residual is the
    // central-difference truncation error. Its leading term with
    // h = 1/(n-1) is (c h^2/6)(F'''(s0) G'(s1) - F'(s0) G'''(s1)).
    let residual = |n: usize| -> Result<(f64, f64)> {
        let v = stream_velocity(n)?;
        let shape = v.shape().clone();
        let h = ScalarField::filled(&shape, 1.0);
        let r = cic_residual(&v, &h, &h, 0.25)?;
        let l = (n - 1) as f64;
        let (mut worst, mut bound) = (0.0f64, 0.0f64);
        for k in 0..shape.len() {
            let idx = shape.unravel(k);
            if !shape.is_interior(&idx, 1) {
                continue;
            }
            let (a, b) = (PI * idx[0] as f64 / l, PI * idx[1] as f64 / l);
            worst = worst.max(r.data()[k].abs());
            bound = bound.max(PSI_C * (f3(a) * g1(b) - f1(a) * g3(b)).abs() / (6.0 * l * l));
        }
        Ok((worst, bound))
    };
    let (r64, b64) = residual(64)?;
    let (r128, b128) = residual(128)?;
    let g = GridShape::new(&[32, 32])?;
    let one = ScalarField::filled(&g, 1.0);
    let zero = cic_residual(&VectorField::zeros(&g), &one, &one, 0.25)?;
    let zero_max = zero.data().iter().map(|v| v.abs()).fold(0.0, f64::max);
    // Higher-order terms are below 1% of the leading one at these
    // resolutions; halving h must cut the residual about fourfold.
    let within = r64 <= 1.05 * b64 && r128 <= 1.05 * b128 && r128 < r64 / 3.5;
    Ok(outcome(
        within && zero_max == 0.0,
        format!(
            "interior max residual {r64:.3e} (bound {b64:.3e}) at 64², {r128:.3e} (bound {b128:.3e}) at 128²; zero flow {zero_max:e}"
        ),
    ))
}

fn criterion_9(n4: &Trained) -> Result<Outcome> {
    let n1 = train_and_evaluate(&training_config(1))?;
    let (d1, d4) = (n1.table.forward.dsc.mean, n4.table.forward.dsc.mean);
    Ok(outcome(
        d4 >= d1 && n1.iterations == n4.iterations,
        format!("{} iters each: dsc N=1 {d1:.4}, N=4 {d4:.4}", n4.iterations),
    ))
}

fn criterion_10() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut roundtrip_bad = 0usize;
    let mut tensors = 0usize;
    for rank in 0..=4 {
        for _ in 0..10 {
            let shape: Vec<usize> = (0..rank).map(|_| rng.gen_range(1..5)).collect();
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1e3..1e3)).collect();
            let t64 = Tensor::new(shape.clone(), data.clone())?;
            let t32 = Tensor::new(shape, data.iter().map(|&v| v as f32 as f64).collect())?;
            for (t, dtype) in [(t64, Dtype::F64), (t32, Dtype::F32)] {
                let (back, d) = tensorfile::decode(&tensorfile::encode(&t, dtype)?)?;
                tensors += 1;
                let same = d == dtype
                    && back.shape() == t.shape()
                    && back
                        .data()
                        .iter()
                        .zip(t.data())
                        .all(|(a, b)| a.to_bits() == b.to_bits());
                roundtrip_bad += usize::from(!same);
            }
        }
    }

    let mut config = RunConfig::default();
    config.dims = vec![32, 32];
    config.lr = 1e-3;
    config.weights.lambda3 = 1e-3;
    config.iterations = 30;
    config.seed = 4;
    config.dataset.pairs = 4;
    let a = train(&config, |_| {})?;
    let b = train(&config, |_| {})?;
    let same_history = a.history == b.history;
    let ta = evaluate(&config, &a.net)?;
    let tb = evaluate(&config, &b.net)?;
    let dir = tempfile::tempdir()?;
    checkpoint::save(dir.path(), &config, &a.net)?;
    let (loaded_cfg, loaded) = checkpoint::load(dir.path())?;
    let tc = evaluate(&loaded_cfg, &loaded)?;
    let same_tables = ta == tb && ta == tc;
    Ok(outcome(
        roundtrip_bad == 0 && same_history && same_tables,
        format!(
            "{tensors} tensors round-tripped, {roundtrip_bad} differ; rerun history identical {same_history}; evaluate tables identical (rerun and reloaded checkpoint) {same_tables}"
        ),
    ))
}

fn report(number: usize, result: Result<Outcome>, failures: &mut usize) {
    let o = result.unwrap_or_else(|e| outcome(false, format!("error: {e}")));
    if !o.passed {
        *failures += 1;
    }
    println!(
        "criterion {number:>2}: {} {}",
        if o.passed { "PASS" } else { "FAIL" },
        o.detail
    );
}

/// `ACCEPTANCE_ONLY=6,8` restricts the run to the listed criteria.
fn selected() -> Vec<usize> {
    match std::env::var("ACCEPTANCE_ONLY") {
        Ok(list) => list
            .split(',')
            .filter_map(|s| s.trim().parse().ok())
            .collect(),
        Err(_) => (1..=10).collect(),
    }
}

fn main() -> ExitCode {
    // `cargo test -- --list` and filters would otherwise trigger the full run.
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let want = selected();
    let on = |n: usize| want.contains(&n);
    let mut failures = 0;
    if on(1) {
        report(1, criterion_1(), &mut failures);
    }
    if on(2) {
        report(2, criterion_2(), &mut failures);
    }
    if on(3) {
        report(3, criterion_3(), &mut failures);
    }
    let config = training_config(4);
    let n4 = if on(4) || on(5) || on(9) {
        Some(train_and_evaluate(&config))
    } else {
        None
    };
    let untrained = |e: &diffeoreg::Error| {
        Err(diffeoreg::Error::InvalidArgument(format!(
            "N=4 training failed: {e}"
        )))
    };
    if let Some(n4) = &n4 {
        match n4 {
            Ok(t) => {
                if on(4) {
                    report(4, Ok(criterion_4(t, &config)), &mut failures);
                }
                if on(5) {
                    report(5, Ok(criterion_5(t)), &mut failures);
                }
            }
            Err(e) => {
                for n in [4, 5].into_iter().filter(|&n| on(n)) {
                    report(n, untrained(e), &mut failures);
                }
            }
        }
    }
    if on(6) {
        report(6, criterion_6(), &mut failures);
    }
    if on(7) {
        report(7, criterion_7(), &mut failures);
    }
    if on(8) {
        report(8, criterion_8(), &mut failures);
    }
    if on(9) {
        match n4.as_ref().expect("trained when 9 is selected") {
            Ok(t) => report(9, criterion_9(t), &mut failures),
            Err(e) => report(9, untrained(e), &mut failures),
        }
    }
    if on(10) {
        report(10, criterion_10(), &mut failures);
    }
    println!(
        "acceptance: {} of {} criteria passed",
        want.len() - failures,
        want.len()
    );
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
