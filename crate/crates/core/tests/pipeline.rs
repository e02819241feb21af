use diffeoreg::autodiff::Tensor;
use diffeoreg::network::Network;
use diffeoreg::pipeline::synth::pair_seed;
use diffeoreg::pipeline::{
    checkpoint, evaluate, evaluation_pair, make_synthetic_pair, register, train, train_from,
    PairKind, RunConfig,
};
use diffeoreg::{Error, GridShape};

fn small_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.dims = vec![32, 32];
    c.lr = 1e-3;
    c.weights.lambda3 = 1e-3;
    c.dataset.pairs = 3;
    c
}

#[test]
fn zero_iterations_keep_the_initialization() {
    let mut c = small_config();
    c.iterations = 0;
    let out = train(&c, |_| {}).unwrap();
    assert!(out.history.is_empty());
    let fresh = Network::new(c.sr.clone(), 2, c.seed).unwrap();
    let same = out
        .net
        .store()
        .iter()
        .zip(fresh.store().iter())
        .all(|((_, a, x), (_, b, y))| a == b && x == y);
    assert!(same);

    let (_, pair) = evaluation_pair(&c.dataset, &GridShape::new(&c.dims).unwrap(), 0).unwrap();
    let r = register(
        &out.net,
        &c,
        &pair.x,
        &pair.x,
        Some((&pair.mask_x, &pair.mask_x)),
    )
    .unwrap();
    assert_eq!(r.phi.displacement().max_norm(), 0.0);
    assert_eq!(r.phi_inv.displacement().max_norm(), 0.0);
    assert_eq!(r.forward.unwrap().dsc, 1.0);
    assert_eq!(r.warped_x, pair.x);
}

#[test]
fn training_reduces_similarity_loss_and_never_hurts_dice() {
    let mut c = small_config();
    c.iterations = 200;
    let shape = GridShape::new(&c.dims).unwrap();
    let init = Network::new(c.sr.clone(), 2, c.seed).unwrap();
    let trained = train_from(&c, init.clone(), |_| {}).unwrap();
    assert_eq!(trained.history.len(), 200);
    for i in 0..c.dataset.pairs {
        let (_, pair) = evaluation_pair(&c.dataset, &shape, i).unwrap();
        let labels = Some((&pair.mask_x, &pair.mask_y));
        let before = register(&init, &c, &pair.x, &pair.y, labels).unwrap();
        let after = register(&trained.net, &c, &pair.x, &pair.y, labels).unwrap();
        assert!(
            after.loss.sim < before.loss.sim,
            "pair {i}: {} vs {}",
            after.loss.sim,
            before.loss.sim
        );
        assert!(
            after.forward.unwrap().dsc >= pair.baseline_dice().unwrap(),
            "pair {i}"
        );
    }
}

#[test]
fn training_is_deterministic() {
    let mut c = small_config();
    c.iterations = 5;
    let a = train(&c, |_| {}).unwrap();
    let mut streamed = Vec::new();
    let b = train(&c, |e| streamed.push(e.clone())).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(streamed, b.history);
    // Every component is recorded.
    let e = &a.history[4];
    assert!(e.loss.sim < 0.0 && e.loss.cycle < 0.0 && e.loss.smooth >= 0.0 && e.loss.cic >= 0.0);
    assert_eq!(e.pair_seed, pair_seed(c.seed, 4));
}

#[test]
fn non_finite_loss_aborts_with_breakdown() {
    let mut c = small_config();
    c.iterations = 3;
    let mut net = Network::new(c.sr.clone(), 2, 0).unwrap();
    let id = net.store().id("unet.enc0a.w").unwrap();
    net.store_mut().value_mut(id).data_mut()[0] = f64::NAN;
    match train_from(&c, net, |_| {}) {
        Err(Error::NonFiniteLoss {
            iteration,
            breakdown,
        }) => {
            assert_eq!(iteration, 0);
            assert!(
                breakdown.contains("sim=") && breakdown.contains("NaN"),
                "{breakdown}"
            );
        }
        other => panic!("expected a non-finite loss error, got {other:?}"),
    }
}

#[test]
fn register_rejects_wrong_extents() {
    let c = small_config();
    let net = Network::new(c.sr.clone(), 2, 0).unwrap();
    let (_, pair) = evaluation_pair(&c.dataset, &GridShape::new(&[64, 64]).unwrap(), 0).unwrap();
    let err = register(&net, &c, &pair.x, &pair.y, None)
        .unwrap_err()
        .to_string();
    assert!(
        err.contains("[32, 32]") && err.contains("[64, 64]"),
        "{err}"
    );
}

#[test]
fn swapped_arguments_swap_the_result() {
    let c = small_config();
    let mut net = Network::new(c.sr.clone(), 2, 0).unwrap();
    // Perturb the zero-initialized gates so the fields are not identity.
    let ids: Vec<_> = net
        .store()
        .iter()
        .filter(|(_, n, _)| n.starts_with("lstm"))
        .map(|(id, _, _)| id)
        .collect();
    for (k, id) in ids.into_iter().enumerate() {
        for (j, v) in net
            .store_mut()
            .value_mut(id)
            .data_mut()
            .iter_mut()
            .enumerate()
        {
            *v = 0.05 * (((j * 7 + k * 13) % 11) as f64 / 5.0 - 1.0);
        }
    }
    let (_, pair) = evaluation_pair(&c.dataset, &GridShape::new(&c.dims).unwrap(), 1).unwrap();
    let a = register(
        &net,
        &c,
        &pair.x,
        &pair.y,
        Some((&pair.mask_x, &pair.mask_y)),
    )
    .unwrap();
    let b = register(
        &net,
        &c,
        &pair.y,
        &pair.x,
        Some((&pair.mask_y, &pair.mask_x)),
    )
    .unwrap();
    assert!(a.phi.displacement().max_norm() > 0.0);
    assert_eq!(a.phi, b.phi_inv);
    assert_eq!(a.phi_inv, b.phi);
    assert_eq!(a.warped_x, b.warped_y);
    assert_eq!(a.forward, b.backward);
    assert_eq!(a.backward, b.forward);
}

#[test]
fn metrics_are_recomputable_from_stored_fields() {
    let c = small_config();
    let mut net = Network::new(c.sr.clone(), 2, 0).unwrap();
    let id = net.store().id("lstm2.w").unwrap();
    net.store_mut()
        .value_mut(id)
        .data_mut()
        .iter_mut()
        .enumerate()
        .for_each(|(j, v)| *v = 0.01 * ((j % 5) as f64 - 2.0));
    let (_, pair) = evaluation_pair(&c.dataset, &GridShape::new(&c.dims).unwrap(), 2).unwrap();
    let r = register(
        &net,
        &c,
        &pair.x,
        &pair.y,
        Some((&pair.mask_x, &pair.mask_y)),
    )
    .unwrap();
    // Round the fields through a checkpoint-grade container and recompute.
    let phi = Tensor::from_vector_field(r.phi.displacement())
        .to_vector_field()
        .unwrap();
    let again = diffeoreg::objectives::direction_report(
        &pair.x,
        &pair.y,
        &pair.mask_x,
        &pair.mask_y,
        &diffeoreg::DeformationField::from_displacement(phi),
    )
    .unwrap();
    assert_eq!(Some(again), r.forward);
    assert_eq!(r.scales.len(), c.sr.scales);
    assert_eq!(r.scales[0].0.shape().dims(), &[8, 8]);
}

#[test]
fn evaluate_is_ordered_and_rejects_empty_sets() {
    let mut c = small_config();
    let net = Network::new(c.sr.clone(), 2, 0).unwrap();
    let t = evaluate(&c, &net).unwrap();
    let idx: Vec<usize> = t.rows.iter().map(|r| r.index).collect();
    assert_eq!(idx, vec![0, 1, 2]);
    assert_eq!(t.rows[1].seed, pair_seed(c.dataset.seed, 1));
    assert!((t.forward.dsc.mean - t.baseline_dsc.mean).abs() < 1e-12);
    assert!(t.to_text().lines().count() >= 6);
    c.dataset.pairs = 0;
    assert!(evaluate(&c, &net).is_err());
}

#[test]
fn checkpoint_round_trip_preserves_registration() {
    let mut c = small_config();
    c.iterations = 3;
    let out = train(&c, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    checkpoint::save(dir.path(), &c, &out.net).unwrap();
    let (c2, net2) = checkpoint::load(dir.path()).unwrap();
    assert_eq!(c2, c);
    let (_, pair) = evaluation_pair(&c.dataset, &GridShape::new(&c.dims).unwrap(), 0).unwrap();
    let a = register(&out.net, &c, &pair.x, &pair.y, None).unwrap();
    let b = register(&net2, &c2, &pair.x, &pair.y, None).unwrap();
    assert_eq!(a.phi, b.phi);
}

#[test]
fn default_amplitude_baseline_band_over_100_seeds() {
    let shape = GridShape::new(&[64, 64]).unwrap();
    for kind in [PairKind::Blob, PairKind::CShape, PairKind::MultiOrgan] {
        let dice: Vec<f64> = (0..100)
            .map(|s| {
                make_synthetic_pair(
                    pair_seed(77, s),
                    kind,
                    &shape,
                    diffeoreg::pipeline::synth::DEFAULT_AMPLITUDE,
                )
                .unwrap()
                .baseline_dice()
                .unwrap()
            })
            .collect();
        let mean = dice.iter().sum::<f64>() / dice.len() as f64;
        assert!(
            (0.4..=0.8).contains(&mean),
            "{kind}: mean baseline dice {mean}"
        );
    }
}
