use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Random values whose magnitude is at least `margin`.
fn away_from_zero(shape: &[usize], margin: f64, seed: u64) -> Tensor {
    let mut t = random(shape, -1.0, 1.0, seed);
    for v in t.data_mut() {
        if v.abs() < margin {
            *v = margin.copysign(*v) * 2.0;
        }
    }
    t
}

/// Contracts a tensor-valued node against fixed pseudo-random weights so
/// every output coordinate contributes a distinct amount to the scalar.
fn probe(tape: &mut Tape, v: Var) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    let w = tape.constant(random(&shape, 0.5, 1.5, 99));
    let p = tape.mul(v, w)?;
    Ok(tape.sum(p))
}

use crate::error::Result;

const TOL: f64 = 1e-4;

#[test]
fn sigmoid_and_tanh_at_zero() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::scalar(0.0));
    let s = tape.sigmoid(x);
    let t = tape.tanh(x);
    assert_eq!(tape.value(s).item(), 0.5);
    assert_eq!(tape.value(t).item(), 0.0);
}

#[test]
fn identity_kernel_conv_is_identity() {
    for shape in [vec![1, 5, 4], vec![1, 3, 4, 2]] {
        let x = random(&shape, -1.0, 1.0, 1);
        let mut kshape = vec![1, 1];
        kshape.extend(std::iter::repeat_n(1, shape.len() - 1));
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let w = tape.constant(Tensor::filled(&kshape, 1.0));
        let y = tape.conv(xv, w, None, 1, 0).unwrap();
        assert_eq!(tape.value(y), &x);
    }
}

#[test]
fn conv_matches_hand_expansion() {
    // input rows [1 2 3; 4 5 6; 7 8 9], kernel [1 0; -1 2]
    let x = Tensor::new(vec![1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
    let w = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, -1.0, 2.0]).unwrap();
    let mut expect = Vec::new();
    let xs = x.data();
    for i in 0..2 {
        for j in 0..2 {
            let at = |r: usize, c: usize| xs[r * 3 + c];
            expect.push(at(i, j) - at(i + 1, j) + 2.0 * at(i + 1, j + 1));
        }
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let wv = tape.constant(w);
    let y = tape.conv(xv, wv, None, 1, 0).unwrap();
    assert_eq!(tape.shape(y), &[1, 2, 2]);
    assert_eq!(tape.value(y).data(), expect.as_slice());
    assert_eq!(expect, vec![7.0, 9.0, 13.0, 15.0]);
}

#[test]
fn shape_errors_carry_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[1, 4, 4]));
    let b = tape.constant(Tensor::zeros(&[1, 4, 5]));
    match tape.add(a, b) {
        Err(crate::Error::ShapeMismatch { left, right }) => {
            assert_eq!(left, vec![1, 4, 4]);
            assert_eq!(right, vec![1, 4, 5]);
        }
        other => panic!("unexpected {other:?}"),
    }
    let w = tape.constant(Tensor::zeros(&[2, 3, 3, 3]));
    assert!(tape.conv(a, w, None, 1, 1).is_err());
}

#[test]
fn backward_requires_scalar_root() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(&[1, 2, 2]));
    assert!(tape.backward(a).is_err());
}

#[test]
fn grad_of_sum_is_ones() {
    let mut store = ParamStore::new();
    let id = store.add("p", random(&[2, 3, 3], -1.0, 1.0, 3)).unwrap();
    let mut tape = Tape::new();
    let p = tape.param(&store, id);
    let s = tape.sum(p);
    let g = tape.backward(s).unwrap();
    assert!(g.for_param(id).unwrap().iter().all(|&v| v == 1.0));
}

#[test]
fn grad_of_mean_square() {
    let mut store = ParamStore::new();
    let pt = random(&[1, 4, 5], -1.0, 1.0, 4);
    let id = store.add("p", pt.clone()).unwrap();
    let mut tape = Tape::new();
    let p = tape.param(&store, id);
    let sq = tape.square(p);
    let m = tape.mean(sq);
    let g = tape.backward(m).unwrap();
    let n = pt.len() as f64;
    for (a, x) in g.for_param(id).unwrap().iter().zip(pt.data()) {
        assert!((a - 2.0 * x / n).abs() < 1e-15);
    }
}

#[test]
fn reused_node_accumulates() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0));
    let y = tape.mul(x, x).unwrap();
    let z = tape.add(y, x).unwrap();
    let g = tape.backward(z).unwrap();
    assert_eq!(g.wrt(x).unwrap(), &[7.0]);
}

#[test]
fn constants_get_no_gradient() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::scalar(2.0));
    let x = tape.leaf(Tensor::scalar(3.0));
    let y = tape.mul(c, x).unwrap();
    let g = tape.backward(y).unwrap();
    assert!(g.wrt(c).is_none());
    assert_eq!(g.wrt(x).unwrap(), &[2.0]);
}

#[test]
fn gradcheck_quadratic_form() {
    let a = random(&[1, 3, 3], -1.0, 1.0, 5);
    let x = random(&[1, 3, 3], -1.0, 1.0, 6);
    let err = gradcheck(
        |t, v| {
            let ax = t.mul(v[0], v[1])?;
            let q = t.mul(ax, v[1])?;
            Ok(t.sum(q))
        },
        &[a, x],
        1e-4,
    )
    .unwrap();
    assert!(err < 1e-7, "{err}");
}

#[test]
fn gradcheck_elementwise() {
    let x = random(&[2, 3, 4], -1.0, 1.0, 7);
    let y = random(&[2, 3, 4], 0.5, 1.5, 8);
    type Build = fn(&mut Tape, Var, Var) -> Result<Var>;
    let cases: Vec<(&str, Build)> = vec![
        ("add", |t, a, b| t.add(a, b)),
        ("sub", |t, a, b| t.sub(a, b)),
        ("mul", |t, a, b| t.mul(a, b)),
        ("div", |t, a, b| t.div(a, b)),
        ("scale", |t, a, _| Ok(t.scale(a, -1.7))),
        ("add_scalar", |t, a, _| Ok(t.add_scalar(a, 0.3))),
        ("sigmoid", |t, a, _| Ok(t.sigmoid(a))),
        ("tanh", |t, a, _| Ok(t.tanh(a))),
        ("sqrt", |t, _, b| Ok(t.sqrt(b))),
        ("concat", |t, a, b| t.concat(&[a, b, a])),
        ("narrow", |t, a, b| {
            let c = t.concat(&[a, b])?;
            t.narrow(c, 1, 2)
        }),
        ("mean", |t, a, b| {
            let m = t.mul(a, b)?;
            let s = t.mean(m);
            let q = t.mul(s, s)?;
            Ok(q)
        }),
    ];
    for (name, f) in cases {
        let err = gradcheck(
            |t, v| {
                let out = f(t, v[0], v[1])?;
                probe(t, out)
            },
            &[x.clone(), y.clone()],
            1e-4,
        )
        .unwrap();
        assert!(err < TOL, "{name}: {err}");
    }
}

#[test]
fn gradcheck_kinked_ops_away_from_kinks() {
    let x = away_from_zero(&[1, 4, 4], 1e-2, 9);
    type Build = fn(&mut Tape, Var) -> Var;
    let cases: Vec<(&str, Build)> = vec![
        ("relu", |t, a| t.relu(a)),
        ("abs", |t, a| t.abs(a)),
        ("clamp_min", |t, a| t.clamp_min(a, 0.0)),
    ];
    for (name, f) in cases {
        let err = gradcheck(
            |t, v| {
                let out = f(t, v[0]);
                probe(t, out)
            },
            std::slice::from_ref(&x),
            1e-4,
        )
        .unwrap();
        assert!(err < TOL, "{name}: {err}");
    }
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(0.0));
    let r = tape.relu(x);
    let g = tape.backward(r).unwrap();
    assert_eq!(g.wrt(x).unwrap(), &[0.0]);
}

#[test]
fn gradcheck_conv_family() {
    for (d, stride, pad) in [(2, 1, 1), (2, 2, 0), (3, 1, 1), (3, 2, 0)] {
        let sp: Vec<usize> = vec![4; d];
        let mut xs = vec![2];
        xs.extend(&sp);
        let k = if stride == 2 { 2 } else { 3 };
        let mut ws = vec![3, 2];
        ws.extend(std::iter::repeat_n(k, d));
        let x = random(&xs, -1.0, 1.0, 10);
        let w = random(&ws, -0.5, 0.5, 11);
        let b = random(&[3], -0.5, 0.5, 12);
        let err = gradcheck(
            |t, v| {
                let y = t.conv(v[0], v[1], Some(v[2]), stride, pad)?;
                probe(t, y)
            },
            &[x.clone(), w, b],
            1e-4,
        )
        .unwrap();
        assert!(err < TOL, "conv d={d} s={stride} p={pad}: {err}");

        let mut wts = vec![2, 3];
        wts.extend(std::iter::repeat_n(k, d));
        let wt = random(&wts, -0.5, 0.5, 13);
        let bt = random(&[3], -0.5, 0.5, 14);
        let err = gradcheck(
            |t, v| {
                let y = t.conv_transpose(v[0], v[1], Some(v[2]), stride, pad)?;
                probe(t, y)
            },
            &[x, wt, bt],
            1e-4,
        )
        .unwrap();
        assert!(err < TOL, "conv_transpose d={d} s={stride} p={pad}: {err}");
    }
}

#[test]
fn conv_transpose_doubles_extent() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[4, 3, 5]));
    let w = tape.constant(Tensor::zeros(&[4, 2, 2, 2]));
    let y = tape.conv_transpose(x, w, None, 2, 0).unwrap();
    assert_eq!(tape.shape(y), &[2, 6, 10]);
}

#[test]
fn conv_relu_mean_pipeline() {
    let x = random(&[1, 6, 6], -1.0, 1.0, 15);
    let w = random(&[2, 1, 3, 3], -0.5, 0.5, 16);
    // keep pre-activations away from the relu kink
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w.clone());
    let pre = tape.conv(xv, wv, None, 1, 1).unwrap();
    let mut b = vec![0.0; 2];
    for (c, bc) in b.iter_mut().enumerate() {
        let ch = tape.value(pre).channel(c);
        let mut shift = 0.0;
        while ch.iter().any(|v| (v + shift).abs() < 2e-2) {
            shift += 1e-2;
        }
        *bc = shift;
    }
    let b = Tensor::new(vec![2], b).unwrap();
    let err = gradcheck(
        |t, v| {
            let y = t.conv(v[0], v[1], Some(v[2]), 1, 1)?;
            let r = t.relu(y);
            Ok(t.mean(r))
        },
        &[x, w, b],
        1e-4,
    )
    .unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn gradcheck_spatial_ops() {
    for d in [2, 3] {
        let mut shape = vec![2];
        shape.extend(std::iter::repeat_n(5, d));
        let x = random(&shape, -1.0, 1.0, 17 + d as u64);
        type Build = fn(&mut Tape, Var, usize) -> Result<Var>;
        let cases: Vec<(&str, Build)> = vec![
            ("box_sum", |t, a, _| t.box_sum(a, 3)),
            ("central_diff", |t, a, d| t.central_diff(a, d - 1)),
            ("forward_diff", |t, a, _| t.forward_diff(a, 0)),
            ("upsample2", |t, a, _| Ok(t.upsample2(a))),
        ];
        for (name, f) in cases {
            let err = gradcheck(
                |t, v| {
                    let out = f(t, v[0], d)?;
                    probe(t, out)
                },
                std::slice::from_ref(&x),
                1e-4,
            )
            .unwrap();
            assert!(err < TOL, "{name} d={d}: {err}");
        }
    }
}

#[test]
fn gradcheck_warp_both_arguments() {
    for d in [2, 3] {
        let n = 5;
        let mut ishape = vec![2];
        ishape.extend(std::iter::repeat_n(n, d));
        let mut dshape = vec![d];
        dshape.extend(std::iter::repeat_n(n, d));
        let img = random(&ishape, -1.0, 1.0, 30);
        // fractional parts kept away from the kinks at integer offsets,
        // and every sample point strictly inside the domain
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let len: usize = n.pow(d as u32);
        let mut disp = vec![0.0; d * len];
        for a in 0..d {
            for v in 0..len {
                let coord = (v / n.pow((d - 1 - a) as u32)) % n;
                let lo = if coord == 0 { 0.1 } else { -0.9 };
                let hi = if coord == n - 1 { -0.1 } else { 0.9 };
                let mut u: f64 = rng.gen_range(lo..hi);
                if u.abs() < 0.05 {
                    u = 0.05f64.copysign(u);
                }
                disp[a * len + v] = u;
            }
        }
        let disp = Tensor::new(dshape, disp).unwrap();
        let err = gradcheck(
            |t, v| {
                let w = t.warp(v[0], v[1])?;
                probe(t, w)
            },
            &[img, disp],
            1e-5,
        )
        .unwrap();
        assert!(err < TOL, "warp d={d}: {err}");
    }
}

#[test]
fn warp_identity_passes_gradient_through() {
    let img = random(&[3, 6, 7], -1.0, 1.0, 40);
    let upstream = random(&[3, 6, 7], -1.0, 1.0, 41);
    let mut tape = Tape::new();
    let iv = tape.leaf(img.clone());
    let dv = tape.leaf(Tensor::zeros(&[2, 6, 7]));
    let w = tape.warp(iv, dv).unwrap();
    assert_eq!(tape.value(w), &img);
    let u = tape.constant(upstream.clone());
    let p = tape.mul(w, u).unwrap();
    let s = tape.sum(p);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(iv).unwrap(), upstream.data());
}

#[test]
fn backward_is_bitwise_deterministic() {
    let run = || {
        let mut store = ParamStore::new();
        let w = store
            .add("w", random(&[3, 2, 3, 3], -0.5, 0.5, 50))
            .unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(random(&[2, 8, 8], -1.0, 1.0, 51));
        let wv = tape.param(&store, w);
        let y = tape.conv(x, wv, None, 1, 1).unwrap();
        let t = tape.tanh(y);
        let dv = tape.narrow(t, 0, 2).unwrap();
        let wp = tape.warp(x, dv).unwrap();
        let s = tape.square(wp);
        let m = tape.mean(s);
        let g = tape.backward(m).unwrap();
        g.for_param(w).unwrap().to_vec()
    };
    let a = run();
    let b = run();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn adam_zero_gradient_keeps_params() {
    let mut store = ParamStore::new();
    let id = store.add("p", random(&[1, 2, 2], -1.0, 1.0, 60)).unwrap();
    let before = store.value(id).clone();
    let mut tape = Tape::new();
    let p = tape.param(&store, id);
    let z = tape.scale(p, 0.0);
    let s = tape.sum(z);
    let g = tape.backward(s).unwrap();
    let mut opt = Adam::new(1e-2);
    opt.step(&mut store, &g);
    assert_eq!(store.value(id), &before);
}

#[test]
fn adam_first_step_has_magnitude_lr() {
    let mut store = ParamStore::new();
    let id = store
        .add("p", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap())
        .unwrap();
    let mut tape = Tape::new();
    let p = tape.param(&store, id);
    let c = tape.constant(Tensor::new(vec![2], vec![3.0, -0.5]).unwrap());
    let q = tape.mul(p, c).unwrap();
    let s = tape.sum(q);
    let g = tape.backward(s).unwrap();
    let lr = 1e-3;
    let mut opt = Adam::new(lr);
    opt.step(&mut store, &g);
    let after = store.value(id).data();
    assert!((after[0] - (1.0 - lr)).abs() < 1e-9);
    assert!((after[1] - (-1.0 + lr)).abs() < 1e-9);
}

#[test]
fn adam_descends_on_square() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::scalar(1.0)).unwrap();
    let mut opt = Adam::new(0.1);
    // scalar simulation of the same recurrence
    let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
    let mut prev = 1.0f64;
    for t in 1..=3 {
        let mut tape = Tape::new();
        let p = tape.param(&store, id);
        let sq = tape.square(p);
        let g = tape.backward(sq).unwrap();
        opt.step(&mut store, &g);
        let gw = 2.0 * w;
        m = 0.9 * m + 0.1 * gw;
        v = 0.999 * v + 0.001 * gw * gw;
        let mh = m / (1.0 - 0.9f64.powi(t));
        let vh = v / (1.0 - 0.999f64.powi(t));
        w -= 0.1 * mh / (vh.sqrt() + 1e-8);
        let cur = store.value(id).item();
        assert!((cur - w).abs() < 1e-12);
        assert!(cur.abs() < prev.abs());
        prev = cur;
    }
}

#[test]
fn param_names_are_unique() {
    let mut store = ParamStore::new();
    store.add("a", Tensor::scalar(0.0)).unwrap();
    assert!(store.add("a", Tensor::scalar(1.0)).is_err());
    assert_eq!(store.id("a").map(ParamId::index), Some(0));
}

#[test]
fn kinked_ops_propagate_nan() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![3], vec![f64::NAN, -1.0, 2.0]).unwrap());
    let r = tape.relu(x);
    let c = tape.clamp_min(x, 0.5);
    assert!(tape.value(r).data()[0].is_nan());
    assert_eq!(&tape.value(r).data()[1..], &[0.0, 2.0]);
    assert!(tape.value(c).data()[0].is_nan());
    assert_eq!(&tape.value(c).data()[1..], &[0.5, 2.0]);
}
