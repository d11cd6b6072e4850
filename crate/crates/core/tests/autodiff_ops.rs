//! Finite-difference and closed-form checks for every differentiable op.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reflect_bev::autodiff::{gradient_check, Graph, ParamStore, Tensor, Var};
use reflect_bev::Result;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;
const SEEDS: u64 = 10;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn store(entries: Vec<(&str, Tensor<f64>)>) -> ParamStore<f64> {
    let mut ps = ParamStore::new();
    for (n, t) in entries {
        ps.insert(n, t).unwrap();
    }
    ps
}

/// Reduces an arbitrary tensor to a scalar with fixed random weights so that
/// every output element gets a distinct upstream gradient.
fn weighted_sum(g: &mut Graph<f64>, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let shape = g.shape(v).to_vec();
    let n = g.numel(v);
    let w = g.constant(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

fn check_all_seeds(
    name: &str,
    make: impl Fn(&mut ChaCha8Rng) -> ParamStore<f64>,
    f: impl Fn(&mut Graph<f64>, &ParamStore<f64>, u64) -> Result<Var>,
) {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = make(&mut rng);
        let report = gradient_check(|g, p| f(g, p, seed), &params, EPS, TOL).unwrap();
        assert!(
            report.passed,
            "{name} seed {seed}: rel err {} at {}[{}] analytic {} numeric {}",
            report.max_rel_error, report.worst_param, report.worst_index, report.analytic, report.numeric
        );
    }
}

#[test]
fn elementwise_binary_ops() {
    let make = |rng: &mut ChaCha8Rng| {
        store(vec![("a", rand_tensor(rng, &[2, 3, 4], -2.0, 2.0)), ("b", rand_tensor(rng, &[2, 3, 4], 0.5, 2.0))])
    };
    check_all_seeds("add", make, |g, p, s| {
        let (a, b) = (g.param(p, "a")?, g.param(p, "b")?);
        let y = g.add(a, b)?;
        weighted_sum(g, y, s)
    });
    check_all_seeds("sub", make, |g, p, s| {
        let (a, b) = (g.param(p, "a")?, g.param(p, "b")?);
        let y = g.sub(a, b)?;
        weighted_sum(g, y, s)
    });
    check_all_seeds("mul", make, |g, p, s| {
        let (a, b) = (g.param(p, "a")?, g.param(p, "b")?);
        let y = g.mul(a, b)?;
        weighted_sum(g, y, s)
    });
    check_all_seeds("div", make, |g, p, s| {
        let (a, b) = (g.param(p, "a")?, g.param(p, "b")?);
        let y = g.div(a, b)?;
        weighted_sum(g, y, s)
    });
}

#[test]
fn elementwise_unary_ops() {
    let signed = |rng: &mut ChaCha8Rng| store(vec![("x", rand_tensor(rng, &[3, 5], -2.0, 2.0))]);
    let positive = |rng: &mut ChaCha8Rng| store(vec![("x", rand_tensor(rng, &[3, 5], 0.2, 3.0))]);
    type Unary = fn(&mut Graph<f64>, Var) -> Var;
    let cases: Vec<(&str, Unary, bool)> = vec![
        ("neg", |g, x| g.neg(x), false),
        ("add_scalar", |g, x| g.add_scalar(x, 0.7), false),
        ("mul_scalar", |g, x| g.mul_scalar(x, -1.3), false),
        ("sigmoid", |g, x| g.sigmoid(x), false),
        ("relu", |g, x| g.relu(x), false),
        ("exp", |g, x| g.exp(x), false),
        ("abs", |g, x| g.abs(x), false),
        ("square", |g, x| g.square(x), false),
        ("ln", |g, x| g.ln(x), true),
        ("sqrt", |g, x| g.sqrt(x), true),
        ("clamp_min", |g, x| g.clamp_min(x, 0.1), false),
    ];
    for (name, op, needs_positive) in cases {
        let f = move |g: &mut Graph<f64>, p: &ParamStore<f64>, s: u64| {
            let x = g.param(p, "x")?;
            let y = op(g, x);
            weighted_sum(g, y, s)
        };
        if needs_positive {
            check_all_seeds(name, positive, f);
        } else {
            check_all_seeds(name, signed, f);
        }
    }
}

#[test]
fn reductions_and_reshaping() {
    let make = |rng: &mut ChaCha8Rng| store(vec![("x", rand_tensor(rng, &[3, 4, 5], -1.0, 1.0))]);
    check_all_seeds("sum", make, |g, p, _| {
        let x = g.param(p, "x")?;
        let sq = g.square(x);
        Ok(g.sum(sq))
    });
    check_all_seeds("mean", make, |g, p, _| {
        let x = g.param(p, "x")?;
        let sq = g.square(x);
        Ok(g.mean(sq))
    });
    check_all_seeds("spatial_mean", make, |g, p, s| {
        let x = g.param(p, "x")?;
        let m = g.spatial_mean(x)?;
        let m2 = g.square(m);
        weighted_sum(g, m2, s)
    });
    check_all_seeds("spatial_std", make, |g, p, s| {
        let x = g.param(p, "x")?;
        let m = g.spatial_std(x)?;
        weighted_sum(g, m, s)
    });
    check_all_seeds("expand_spatial", make, |g, p, s| {
        let x = g.param(p, "x")?;
        let m = g.spatial_mean(x)?;
        let e = g.expand_spatial(m, 2, 3)?;
        weighted_sum(g, e, s)
    });
    check_all_seeds("concat+slice", make, |g, p, s| {
        let x = g.param(p, "x")?;
        let y = g.square(x);
        let c = g.concat(&[x, y, x])?;
        let sl = g.slice_rows(c, 2, 5)?;
        weighted_sum(g, sl, s)
    });
    check_all_seeds("reshape+gather", make, |g, p, s| {
        let x = g.param(p, "x")?;
        let r = g.reshape(x, vec![12, 5])?;
        let ga = g.gather(r, vec![0, 7, 7, 59, 33])?;
        weighted_sum(g, ga, s)
    });
    // well-separated values so no pooling window holds a near tie
    let separated = |rng: &mut ChaCha8Rng| {
        use rand::seq::SliceRandom;
        let mut vals: Vec<f64> = (0..60).map(|i| -1.0 + i as f64 * 0.033).collect();
        vals.shuffle(rng);
        store(vec![("x", Tensor::new(vec![3, 4, 5], vals).unwrap())])
    };
    check_all_seeds("max_pool2", separated, |g, p, s| {
        let x = g.param(p, "x")?;
        let y = g.max_pool2(x)?;
        weighted_sum(g, y, s)
    });
}

#[test]
fn conv2d_gradients() {
    for &(k, stride, pad) in &[(3usize, 1usize, 1usize), (3, 2, 1), (1, 1, 0), (2, 2, 0)] {
        let make = move |rng: &mut ChaCha8Rng| {
            store(vec![
                ("x", rand_tensor(rng, &[2, 6, 5], -1.0, 1.0)),
                ("w", rand_tensor(rng, &[3, 2, k, k], -1.0, 1.0)),
                ("b", rand_tensor(rng, &[3], -1.0, 1.0)),
            ])
        };
        check_all_seeds("conv2d", make, move |g, p, s| {
            let (x, w, b) = (g.param(p, "x")?, g.param(p, "w")?, g.param(p, "b")?);
            let y = g.conv2d(x, w, Some(b), stride, pad)?;
            weighted_sum(g, y, s)
        });
    }
}

#[test]
fn bilinear_and_point_sampling_gradients() {
    let make = |rng: &mut ChaCha8Rng| {
        let mut coords = rand_tensor(rng, &[2, 3, 4], -0.7, 5.6);
        // keep samples away from the integer lattice where bilinear has kinks
        for v in coords.data_mut() {
            if (*v - v.round()).abs() < 0.05 {
                *v += 0.1;
            }
        }
        store(vec![("x", rand_tensor(rng, &[2, 5, 6], -1.0, 1.0)), ("c", coords)])
    };
    check_all_seeds("bilinear_sample", make, |g, p, s| {
        let (x, c) = (g.param(p, "x")?, g.param(p, "c")?);
        let y = g.bilinear_sample(x, c)?;
        weighted_sum(g, y, s)
    });
    check_all_seeds("sample_points", make, |g, p, s| {
        let x = g.param(p, "x")?;
        let y = g.sample_points(x, vec![(1.3, 2.7), (0.2, 0.4), (3.9, 4.1), (-0.4, 2.2)])?;
        weighted_sum(g, y, s)
    });
}

#[test]
fn deformable_conv_gradients() {
    let make = |rng: &mut ChaCha8Rng| {
        let mut off = rand_tensor(rng, &[18, 5, 5], -1.2, 1.2);
        for v in off.data_mut() {
            if (*v - v.round()).abs() < 0.05 {
                *v += 0.1;
            }
        }
        store(vec![
            ("x", rand_tensor(rng, &[2, 5, 5], -1.0, 1.0)),
            ("off", off),
            ("w", rand_tensor(rng, &[3, 2, 3, 3], -1.0, 1.0)),
            ("b", rand_tensor(rng, &[3], -1.0, 1.0)),
        ])
    };
    check_all_seeds("deform_conv2d", make, |g, p, s| {
        let (x, o, w, b) = (g.param(p, "x")?, g.param(p, "off")?, g.param(p, "w")?, g.param(p, "b")?);
        let y = g.deform_conv2d(x, o, w, Some(b))?;
        weighted_sum(g, y, s)
    });
}

#[test]
fn linear_and_losses() {
    let make = |rng: &mut ChaCha8Rng| {
        store(vec![
            ("x", rand_tensor(rng, &[4, 3], -1.0, 1.0)),
            ("w", rand_tensor(rng, &[5, 3], -1.0, 1.0)),
            ("b", rand_tensor(rng, &[5], -1.0, 1.0)),
        ])
    };
    check_all_seeds("linear", make, |g, p, s| {
        let (x, w, b) = (g.param(p, "x")?, g.param(p, "w")?, g.param(p, "b")?);
        let y = g.linear(x, w, Some(b))?;
        weighted_sum(g, y, s)
    });
    check_all_seeds("softmax_ce", make, |g, p, _| {
        let (x, w, b) = (g.param(p, "x")?, g.param(p, "w")?, g.param(p, "b")?);
        let y = g.linear(x, w, Some(b))?;
        g.softmax_cross_entropy(y, vec![0, 4, 2, 2], vec![1.0, 0.5, 2.0, 0.0])
    });
    check_all_seeds("bce_with_logits", make, |g, p, _| {
        let x = g.param(p, "x")?;
        let t = vec![1.0, 0.0, 0.3, 0.0, 1.0, 1.0, 0.5, 0.2, 0.0, 1.0, 0.9, 0.1];
        g.bce_with_logits(x, t, vec![1.0; 12])
    });
    check_all_seeds("smooth_l1", make, |g, p, _| {
        let x = g.param(p, "x")?;
        let t = vec![0.5, -0.2, 0.3, 0.0, 1.0, 0.1, -0.5, 0.25, 0.9, -1.0, 0.7, 0.15];
        g.smooth_l1(x, t, (0..12).map(|i| 0.5 + i as f64 * 0.1).collect(), 0.4)
    });
    check_all_seeds("l1_loss", make, |g, p, _| {
        let (x, w) = (g.param(p, "x")?, g.param(p, "w")?);
        let x2 = g.slice_rows(x, 0, 3)?;
        let w2 = g.slice_rows(w, 1, 3)?;
        g.l1_loss(x2, w2)
    });
}

#[test]
fn gradient_check_examples() {
    // f = sum(theta^2): analytic 2θ against FD within 1e-6.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ps = store(vec![("t", rand_tensor(&mut rng, &[7], -3.0, 3.0))]);
    let r = gradient_check(
        |g, p| {
            let t = g.param(p, "t")?;
            let s = g.square(t);
            Ok(g.sum(s))
        },
        &ps,
        EPS,
        1e-6,
    )
    .unwrap();
    assert!(r.passed, "{r:?}");
    let mut g = Graph::new();
    let t = g.param(&ps, "t").unwrap();
    let s = g.square(t);
    let root = g.sum(s);
    let grads = g.backward(root).unwrap();
    for (a, x) in grads.wrt(t).unwrap().iter().zip(ps.get("t").unwrap().data()) {
        assert!((a - 2.0 * x).abs() < 1e-15);
    }

    // constant objective: analytic zero, numeric zero
    let r = gradient_check(
        |g, p| {
            let _ = g.param(p, "t")?;
            Ok(g.scalar_const(4.2))
        },
        &ps,
        EPS,
        TOL,
    )
    .unwrap();
    assert!(r.passed && r.analytic == 0.0 && r.numeric.abs() < 1e-12);

    // sum of sigmoid matches σ(1-σ)
    let mut g = Graph::new();
    let t = g.param(&ps, "t").unwrap();
    let sg = g.sigmoid(t);
    let root = g.sum(sg);
    let grads = g.backward(root).unwrap();
    for (a, &x) in grads.wrt(t).unwrap().iter().zip(ps.get("t").unwrap().data()) {
        let s = 1.0 / (1.0 + (-x as f64).exp());
        assert!((a - s * (1.0 - s)).abs() < 1e-12);
    }
}

#[test]
fn gradient_check_flags_non_finite() {
    let ps = store(vec![("t", Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap())]);
    let err = gradient_check(
        |g, p| {
            let t = g.param(p, "t")?;
            let l = g.ln(t);
            Ok(g.sum(l))
        },
        &ps,
        EPS,
        TOL,
    );
    assert!(err.is_err());
}

#[test]
fn conv2d_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    // identity 1x1 kernel
    let x = rand_tensor(&mut rng, &[1, 4, 5], -1.0, 1.0);
    let mut g = Graph::new();
    let xv = g.input(&x);
    let w = g.constant(vec![1, 1, 1, 1], vec![1.0]).unwrap();
    let b = g.constant(vec![1], vec![0.0]).unwrap();
    let y = g.conv2d(xv, w, Some(b), 1, 0).unwrap();
    assert_eq!(g.value(y), x.data());

    // zero input: every output equals its channel's bias
    let z = g.constant(vec![2, 4, 4], vec![0.0; 32]).unwrap();
    let w = g.input(&rand_tensor(&mut rng, &[3, 2, 3, 3], -1.0, 1.0));
    let b = g.constant(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
    let y = g.conv2d(z, w, Some(b), 1, 1).unwrap();
    for (c, chunk) in g.value(y).chunks(16).enumerate() {
        assert!(chunk.iter().all(|&v| v == [0.5, -1.0, 2.0][c]));
    }

    // 3x3 ones * 3x3 ones, no padding -> 9
    let ones = g.constant(vec![1, 3, 3], vec![1.0; 9]).unwrap();
    let k = g.constant(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap();
    let y = g.conv2d(ones, k, None, 1, 0).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 1]);
    assert_eq!(g.value(y), &[9.0]);

    // channel mismatch is a configuration error
    let bad = g.constant(vec![2, 3, 3], vec![1.0; 18]).unwrap();
    assert!(g.conv2d(bad, k, None, 1, 0).is_err());
}

#[test]
fn bilinear_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(vec![1, 2, 2], vec![0.0, 2.0, 4.0, 6.0]).unwrap();
    let c = g.constant(vec![2, 1, 1], vec![0.5, 0.5]).unwrap();
    let y = g.bilinear_sample(x, c).unwrap();
    assert_eq!(g.value(y), &[3.0]);

    // lattice points gather exactly
    let c = g.constant(vec![2, 1, 4], vec![0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
    let y = g.bilinear_sample(x, c).unwrap();
    assert_eq!(g.value(y), &[0.0, 2.0, 4.0, 6.0]);

    // everything out of bounds -> zeros
    let c = g.constant(vec![2, 1, 3], vec![-5.0, 10.0, 2.0, 0.0, -3.0, 7.5]).unwrap();
    let y = g.bilinear_sample(x, c).unwrap();
    assert_eq!(g.value(y), &[0.0, 0.0, 0.0]);
}

#[test]
fn backward_is_deterministic_and_accumulates() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ps = store(vec![
        ("x", rand_tensor(&mut rng, &[2, 6, 6], -1.0, 1.0)),
        ("w", rand_tensor(&mut rng, &[3, 2, 3, 3], -1.0, 1.0)),
    ]);
    let run = |ps: &ParamStore<f64>| {
        let mut g = Graph::new();
        let x = g.param(ps, "x").unwrap();
        let w = g.param(ps, "w").unwrap();
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        let y = g.sigmoid(y);
        let root = g.mean(y);
        let grads = g.backward(root).unwrap();
        (g, grads)
    };
    let (g1, gr1) = run(&ps);
    let (_, gr2) = run(&ps);
    let (_, wv) = g1.bound_params().find(|(n, _)| *n == "w").unwrap();
    assert_eq!(gr1.wrt(wv).unwrap(), gr2.wrt(wv).unwrap());

    gr1.accumulate_into(&g1, &mut ps, |_| true).unwrap();
    let once = ps.get("w").unwrap().grad.clone().unwrap();
    gr1.accumulate_into(&g1, &mut ps, |_| true).unwrap();
    let twice = ps.get("w").unwrap().grad.clone().unwrap();
    for (a, b) in once.iter().zip(&twice) {
        assert_eq!(2.0 * a, *b);
    }
}
