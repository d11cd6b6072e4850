//! Reference checks that pin the numerical core to independent oracles:
//! finite differences, closed forms, Monte-Carlo areas and brute force.
//! Used by `selftest` and the acceptance suite.

use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, Normal};

use crate::autodiff::{gradient_check, gradient_check_piecewise, GradCheckReport, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{iou_bev, Box3DLite};
use crate::model::fusion::{alignment_loss, moment_align};
use crate::model::head::{nms, positive_cells, sample_proposals, uncertainty, uncertainty_weights, Detection};
use crate::model::{is_lidar_encoder, Detector, Labels, LossWeights, ModelConfig};
use crate::rng::{derive_seed, rng_for, Rng};
use crate::teacher::{ema_update, refine_objective, Importance};
use crate::world::{generate_dataset, DatasetSpec, Frame, FrameKey, Misalignment, WorldConfig};

pub const FD_EPS: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
/// Step for the assembled losses: smaller, so fewer relu kinks fall inside.
pub const FD_EPS_LOSS: f64 = 1e-6;

/// Result of one oracle family.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed, detail: detail.into() }
    }

    fn from_result(name: &str, r: Result<Outcome>) -> Self {
        r.unwrap_or_else(|e| Self::new(name, false, format!("error: {e}")))
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

/// Worst finite-difference report over a family of checks.
#[derive(Default)]
struct Worst {
    err: f64,
    at: String,
    checked: usize,
    kinks: usize,
    failures: Vec<String>,
}

impl Worst {
    fn add(&mut self, label: &str, seed: u64, r: &GradCheckReport<f64>) {
        self.checked += r.checked;
        self.kinks += r.kinks;
        let at = format!(
            "{label} seed {seed} {}[{}] analytic {:.6e} numeric {:.6e}",
            r.worst_param, r.worst_index, r.analytic, r.numeric
        );
        if !r.passed {
            self.failures.push(format!("{at} (rel {:.2e})", r.max_rel_error));
        }
        if r.max_rel_error >= self.err {
            self.err = r.max_rel_error;
            self.at = at;
        }
    }

    fn outcome(self, name: &str, start: Instant) -> Outcome {
        let detail = if self.failures.is_empty() {
            format!(
                "{} coords ({} kink re-measures), max rel err {:.2e} ({}), {:.1}s",
                self.checked,
                self.kinks,
                self.err,
                self.at,
                start.elapsed().as_secs_f64()
            )
        } else {
            format!("{} failing: {}", self.failures.len(), self.failures.join("; "))
        };
        Outcome::new(name, self.failures.is_empty(), detail)
    }
}

fn rand_tensor(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// Moves values off the integer lattice, where bilinear sampling has kinks.
fn off_lattice(mut t: Tensor<f64>) -> Tensor<f64> {
    for v in t.data_mut() {
        if (*v - v.round()).abs() < 0.05 {
            *v += 0.1;
        }
    }
    t
}

fn store(entries: Vec<(&str, Tensor<f64>)>) -> ParamStore<f64> {
    let mut ps = ParamStore::new();
    for (n, t) in entries {
        ps.insert(n, t.into_param()).expect("unique names");
    }
    ps
}

/// Scalar reduction with fixed random weights, so every output element gets
/// a distinct upstream gradient.
fn weighted_sum(g: &mut Graph<f64>, v: Var, seed: u64) -> Result<Var> {
    let mut rng = rng_for(seed, "weighted-sum", 0);
    let shape = g.shape(v).to_vec();
    let n = g.numel(v);
    let w = g.constant(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

type Make = Box<dyn Fn(&mut Rng) -> ParamStore<f64>>;
type Objective = Box<dyn Fn(&mut Graph<f64>, &ParamStore<f64>, u64) -> Result<Var>>;

fn op_cases() -> Vec<(String, Make, Objective)> {
    let mut cases: Vec<(String, Make, Objective)> = Vec::new();
    let mut push = |name: &str, make: Make, f: Objective| cases.push((name.to_string(), make, f));

    let pair = || -> Make {
        Box::new(|rng| store(vec![("a", rand_tensor(rng, &[2, 3, 4], -2.0, 2.0)), ("b", rand_tensor(rng, &[2, 3, 4], 0.5, 2.0))]))
    };
    type Binary = fn(&mut Graph<f64>, Var, Var) -> Result<Var>;
    let binary: [(&str, Binary); 4] =
        [("add", |g, a, b| g.add(a, b)), ("sub", |g, a, b| g.sub(a, b)), ("mul", |g, a, b| g.mul(a, b)), ("div", |g, a, b| g.div(a, b))];
    for (name, op) in binary {
        push(
            name,
            pair(),
            Box::new(move |g, p, s| {
                let (a, b) = (g.param(p, "a")?, g.param(p, "b")?);
                let y = op(g, a, b)?;
                weighted_sum(g, y, s)
            }),
        );
    }

    type Unary = fn(&mut Graph<f64>, Var) -> Var;
    let unary: [(&str, Unary, f64); 11] = [
        ("neg", |g, x| g.neg(x), -2.0),
        ("add_scalar", |g, x| g.add_scalar(x, 0.7), -2.0),
        ("mul_scalar", |g, x| g.mul_scalar(x, -1.3), -2.0),
        ("sigmoid", |g, x| g.sigmoid(x), -2.0),
        ("relu", |g, x| g.relu(x), -2.0),
        ("exp", |g, x| g.exp(x), -2.0),
        ("abs", |g, x| g.abs(x), -2.0),
        ("square", |g, x| g.square(x), -2.0),
        ("ln", |g, x| g.ln(x), 0.2),
        ("sqrt", |g, x| g.sqrt(x), 0.2),
        ("clamp_min", |g, x| g.clamp_min(x, 0.1), -2.0),
    ];
    for (name, op, lo) in unary {
        push(
            name,
            Box::new(move |rng| store(vec![("x", rand_tensor(rng, &[3, 5], lo, 3.0))])),
            Box::new(move |g, p, s| {
                let x = g.param(p, "x")?;
                let y = op(g, x);
                weighted_sum(g, y, s)
            }),
        );
    }

    let cube = || -> Make { Box::new(|rng| store(vec![("x", rand_tensor(rng, &[3, 4, 5], -1.0, 1.0))])) };
    push(
        "sum",
        cube(),
        Box::new(|g, p, _| {
            let x = g.param(p, "x")?;
            let sq = g.square(x);
            Ok(g.sum(sq))
        }),
    );
    push(
        "mean",
        cube(),
        Box::new(|g, p, _| {
            let x = g.param(p, "x")?;
            let sq = g.square(x);
            Ok(g.mean(sq))
        }),
    );
    push(
        "spatial_mean",
        cube(),
        Box::new(|g, p, s| {
            let x = g.param(p, "x")?;
            let m = g.spatial_mean(x)?;
            let m2 = g.square(m);
            weighted_sum(g, m2, s)
        }),
    );
    push(
        "spatial_std",
        cube(),
        Box::new(|g, p, s| {
            let x = g.param(p, "x")?;
            let m = g.spatial_std(x)?;
            weighted_sum(g, m, s)
        }),
    );
    push(
        "expand_spatial",
        cube(),
        Box::new(|g, p, s| {
            let x = g.param(p, "x")?;
            let m = g.spatial_mean(x)?;
            let e = g.expand_spatial(m, 2, 3)?;
            weighted_sum(g, e, s)
        }),
    );
    push(
        "concat+slice_rows",
        cube(),
        Box::new(|g, p, s| {
            let x = g.param(p, "x")?;
            let y = g.square(x);
            let c = g.concat(&[x, y, x])?;
            let sl = g.slice_rows(c, 2, 5)?;
            weighted_sum(g, sl, s)
        }),
    );
    push(
        "reshape+gather",
        cube(),
        Box::new(|g, p, s| {
            let x = g.param(p, "x")?;
            let r = g.reshape(x, vec![12, 5])?;
            let ga = g.gather(r, vec![0, 7, 7, 59, 33])?;
            weighted_sum(g, ga, s)
        }),
    );
    push(
        "l2_norm",
        cube(),
        Box::new(|g, p, _| {
            let x = g.param(p, "x")?;
            Ok(g.l2_norm(x))
        }),
    );
    // well-separated values: no pooling window holds a near tie
    push(
        "max_pool2",
        Box::new(|rng| {
            let mut vals: Vec<f64> = (0..60).map(|i| -1.0 + i as f64 * 0.033).collect();
            vals.shuffle(rng);
            store(vec![("x", Tensor::new(vec![3, 4, 5], vals).expect("shape"))])
        }),
        Box::new(|g, p, s| {
            let x = g.param(p, "x")?;
            let y = g.max_pool2(x)?;
            weighted_sum(g, y, s)
        }),
    );

    for (k, stride, pad) in [(3usize, 1usize, 1usize), (3, 2, 1), (1, 1, 0), (2, 2, 0)] {
        push(
            &format!("conv2d k{k} s{stride} p{pad}"),
            Box::new(move |rng| {
                store(vec![
                    ("x", rand_tensor(rng, &[2, 6, 5], -1.0, 1.0)),
                    ("w", rand_tensor(rng, &[3, 2, k, k], -1.0, 1.0)),
                    ("b", rand_tensor(rng, &[3], -1.0, 1.0)),
                ])
            }),
            Box::new(move |g, p, s| {
                let (x, w, b) = (g.param(p, "x")?, g.param(p, "w")?, g.param(p, "b")?);
                let y = g.conv2d(x, w, Some(b), stride, pad)?;
                weighted_sum(g, y, s)
            }),
        );
    }

    let sampling = || -> Make {
        Box::new(|rng| {
            let coords = off_lattice(rand_tensor(rng, &[2, 3, 4], -0.7, 5.6));
            store(vec![("x", rand_tensor(rng, &[2, 5, 6], -1.0, 1.0)), ("c", coords)])
        })
    };
    push(
        "bilinear_sample",
        sampling(),
        Box::new(|g, p, s| {
            let (x, c) = (g.param(p, "x")?, g.param(p, "c")?);
            let y = g.bilinear_sample(x, c)?;
            weighted_sum(g, y, s)
        }),
    );
    push(
        "sample_points",
        sampling(),
        Box::new(|g, p, s| {
            let x = g.param(p, "x")?;
            let y = g.sample_points(x, vec![(1.3, 2.7), (0.2, 0.4), (3.9, 4.1), (-0.4, 2.2)])?;
            weighted_sum(g, y, s)
        }),
    );
    push(
        "deform_conv2d",
        Box::new(|rng| {
            let off = off_lattice(rand_tensor(rng, &[18, 5, 5], -1.2, 1.2));
            store(vec![
                ("x", rand_tensor(rng, &[2, 5, 5], -1.0, 1.0)),
                ("off", off),
                ("w", rand_tensor(rng, &[3, 2, 3, 3], -1.0, 1.0)),
                ("b", rand_tensor(rng, &[3], -1.0, 1.0)),
            ])
        }),
        Box::new(|g, p, s| {
            let (x, o, w, b) = (g.param(p, "x")?, g.param(p, "off")?, g.param(p, "w")?, g.param(p, "b")?);
            let y = g.deform_conv2d(x, o, w, Some(b))?;
            weighted_sum(g, y, s)
        }),
    );

    let dense = || -> Make {
        Box::new(|rng| {
            store(vec![
                ("x", rand_tensor(rng, &[4, 3], -1.0, 1.0)),
                ("w", rand_tensor(rng, &[5, 3], -1.0, 1.0)),
                ("b", rand_tensor(rng, &[5], -1.0, 1.0)),
            ])
        })
    };
    push(
        "linear",
        dense(),
        Box::new(|g, p, s| {
            let (x, w, b) = (g.param(p, "x")?, g.param(p, "w")?, g.param(p, "b")?);
            let y = g.linear(x, w, Some(b))?;
            weighted_sum(g, y, s)
        }),
    );
    push(
        "softmax_cross_entropy",
        dense(),
        Box::new(|g, p, _| {
            let (x, w, b) = (g.param(p, "x")?, g.param(p, "w")?, g.param(p, "b")?);
            let y = g.linear(x, w, Some(b))?;
            g.softmax_cross_entropy(y, vec![0, 4, 2, 2], vec![1.0, 0.5, 2.0, 0.0])
        }),
    );
    push(
        "bce_with_logits",
        dense(),
        Box::new(|g, p, _| {
            let x = g.param(p, "x")?;
            let t = vec![1.0, 0.0, 0.3, 0.0, 1.0, 1.0, 0.5, 0.2, 0.0, 1.0, 0.9, 0.1];
            g.bce_with_logits(x, t, vec![1.0; 12])
        }),
    );
    push(
        "smooth_l1",
        dense(),
        Box::new(|g, p, _| {
            let x = g.param(p, "x")?;
            let t = vec![0.5, -0.2, 0.3, 0.0, 1.0, 0.1, -0.5, 0.25, 0.9, -1.0, 0.7, 0.15];
            g.smooth_l1(x, t, (0..12).map(|i| 0.5 + i as f64 * 0.1).collect(), 0.4)
        }),
    );
    push(
        "l1_loss",
        dense(),
        Box::new(|g, p, _| {
            let (x, w) = (g.param(p, "x")?, g.param(p, "w")?);
            let x2 = g.slice_rows(x, 0, 3)?;
            let w2 = g.slice_rows(w, 1, 3)?;
            g.l1_loss(x2, w2)
        }),
    );
    cases
}

/// Central differences against the tape for every differentiable op.
pub fn grad_ops(seeds: u64) -> Outcome {
    let start = Instant::now();
    let mut worst = Worst::default();
    for (name, make, f) in op_cases() {
        for seed in 0..seeds {
            let mut rng = rng_for(seed, "grad-ops", 0);
            let params = make(&mut rng);
            match gradient_check(|g, p| f(g, p, seed), &params, FD_EPS, FD_TOL) {
                Ok(r) => worst.add(&name, seed, &r),
                Err(e) => worst.failures.push(format!("{name} seed {seed}: {e}")),
            }
        }
    }
    worst.outcome("grad_ops", start)
}

/// A small detector and a frame with history, with every parameter
/// jittered so that offsets and activations sit away from kinks.
pub struct Fixture {
    pub detector: Detector,
    pub params: ParamStore<f64>,
    pub frame: Frame,
}

pub fn fixture(seed: u64) -> Result<Fixture> {
    let world = WorldConfig {
        world_size: 16.0,
        grid: 16,
        min_objects: 2,
        max_objects: 3,
        points_per_box: 24,
        clutter_points: 16,
        misalignment: Misalignment { rotation_deg: 3.0, translation_cells: [0.6, -0.4], ..Misalignment::default() },
        ..WorldConfig::default()
    };
    let cfg = ModelConfig { channels: 4, roi_hidden: 8, ..ModelConfig::default() };
    let spec = DatasetSpec { seed: derive_seed(seed, "oracle-world", 0), n_sequences: 1, seq_len: 3, labeled_fraction: 1.0, world: world.clone() };
    let ds = generate_dataset(&spec)?;
    let frame = Frame::build(&ds, FrameKey { seq: 0, t: 2 }, cfg.n_max)?;
    let detector = Detector::new(world, cfg)?;
    let mut params = detector.init_params(seed);
    let mut rng = rng_for(seed, "oracle-jitter", 0);
    let n = Normal::new(0.0, 0.05).expect("finite std");
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            *v += n.sample(&mut rng);
        }
    }
    Ok(Fixture { detector, params, frame })
}

fn split_lidar(store: &ParamStore<f64>) -> (ParamStore<f64>, ParamStore<f64>) {
    let mut lidar = ParamStore::new();
    let mut rest = ParamStore::new();
    for (name, t) in store.iter() {
        let dst = if is_lidar_encoder(name) { &mut lidar } else { &mut rest };
        dst.insert(name, t.clone()).expect("unique names");
    }
    (lidar, rest)
}

fn merged(a: &ParamStore<f64>, b: &ParamStore<f64>) -> ParamStore<f64> {
    let mut s = a.clone();
    for (name, t) in b.iter() {
        s.insert(name, t.clone()).expect("disjoint stores");
    }
    s
}

const LOSS_COORDS: usize = 3;

fn loss_checks(seed: u64, worst: &mut Worst) -> Result<()> {
    let fx = fixture(seed)?;
    let det = &fx.detector;
    let frame = &fx.frame;
    let weights = LossWeights { lambda: 0.5, gamma: 0.3, kappa: 1.0 };
    let hc = det.cfg.head.clone();

    // alignment loss on free maps
    let c = det.cfg.channels;
    let g_ = det.world.grid;
    let mut rng = rng_for(seed, "oracle-maps", 0);
    let maps = store(vec![
        ("out", rand_tensor(&mut rng, &[c, g_, g_], -1.0, 1.0)),
        ("fuse", rand_tensor(&mut rng, &[c, g_, g_], 0.0, 1.5)),
        ("lidar", rand_tensor(&mut rng, &[c, g_, g_], -0.5, 2.0)),
    ]);
    let net = det.align_net();
    let r = gradient_check_piecewise(
        |g, p| {
            let (o, f, l) = (g.param(p, "out")?, g.param(p, "fuse")?, g.param(p, "lidar")?);
            Ok(alignment_loss(g, o, f, l, net)?.total)
        },
        &maps,
        FD_EPS_LOSS,
        FD_TOL,
        24,
    )?;
    worst.add("alignment_loss(maps)", seed, &r);

    // fixed proposals and targets for the assembled losses
    let mut g0 = Graph::new();
    let fwd0 = det.forward(&mut g0, &fx.params, frame)?;
    let gt: Vec<Detection> = frame.boxes.iter().map(Detection::from_gt).collect();
    let pos_gt = positive_cells(&det.world, &gt);
    let mut prng = Rng::seed_from_u64(derive_seed(seed, "oracle-proposals", 0));
    let sampled_gt = sample_proposals(&g0, &fwd0.rpn, &gt, &det.world, &hc, &mut prng)?;
    let ones = vec![1.0; pos_gt.len()];

    // supervised objective
    let r = gradient_check_piecewise(
        |g, p| {
            let fwd = det.forward(g, p, frame)?;
            let l = det.sample_loss_given(g, p, frame, &fwd, &gt, &pos_gt, &ones, &sampled_gt, false, &weights)?;
            Ok(l.objective)
        },
        &fx.params,
        FD_EPS_LOSS,
        FD_TOL,
        LOSS_COORDS,
    )?;
    worst.add("supervised_loss", seed, &r);

    // alignment loss through the model, LiDAR encoder held fixed
    let (lidar, rest) = split_lidar(&fx.params);
    let r = gradient_check_piecewise(
        |g, p| {
            let full = merged(p, &lidar);
            let fwd = det.forward(g, &full, frame)?;
            let l = det.sample_loss_given(g, &full, frame, &fwd, &gt, &pos_gt, &ones, &sampled_gt, false, &weights)?;
            l.align_weighted.ok_or_else(|| Error::Config("alignment term disabled".into()))
        },
        &rest,
        FD_EPS_LOSS,
        FD_TOL,
        LOSS_COORDS,
    )?;
    worst.add("alignment_loss(model)", seed, &r);

    // unsupervised objective with uncertainty weights
    let pseudo: Vec<Detection> = frame
        .boxes
        .iter()
        .map(|b| {
            let s = rng.gen_range(0.4..1.0);
            Detection { score: s, objectness: s, ..Detection::from_gt(b) }
        })
        .collect();
    let pos_ps = positive_cells(&det.world, &pseudo);
    let w_ps = uncertainty_weights(&g0, &fwd0.rpn, &pos_ps, &pseudo, &det.world, &hc)?;
    let sampled_ps = sample_proposals(&g0, &fwd0.rpn, &pseudo, &det.world, &hc, &mut prng)?;
    let r = gradient_check_piecewise(
        |g, p| {
            let fwd = det.forward(g, p, frame)?;
            let l = det.sample_loss_given(g, p, frame, &fwd, &pseudo, &pos_ps, &w_ps, &sampled_ps, false, &weights)?;
            let k = g.mul_scalar(l.objective, weights.kappa);
            Ok(k)
        },
        &fx.params,
        FD_EPS_LOSS,
        FD_TOL,
        LOSS_COORDS,
    )?;
    worst.add("unsupervised_loss", seed, &r);

    // refinement objective
    let mut prev = fx.params.clone();
    let jitter = Normal::new(0.0, 0.02).expect("finite std");
    for (_, t) in prev.iter_mut() {
        for v in t.data_mut() {
            *v += jitter.sample(&mut rng);
        }
    }
    let mut phi = Importance::new();
    for (name, t) in prev.iter() {
        if rng.gen_bool(0.5) {
            phi.insert(name.to_string(), (0..t.numel()).map(|_| rng.gen_range(0.0..2.0)).collect());
        }
    }
    let mut head_fn = |g: &mut Graph<f64>, s: &ParamStore<f64>, f: &Frame| -> Result<Var> {
        let fwd = det.forward(g, s, f)?;
        det.head_output(g, &fwd)
    };
    let prev_out = {
        let mut g = Graph::new();
        let v = head_fn(&mut g, &prev, frame)?;
        g.value(v).to_vec()
    };
    let r = gradient_check_piecewise(
        |g, p| refine_objective(g, p, &prev, &phi, 0.7, frame, &prev_out, &mut head_fn),
        &fx.params,
        FD_EPS_LOSS,
        FD_TOL,
        LOSS_COORDS,
    )?;
    worst.add("refine_objective", seed, &r);
    Ok(())
}

/// Central differences against the tape for the assembled alignment,
/// supervised, unsupervised and refinement objectives.
pub fn grad_losses(seeds: u64) -> Outcome {
    let start = Instant::now();
    let mut worst = Worst::default();
    for seed in 0..seeds {
        if let Err(e) = loss_checks(seed, &mut worst) {
            worst.failures.push(format!("seed {seed}: {e}"));
        }
    }
    worst.outcome("grad_losses", start)
}

fn channel_stats(v: &[f64], hw: usize) -> Vec<(f64, f64)> {
    v.chunks(hw)
        .map(|c| {
            let m = c.iter().sum::<f64>() / hw as f64;
            let var = c.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / hw as f64;
            (m, var.sqrt())
        })
        .collect()
}

/// After moment alignment each channel carries the target's mean and
/// standard deviation.
pub fn moment_match(pairs: usize) -> Outcome {
    let mut mu_err: f64 = 0.0;
    let mut sd_err: f64 = 0.0;
    let mut run = || -> Result<()> {
        for i in 0..pairs {
            let mut rng = rng_for(i as u64, "oracle-moment", 0);
            let (c, h, w) = (rng.gen_range(1..6), rng.gen_range(2..12), rng.gen_range(2..12));
            let (sa, ma) = (rng.gen_range(0.1..5.0), rng.gen_range(-3.0..3.0));
            let (sb, mb) = (rng.gen_range(0.1..5.0), rng.gen_range(-3.0..3.0));
            let na = Normal::new(ma, sa).expect("finite");
            let nb = Normal::new(mb, sb).expect("finite");
            let n = c * h * w;
            let mut g = Graph::new();
            let a = g.constant(vec![c, h, w], (0..n).map(|_| na.sample(&mut rng)).collect())?;
            let b = g.constant(vec![c, h, w], (0..n).map(|_| nb.sample(&mut rng)).collect())?;
            let out = moment_align(&mut g, a, b, 1e-5)?;
            let so = channel_stats(g.value(out), h * w);
            let sl = channel_stats(g.value(b), h * w);
            for ((mo, so), (ml, sl)) in so.iter().zip(&sl) {
                mu_err = mu_err.max((mo - ml).abs());
                sd_err = sd_err.max((so - sl).abs());
            }
        }
        Ok(())
    };
    match run() {
        Ok(()) => Outcome::new(
            "moment_match",
            mu_err <= 1e-9 && sd_err <= 1e-6,
            format!("{pairs} pairs, max |dmu| {mu_err:.2e}, max |dsigma| {sd_err:.2e}"),
        ),
        Err(e) => Outcome::new("moment_match", false, format!("error: {e}")),
    }
}

/// Backward of `γ·L_a` alone never reaches the LiDAR encoder but does
/// reach the camera and fusion parameters.
pub fn masking(inputs: u64) -> Outcome {
    let run = || -> Result<Outcome> {
        let mut leaks = Vec::new();
        let mut dead = Vec::new();
        for i in 0..inputs {
            let fx = fixture(1000 + i)?;
            let mut store = fx.params.clone();
            let mut g = Graph::new();
            let fwd = fx.detector.forward(&mut g, &store, &fx.frame)?;
            let w = LossWeights { gamma: 0.5, ..LossWeights::default() };
            let l = fx.detector.sample_loss(&mut g, &store, &fx.frame, &fwd, Labels::Ground(&fx.frame.boxes), &w, i)?;
            let a = l.align_weighted.ok_or_else(|| Error::Config("alignment term disabled".into()))?;
            g.backward(a)?.accumulate_into(&g, &mut store, |_| true)?;
            let mut live = false;
            for (name, t) in store.iter() {
                let nz = t.grad.as_ref().is_some_and(|g| g.iter().any(|v| *v != 0.0));
                if is_lidar_encoder(name) && nz {
                    leaks.push(format!("input {i}: {name}"));
                }
                live |= nz && (name.starts_with("cam_enc") || name.starts_with("temporal") || name.starts_with("fusion"));
            }
            if !live {
                dead.push(i);
            }
        }
        let ok = leaks.is_empty() && dead.is_empty();
        Ok(Outcome::new(
            "masking",
            ok,
            if ok {
                format!("{inputs} inputs, LiDAR gradients exactly zero")
            } else {
                format!("leaks {leaks:?}, no camera/fusion gradient on {dead:?}")
            },
        ))
    };
    Outcome::from_result("masking", run())
}

/// Properties of `u(s, I; Δ, β)`.
pub fn uncertainty_law(samples: usize) -> Outcome {
    let mut rng = rng_for(0, "oracle-uncertainty", 0);
    let mut bad = Vec::new();
    let mut limit_err: f64 = 0.0;
    for _ in 0..samples {
        let delta = rng.gen_range(0.05..0.95);
        let beta = rng.gen_range(-10.0..10.0);
        let s = rng.gen_range(1e-6..=1.0);
        let below = rng.gen_range(0.0..=delta);
        if uncertainty(s, below, delta, beta) != 0.0 {
            bad.push(format!("u != 0 at I={below} <= delta={delta}"));
        }
        let i = rng.gen_range(delta..=1.0);
        if i > delta {
            let u = uncertainty(s, i, delta, beta);
            if !(0.0..1.0).contains(&u) {
                bad.push(format!("u={u} outside [0,1) at s={s} I={i}"));
            }
            // larger s·I never raises u
            let s2 = rng.gen_range(s..=1.0);
            let i2 = rng.gen_range(i..=1.0);
            if uncertainty(s2, i2, delta, beta) > u {
                bad.push(format!("not monotone: ({s},{i}) -> ({s2},{i2})"));
            }
            let lim = uncertainty(s, i, delta, 20.0);
            limit_err = limit_err.max((lim - (1.0 - s * i)).abs());
        }
    }
    if limit_err > 1e-3 {
        bad.push(format!("beta=20 limit error {limit_err:.2e}"));
    }
    let ok = bad.is_empty();
    Outcome::new(
        "uncertainty_law",
        ok,
        if ok { format!("{samples} samples, beta=20 limit err {limit_err:.2e}") } else { bad.join("; ") },
    )
}

fn random_box(rng: &mut Rng, near: Option<&Box3DLite<f64>>) -> Box3DLite<f64> {
    let (cx, cy) = match near {
        Some(b) => (b.cx + rng.gen_range(-1.5..1.5), b.cy + rng.gen_range(-1.5..1.5)),
        None => (rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)),
    };
    Box3DLite::new(cx, cy, rng.gen_range(0.5..3.0), rng.gen_range(0.5..5.0), rng.gen_range(-3.1..3.1), 0)
}

/// Area fraction by midpoint quadrature on a fine lattice over the union
/// of both bounding rectangles.
fn iou_quadrature(a: &Box3DLite<f64>, b: &Box3DLite<f64>, n: usize) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.bounds();
    let (bx0, by0, bx1, by1) = b.bounds();
    let (x0, y0) = (ax0.min(bx0), ay0.min(by0));
    let (dx, dy) = ((ax1.max(bx1) - x0) / n as f64, (ay1.max(by1) - y0) / n as f64);
    let (mut inter, mut union) = (0usize, 0usize);
    for i in 0..n {
        let x = x0 + (i as f64 + 0.5) * dx;
        for j in 0..n {
            let y = y0 + (j as f64 + 0.5) * dy;
            let (ia, ib) = (a.contains(x, y), b.contains(x, y));
            inter += usize::from(ia && ib);
            union += usize::from(ia || ib);
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// `iou_bev` against a dense point-count estimate of the same ratio.
pub fn iou_vs_monte_carlo(pairs: usize) -> Outcome {
    let mut rng = rng_for(0, "oracle-iou", 0);
    let mut worst: f64 = 0.0;
    for _ in 0..pairs {
        let a = random_box(&mut rng, None);
        let b = random_box(&mut rng, Some(&a));
        match iou_bev(&a, &b) {
            Ok(v) => worst = worst.max((v - iou_quadrature(&a, &b, 1000)).abs()),
            Err(e) => return Outcome::new("iou_vs_monte_carlo", false, format!("error: {e}")),
        }
    }
    Outcome::new("iou_vs_monte_carlo", worst <= 2e-3, format!("{pairs} pairs, max |diff| {worst:.2e}"))
}

/// Greedy suppression has a unique self-consistent kept set: every kept box
/// is unsuppressed by higher-ranked kept boxes, every dropped box is
/// suppressed by one. Found by enumerating all subsets.
fn nms_exhaustive(dets: &[Detection], thresh: f64) -> Result<Vec<Vec<usize>>> {
    let n = dets.len();
    let mut rank: Vec<usize> = (0..n).collect();
    rank.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut pos = vec![0; n];
    for (r, &i) in rank.iter().enumerate() {
        pos[i] = r;
    }
    let mut dominators = vec![0u32; n];
    for i in 0..n {
        for j in 0..n {
            if pos[j] < pos[i] && iou_bev(&dets[i].bbox, &dets[j].bbox)? > thresh {
                dominators[i] |= 1 << j;
            }
        }
    }
    let mut sets = Vec::new();
    for mask in 0u32..(1u32 << n) {
        let consistent = (0..n).all(|i| (mask >> i & 1 == 1) == (mask & dominators[i] == 0));
        if consistent {
            sets.push((0..n).filter(|i| mask >> i & 1 == 1).collect());
        }
    }
    Ok(sets)
}

pub fn nms_vs_exhaustive(trials: usize) -> Outcome {
    let mut rng = rng_for(0, "oracle-nms", 0);
    let run = |rng: &mut Rng| -> Result<Option<String>> {
        for t in 0..trials {
            let n = 1 + t % 20;
            let mut dets: Vec<Detection> = Vec::with_capacity(n);
            for _ in 0..n {
                let near = if dets.is_empty() || rng.gen_bool(0.3) { None } else { Some(dets[rng.gen_range(0..dets.len())].bbox) };
                let b = random_box(rng, near.as_ref());
                let s = rng.gen_range(0.0..1.0);
                dets.push(Detection { bbox: b, class_id: 0, score: s, objectness: s, entropy: 0.0 });
            }
            let thresh = rng.gen_range(0.05..0.9);
            let kept = nms(&dets, thresh)?;
            let mut got: Vec<usize> =
                kept.iter().map(|k| dets.iter().position(|d| d == k).expect("kept box is an input")).collect();
            got.sort_unstable();
            let sets = nms_exhaustive(&dets, thresh)?;
            if sets != [got.clone()] {
                return Ok(Some(format!("trial {t} (n={n}): nms {got:?}, reference {sets:?}")));
            }
        }
        Ok(None)
    };
    match run(&mut rng) {
        Ok(None) => Outcome::new("nms_vs_exhaustive", true, format!("{trials} trials, n <= 20, exact")),
        Ok(Some(d)) => Outcome::new("nms_vs_exhaustive", false, d),
        Err(e) => Outcome::new("nms_vs_exhaustive", false, format!("error: {e}")),
    }
}

/// Ground truth fed as pseudo-labels without uncertainty weighting gives the
/// supervised objective.
pub fn unsup_equals_sup(inputs: u64) -> Outcome {
    let run = || -> Result<Outcome> {
        let mut worst: f64 = 0.0;
        for i in 0..inputs {
            let fx = fixture(2000 + i)?;
            let (det, frame) = (&fx.detector, &fx.frame);
            let w = LossWeights::default();
            let mut g = Graph::new();
            let fwd = det.forward(&mut g, &fx.params, frame)?;
            let sup = det.sample_loss(&mut g, &fx.params, frame, &fwd, Labels::Ground(&frame.boxes), &w, i)?;
            let dets: Vec<Detection> = frame.boxes.iter().map(Detection::from_gt).collect();
            let uns = det.sample_loss(&mut g, &fx.params, frame, &fwd, Labels::Pseudo { dets: &dets, uncertainty: None }, &w, i)?;
            worst = worst.max((sup.value(&g) - uns.value(&g)).abs());
        }
        Ok(Outcome::new("unsup_equals_sup", worst <= 1e-10, format!("{inputs} inputs, max |diff| {worst:.2e}")))
    };
    Outcome::from_result("unsup_equals_sup", run())
}

fn dyadic_store(rng: &mut Rng) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (name, shape) in [("a", vec![3, 4]), ("b", vec![5])] {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-64i32..64) as f64 / 8.0).collect();
        s.insert(name, Tensor::new(shape, data).expect("shape").into_param()).expect("unique");
    }
    s
}

fn max_abs_diff(a: &ParamStore<f64>, b: &ParamStore<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .flat_map(|((_, x), (_, y))| x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs()).collect::<Vec<_>>())
        .fold(0.0, f64::max)
}

fn combine(a: &ParamStore<f64>, b: &ParamStore<f64>, f: impl Fn(f64, f64) -> f64) -> ParamStore<f64> {
    let mut out = a.clone();
    for ((_, t), (_, u)) in out.iter_mut().zip(b.iter()) {
        for (x, y) in t.data_mut().iter_mut().zip(u.data()) {
            *x = f(*x, *y);
        }
    }
    out
}

/// EMA endpoints, linearity and the n-step closed form.
pub fn ema_algebra() -> Outcome {
    let run = || -> Result<Outcome> {
        let mut rng = rng_for(0, "oracle-ema", 0);
        let mut bad = Vec::new();
        let mut closed: f64 = 0.0;
        for trial in 0..20 {
            let (base, student) = (dyadic_store(&mut rng), dyadic_store(&mut rng));
            if ema_update(&base, &student, 1.0)? != base {
                bad.push(format!("trial {trial}: alpha=1 is not the base"));
            }
            if ema_update(&base, &student, 0.0)? != student {
                bad.push(format!("trial {trial}: alpha=0 is not the student"));
            }
            // dyadic inputs and weights keep every product exact
            let (b2, s2) = (dyadic_store(&mut rng), dyadic_store(&mut rng));
            for alpha in [0.25, 0.5, 0.75] {
                let lhs = ema_update(&combine(&base, &b2, |x, y| x + y), &combine(&student, &s2, |x, y| x + y), alpha)?;
                let rhs = combine(&ema_update(&base, &student, alpha)?, &ema_update(&b2, &s2, alpha)?, |x, y| x + y);
                if lhs != rhs {
                    bad.push(format!("trial {trial}: additivity fails at alpha={alpha}"));
                }
                let lhs = ema_update(&combine(&base, &base, |x, _| 2.0 * x), &combine(&student, &student, |x, _| 2.0 * x), alpha)?;
                let rhs = combine(&ema_update(&base, &student, alpha)?, &base, |x, _| 2.0 * x);
                if lhs != rhs {
                    bad.push(format!("trial {trial}: homogeneity fails at alpha={alpha}"));
                }
            }
            let alpha: f64 = rng.gen_range(0.5..0.999);
            let steps = rng.gen_range(1..200);
            let mut theta = base.clone();
            for _ in 0..steps {
                theta = ema_update(&theta, &student, alpha)?;
            }
            let an = alpha.powi(steps);
            let expect = combine(&base, &student, |t0, ts| an * t0 + (1.0 - an) * ts);
            closed = closed.max(max_abs_diff(&theta, &expect));
        }
        if closed > 1e-12 {
            bad.push(format!("n-step closed form error {closed:.2e}"));
        }
        let ok = bad.is_empty();
        Ok(Outcome::new(
            "ema_algebra",
            ok,
            if ok { format!("20 trials, endpoints and linearity exact, closed form err {closed:.2e}") } else { bad.join("; ") },
        ))
    };
    Outcome::from_result("ema_algebra", run())
}

/// Every oracle family; the gradient checks run over `seeds` seeds.
pub fn run_all(seeds: u64) -> Vec<Outcome> {
    vec![
        grad_ops(seeds),
        grad_losses(seeds),
        moment_match(100),
        masking(20),
        uncertainty_law(10_000),
        iou_vs_monte_carlo(100),
        nms_vs_exhaustive(40),
        unsup_equals_sup(5),
        ema_algebra(),
    ]
}
