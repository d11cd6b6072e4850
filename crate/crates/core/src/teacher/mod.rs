//! Reflective teacher: EMA updates, importance weights, importance-anchored
//! refinement, active promotion of unlabeled sequences, and the round loop.

mod adam;
mod checkpoint;
mod trainer;

use std::collections::{BTreeMap, BTreeSet};

use crate::autodiff::{Graph, ParamStore, Var};
use crate::config::RefineOptimizer;
use crate::error::{config_err, domain_err, Error, Result};
use crate::model::head::Detection;

pub use adam::Adam;
pub use checkpoint::{decode_store, encode_store, load_checkpoint, load_manifest, save_checkpoint, Checkpoint, CheckpointManifest};
pub use trainer::{generate_pseudo_labels, metrics_csv, MetricsRow, RoundReport, RunState, Trainer};

/// Per-parameter importance arrays, keyed like the parameter store.
pub type Importance = BTreeMap<String, Vec<f64>>;

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherState {
    /// Teacher of the previous round, fixed during a round.
    pub params_prev: ParamStore<f64>,
    /// Running EMA of the student.
    pub params_ema: ParamStore<f64>,
    pub importance: Importance,
    pub round: usize,
}

impl TeacherState {
    pub fn new(params: ParamStore<f64>) -> Self {
        Self { params_ema: params.snapshot(), params_prev: params, importance: Importance::new(), round: 0 }
    }
}

/// `α·base + (1−α)·student`, elementwise.
pub fn ema_update(base: &ParamStore<f64>, student: &ParamStore<f64>, alpha: f64) -> Result<ParamStore<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(config_err!("EMA coefficient must lie in [0, 1], got {alpha}"));
    }
    base.check_aligned(student)?;
    let mut out = base.snapshot();
    for (name, t) in out.iter_mut() {
        let s = student.require(name)?.data();
        for (p, &q) in t.data_mut().iter_mut().zip(s) {
            *p = alpha * *p + (1.0 - alpha) * q;
        }
    }
    Ok(out)
}

/// `Φ = mean over samples of |∂‖out(x; θ)‖² / ∂θ|` for every parameter of
/// `store`; parameters the output does not touch get zeros.
pub fn accumulate_importance<S>(
    store: &ParamStore<f64>,
    samples: &[S],
    mut out_fn: impl FnMut(&mut Graph<f64>, &ParamStore<f64>, &S) -> Result<Var>,
) -> Result<Importance> {
    if samples.is_empty() {
        return Err(domain_err!("importance needs at least one unlabeled sample"));
    }
    let mut acc: Importance = store.iter().map(|(n, t)| (n.to_string(), vec![0.0; t.numel()])).collect();
    for s in samples {
        let mut g = Graph::new();
        let out = out_fn(&mut g, store, s)?;
        let sq = g.square(out);
        let norm = g.sum(sq);
        let grads = g.backward(norm)?;
        for (name, v) in g.bound_params() {
            if let (Some(gr), Some(a)) = (grads.wrt(v), acc.get_mut(name)) {
                for (x, y) in a.iter_mut().zip(gr) {
                    *x += y.abs();
                }
            }
        }
    }
    let n = samples.len() as f64;
    for a in acc.values_mut() {
        for x in a.iter_mut() {
            *x /= n;
        }
    }
    Ok(acc)
}

/// Loss trajectory of a refinement run.
#[derive(Clone, Debug, PartialEq)]
pub struct RefineReport {
    /// Objective before each step.
    pub losses: Vec<f64>,
    /// Step size after the stability clamp.
    pub lr_used: f64,
}

/// Largest step keeping gradient descent on the quadratic penalty stable
/// with margin: `1 / (2 η max Φ)`.
pub fn stability_bound(phi: &Importance, eta: f64) -> f64 {
    let max = phi.values().flat_map(|v| v.iter().copied()).fold(0.0, f64::max);
    if eta * max > 0.0 {
        1.0 / (2.0 * eta * max)
    } else {
        f64::INFINITY
    }
}

/// Objective `mean|out(x;θ) − out_prev(x)| + η Σ Φ (θ − θ_prev)²` on `g`.
pub fn refine_objective<S>(
    g: &mut Graph<f64>,
    store: &ParamStore<f64>,
    prev: &ParamStore<f64>,
    phi: &Importance,
    eta: f64,
    sample: &S,
    prev_out: &[f64],
    out_fn: &mut impl FnMut(&mut Graph<f64>, &ParamStore<f64>, &S) -> Result<Var>,
) -> Result<Var> {
    let out = out_fn(g, store, sample)?;
    let target = g.constant(g.shape(out).to_vec(), prev_out.to_vec())?;
    let mut total = g.l1_loss(out, target)?;
    if eta > 0.0 {
        for (name, t) in prev.iter() {
            let Some(w) = phi.get(name) else { continue };
            if w.iter().all(|x| *x == 0.0) {
                continue;
            }
            let p = g.param(store, name)?;
            let anchor = g.constant(t.shape().to_vec(), t.data().to_vec())?;
            let d = g.sub(p, anchor)?;
            let d2 = g.square(d);
            let wv = g.constant(t.shape().to_vec(), w.clone())?;
            let wd = g.mul(d2, wv)?;
            let s = g.sum(wd);
            let s = g.mul_scalar(s, eta);
            total = g.add(total, s)?;
        }
    }
    Ok(total)
}

/// Descent on [`refine_objective`] from `ema`, cycling through the samples.
/// Plain gradient steps are clamped to [`stability_bound`]; Adam steps are not.
#[allow(clippy::too_many_arguments)]
pub fn reflective_refine<S>(
    ema: &ParamStore<f64>,
    prev: &ParamStore<f64>,
    phi: &Importance,
    samples: &[S],
    mut out_fn: impl FnMut(&mut Graph<f64>, &ParamStore<f64>, &S) -> Result<Var>,
    eta: f64,
    steps: usize,
    lr: f64,
    optimizer: RefineOptimizer,
) -> Result<(ParamStore<f64>, RefineReport)> {
    if !(eta.is_finite() && eta >= 0.0) || !(lr > 0.0) {
        return Err(config_err!("refinement needs eta >= 0 and lr > 0"));
    }
    ema.check_aligned(prev)?;
    let lr_used = match optimizer {
        RefineOptimizer::Gd => lr.min(stability_bound(phi, eta)),
        RefineOptimizer::Adam => lr,
    };
    let mut losses = Vec::with_capacity(steps);
    if samples.is_empty() || steps == 0 {
        return Ok((ema.snapshot(), RefineReport { losses, lr_used }));
    }
    let prev_outs = samples
        .iter()
        .map(|s| {
            let mut g = Graph::new();
            let v = out_fn(&mut g, prev, s)?;
            Ok(g.value(v).to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut store = ema.snapshot();
    let mut adam = Adam::new(lr);
    for step in 0..steps {
        let i = step % samples.len();
        let mut g = Graph::new();
        let obj = refine_objective(&mut g, &store, prev, phi, eta, &samples[i], &prev_outs[i], &mut out_fn)?;
        let value = g.item(obj);
        if !value.is_finite() {
            return Err(Error::Refinement { step, reason: format!("objective is {value}") });
        }
        losses.push(value);
        let grads = g.backward(obj).map_err(|e| Error::Refinement { step, reason: e.to_string() })?;
        if optimizer == RefineOptimizer::Adam {
            store.zero_grad();
            grads.accumulate_into(&g, &mut store, |_| true)?;
            adam.step(&mut store, f64::INFINITY)?;
            continue;
        }
        let updates: Vec<(String, Vec<f64>)> = g
            .bound_params()
            .filter_map(|(n, v)| grads.wrt(v).map(|gr| (n.to_string(), gr.to_vec())))
            .collect();
        for (name, gr) in updates {
            let t = store.get_mut(&name).ok_or_else(|| domain_err!("unknown parameter `{name}`"))?;
            for (p, d) in t.data_mut().iter_mut().zip(gr) {
                *p -= lr_used * d;
            }
        }
    }
    Ok((store, RefineReport { losses, lr_used }))
}

/// Per-candidate quantities behind the sampling score.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateStats {
    pub index: usize,
    /// 1 − mean pseudo-label score.
    pub difficulty: f64,
    /// Mean per-detection class entropy.
    pub information: f64,
    /// Spatially pooled fused-BEV feature.
    pub pooled: Vec<f64>,
}

impl CandidateStats {
    pub fn from_detections(index: usize, dets: &[Detection], pooled: Vec<f64>) -> Self {
        let (difficulty, information) = if dets.is_empty() {
            (1.0, 0.0)
        } else {
            let n = dets.len() as f64;
            (
                1.0 - dets.iter().map(|d| d.score).sum::<f64>() / n,
                dets.iter().map(|d| d.entropy).sum::<f64>() / n,
            )
        };
        Self { index, difficulty, information, pooled }
    }
}

fn min_max(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        v.iter().map(|x| (x - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; v.len()]
    }
}

/// Sampling score of every candidate plus the top-`m` selection.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    /// (index, score) for all candidates, best first (ties: lower index).
    pub ranked: Vec<(usize, f64)>,
    pub chosen: Vec<usize>,
}

/// Difficulty, information and diversity (min distance to the labeled pooled
/// features), each min-max normalized over the pool, averaged into one score.
pub fn active_select(cands: &[CandidateStats], labeled_pooled: &[Vec<f64>], m: usize) -> Result<Selection> {
    if m > cands.len() {
        return Err(domain_err!("cannot promote {m} of {} unlabeled samples", cands.len()));
    }
    let diversity: Vec<f64> = cands
        .iter()
        .map(|c| {
            labeled_pooled
                .iter()
                .map(|l| l.iter().zip(&c.pooled).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .map(|d| if d.is_finite() { d } else { 0.0 })
        .collect();
    let dif = min_max(&cands.iter().map(|c| c.difficulty).collect::<Vec<_>>());
    let inf = min_max(&cands.iter().map(|c| c.information).collect::<Vec<_>>());
    let div = min_max(&diversity);
    let mut ranked: Vec<(usize, f64)> =
        cands.iter().enumerate().map(|(i, c)| (c.index, (dif[i] + inf[i] + div[i]) / 3.0)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let chosen = ranked.iter().take(m).map(|r| r.0).collect();
    Ok(Selection { ranked, chosen })
}

/// Labeled/unlabeled sequence indices and the frozen pseudo-labels of
/// promoted sequences (per frame).
#[derive(Clone, Debug, PartialEq, Default)]
pub struct LabelPool {
    pub labeled: BTreeSet<usize>,
    pub unlabeled: BTreeSet<usize>,
    pub pseudo: BTreeMap<usize, Vec<Vec<Detection>>>,
}

impl LabelPool {
    pub fn new(labeled: BTreeSet<usize>, unlabeled: BTreeSet<usize>) -> Result<Self> {
        if !labeled.is_disjoint(&unlabeled) {
            return Err(domain_err!("labeled and unlabeled pools overlap"));
        }
        Ok(Self { labeled, unlabeled, pseudo: BTreeMap::new() })
    }

    /// Move `index` from the unlabeled to the labeled pool with frozen labels.
    pub fn promote(&mut self, index: usize, labels: Vec<Vec<Detection>>) -> Result<()> {
        if !self.unlabeled.remove(&index) {
            return Err(domain_err!("sequence {index} is not in the unlabeled pool"));
        }
        self.labeled.insert(index);
        self.pseudo.insert(index, labels);
        Ok(())
    }

    pub fn check(&self) -> Result<()> {
        if !self.labeled.is_disjoint(&self.unlabeled) {
            return Err(domain_err!("labeled and unlabeled pools overlap"));
        }
        if self.pseudo.keys().any(|k| !self.labeled.contains(k)) {
            return Err(domain_err!("pseudo-labels recorded for a sequence outside the labeled pool"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn store(vals: &[(&str, Vec<f64>)]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for (n, v) in vals {
            s.insert(*n, Tensor::new(vec![v.len()], v.clone()).unwrap().into_param()).unwrap();
        }
        s
    }

    #[test]
    fn ema_examples() {
        let prev = store(&[("w", vec![1.0])]);
        let stu = store(&[("w", vec![0.0])]);
        assert_eq!(ema_update(&prev, &stu, 1.0).unwrap().get("w").unwrap().data(), &[1.0]);
        assert_eq!(ema_update(&prev, &stu, 0.0).unwrap().get("w").unwrap().data(), &[0.0]);
        assert!((ema_update(&prev, &stu, 0.9).unwrap().get("w").unwrap().data()[0] - 0.9).abs() < 1e-15);
        let bad = store(&[("w", vec![0.0, 1.0])]);
        assert!(ema_update(&prev, &bad, 0.5).is_err());
        assert!(ema_update(&prev, &stu, 1.5).is_err());
    }

    fn scalar_model(g: &mut Graph<f64>, s: &ParamStore<f64>, x: &f64) -> Result<Var> {
        let w = g.param(s, "w")?;
        let xv = g.scalar_const(*x);
        g.mul(w, xv)
    }

    #[test]
    fn importance_examples() {
        let s = store(&[("w", vec![3.0]), ("dead", vec![5.0])]);
        let phi = accumulate_importance(&s, &[2.0], scalar_model).unwrap();
        assert!((phi["w"][0] - 24.0).abs() < 1e-12);
        assert_eq!(phi["dead"], vec![0.0]);
        let once = accumulate_importance(&s, &[2.0, -1.0], scalar_model).unwrap();
        let twice = accumulate_importance(&s, &[2.0, -1.0, 2.0, -1.0], scalar_model).unwrap();
        assert!((once["w"][0] - twice["w"][0]).abs() < 1e-12);
        assert!(accumulate_importance::<f64>(&s, &[], scalar_model).is_err());
    }

    #[test]
    fn refine_fixed_point_and_quadratic_step() {
        let s = store(&[("w", vec![3.0])]);
        let phi: Importance = [("w".to_string(), vec![2.0])].into();
        let (out, rep) = reflective_refine(&s, &s, &phi, &[2.0], scalar_model, 1.0, 5, 1e-3, RefineOptimizer::Gd).unwrap();
        assert_eq!(out, s);
        assert!(rep.losses.iter().all(|l| *l == 0.0));

        // output independent of the parameter: only the penalty acts
        let prev = store(&[("w", vec![1.0])]);
        let ema = store(&[("w", vec![1.5])]);
        let dead = |g: &mut Graph<f64>, _: &ParamStore<f64>, x: &f64| Ok(g.scalar_const(*x));
        let (eta, lr, phi_w) = (0.7, 1e-2, 2.0);
        let phi: Importance = [("w".to_string(), vec![phi_w])].into();
        let (out, _) = reflective_refine(&ema, &prev, &phi, &[1.0], dead, eta, 1, lr, RefineOptimizer::Gd).unwrap();
        let expect = 1.5 - lr * 2.0 * eta * phi_w * (1.5 - 1.0);
        assert!((out.get("w").unwrap().data()[0] - expect).abs() < 1e-14);
    }

    #[test]
    fn large_eta_pins_parameters() {
        let prev = store(&[("w", vec![1.0])]);
        let ema = store(&[("w", vec![2.0])]);
        let phi: Importance = [("w".to_string(), vec![1.0])].into();
        let (out, rep) = reflective_refine(&ema, &prev, &phi, &[1.0], scalar_model, 1e6, 60, 1.0, RefineOptimizer::Gd).unwrap();
        assert!((out.get("w").unwrap().data()[0] - 1.0).abs() < 1e-6);
        assert!(rep.lr_used <= 1.0 / (2.0 * 1e6));
    }

    #[test]
    fn selection_examples() {
        let c = |i: usize, d: f64| CandidateStats { index: i, difficulty: d, information: d, pooled: vec![d] };
        let sel = active_select(&[c(0, 0.9), c(1, 0.1)], &[vec![0.0]], 1).unwrap();
        assert_eq!(sel.chosen, vec![0]);
        let all = active_select(&[c(0, 0.1), c(1, 0.9), c(2, 0.5)], &[vec![0.0]], 3).unwrap();
        assert_eq!(all.chosen, vec![1, 2, 0]);
        assert!(active_select(&[c(0, 0.1)], &[vec![0.0]], 2).is_err());
        // identical difficulty/information; the one duplicating a labeled feature loses
        let dup = CandidateStats { index: 0, difficulty: 0.5, information: 0.5, pooled: vec![1.0, 1.0] };
        let far = CandidateStats { index: 1, difficulty: 0.5, information: 0.5, pooled: vec![4.0, 5.0] };
        let sel = active_select(&[dup, far], &[vec![1.0, 1.0]], 1).unwrap();
        assert_eq!(sel.chosen, vec![1]);
        assert!(sel.ranked[1].1 < sel.ranked[0].1);
    }

    #[test]
    fn pool_bookkeeping() {
        let mut pool = LabelPool::new([0, 1].into(), [2, 3, 4].into()).unwrap();
        pool.promote(3, vec![vec![]]).unwrap();
        assert_eq!((pool.labeled.len(), pool.unlabeled.len()), (3, 2));
        assert!(pool.promote(3, vec![]).is_err());
        pool.check().unwrap();
        assert!(LabelPool::new([0].into(), [0].into()).is_err());
    }
}
