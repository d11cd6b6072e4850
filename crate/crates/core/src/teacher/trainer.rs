use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::Rng as _;

use super::{
    accumulate_importance, active_select, ema_update, reflective_refine, Adam, CandidateStats, Importance, LabelPool,
    RefineReport, Selection, TeacherState,
};
use crate::audit;
use crate::autodiff::{Graph, ParamStore, Var};
use crate::config::{BetaMode, ExperimentConfig};
use crate::error::{domain_err, Error, Result};
use crate::geometry::Box3DLite;
use crate::metrics::{evaluate, forgetting_delta, EvalResult, GtId};
use crate::model::head::Detection;
use crate::model::{Detector, Labels, SampleLoss};
use crate::rng::{derive_seed, rng_for};
use crate::world::{augment, generate_dataset, AugMode, AugParams, Frame, FrameKey, SceneDataset};

/// One line of metrics.csv. Missing values are written as empty fields.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub round: usize,
    pub step: usize,
    pub loss_total: Option<f64>,
    pub loss_s: Option<f64>,
    pub loss_u: Option<f64>,
    pub loss_a: Option<f64>,
    pub loss_pers: Option<f64>,
    pub map_lite: Option<f64>,
    pub delta_forgetting: Option<f64>,
    pub wall_ms: u64,
}

impl MetricsRow {
    pub const HEADER: &'static str =
        "run_id,round,step,loss_total,loss_s,loss_u,loss_a,loss_pers,map_lite,delta_forgetting,wall_ms";

    pub fn empty(run_id: &str, round: usize, step: usize) -> Self {
        Self {
            run_id: run_id.to_string(),
            round,
            step,
            loss_total: None,
            loss_s: None,
            loss_u: None,
            loss_a: None,
            loss_pers: None,
            map_lite: None,
            delta_forgetting: None,
            wall_ms: 0,
        }
    }

    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.run_id,
            self.round,
            self.step,
            f(self.loss_total),
            f(self.loss_s),
            f(self.loss_u),
            f(self.loss_a),
            f(self.loss_pers),
            f(self.map_lite),
            f(self.delta_forgetting),
            self.wall_ms
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(MetricsRow::HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}

/// Summary of one semi-supervised round.
#[derive(Clone, Debug)]
pub struct RoundReport {
    pub round: usize,
    pub promoted: Vec<usize>,
    pub selection: Option<Selection>,
    pub refine: Option<RefineReport>,
    pub eval: EvalResult,
    pub delta_forgetting: Option<f64>,
}

/// Everything that evolves during a run. Cloning forks the run.
#[derive(Clone, Debug)]
pub struct RunState {
    pub teacher: TeacherState,
    /// Teacher right after supervised initialization.
    pub initial: ParamStore<f64>,
    pub student: ParamStore<f64>,
    pub optimizer: Adam,
    pub pool: LabelPool,
    pub initial_unlabeled: usize,
    /// Test GT objects the initial teacher got right.
    pub v1: Option<BTreeSet<GtId>>,
    pub rows: Vec<MetricsRow>,
    pub reports: Vec<RoundReport>,
    pub global_step: usize,
}

#[derive(Default)]
struct Window {
    n: usize,
    total: f64,
    s: f64,
    u: f64,
    a: f64,
    pers: f64,
}

impl Window {
    fn push(&mut self, total: f64, s: f64, u: f64, a: f64, pers: f64) {
        self.n += 1;
        self.total += total;
        self.s += s;
        self.u += u;
        self.a += a;
        self.pers += pers;
    }

    fn flush(&mut self, row: &mut MetricsRow, semi: bool) {
        let n = self.n.max(1) as f64;
        row.loss_total = Some(self.total / n);
        row.loss_s = Some(self.s / n);
        row.loss_u = semi.then_some(self.u / n);
        row.loss_a = Some(self.a / n);
        row.loss_pers = Some(self.pers / n);
        *self = Window::default();
    }
}

/// Teacher forward on a weakly augmented copy of `frame`. Detections scoring
/// below `thresh` are dropped (everything is dropped at `thresh = 1`) and
/// boxes are returned in the frame's own coordinates.
pub fn generate_pseudo_labels(
    detector: &Detector,
    teacher: &ParamStore<f64>,
    frame: &Frame,
    weak: &AugParams,
    seed: u64,
    thresh: f64,
) -> Result<Vec<Detection>> {
    let world = &detector.world;
    let (weak_frame, tf) = augment(frame, world, AugMode::Weak, weak, seed);
    let dets = detector.detect_raw(teacher, &weak_frame)?;
    Ok(dets
        .into_iter()
        .filter(|d| thresh < 1.0 && d.score >= thresh)
        .map(|d| Detection { bbox: tf.invert_box(world, &d.bbox), ..d })
        .collect())
}

fn as_boxes(dets: &[Detection]) -> Vec<Box3DLite<f64>> {
    dets.iter().map(|d| Box3DLite { class_id: d.class_id, ..d.bbox }).collect()
}

fn frame_index(key: FrameKey) -> u64 {
    (key.seq * 10_000 + key.t) as u64
}

/// Drives supervised initialization and the semi-supervised rounds.
pub struct Trainer {
    pub cfg: ExperimentConfig,
    pub detector: Detector,
    pub train: SceneDataset,
    frames: BTreeMap<FrameKey, Frame>,
    pub test_frames: Vec<Frame>,
}

impl Trainer {
    /// Generates the test split from the configuration.
    pub fn new(cfg: ExperimentConfig, train: SceneDataset) -> Result<Self> {
        let test = generate_dataset(&cfg.test_spec())?;
        Self::with_test(cfg, train, &test)
    }

    pub fn with_test(cfg: ExperimentConfig, train: SceneDataset, test: &SceneDataset) -> Result<Self> {
        cfg.validate()?;
        if train.world() != &cfg.dataset.world {
            return Err(domain_err!("dataset world does not match the configuration"));
        }
        let detector = Detector::new(cfg.dataset.world.clone(), cfg.model.clone())?;
        let n_max = cfg.model.n_max;
        let mut frames = BTreeMap::new();
        for key in train.frame_keys(&(0..train.len()).collect::<Vec<_>>()) {
            frames.insert(key, Frame::build(&train, key, n_max)?);
        }
        let test_frames = test
            .frame_keys(&(0..test.len()).collect::<Vec<_>>())
            .into_iter()
            .map(|k| Frame::build(test, k, n_max))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { cfg, detector, train, frames, test_frames })
    }

    /// Same data and frames under a different configuration of the training
    /// schedule (world and model must match).
    pub fn fork(&self, cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.dataset != self.cfg.dataset || cfg.seed != self.cfg.seed {
            return Err(domain_err!("forked configuration must share the dataset"));
        }
        let detector = Detector::new(cfg.dataset.world.clone(), cfg.model.clone())?;
        Ok(Self {
            cfg,
            detector,
            train: self.train.clone(),
            frames: self.frames.clone(),
            test_frames: self.test_frames.clone(),
        })
    }

    pub fn frame(&self, key: FrameKey) -> Result<&Frame> {
        self.frames.get(&key).ok_or_else(|| domain_err!("frame {key:?} not in the training set"))
    }

    /// Fresh parameters; the student mirrors the teacher.
    pub fn fresh_state(&self) -> Result<RunState> {
        let params = self.detector.init_params(derive_seed(self.cfg.seed, "init", 0));
        let pool = LabelPool::new(self.train.labeled.clone(), self.train.unlabeled.clone())?;
        Ok(RunState {
            initial: params.snapshot(),
            student: params.snapshot(),
            teacher: TeacherState::new(params),
            optimizer: Adam::new(self.cfg.train.student_lr),
            initial_unlabeled: pool.unlabeled.len(),
            pool,
            v1: None,
            rows: Vec::new(),
            reports: Vec::new(),
            global_step: 0,
        })
    }

    fn diverged(&self, step: usize, what: &str, v: f64) -> Error {
        Error::Training { seed: self.cfg.seed, step, reason: format!("{what} is {v}") }
    }

    fn stamp(&self, row: &mut MetricsRow, start: Instant) {
        if self.cfg.log.wall_clock {
            row.wall_ms = start.elapsed().as_millis() as u64;
        }
    }

    /// Labels for a labeled-pool frame after augmentation `tf`: ground truth,
    /// or the frozen pseudo-labels of a promoted sequence.
    fn ground_labels(&self, pool: &LabelPool, key: FrameKey, aug: &Frame) -> Vec<Box3DLite<f64>> {
        match pool.pseudo.get(&key.seq).and_then(|p| p.get(key.t)) {
            Some(dets) => as_boxes(dets).iter().map(|b| aug.aug.apply_box(&self.detector.world, b)).collect(),
            None => aug.boxes.clone(),
        }
    }

    /// Forward and loss for one strongly augmented sample, gradients added to
    /// `store` with weight `scale`.
    fn sample_step(
        &self,
        store: &mut ParamStore<f64>,
        frame: &Frame,
        labels: impl FnOnce(&Frame) -> LabelsOwned,
        seed: u64,
        scale: f64,
    ) -> Result<(f64, f64, f64)> {
        let world = &self.detector.world;
        let (aug, _) = augment(frame, world, AugMode::Strong, &self.cfg.train.strong_aug, seed);
        let owned = labels(&aug);
        let mut g = Graph::new();
        let fwd = self.detector.forward(&mut g, store, &aug)?;
        let loss: SampleLoss = self.detector.sample_loss(&mut g, store, &aug, &fwd, owned.as_labels(), &self.cfg.loss, seed)?;
        let value = loss.value(&g);
        let (a, p) = (SampleLoss::term(&g, loss.align), SampleLoss::term(&g, loss.pers));
        if value.is_finite() {
            self.detector.accumulate_grads(&mut g, &loss, store, scale)?;
        }
        Ok((value, a, p))
    }

    /// Supervised training of the initial teacher on the labeled pool.
    pub fn init_teacher(&self, state: &mut RunState) -> Result<()> {
        let start = Instant::now();
        let tc = &self.cfg.train;
        let keys = self.train.frame_keys(&state.pool.labeled);
        if keys.is_empty() {
            return Err(domain_err!("labeled pool is empty"));
        }
        let mut params = state.teacher.params_prev.snapshot();
        let mut adam = Adam::new(tc.lr);
        let decay_at = (tc.lr_decay_at * tc.init_steps as f64).round() as usize;
        let mut win = Window::default();
        for step in 0..tc.init_steps {
            adam.lr = if step >= decay_at { tc.lr * tc.lr_decay } else { tc.lr };
            let mut rng = rng_for(self.cfg.seed, "sup-sample", step as u64);
            let key = keys[rng.gen_range(0..keys.len())];
            let seed = derive_seed(self.cfg.seed, "sup-aug", step as u64);
            let pool = &state.pool;
            let (v, a, p) = self.sample_step(
                &mut params,
                self.frame(key)?,
                |f| LabelsOwned::Ground(self.ground_labels(pool, key, f)),
                seed,
                1.0,
            )?;
            if !v.is_finite() {
                self.log_failure(state, 0, step, v);
                return Err(self.diverged(step, "supervised loss", v));
            }
            adam.step(&mut params, tc.grad_clip).map_err(|e| Error::Training {
                seed: self.cfg.seed,
                step,
                reason: e.to_string(),
            })?;
            win.push(v, v, 0.0, a, p);
            if (step + 1) % self.cfg.log.every == 0 || step + 1 == tc.init_steps {
                let mut row = MetricsRow::empty(&self.cfg.run_id, 0, step + 1);
                win.flush(&mut row, false);
                self.stamp(&mut row, start);
                state.rows.push(row);
            }
        }
        state.global_step = tc.init_steps;
        state.teacher = TeacherState::new(params.snapshot());
        state.initial = params.snapshot();
        state.student = params;
        state.optimizer = Adam::new(tc.student_lr);

        let eval = self.evaluate(&state.teacher.params_prev, false)?;
        let mut row = MetricsRow::empty(&self.cfg.run_id, 0, state.global_step);
        row.map_lite = Some(100.0 * eval.map_lite);
        self.stamp(&mut row, start);
        state.rows.push(row);
        state.v1 = Some(eval.matched_gt_ids);
        Ok(())
    }

    fn log_failure(&self, state: &mut RunState, round: usize, step: usize, v: f64) {
        let mut row = MetricsRow::empty(&self.cfg.run_id, round, step);
        row.loss_total = Some(v);
        state.rows.push(row);
    }

    pub fn evaluate(&self, store: &ParamStore<f64>, cross_branch: bool) -> Result<EvalResult> {
        evaluate(&self.detector, store, &self.test_frames, cross_branch)
    }

    fn last_frame(&self, seq: usize) -> FrameKey {
        FrameKey { seq, t: self.cfg.dataset.seq_len - 1 }
    }

    /// Scores the unlabeled pool with the previous teacher and returns the
    /// selection plus per-sequence scores.
    fn select(&self, state: &RunState, m: usize) -> Result<Selection> {
        let prev = &state.teacher.params_prev;
        let thresh = self.cfg.train.score_thresh;
        let mut cands = Vec::with_capacity(state.pool.unlabeled.len());
        for &seq in &state.pool.unlabeled {
            let frame = self.frame(self.last_frame(seq))?;
            let mut g = Graph::new();
            let fwd = self.detector.forward(&mut g, prev, frame)?;
            let pooled = self.detector.pooled_feature(&g, &fwd);
            let dets: Vec<_> = self
                .detector
                .detect_on(&mut g, prev, &fwd)?
                .into_iter()
                .filter(|d| thresh < 1.0 && d.score >= thresh)
                .collect();
            cands.push(CandidateStats::from_detections(seq, &dets, pooled));
        }
        let mut labeled = Vec::with_capacity(state.pool.labeled.len());
        for &seq in &state.pool.labeled {
            let mut g = Graph::new();
            let fwd = self.detector.forward(&mut g, prev, self.frame(self.last_frame(seq))?)?;
            labeled.push(self.detector.pooled_feature(&g, &fwd));
        }
        active_select(&cands, &labeled, m)
    }

    /// Number of sequences promoted per round.
    pub fn promote_count(&self, state: &RunState) -> usize {
        let m = (self.cfg.train.promote_fraction * state.initial_unlabeled as f64).ceil() as usize;
        m.min(state.pool.unlabeled.len())
    }

    /// Raw head output of an unaugmented frame, the function behind the
    /// importance weights and the refinement consistency term.
    fn head_fn(&self) -> impl FnMut(&mut Graph<f64>, &ParamStore<f64>, &FrameKey) -> Result<Var> + '_ {
        move |g, store, key| {
            let fwd = self.detector.forward(g, store, self.frame(*key)?)?;
            self.detector.head_output(g, &fwd)
        }
    }

    /// At most `importance_samples` frames, evenly spaced over `seqs`.
    fn importance_keys(&self, seqs: &BTreeSet<usize>) -> Vec<FrameKey> {
        let all = self.train.frame_keys(seqs);
        let cap = self.cfg.train.importance_samples.max(1);
        if all.len() <= cap {
            return all;
        }
        (0..cap).map(|i| all[i * all.len() / cap]).collect()
    }

    /// One round: promotion, student training with EMA, importance weights on
    /// the pre-promotion unlabeled pool, refinement, evaluation.
    pub fn run_round(&self, state: &mut RunState) -> Result<RoundReport> {
        let start = Instant::now();
        let tc = &self.cfg.train;
        let round = state.teacher.round + 1;
        let world = &self.detector.world;
        let prev = state.teacher.params_prev.snapshot();
        let unlabeled_before = state.pool.unlabeled.clone();

        // promotion
        let m = self.promote_count(state);
        let selection = if state.pool.unlabeled.is_empty() { None } else { Some(self.select(state, m)?) };
        let mut promoted = Vec::new();
        if let Some(sel) = &selection {
            for &seq in &sel.chosen {
                let labels = (0..self.cfg.dataset.seq_len)
                    .map(|t| {
                        let d = self.detector.detect_raw(&prev, self.frame(FrameKey { seq, t })?)?;
                        Ok(d.into_iter().filter(|d| tc.score_thresh < 1.0 && d.score >= tc.score_thresh).collect())
                    })
                    .collect::<Result<Vec<_>>>()?;
                state.pool.promote(seq, labels)?;
                promoted.push(seq);
            }
            state.pool.check()?;
        }
        let beta_of: BTreeMap<usize, f64> = selection.as_ref().map(|s| s.ranked.iter().copied().collect()).unwrap_or_default();

        // student training
        let lkeys = self.train.frame_keys(&state.pool.labeled);
        let ukeys = self.train.frame_keys(&state.pool.unlabeled);
        let kappa = self.cfg.loss.kappa;
        let mut pseudo_cache: BTreeMap<FrameKey, Vec<Detection>> = BTreeMap::new();
        let mut ema = prev.snapshot();
        let mut win = Window::default();
        let use_u = kappa > 0.0 && !ukeys.is_empty();
        for step in 0..tc.steps_per_round {
            let gstep = state.global_step + step;
            let mut rng = rng_for(self.cfg.seed, "stud-sample", gstep as u64);
            let lkey = lkeys[rng.gen_range(0..lkeys.len())];
            let pool = &state.pool;
            let (ls, la, lp) = self.sample_step(
                &mut state.student,
                self.frame(lkey)?,
                |f| LabelsOwned::Ground(self.ground_labels(pool, lkey, f)),
                derive_seed(self.cfg.seed, "stud-aug-l", gstep as u64),
                1.0,
            )?;
            let mut lu = 0.0;
            if use_u {
                let ukey = ukeys[rng.gen_range(0..ukeys.len())];
                if !pseudo_cache.contains_key(&ukey) {
                    let seed = derive_seed(self.cfg.seed, &format!("weak-{round}"), frame_index(ukey));
                    let d = generate_pseudo_labels(&self.detector, &prev, self.frame(ukey)?, &tc.weak_aug, seed, tc.score_thresh)?;
                    pseudo_cache.insert(ukey, d);
                }
                let base = &pseudo_cache[&ukey];
                let beta = match tc.beta_mode {
                    BetaMode::Hyper => self.cfg.model.head.beta,
                    BetaMode::SampleScore => beta_of.get(&ukey.seq).copied().unwrap_or(self.cfg.model.head.beta),
                };
                let unc = tc.use_uncertainty.then_some(beta);
                let (v, _, _) = self.sample_step(
                    &mut state.student,
                    self.frame(ukey)?,
                    |f| {
                        LabelsOwned::Pseudo(
                            base.iter().map(|d| Detection { bbox: f.aug.apply_box(world, &d.bbox), ..*d }).collect(),
                            unc,
                        )
                    },
                    derive_seed(self.cfg.seed, "stud-aug-u", gstep as u64),
                    kappa,
                )?;
                lu = v;
            }
            let total = ls + kappa * lu;
            if !total.is_finite() {
                self.log_failure(state, round, gstep, total);
                return Err(self.diverged(gstep, "student loss", total));
            }
            state
                .optimizer
                .step(&mut state.student, tc.grad_clip)
                .map_err(|e| Error::Training { seed: self.cfg.seed, step: gstep, reason: e.to_string() })?;
            ema = ema_update(&ema, &state.student, tc.alpha)?;
            win.push(total, ls, lu, la, lp);
            if (step + 1) % self.cfg.log.every == 0 || step + 1 == tc.steps_per_round {
                let mut row = MetricsRow::empty(&self.cfg.run_id, round, gstep + 1);
                win.flush(&mut row, use_u);
                self.stamp(&mut row, start);
                state.rows.push(row);
            }
        }
        state.global_step += tc.steps_per_round;

        // reflection
        let (teacher, importance, refine) = if tc.use_reflective && !unlabeled_before.is_empty() {
            audit::hit("importance");
            let keys = self.importance_keys(&unlabeled_before);
            let phi = accumulate_importance(&prev, &keys, self.head_fn())?;
            audit::hit("refine");
            let (refined, rep) =
                reflective_refine(&ema, &prev, &phi, &keys, self.head_fn(), tc.eta, tc.refine_steps, tc.refine_lr, tc.refine_optimizer)?;
            (refined, phi, Some(rep))
        } else {
            (ema.snapshot(), Importance::new(), None)
        };
        if !teacher.all_finite() {
            return Err(Error::Refinement { step: tc.refine_steps, reason: "non-finite teacher parameters".into() });
        }
        state.teacher = TeacherState { params_prev: teacher, params_ema: ema, importance, round };

        let eval = self.evaluate(&state.teacher.params_prev, false)?;
        let delta = match &state.v1 {
            Some(v1) if !v1.is_empty() => Some(forgetting_delta(v1, &eval.matched_gt_ids)?),
            _ => None,
        };
        let mut row = MetricsRow::empty(&self.cfg.run_id, round, state.global_step);
        row.map_lite = Some(100.0 * eval.map_lite);
        row.delta_forgetting = delta;
        self.stamp(&mut row, start);
        state.rows.push(row);
        let report = RoundReport { round, promoted, selection, refine, eval, delta_forgetting: delta };
        state.reports.push(report.clone());
        Ok(report)
    }

    /// Supervised initialization followed by all configured rounds.
    pub fn run(&self, state: &mut RunState) -> Result<()> {
        self.init_teacher(state)?;
        for _ in 0..self.cfg.train.rounds {
            self.run_round(state)?;
        }
        Ok(())
    }
}

/// Owned counterpart of [`Labels`].
enum LabelsOwned {
    Ground(Vec<Box3DLite<f64>>),
    Pseudo(Vec<Detection>, Option<f64>),
}

impl LabelsOwned {
    fn as_labels(&self) -> Labels<'_> {
        match self {
            LabelsOwned::Ground(b) => Labels::Ground(b),
            LabelsOwned::Pseudo(d, u) => Labels::Pseudo { dets: d, uncertainty: *u },
        }
    }
}
