use reflect_bev::audit;
use reflect_bev::autodiff::{Graph, ParamStore, Tensor};
use reflect_bev::config::{ExperimentConfig, RefineOptimizer};
use reflect_bev::teacher::{encode_store, metrics_csv, reflective_refine, stability_bound, Importance, Trainer};
use reflect_bev::world::generate_dataset;

fn small(seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig::two_phase(seed, 0.5);
    c.dataset.n_sequences = 6;
    c.dataset.test_sequences = 3;
    c.train.init_steps = 120;
    c.train.rounds = 2;
    c.train.steps_per_round = 20;
    c.train.refine_steps = 5;
    c.train.importance_samples = 3;
    c
}

fn trainer(cfg: &ExperimentConfig) -> Trainer {
    Trainer::new(cfg.clone(), generate_dataset(&cfg.dataset_spec()).unwrap()).unwrap()
}

#[test]
fn supervised_init_learns_and_copies_exactly() {
    let cfg = small(1);
    let tr = trainer(&cfg);
    let mut st = tr.fresh_state().unwrap();
    tr.init_teacher(&mut st).unwrap();
    let losses: Vec<f64> = st.rows.iter().filter_map(|r| r.loss_total).collect();
    assert!(losses.len() >= 4);
    assert!(losses.last().unwrap() < &losses[0], "{losses:?}");
    // teacher, its EMA copy, the student and the recorded initial state all start equal
    assert_eq!(st.teacher.params_prev.l2_distance(&st.student).unwrap(), 0.0);
    assert_eq!(st.teacher.params_ema.l2_distance(&st.student).unwrap(), 0.0);
    assert_eq!(st.initial.l2_distance(&st.student).unwrap(), 0.0);
    assert!(st.v1.is_some());
}

#[test]
fn rounds_keep_pool_invariants() {
    let cfg = small(2);
    let tr = trainer(&cfg);
    let mut st = tr.fresh_state().unwrap();
    let n = st.pool.labeled.len() + st.pool.unlabeled.len();
    tr.init_teacher(&mut st).unwrap();
    for _ in 0..cfg.train.rounds {
        let before = st.pool.unlabeled.clone();
        let m = tr.promote_count(&st);
        let r = tr.run_round(&mut st).unwrap();
        st.pool.check().unwrap();
        assert_eq!(st.pool.labeled.len() + st.pool.unlabeled.len(), n);
        assert_eq!(r.promoted.len(), m.min(before.len()));
        for p in &r.promoted {
            assert!(before.contains(p) && st.pool.labeled.contains(p));
        }
    }
}

#[test]
fn unsupervised_path_off_without_kappa_and_promotion() {
    let mut cfg = small(3);
    cfg.loss.kappa = 0.0;
    cfg.train.promote_fraction = 0.0;
    cfg.train.rounds = 1;
    let tr = trainer(&cfg);
    let mut st = tr.fresh_state().unwrap();
    tr.init_teacher(&mut st).unwrap();
    audit::reset();
    let r = tr.run_round(&mut st).unwrap();
    assert!(r.promoted.is_empty());
    assert_eq!(audit::count("pseudo_loss"), 0);
    assert_eq!(audit::count("uncertainty"), 0);
    assert_eq!(audit::count("refine"), 1);
    assert!(st.rows.iter().all(|row| row.loss_u.is_none()));
}

#[test]
fn ablation_flags_switch_their_code_paths() {
    let base = {
        let mut c = small(4);
        c.train.init_steps = 10;
        c.train.rounds = 1;
        c.train.steps_per_round = 4;
        c
    };
    let counts = |cfg: &ExperimentConfig| {
        let tr = trainer(cfg);
        let mut st = tr.fresh_state().unwrap();
        audit::reset();
        tr.run(&mut st).unwrap();
        audit::snapshot()
    };
    let on = counts(&base);
    for k in ["temporal_enhance", "moment_align", "alignment_loss", "perspective", "pseudo_loss", "uncertainty", "importance", "refine"] {
        assert!(on.get(k).copied().unwrap_or(0) > 0, "{k} not exercised: {on:?}");
    }
    let cases: [(&str, fn(&mut ExperimentConfig), &[&str]); 5] = [
        ("use_temporal", |c| c.model.use_temporal = false, &["temporal_enhance"]),
        ("use_ga_fusion", |c| c.model.use_ga_fusion = false, &["moment_align", "alignment_loss"]),
        ("use_perspective", |c| c.model.use_perspective = false, &["perspective"]),
        ("use_uncertainty", |c| c.train.use_uncertainty = false, &["uncertainty"]),
        ("use_reflective", |c| c.train.use_reflective = false, &["importance", "refine"]),
    ];
    for (flag, set, silenced) in cases {
        let mut cfg = base.clone();
        set(&mut cfg);
        let off = counts(&cfg);
        for (k, v) in &on {
            let got = off.get(k).copied().unwrap_or(0);
            if silenced.contains(k) {
                assert_eq!(got, 0, "{flag}=false still runs {k}");
            } else {
                assert!(got > 0, "{flag}=false also disabled {k} ({v} -> {got})");
            }
        }
    }
}

#[test]
fn importance_penalty_limits_drift() {
    let drift = |eta: f64| {
        let mut cfg = small(5);
        cfg.train.rounds = 3;
        cfg.train.eta = eta;
        cfg.train.refine_steps = 20;
        let tr = trainer(&cfg);
        let mut st = tr.fresh_state().unwrap();
        tr.run(&mut st).unwrap();
        st.teacher.params_prev.l2_distance(&st.initial).unwrap()
    };
    let (free, anchored) = (drift(0.0), drift(1.0));
    assert!(free > anchored, "eta=0 drift {free} vs eta=1 drift {anchored}");
}

#[test]
fn identical_runs_give_identical_bytes() {
    let cfg = small(6);
    let run = || {
        let tr = trainer(&cfg);
        let mut st = tr.fresh_state().unwrap();
        tr.run(&mut st).unwrap();
        (metrics_csv(&st.rows), encode_store(&st.teacher.params_prev), encode_store(&st.student))
    };
    assert_eq!(run(), run());
}

#[test]
fn gradient_refinement_descends_monotonically() {
    // two-parameter toy model: out = [w0 * x, w1 * x^2]
    let mut ema = ParamStore::new();
    ema.insert("w", Tensor::new(vec![2], vec![1.5, -0.8]).unwrap()).unwrap();
    let mut prev = ParamStore::new();
    prev.insert("w", Tensor::new(vec![2], vec![0.4, 0.3]).unwrap()).unwrap();
    let phi: Importance = [("w".to_string(), vec![2.0, 0.5])].into_iter().collect();
    let model = |g: &mut Graph<f64>, s: &ParamStore<f64>, x: &f64| {
        let w = g.param(s, "w")?;
        let k = g.constant(vec![2], vec![*x, x * x])?;
        g.mul(w, k)
    };
    let lr = 1e-3;
    assert!(lr < stability_bound(&phi, 1.0));
    let (_, rep) = reflective_refine(&ema, &prev, &phi, &[0.7], model, 1.0, 10, lr, RefineOptimizer::Gd).unwrap();
    assert_eq!(rep.lr_used, lr);
    assert_eq!(rep.losses.len(), 10);
    for w in rep.losses.windows(2) {
        assert!(w[1] <= w[0], "{:?}", rep.losses);
    }
}
