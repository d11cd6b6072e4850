use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use reflect_bev::autodiff::{Graph, ParamStore, Tensor};
use reflect_bev::geometry::{iou_bev, Box3DLite, EgoTransform};
use reflect_bev::metrics::{ap_from_flags, average_precision, forgetting_delta};
use reflect_bev::model::bev::{lidar_self_gate, warp_feature_map};
use reflect_bev::model::fusion::{alignment_loss, moment_align, AlignmentFeatureNet};
use reflect_bev::model::head::{nms, uncertainty, Detection};
use reflect_bev::teacher::{accumulate_importance, ema_update, LabelPool};
use reflect_bev::world::WorldConfig;
use reflect_bev::FeatureMap;

fn boxes() -> impl Strategy<Value = Box3DLite<f64>> {
    (-6.0..6.0f64, -6.0..6.0f64, 0.5..4.0f64, 0.5..6.0f64, -3.2..3.2f64)
        .prop_map(|(cx, cy, w, l, yaw)| Box3DLite::new(cx, cy, w, l, yaw, 0))
}

fn det(b: Box3DLite<f64>, score: f64) -> Detection {
    Detection { bbox: b, class_id: 0, score, objectness: score, entropy: 0.0 }
}

fn stats(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

/// AP by brute force over every score-threshold prefix: precision
/// at each recall level is the best precision at that recall or beyond.
fn brute_ap(tp: &[bool], n_gt: usize) -> f64 {
    let k = tp.len();
    let pr: Vec<(f64, f64)> = (1..=k)
        .map(|n| {
            let hits = tp[..n].iter().filter(|&&t| t).count() as f64;
            (hits / n_gt as f64, hits / n as f64)
        })
        .collect();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for &(r, _) in &pr {
        if r > prev {
            let p = pr.iter().filter(|(r2, _)| *r2 >= r).map(|(_, p)| *p).fold(0.0, f64::max);
            ap += (r - prev) * p;
            prev = r;
        }
    }
    ap
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn iou_is_a_symmetric_unit_measure(a in boxes(), b in boxes()) {
        let ab = iou_bev(&a, &b).unwrap();
        let ba = iou_bev(&b, &a).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
        prop_assert!((ab - ba).abs() < 1e-9);
        prop_assert!((iou_bev(&a, &a).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn nms_keeps_a_greedy_independent_set(
        raw in prop::collection::vec((boxes(), 0.0..1.0f64), 0..20),
        thresh in 0.1..0.9f64,
    ) {
        let dets: Vec<Detection> = raw.into_iter().map(|(b, s)| det(b, s)).collect();
        let kept = nms(&dets, thresh).unwrap();
        for w in kept.windows(2) {
            prop_assert!(w[0].score >= w[1].score);
        }
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                prop_assert!(iou_bev(&a.bbox, &b.bbox).unwrap() <= thresh);
            }
        }
        // every dropped box is covered by a kept box that outranks it
        for d in &dets {
            if kept.contains(d) {
                continue;
            }
            prop_assert!(kept.iter().any(|k| k.score >= d.score && iou_bev(&k.bbox, &d.bbox).unwrap() > thresh));
        }
    }

    #[test]
    fn uncertainty_law(s in 0.0..1.0f64, i in 0.0..1.0f64, j in 0.0..1.0f64, delta in 0.0..0.9f64, beta in -5.0..5.0f64) {
        let u = uncertainty(s, i, delta, beta);
        if i <= delta {
            prop_assert_eq!(u, 0.0);
        } else {
            prop_assert!((0.0..1.0).contains(&u) || (s * i == 0.0 && u == 1.0));
            // non-increasing in s·I at fixed β
            if j > i {
                prop_assert!(uncertainty(s, j, delta, beta) <= u + 1e-15);
            }
        }
    }

    #[test]
    fn moment_align_matches_lidar_moments(seed in 0u64..1_000_000, c in 1usize..4, h in 3usize..8) {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let n = c * h * h;
        let mut cam: Vec<f64> = (0..n).map(|_| rand::Rng::gen_range(&mut rng, -2.0..2.0)).collect();
        // keep every camera channel's variance away from zero
        for ch in 0..c {
            cam[ch * h * h] += 3.0;
        }
        let lid: Vec<f64> = (0..n).map(|_| rand::Rng::gen_range(&mut rng, -1.0..5.0)).collect();
        let mut g = Graph::new();
        let a = g.constant(vec![c, h, h], cam).unwrap();
        let b = g.constant(vec![c, h, h], lid.clone()).unwrap();
        let out = moment_align(&mut g, a, b, 1e-5).unwrap();
        let out = g.value(out).to_vec();
        for ch in 0..c {
            let r = ch * h * h..(ch + 1) * h * h;
            let (mo, so) = stats(&out[r.clone()]);
            let (ml, sl) = stats(&lid[r]);
            prop_assert!((mo - ml).abs() <= 1e-9);
            prop_assert!((so - sl).abs() <= 1e-6);
        }
    }

    #[test]
    fn alignment_loss_is_nonnegative_and_zero_on_identity(seed in 0u64..1_000_000) {
        let net = AlignmentFeatureNet::new(2, 3);
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let mut map = || (0..2 * 16 * 16).map(|_| rand::Rng::gen_range(&mut rng, 0.0..1.0)).collect::<Vec<f64>>();
        let (x, y, z) = (map(), map(), map());
        let mut g = Graph::new();
        let a = g.constant(vec![2, 16, 16], x.clone()).unwrap();
        let b = g.constant(vec![2, 16, 16], y).unwrap();
        let c = g.constant(vec![2, 16, 16], z).unwrap();
        let t = alignment_loss(&mut g, a, b, c, &net).unwrap();
        prop_assert!(g.item(t.total) >= 0.0);
        let s = alignment_loss(&mut g, a, a, a, &net).unwrap();
        prop_assert_eq!(g.item(s.total), 0.0);
    }

    #[test]
    fn self_gate_shrinks_nonnegative_inputs(v in prop::collection::vec(0.0..50.0f64, 1..64)) {
        let mut g = Graph::new();
        let x = g.constant(vec![v.len()], v.clone()).unwrap();
        let y = lidar_self_gate(&mut g, x).unwrap();
        for (o, i) in g.value(y).iter().zip(&v) {
            prop_assert!(o.abs() <= i.abs());
        }
    }

    #[test]
    fn warp_translation_preserves_interior_mass(dx in -3.0..3.0f64, dy in -3.0..3.0f64, seed in 0u64..1000) {
        let world = WorldConfig { grid: 24, world_size: 24.0, ..WorldConfig::default() };
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let mut m = FeatureMap::zeros(1, 24, 24);
        for y in 8..16 {
            for x in 8..16 {
                *m.at_mut(0, y, x) = rand::Rng::gen_range(&mut rng, 0.5..1.5);
            }
        }
        let w = warp_feature_map(&m, &EgoTransform::from_angle(0.0, dx, dy), &world).unwrap();
        prop_assert!((w.sum() - m.sum()).abs() <= 0.02 * m.sum());
    }

    #[test]
    fn ema_is_linear(vals in prop::collection::vec((-64i32..64, -64i32..64), 1..16), c in -8i32..8, alpha_q in 0u32..=8) {
        // dyadic values keep every product exact
        let alpha = f64::from(alpha_q) / 8.0;
        let c = f64::from(c) / 2.0;
        let store = |f: &dyn Fn(i32, i32) -> f64| {
            let mut s = ParamStore::new();
            let data = vals.iter().map(|&(a, b)| f(a, b)).collect::<Vec<_>>();
            s.insert("p", Tensor::new(vec![data.len()], data).unwrap()).unwrap();
            s
        };
        let base = store(&|a, _| f64::from(a) / 4.0);
        let stud = store(&|_, b| f64::from(b) / 4.0);
        let base_c = store(&|a, _| c * f64::from(a) / 4.0);
        let stud_c = store(&|_, b| c * f64::from(b) / 4.0);
        let e = ema_update(&base, &stud, alpha).unwrap();
        let ec = ema_update(&base_c, &stud_c, alpha).unwrap();
        for (x, y) in e.get("p").unwrap().data().iter().zip(ec.get("p").unwrap().data()) {
            prop_assert_eq!(c * x, *y);
        }
    }

    #[test]
    fn importance_ignores_sample_order(xs in prop::collection::vec(-2.0..2.0f64, 2..8), seed in 0u64..100) {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(vec![2], vec![0.7, -1.3]).unwrap()).unwrap();
        let f = |g: &mut Graph<f64>, s: &ParamStore<f64>, x: &f64| {
            let w = g.param(s, "w")?;
            let t = g.mul_scalar(w, *x);
            Ok(g.sigmoid(t))
        };
        let a = accumulate_importance(&store, &xs, f).unwrap();
        let mut shuffled = xs.clone();
        rand::seq::SliceRandom::shuffle(&mut shuffled[..], &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed));
        let b = accumulate_importance(&store, &shuffled, f).unwrap();
        for (x, y) in a["w"].iter().zip(&b["w"]) {
            prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn forgetting_is_bounded_and_monotone(v1 in prop::collection::btree_set(0u32..40, 1..20), v2 in prop::collection::btree_set(0u32..40, 0..30), extra in 0u32..40) {
        let d = forgetting_delta(&v1, &v2).unwrap();
        prop_assert!((0.0..=100.0).contains(&d));
        let mut grown = v2.clone();
        grown.insert(extra);
        prop_assert!(forgetting_delta(&v1, &grown).unwrap() <= d);
    }

    #[test]
    fn ap_matches_brute_force(tp in prop::collection::vec(any::<bool>(), 0..10), missed in 0usize..4) {
        let n_gt = tp.iter().filter(|&&t| t).count() + missed;
        prop_assume!(n_gt > 0);
        prop_assert!((ap_from_flags(&tp, n_gt) - brute_ap(&tp, n_gt)).abs() < 1e-12);
    }

    #[test]
    fn ap_of_perfect_detections_is_one(gts in prop::collection::vec(boxes(), 1..6)) {
        // spread boxes so they cannot overlap
        let gts: Vec<Box3DLite<f64>> = gts.iter().enumerate().map(|(i, b)| Box3DLite { cx: b.cx + 20.0 * i as f64, ..*b }).collect();
        let dets: Vec<Detection> = gts.iter().enumerate().map(|(i, b)| det(*b, 1.0 - 0.1 * i as f64)).collect();
        let ap = average_precision(&[(dets, gts)], 0, 0.5).unwrap().unwrap();
        prop_assert!((ap - 1.0).abs() < 1e-12);
    }

    #[test]
    fn label_pool_stays_disjoint(n in 2usize..20, picks in prop::collection::vec(0usize..20, 0..10)) {
        let labeled: BTreeSet<usize> = (0..n / 2).collect();
        let unlabeled: BTreeSet<usize> = (n / 2..n).collect();
        let mut pool = LabelPool::new(labeled, unlabeled).unwrap();
        let mut promoted = BTreeMap::new();
        for p in picks {
            let ok = pool.promote(p, vec![]).is_ok();
            // a sequence can be promoted once, and only from the unlabeled pool
            prop_assert_eq!(ok, p >= n / 2 && p < n && !promoted.contains_key(&p));
            if ok {
                promoted.insert(p, ());
            }
            pool.check().unwrap();
            prop_assert_eq!(pool.labeled.len() + pool.unlabeled.len(), n);
        }
    }
}

#[test]
fn deformable_conv_with_zero_offsets_is_conv() {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(4);
    let mut r = |n: usize| (0..n).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect::<Vec<f64>>();
    let (x, w, b) = (r(3 * 7 * 6), r(4 * 3 * 9), r(4));
    let mut g = Graph::new();
    let xv = g.constant(vec![3, 7, 6], x).unwrap();
    let wv = g.constant(vec![4, 3, 3, 3], w).unwrap();
    let bv = g.constant(vec![4], b).unwrap();
    let off = g.constant(vec![18, 7, 6], vec![0.0; 18 * 42]).unwrap();
    let d = g.deform_conv2d(xv, off, wv, Some(bv)).unwrap();
    let c = g.conv2d(xv, wv, Some(bv), 1, 1).unwrap();
    assert_eq!(g.value(d), g.value(c));
}
