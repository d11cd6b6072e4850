//! mAP-lite, detection/ground-truth matching, forgetting and cross-branch IoU.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{config_err, domain_err, Result};
use crate::geometry::{iou_bev, Box3DLite};
use crate::model::head::Detection;
use crate::model::Detector;
use crate::world::{Frame, FrameKey};

pub const MATCH_IOU: f64 = 0.5;

/// Stable identity of a ground-truth object: (sequence, frame, box index).
pub type GtId = (usize, usize, usize);

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_class_ap: BTreeMap<usize, f64>,
    pub map_lite: f64,
    pub matched_gt_ids: BTreeSet<GtId>,
    /// Mean over frames; `None` when no frame had any branch box.
    pub cross_branch_iou: Option<f64>,
}

fn check_thresh(t: f64) -> Result<()> {
    if !(t > 0.0 && t < 1.0) {
        return Err(config_err!("IoU threshold must lie in (0,1), got {t}"));
    }
    Ok(())
}

fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    order
}

/// For each detection (in score order) the index of the unmatched,
/// same-class GT with the highest IoU at or above the threshold.
fn greedy_match(dets: &[Detection], gts: &[Box3DLite<f64>], iou_thresh: f64) -> Result<Vec<(usize, Option<usize>)>> {
    let mut taken = vec![false; gts.len()];
    let mut out = Vec::with_capacity(dets.len());
    for i in score_order(dets) {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] || g.class_id != d.class_id {
                continue;
            }
            let iou = iou_bev(&d.bbox, g)?;
            if iou >= iou_thresh && best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
        }
        out.push((i, best.map(|(j, _)| j)));
    }
    Ok(out)
}

/// Greedy one-to-one matching; returns the matched GT indices.
pub fn match_detections(dets: &[Detection], gts: &[Box3DLite<f64>], iou_thresh: f64) -> Result<BTreeSet<usize>> {
    check_thresh(iou_thresh)?;
    Ok(greedy_match(dets, gts, iou_thresh)?.into_iter().filter_map(|(_, m)| m).collect())
}

/// All-point interpolated AP for `class` over several frames of
/// (detections, ground truth). `None` when the class has no ground truth.
pub fn average_precision(
    frames: &[(Vec<Detection>, Vec<Box3DLite<f64>>)],
    class: usize,
    iou_thresh: f64,
) -> Result<Option<f64>> {
    check_thresh(iou_thresh)?;
    let n_gt: usize = frames.iter().map(|(_, g)| g.iter().filter(|b| b.class_id == class).count()).sum();
    if n_gt == 0 {
        return Ok(None);
    }
    // (score, frame, det index) ranked globally
    let mut ranked: Vec<(f64, usize, usize)> = Vec::new();
    for (f, (dets, _)) in frames.iter().enumerate() {
        for (i, d) in dets.iter().enumerate() {
            if d.class_id == class {
                ranked.push((d.score, f, i));
            }
        }
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut taken: Vec<Vec<bool>> = frames.iter().map(|(_, g)| vec![false; g.len()]).collect();
    let mut tp = Vec::with_capacity(ranked.len());
    for &(_, f, i) in &ranked {
        let d = &frames[f].0[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in frames[f].1.iter().enumerate() {
            if taken[f][j] || g.class_id != class {
                continue;
            }
            let iou = iou_bev(&d.bbox, g)?;
            if iou >= iou_thresh && best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, _)) = best {
            taken[f][j] = true;
        }
        tp.push(best.is_some());
    }
    Ok(Some(ap_from_flags(&tp, n_gt)))
}

/// AP from ranked true/false-positive flags.
pub fn ap_from_flags(tp: &[bool], n_gt: usize) -> f64 {
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        precision.push(hits as f64 / (k + 1) as f64);
        recall.push(hits as f64 / n_gt as f64);
    }
    // precision envelope from the right
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    ap
}

/// `(|v1| − |v1 ∩ v2|) / |v1| · 100`.
pub fn forgetting_delta<T: Ord>(v1: &BTreeSet<T>, v2: &BTreeSet<T>) -> Result<f64> {
    if v1.is_empty() {
        return Err(domain_err!("forgetting is undefined when V1 is empty"));
    }
    let kept = v1.intersection(v2).count();
    Ok((v1.len() - kept) as f64 / v1.len() as f64 * 100.0)
}

/// Greedy IoU pairing between the two branches' boxes; unpaired boxes on
/// either side count as zero-IoU entries.
pub fn cross_branch_iou(cam: &[Box3DLite<f64>], lidar: &[Box3DLite<f64>]) -> Result<f64> {
    if cam.is_empty() && lidar.is_empty() {
        return Err(domain_err!("cross_branch_iou of two empty box lists"));
    }
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, a) in cam.iter().enumerate() {
        for (j, b) in lidar.iter().enumerate() {
            let iou = iou_bev(a, b)?;
            if iou > 0.0 {
                pairs.push((iou, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_a = vec![false; cam.len()];
    let mut used_b = vec![false; lidar.len()];
    let mut sum = 0.0;
    let mut n_pairs = 0usize;
    for (iou, i, j) in pairs {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            sum += iou;
            n_pairs += 1;
        }
    }
    let denom = cam.len() + lidar.len() - n_pairs;
    Ok(sum / denom as f64)
}

/// Detect on every frame and score against its ground truth. The branch
/// probes are scored only when `cross_branch` is set.
pub fn evaluate(detector: &Detector, store: &ParamStore<f64>, frames: &[Frame], cross_branch: bool) -> Result<EvalResult> {
    if frames.is_empty() {
        return Err(domain_err!("evaluation split is empty"));
    }
    let mut per_frame = Vec::with_capacity(frames.len());
    let mut matched = BTreeSet::new();
    let mut cross = Vec::new();
    for f in frames {
        let dets = detector.detect(store, f)?;
        let FrameKey { seq, t } = f.key;
        for j in match_detections(&dets, &f.boxes, MATCH_IOU)? {
            matched.insert((seq, t, j));
        }
        if cross_branch {
            let (cam, lid) = detector.branch_boxes(store, f)?;
            if !(cam.is_empty() && lid.is_empty()) {
                cross.push(cross_branch_iou(&cam, &lid)?);
            }
        }
        per_frame.push((dets, f.boxes.clone()));
    }
    let mut per_class_ap = BTreeMap::new();
    for c in 0..detector.world.classes {
        if let Some(ap) = average_precision(&per_frame, c, MATCH_IOU)? {
            per_class_ap.insert(c, ap);
        }
    }
    let map_lite = if per_class_ap.is_empty() {
        0.0
    } else {
        per_class_ap.values().sum::<f64>() / per_class_ap.len() as f64
    };
    let cross_branch_iou = (!cross.is_empty()).then(|| cross.iter().sum::<f64>() / cross.len() as f64);
    Ok(EvalResult { per_class_ap, map_lite, matched_gt_ids: matched, cross_branch_iou })
}
