//! Anchor-free per-cell RPN, point-sampling ROI head, NMS, pseudo-label
//! assignment with uncertainty, and the detection loss terms.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::bev::conv;
use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{config_err, Result};
use crate::geometry::{iou_bev, Box3DLite};
use crate::rng::Rng;
use crate::world::WorldConfig;

pub const REG_DIMS: usize = 6;
const MAX_LOG_SIZE: f64 = 4.0;
const ROI_POINTS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: Box3DLite<f64>,
    pub class_id: usize,
    /// Classifier probability of `class_id`.
    pub score: f64,
    /// First-stage objectness of the source proposal.
    pub objectness: f64,
    /// Entropy of the full classifier distribution (background included).
    pub entropy: f64,
}

impl Detection {
    /// Ground-truth box as a certain detection.
    pub fn from_gt(b: &Box3DLite<f64>) -> Self {
        Self { bbox: *b, class_id: b.class_id, score: 1.0, objectness: 1.0, entropy: 0.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: Box3DLite<f64>,
    pub objectness: f64,
    /// `None` is background.
    pub assigned_class: Option<usize>,
    pub assigned_box: Option<Box3DLite<f64>>,
    pub iou_max: f64,
    pub score: f64,
    pub uncertainty: f64,
}

impl Proposal {
    pub fn new(bbox: Box3DLite<f64>, objectness: f64) -> Self {
        Self { bbox, objectness, assigned_class: None, assigned_box: None, iou_max: 0.0, score: 0.0, uncertainty: 0.0 }
    }
}

/// Which first/second-stage probability plays the role of `s_i`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScoreSource {
    #[default]
    Roi,
    Rpn,
}

/// Raw dense head outputs: objectness logits `[1,H,W]`, regression `[6,H,W]`.
#[derive(Clone, Copy, Debug)]
pub struct RpnMaps {
    pub obj: Var,
    pub reg: Var,
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// 3×3 trunk + relu, then 1×1 objectness and regression convs under `prefix`.
pub fn rpn_heads(g: &mut Graph<f64>, store: &ParamStore<f64>, b_fuse: Var) -> Result<RpnMaps> {
    let t = conv(g, store, "rpn.trunk", b_fuse, 1)?;
    let t = g.relu(t);
    dense_heads(g, store, "rpn", t)
}

/// 1×1 objectness / regression convs `{prefix}.obj`, `{prefix}.reg`.
pub fn dense_heads(g: &mut Graph<f64>, store: &ParamStore<f64>, prefix: &str, x: Var) -> Result<RpnMaps> {
    let obj = conv(g, store, &format!("{prefix}.obj"), x, 0)?;
    let reg = conv(g, store, &format!("{prefix}.reg"), x, 0)?;
    Ok(RpnMaps { obj, reg })
}

/// Regression target of a box relative to a cell centre.
pub fn encode_cell(world: &WorldConfig, r: usize, c: usize, b: &Box3DLite<f64>) -> [f64; REG_DIMS] {
    let (x, y) = world.cell_center(r, c);
    let cell = world.cell();
    [(b.cx - x) / cell, (b.cy - y) / cell, b.w.ln(), b.l.ln(), b.yaw.sin(), b.yaw.cos()]
}

pub fn decode_cell(world: &WorldConfig, r: usize, c: usize, t: &[f64]) -> Box3DLite<f64> {
    let (x, y) = world.cell_center(r, c);
    let cell = world.cell();
    let w = t[2].clamp(-MAX_LOG_SIZE, MAX_LOG_SIZE).exp();
    let l = t[3].clamp(-MAX_LOG_SIZE, MAX_LOG_SIZE).exp();
    let yaw = if t[4] == 0.0 && t[5] == 0.0 { 0.0 } else { t[4].atan2(t[5]) };
    Box3DLite::new(x + t[0] * cell, y + t[1] * cell, w, l, yaw, 0)
}

/// Regression target of a box relative to a proposal.
pub fn encode_roi(world: &WorldConfig, p: &Box3DLite<f64>, b: &Box3DLite<f64>) -> [f64; REG_DIMS] {
    let cell = world.cell();
    let dyaw = b.yaw - p.yaw;
    [(b.cx - p.cx) / cell, (b.cy - p.cy) / cell, (b.w / p.w).ln(), (b.l / p.l).ln(), dyaw.sin(), dyaw.cos()]
}

pub fn decode_roi(world: &WorldConfig, p: &Box3DLite<f64>, t: &[f64], class_id: usize) -> Box3DLite<f64> {
    let cell = world.cell();
    let dyaw = if t[4] == 0.0 && t[5] == 0.0 { 0.0 } else { t[4].atan2(t[5]) };
    Box3DLite::new(
        p.cx + t[0] * cell,
        p.cy + t[1] * cell,
        p.w * t[2].clamp(-MAX_LOG_SIZE, MAX_LOG_SIZE).exp(),
        p.l * t[3].clamp(-MAX_LOG_SIZE, MAX_LOG_SIZE).exp(),
        p.yaw + dyaw,
        class_id,
    )
}

/// Cells ranked by objectness (ties: lower index first), top `k`.
pub fn top_cells(g: &Graph<f64>, maps: &RpnMaps, k: usize) -> Vec<usize> {
    let obj = g.value(maps.obj);
    let mut idx: Vec<usize> = (0..obj.len()).collect();
    idx.sort_by(|&a, &b| obj[b].total_cmp(&obj[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Decode the top-`k` cells into proposals (all cells when `k` exceeds the grid).
pub fn rpn_proposals(g: &Graph<f64>, maps: &RpnMaps, world: &WorldConfig, k: usize) -> Vec<Proposal> {
    let hw = world.grid * world.grid;
    let obj = g.value(maps.obj);
    let reg = g.value(maps.reg);
    top_cells(g, maps, k)
        .into_iter()
        .map(|i| {
            let t: Vec<f64> = (0..REG_DIMS).map(|d| reg[d * hw + i]).collect();
            Proposal::new(decode_cell(world, i / world.grid, i % world.grid, &t), sigmoid(obj[i]))
        })
        .collect()
}

/// Convenience wrapper: heads plus decoded top-`k` proposals.
pub fn rpn_forward(
    g: &mut Graph<f64>,
    store: &ParamStore<f64>,
    b_fuse: Var,
    world: &WorldConfig,
    k: usize,
) -> Result<(Vec<Proposal>, RpnMaps)> {
    let maps = rpn_heads(g, store, b_fuse)?;
    Ok((rpn_proposals(g, &maps, world, k), maps))
}

/// Pixel coordinates of the ROI sampling points: centre and the four edge
/// midpoints.
fn roi_points(world: &WorldConfig, b: &Box3DLite<f64>) -> [(f64, f64); ROI_POINTS] {
    let (s, c) = b.yaw.sin_cos();
    let (hl, hw) = (0.5 * b.l, 0.5 * b.w);
    let pts = [(0.0, 0.0), (hl, 0.0), (-hl, 0.0), (0.0, hw), (0.0, -hw)];
    pts.map(|(lx, ly)| world.to_pixel(b.cx + c * lx - s * ly, b.cy + s * lx + c * ly))
}

/// ROI classification logits `[N, classes+1]` (last column = background) and
/// refinements `[N, 6]`.
pub fn roi_heads(
    g: &mut Graph<f64>,
    store: &ParamStore<f64>,
    b_fuse: Var,
    boxes: &[Box3DLite<f64>],
    world: &WorldConfig,
) -> Result<(Var, Var)> {
    if boxes.is_empty() {
        return Err(config_err!("roi_heads needs at least one box"));
    }
    let ch = g.shape(b_fuse)[0];
    let pts: Vec<(f64, f64)> = boxes.iter().flat_map(|b| roi_points(world, b)).collect();
    let feats = g.sample_points(b_fuse, pts)?;
    let feats = g.reshape(feats, vec![boxes.len(), ROI_POINTS * ch])?;
    let w = g.param(store, "roi.fc.w")?;
    let b = g.param(store, "roi.fc.b")?;
    let h = g.linear(feats, w, Some(b))?;
    let h = g.relu(h);
    let w = g.param(store, "roi.cls.w")?;
    let b = g.param(store, "roi.cls.b")?;
    let cls = g.linear(h, w, Some(b))?;
    let w = g.param(store, "roi.reg.w")?;
    let b = g.param(store, "roi.reg.b")?;
    let reg = g.linear(h, w, Some(b))?;
    Ok((cls, reg))
}

/// Second stage at inference: best foreground class per proposal, refined
/// box, then NMS.
pub fn roi_forward(
    g: &mut Graph<f64>,
    store: &ParamStore<f64>,
    b_fuse: Var,
    proposals: &[Proposal],
    world: &WorldConfig,
    nms_iou: f64,
) -> Result<Vec<Detection>> {
    if proposals.is_empty() {
        return Ok(Vec::new());
    }
    let boxes: Vec<_> = proposals.iter().map(|p| p.bbox).collect();
    let (cls, reg) = roi_heads(g, store, b_fuse, &boxes, world)?;
    let probs = g.softmax_rows(cls);
    let reg = g.value(reg);
    let mut dets = Vec::with_capacity(proposals.len());
    for (i, (p, pr)) in proposals.iter().zip(&probs).enumerate() {
        let k = pr.len() - 1;
        let mut best = 0;
        for c in 1..k {
            if pr[c] > pr[best] {
                best = c;
            }
        }
        let bbox = decode_roi(world, &p.bbox, &reg[i * REG_DIMS..(i + 1) * REG_DIMS], best);
        let entropy = -pr.iter().filter(|&&q| q > 0.0).map(|&q| q * q.ln()).sum::<f64>();
        dets.push(Detection { bbox, class_id: best, score: pr[best], objectness: p.objectness, entropy });
    }
    nms(&dets, nms_iou)
}

/// Greedy score-descending suppression (ties broken by lower input index).
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Result<Vec<Detection>> {
    if !(iou_thresh > 0.0 && iou_thresh <= 1.0) {
        return Err(config_err!("nms threshold must lie in (0, 1], got {iou_thresh}"));
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        let mut suppressed = false;
        for &k in &keep {
            if iou_bev(&dets[i].bbox, &dets[k].bbox)? > iou_thresh {
                suppressed = true;
                break;
            }
        }
        if !suppressed {
            keep.push(i);
        }
    }
    Ok(keep.into_iter().map(|i| dets[i]).collect())
}

/// `u = 1 − (s·I)^{sigmoid(β)}` for positives, 0 otherwise.
pub fn uncertainty(score: f64, iou: f64, delta: f64, beta: f64) -> f64 {
    if iou <= delta {
        return 0.0;
    }
    let beta_p = 1.0 / (1.0 + (-beta).exp());
    1.0 - (score * iou).powf(beta_p)
}

/// Assign each proposal to its max-IoU label when that IoU exceeds `delta`,
/// with its uncertainty; background otherwise.
pub fn assign_and_uncertainty(
    proposals: &[Proposal],
    labels: &[Detection],
    delta: f64,
    beta: f64,
    source: ScoreSource,
) -> Result<Vec<Proposal>> {
    if !(delta > 0.0 && delta < 1.0) || !beta.is_finite() {
        return Err(config_err!("assignment needs delta in (0,1) and finite beta, got {delta}, {beta}"));
    }
    proposals
        .iter()
        .map(|p| {
            let mut best = None;
            let mut best_iou = 0.0;
            for (j, l) in labels.iter().enumerate() {
                let iou = iou_bev(&p.bbox, &l.bbox)?;
                if iou > best_iou {
                    best_iou = iou;
                    best = Some(j);
                }
            }
            let mut q = *p;
            q.iou_max = best_iou;
            match best {
                Some(j) if best_iou > delta => {
                    let l = &labels[j];
                    let s = match source {
                        ScoreSource::Roi => l.score,
                        ScoreSource::Rpn => l.objectness,
                    };
                    q.assigned_class = Some(l.class_id);
                    q.assigned_box = Some(l.bbox);
                    q.score = s;
                    q.uncertainty = uncertainty(s, best_iou, delta, beta);
                }
                _ => {
                    q.assigned_class = None;
                    q.assigned_box = None;
                    q.score = 0.0;
                    q.uncertainty = 0.0;
                }
            }
            Ok(q)
        })
        .collect()
}

/// A positive RPN cell: flat index, regression target, label index.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellTarget {
    pub index: usize,
    pub target: [f64; REG_DIMS],
    pub label: usize,
}

/// Cells whose centre lies inside a label box; a box covering no cell centre
/// claims the cell containing its own centre.
pub fn positive_cells(world: &WorldConfig, labels: &[Detection]) -> Vec<CellTarget> {
    let g = world.grid;
    let mut owner: Vec<Option<usize>> = vec![None; g * g];
    for (j, l) in labels.iter().enumerate() {
        let b = &l.bbox;
        let (x0, y0, x1, y1) = b.bounds();
        let (pr0, pc0) = world.to_pixel(x0, y0);
        let (pr1, pc1) = world.to_pixel(x1, y1);
        let clampi = |v: f64| (v.max(0.0) as usize).min(g - 1);
        let mut any = false;
        for r in clampi(pr0.floor())..=clampi(pr1.ceil()) {
            for c in clampi(pc0.floor())..=clampi(pc1.ceil()) {
                let (x, y) = world.cell_center(r, c);
                if b.contains(x, y) && owner[r * g + c].is_none() {
                    owner[r * g + c] = Some(j);
                    any = true;
                }
            }
        }
        if !any && world.in_extent(b.cx, b.cy) {
            let (pr, pc) = world.to_pixel(b.cx, b.cy);
            let (r, c) = (clampi(pr.round()), clampi(pc.round()));
            if owner[r * g + c].is_none() {
                owner[r * g + c] = Some(j);
            }
        }
    }
    owner
        .iter()
        .enumerate()
        .filter_map(|(i, o)| {
            o.map(|j| CellTarget { index: i, target: encode_cell(world, i / g, i % g, &labels[j].bbox), label: j })
        })
        .collect()
}

/// Mean BCE of the objectness map against the positive-cell mask.
pub fn objectness_loss(g: &mut Graph<f64>, obj: Var, positives: &[CellTarget]) -> Result<Var> {
    let n = g.numel(obj);
    let mut target = vec![0.0; n];
    for p in positives {
        target[p.index] = 1.0;
    }
    g.bce_with_logits(obj, target, vec![1.0 / n as f64; n])
}

/// Smooth-L1 over positive cells, each scaled by `weights[i]`, normalized by
/// the number of positives.
pub fn rpn_regression_loss(
    g: &mut Graph<f64>,
    reg: Var,
    positives: &[CellTarget],
    weights: &[f64],
    beta: f64,
) -> Result<Var> {
    if weights.len() != positives.len() {
        return Err(config_err!("{} weights for {} positive cells", weights.len(), positives.len()));
    }
    let n = g.numel(reg);
    let hw = n / REG_DIMS;
    let mut target = vec![0.0; n];
    let mut weight = vec![0.0; n];
    let norm = positives.len().max(1) as f64;
    for (p, &w) in positives.iter().zip(weights) {
        for d in 0..REG_DIMS {
            target[d * hw + p.index] = p.target[d];
            weight[d * hw + p.index] = w / norm;
        }
    }
    g.smooth_l1(reg, target, weight, beta)
}

/// Detection-loss knobs shared by the supervised and unsupervised paths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    /// IoU above which a proposal is assigned to a label (Δ).
    pub delta: f64,
    /// Sigmoid argument of the uncertainty exponent (β).
    pub beta: f64,
    pub score_source: ScoreSource,
    pub rpn_top_k: usize,
    pub proposals_per_sample: usize,
    pub max_pos_fraction: f64,
    pub smooth_l1_beta: f64,
    pub proposal_nms_iou: f64,
    pub det_nms_iou: f64,
    pub det_min_score: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            delta: 0.5,
            beta: 0.0,
            score_source: ScoreSource::Roi,
            rpn_top_k: 64,
            proposals_per_sample: 32,
            max_pos_fraction: 0.25,
            smooth_l1_beta: 1.0 / 9.0,
            proposal_nms_iou: 0.5,
            det_nms_iou: 0.3,
            det_min_score: 0.05,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) || !self.beta.is_finite() {
            return Err(config_err!("delta must lie in (0,1) and beta be finite"));
        }
        if self.rpn_top_k == 0 || self.proposals_per_sample == 0 {
            return Err(config_err!("rpn_top_k and proposals_per_sample must be > 0"));
        }
        if !(self.max_pos_fraction > 0.0 && self.max_pos_fraction <= 0.25) {
            return Err(config_err!("max_pos_fraction must lie in (0, 0.25]"));
        }
        for (n, v) in [("proposal_nms_iou", self.proposal_nms_iou), ("det_nms_iou", self.det_nms_iou)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(config_err!("{n} must lie in (0, 1]"));
            }
        }
        if !(self.smooth_l1_beta > 0.0) || !(0.0..=1.0).contains(&self.det_min_score) {
            return Err(config_err!("smooth_l1_beta must be > 0 and det_min_score in [0,1]"));
        }
        Ok(())
    }
}

/// The four first/second-stage loss terms.
#[derive(Clone, Copy, Debug)]
pub struct DetLoss {
    pub rpn_cls: Var,
    pub rpn_reg: Var,
    pub roi_cls: Var,
    pub roi_reg: Var,
    pub total: Var,
}

/// Stage-two training sample: RPN candidates plus the label boxes, assigned,
/// then at most `proposals_per_sample` drawn with ≤ 1:3 positive:negative.
pub fn sample_proposals(
    g: &Graph<f64>,
    maps: &RpnMaps,
    labels: &[Detection],
    world: &WorldConfig,
    cfg: &HeadConfig,
    rng: &mut Rng,
) -> Result<Vec<Proposal>> {
    let mut cands = rpn_proposals(g, maps, world, cfg.rpn_top_k);
    cands.extend(labels.iter().map(|l| Proposal::new(Box3DLite { class_id: 0, ..l.bbox }, 1.0)));
    let assigned = assign_and_uncertainty(&cands, labels, cfg.delta, cfg.beta, cfg.score_source)?;
    let (mut pos, mut neg): (Vec<Proposal>, Vec<Proposal>) =
        assigned.into_iter().partition(|p| p.assigned_class.is_some());
    pos.shuffle(rng);
    neg.shuffle(rng);
    let total = cfg.proposals_per_sample;
    let mut n_pos = pos.len().min((total as f64 * cfg.max_pos_fraction).floor() as usize);
    let n_neg = neg.len().min(total - n_pos);
    n_pos = n_pos.min(n_neg / 3);
    pos.truncate(n_pos);
    neg.truncate(n_neg);
    pos.extend(neg);
    Ok(pos)
}

/// Detection loss for one sample. `rpn_weights[i]` scales the regression of
/// the i-th positive cell (1 for supervised data, `1 − u` for pseudo-labels).
#[allow(clippy::too_many_arguments)]
pub fn detection_loss(
    g: &mut Graph<f64>,
    store: &ParamStore<f64>,
    b_fuse: Var,
    maps: &RpnMaps,
    labels: &[Detection],
    positives: &[CellTarget],
    rpn_weights: &[f64],
    sampled: &[Proposal],
    world: &WorldConfig,
    cfg: &HeadConfig,
) -> Result<DetLoss> {
    let rpn_cls = objectness_loss(g, maps.obj, positives)?;
    let rpn_reg = rpn_regression_loss(g, maps.reg, positives, rpn_weights, cfg.smooth_l1_beta)?;
    let (roi_cls, roi_reg) = if sampled.is_empty() {
        (g.scalar_const(0.0), g.scalar_const(0.0))
    } else {
        let boxes: Vec<_> = sampled.iter().map(|p| p.bbox).collect();
        let (cls, reg) = roi_heads(g, store, b_fuse, &boxes, world)?;
        let bg = world.classes;
        let n = sampled.len() as f64;
        let targets: Vec<usize> = sampled.iter().map(|p| p.assigned_class.unwrap_or(bg)).collect();
        let roi_cls = g.softmax_cross_entropy(cls, targets, vec![1.0 / n; sampled.len()])?;
        let n_pos = sampled.iter().filter(|p| p.assigned_box.is_some()).count().max(1) as f64;
        let mut target = vec![0.0; sampled.len() * REG_DIMS];
        let mut weight = vec![0.0; sampled.len() * REG_DIMS];
        for (i, p) in sampled.iter().enumerate() {
            if let Some(b) = p.assigned_box {
                let t = encode_roi(world, &p.bbox, &b);
                target[i * REG_DIMS..(i + 1) * REG_DIMS].copy_from_slice(&t);
                weight[i * REG_DIMS..(i + 1) * REG_DIMS].fill(1.0 / n_pos);
            }
        }
        let roi_reg = g.smooth_l1(reg, target, weight, cfg.smooth_l1_beta)?;
        (roi_cls, roi_reg)
    };
    let _ = labels;
    let a = g.add(rpn_cls, rpn_reg)?;
    let b = g.add(roi_cls, roi_reg)?;
    let total = g.add(a, b)?;
    Ok(DetLoss { rpn_cls, rpn_reg, roi_cls, roi_reg, total })
}

/// `1 − u_j` per positive cell, with `u_j` from the cell's decoded
/// proposal against the pseudo-labels.
pub fn uncertainty_weights(
    g: &Graph<f64>,
    maps: &RpnMaps,
    positives: &[CellTarget],
    labels: &[Detection],
    world: &WorldConfig,
    cfg: &HeadConfig,
) -> Result<Vec<f64>> {
    let hw = world.grid * world.grid;
    let obj = g.value(maps.obj);
    let reg = g.value(maps.reg);
    let props: Vec<Proposal> = positives
        .iter()
        .map(|p| {
            let t: Vec<f64> = (0..REG_DIMS).map(|d| reg[d * hw + p.index]).collect();
            Proposal::new(decode_cell(world, p.index / world.grid, p.index % world.grid, &t), sigmoid(obj[p.index]))
        })
        .collect();
    let assigned = assign_and_uncertainty(&props, labels, cfg.delta, cfg.beta, cfg.score_source)?;
    Ok(assigned.iter().map(|p| 1.0 - p.uncertainty).collect())
}

/// Mean BCE between perspective-head logits and a binarized occupancy target.
pub fn perspective_loss(g: &mut Graph<f64>, logits: Var, occupancy: &[f64]) -> Result<Var> {
    let n = g.numel(logits);
    if occupancy.len() != n {
        return Err(config_err!("perspective target has {} cells, logits {n}", occupancy.len()));
    }
    let target = occupancy.iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect();
    g.bce_with_logits(logits, target, vec![1.0 / n as f64; n])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(cx: f64, cy: f64, score: f64) -> Detection {
        Detection { bbox: Box3DLite::new(cx, cy, 2.0, 4.0, 0.0, 0), class_id: 0, score, objectness: score, entropy: 0.0 }
    }

    #[test]
    fn uncertainty_examples() {
        assert_eq!(uncertainty(1.0, 1.0, 0.5, 0.0), 0.0);
        assert_eq!(uncertainty(0.9, 0.4, 0.5, 0.0), 0.0);
        assert!((uncertainty(0.64, 0.81, 0.5, 0.0) - 0.28).abs() < 1e-12);
        assert!((uncertainty(0.7, 0.8, 0.5, 20.0) - (1.0 - 0.56)).abs() < 1e-3);
    }

    #[test]
    fn nms_examples() {
        let a = det(0.0, 0.0, 0.9);
        let b = det(0.0, 0.0, 0.8);
        assert_eq!(nms(&[b, a], 0.5).unwrap(), vec![a]);
        let far = det(20.0, 0.0, 0.1);
        assert_eq!(nms(&[a, far], 0.5).unwrap().len(), 2);
        assert!(nms(&[], 0.5).unwrap().is_empty());
        assert!(nms(&[a], 0.0).is_err());
    }

    #[test]
    fn assignment_rules() {
        let labels = [det(0.0, 0.0, 0.64)];
        let on = Proposal::new(Box3DLite::new(0.0, 0.0, 2.0, 4.0, 0.0, 0), 0.5);
        let off = Proposal::new(Box3DLite::new(3.0, 0.0, 2.0, 4.0, 0.0, 0), 0.5);
        let out = assign_and_uncertainty(&[on, off], &labels, 0.5, 0.0, ScoreSource::Roi).unwrap();
        assert_eq!(out[0].assigned_class, Some(0));
        assert!((out[0].uncertainty - 0.2).abs() < 1e-12);
        assert_eq!(out[1].assigned_class, None);
        assert_eq!(out[1].uncertainty, 0.0);
        let none = assign_and_uncertainty(&[on], &[], 0.5, 0.0, ScoreSource::Roi).unwrap();
        assert_eq!(none[0].assigned_class, None);
        assert!(assign_and_uncertainty(&[on], &labels, 1.0, 0.0, ScoreSource::Roi).is_err());
    }

    #[test]
    fn cell_codec_roundtrip() {
        let world = WorldConfig::default();
        let b = Box3DLite::new(1.3, -2.2, 1.9, 4.4, 0.3, 0);
        let t = encode_cell(&world, 29, 33, &b);
        let d = decode_cell(&world, 29, 33, &t);
        assert!((d.cx - b.cx).abs() < 1e-12 && (d.w - b.w).abs() < 1e-12 && (d.yaw - b.yaw).abs() < 1e-12);
        let p = Box3DLite::new(1.0, -2.0, 2.0, 4.0, 0.1, 0);
        let r = decode_roi(&world, &p, &encode_roi(&world, &p, &b), 0);
        assert!((r.cy - b.cy).abs() < 1e-12 && (r.l - b.l).abs() < 1e-12 && (r.yaw - b.yaw).abs() < 1e-12);
    }

    #[test]
    fn positive_cells_cover_boxes() {
        let world = WorldConfig::default();
        let big = Detection::from_gt(&Box3DLite::new(0.0, 0.0, 2.0, 4.4, 0.0, 0));
        let tiny = Detection::from_gt(&Box3DLite::new(10.05, 10.05, 0.1, 0.1, 0.0, 1));
        let cells = positive_cells(&world, &[big, tiny]);
        assert!(cells.iter().any(|c| c.label == 1));
        let n_big = cells.iter().filter(|c| c.label == 0).count();
        assert_eq!(n_big, 6 * 2);
    }

    #[test]
    fn bce_uniform_is_ln2() {
        let mut g = Graph::new();
        let logits = g.constant(vec![2, 3, 3], vec![0.0; 18]).unwrap();
        let occ: Vec<f64> = (0..18).map(|i| (i % 2) as f64).collect();
        let l = perspective_loss(&mut g, logits, &occ).unwrap();
        assert!((g.item(l) - std::f64::consts::LN_2).abs() < 1e-12);
    }
}
