//! The two-branch BEV detector: LiDAR pillars and a temporally enhanced camera
//! branch, statistically aligned and fused, followed by a two-stage head.

pub mod bev;
pub mod fusion;
pub mod head;

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audit;
use crate::autodiff::{Graph, ParamStore, Var};
use crate::Tensor;
use crate::error::{config_err, Result};
use crate::geometry::Box3DLite;
use crate::rng::{derive_seed, rng_for, Rng};
use crate::world::{Frame, WorldConfig};

use bev::{conv, conv_relu, lidar_self_gate, lidar_to_bev, pillarize, temporal_enhance, PILLAR_CHANNELS};
use fusion::{alignment_loss, fuse, moment_align, AlignmentFeatureNet};
use head::{
    dense_heads, detection_loss, nms, objectness_loss, positive_cells, rpn_heads, rpn_proposals,
    rpn_regression_loss, roi_forward, sample_proposals, sigmoid, uncertainty_weights, DetLoss, Detection,
    HeadConfig, RpnMaps, REG_DIMS,
};

/// Prefix of every LiDAR-encoder parameter.
pub const LIDAR_PREFIX: &str = "lidar_enc.";

pub fn is_lidar_encoder(name: &str) -> bool {
    name.starts_with(LIDAR_PREFIX)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub channels: usize,
    pub roi_hidden: usize,
    /// Past camera frames fused by the temporal block.
    pub n_max: usize,
    pub moment_eps: f64,
    /// Seed of the frozen alignment feature network.
    pub align_seed: u64,
    pub use_temporal: bool,
    pub use_ga_fusion: bool,
    pub use_perspective: bool,
    pub head: HeadConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 8,
            roi_hidden: 32,
            n_max: 2,
            moment_eps: 1e-5,
            align_seed: 0x5EED_A11C,
            use_temporal: true,
            use_ga_fusion: true,
            use_perspective: true,
            head: HeadConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.roi_hidden == 0 {
            return Err(config_err!("channels and roi_hidden must be > 0"));
        }
        if !(self.moment_eps > 0.0) {
            return Err(config_err!("moment_eps must be > 0"));
        }
        self.head.validate()
    }
}

/// λ (perspective), γ (alignment), κ (unsupervised).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda: f64,
    pub gamma: f64,
    pub kappa: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: 0.5, gamma: 0.1, kappa: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (n, v) in [("lambda", self.lambda), ("gamma", self.gamma), ("kappa", self.kappa)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(config_err!("loss weight {n} must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }
}

/// Intermediate maps of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub b_lidar: Var,
    /// Camera encoder output of the current frame.
    pub b_cam: Var,
    /// Temporally enhanced camera BEV.
    pub b_c: Var,
    pub b_out: Var,
    pub b_fuse: Var,
    pub rpn: RpnMaps,
}

/// Loss graph of one sample. `objective` excludes the alignment term, which
/// is kept apart so its gradient can skip the LiDAR encoder.
#[derive(Clone, Copy, Debug)]
pub struct SampleLoss {
    pub det: DetLoss,
    pub pers: Option<Var>,
    pub align: Option<Var>,
    pub probe: Option<Var>,
    /// `L_det + λ·L_pers`.
    pub objective: Var,
    /// `γ·L_a`.
    pub align_weighted: Option<Var>,
}

impl SampleLoss {
    /// `L_det + λ·L_pers + γ·L_a`.
    pub fn value(&self, g: &Graph<f64>) -> f64 {
        g.item(self.objective) + self.align_weighted.map_or(0.0, |v| g.item(v))
    }

    pub fn term(g: &Graph<f64>, v: Option<Var>) -> f64 {
        v.map_or(0.0, |v| g.item(v))
    }
}

/// Supervision attached to a sample.
pub enum Labels<'a> {
    /// Ground truth; trains the branch probes as well.
    Ground(&'a [Box3DLite<f64>]),
    /// Teacher detections. With `uncertainty = Some(β)` the RPN regression
    /// of each positive cell is weighted by `1 − u` computed with that β.
    Pseudo { dets: &'a [Detection], uncertainty: Option<f64> },
}

pub struct Detector {
    pub world: WorldConfig,
    pub cfg: ModelConfig,
    align_net: AlignmentFeatureNet,
}

fn he(rng: &mut Rng, shape: &[usize], scale: f64) -> Vec<f64> {
    let fan_in: usize = shape[1..].iter().product();
    let n = Normal::new(0.0, scale * (2.0 / fan_in as f64).sqrt()).expect("finite std");
    (0..shape.iter().product::<usize>()).map(|_| n.sample(rng)).collect()
}

impl Detector {
    pub fn new(world: WorldConfig, cfg: ModelConfig) -> Result<Self> {
        world.validate()?;
        cfg.validate()?;
        let align_net = AlignmentFeatureNet::new(cfg.channels, cfg.align_seed);
        Ok(Self { world, cfg, align_net })
    }

    pub fn align_net(&self) -> &AlignmentFeatureNet {
        &self.align_net
    }

    /// Seeded initialization. Each tensor draws from its own stream, so
    /// adding a parameter never perturbs the others.
    pub fn init_params(&self, seed: u64) -> ParamStore<f64> {
        let c = self.cfg.channels;
        let k = self.world.classes;
        let hid = self.cfg.roi_hidden;
        let t = c * (1 + self.cfg.n_max);
        let taps = 18;
        let size_prior = {
            let (l, w) = self.world.class_template(0);
            [0.0, 0.0, w.ln(), l.ln(), 0.0, 1.0]
        };
        enum Init {
            He(f64),
            Zero,
            Bias(Vec<f64>),
        }
        use Init::*;
        let mut specs: Vec<(String, Vec<usize>, Init)> = vec![
            ("lidar_enc.conv1.w".into(), vec![c, PILLAR_CHANNELS, 3, 3], He(1.0)),
            ("lidar_enc.conv1.b".into(), vec![c], Zero),
            ("lidar_enc.conv2.w".into(), vec![c, c, 3, 3], He(1.0)),
            ("lidar_enc.conv2.b".into(), vec![c], Zero),
            ("cam_enc.conv.w".into(), vec![c, k, 3, 3], He(1.0)),
            ("cam_enc.conv.b".into(), vec![c], Zero),
            ("temporal.offset.w".into(), vec![taps, t, 3, 3], Zero),
            ("temporal.offset.b".into(), vec![taps], Zero),
            ("temporal.main.w".into(), vec![c, t, 3, 3], He(1.0)),
            ("temporal.main.b".into(), vec![c], Zero),
            ("fusion.d1.offset.w".into(), vec![taps, 2 * c, 3, 3], Zero),
            ("fusion.d1.offset.b".into(), vec![taps], Zero),
            ("fusion.d1.main.w".into(), vec![c, 2 * c, 3, 3], He(1.0)),
            ("fusion.d1.main.b".into(), vec![c], Zero),
            ("fusion.d2.offset.w".into(), vec![taps, c, 3, 3], Zero),
            ("fusion.d2.offset.b".into(), vec![taps], Zero),
            ("fusion.d2.main.w".into(), vec![c, c, 3, 3], He(1.0)),
            ("fusion.d2.main.b".into(), vec![c], Zero),
            ("rpn.trunk.w".into(), vec![c, c, 3, 3], He(1.0)),
            ("rpn.trunk.b".into(), vec![c], Zero),
            ("roi.fc.w".into(), vec![hid, 5 * c], He(1.0)),
            ("roi.fc.b".into(), vec![hid], Zero),
            ("roi.cls.w".into(), vec![k + 1, hid], He(0.05)),
            ("roi.cls.b".into(), vec![k + 1], Zero),
            ("roi.reg.w".into(), vec![REG_DIMS, hid], He(0.05)),
            ("roi.reg.b".into(), vec![REG_DIMS], Bias(vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0])),
            ("pers.w".into(), vec![k, c, 1, 1], He(0.5)),
            ("pers.b".into(), vec![k], Bias(vec![-2.0; k])),
        ];
        for prefix in ["rpn", "probe_cam", "probe_lidar"] {
            specs.push((format!("{prefix}.obj.w"), vec![1, c, 1, 1], He(0.5)));
            specs.push((format!("{prefix}.obj.b"), vec![1], Bias(vec![-2.0])));
            specs.push((format!("{prefix}.reg.w"), vec![REG_DIMS, c, 1, 1], He(0.1)));
            specs.push((format!("{prefix}.reg.b"), vec![REG_DIMS], Bias(size_prior.to_vec())));
        }
        let mut store = ParamStore::new();
        for (name, shape, init) in specs {
            let mut rng = rng_for(seed, &name, 0);
            let n: usize = shape.iter().product();
            let data = match init {
                He(s) => he(&mut rng, &shape, s),
                Zero => vec![0.0; n],
                Bias(v) => v,
            };
            let t = Tensor::new(shape, data).expect("init shape").into_param();
            store.insert(name, t).expect("unique parameter names");
        }
        store
    }

    pub fn forward(&self, g: &mut Graph<f64>, store: &ParamStore<f64>, frame: &Frame) -> Result<Forward> {
        let pillars = pillarize(&frame.points, &self.world);
        let lid = lidar_to_bev(g, store, &pillars)?;
        let b_lidar = lidar_self_gate(g, lid)?;

        let cam = frame.camera.to_var(g);
        let b_cam = conv_relu(g, store, "cam_enc.conv", cam, 1)?;
        let b_c = if self.cfg.use_temporal {
            audit::hit("temporal_enhance");
            let mut hist = Vec::with_capacity(frame.history.len().min(self.cfg.n_max));
            for h in frame.history.iter().take(self.cfg.n_max) {
                let v = h.camera.to_var(g);
                let e = conv_relu(g, store, "cam_enc.conv", v, 1)?;
                hist.push((e, h.to_current));
            }
            temporal_enhance(g, store, b_cam, &hist, self.cfg.n_max, &self.world)?
        } else {
            b_cam
        };
        let b_out = if self.cfg.use_ga_fusion {
            audit::hit("moment_align");
            moment_align(g, b_c, b_lidar, self.cfg.moment_eps)?
        } else {
            b_c
        };
        let b_fuse = fuse(g, store, b_out, b_lidar)?;
        let rpn = rpn_heads(g, store, b_fuse)?;
        Ok(Forward { b_lidar, b_cam, b_c, b_out, b_fuse, rpn })
    }

    /// Concatenated raw objectness-logit and regression maps, `[7, H, W]`.
    pub fn head_output(&self, g: &mut Graph<f64>, fwd: &Forward) -> Result<Var> {
        g.concat(&[fwd.rpn.obj, fwd.rpn.reg])
    }

    /// Spatially pooled fused BEV feature.
    pub fn pooled_feature(&self, g: &Graph<f64>, fwd: &Forward) -> Vec<f64> {
        let hw = self.world.grid * self.world.grid;
        g.value(fwd.b_fuse).chunks(hw).map(|c| c.iter().sum::<f64>() / hw as f64).collect()
    }

    /// Detections scoring at least `head.det_min_score`.
    pub fn detect(&self, store: &ParamStore<f64>, frame: &Frame) -> Result<Vec<Detection>> {
        let min = self.cfg.head.det_min_score;
        Ok(self.detect_raw(store, frame)?.into_iter().filter(|d| d.score >= min).collect())
    }

    /// All post-NMS detections.
    pub fn detect_raw(&self, store: &ParamStore<f64>, frame: &Frame) -> Result<Vec<Detection>> {
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, store, frame)?;
        self.detect_on(&mut g, store, &fwd)
    }

    /// Top-k proposals, proposal NMS, ROI classification/refinement and NMS.
    pub fn detect_on(&self, g: &mut Graph<f64>, store: &ParamStore<f64>, fwd: &Forward) -> Result<Vec<Detection>> {
        let hc = &self.cfg.head;
        let props = rpn_proposals(g, &fwd.rpn, &self.world, hc.rpn_top_k);
        let as_dets: Vec<Detection> = props
            .iter()
            .map(|p| Detection { bbox: p.bbox, class_id: 0, score: p.objectness, objectness: p.objectness, entropy: 0.0 })
            .collect();
        let kept = nms(&as_dets, hc.proposal_nms_iou)?;
        let props: Vec<_> = kept.iter().map(|d| head::Proposal::new(d.bbox, d.objectness)).collect();
        roi_forward(g, store, fwd.b_fuse, &props, &self.world, hc.det_nms_iou)
    }

    /// Box-regressor probes on the detached camera (aligned) and LiDAR maps.
    pub fn probe_maps(&self, g: &mut Graph<f64>, store: &ParamStore<f64>, fwd: &Forward) -> Result<(RpnMaps, RpnMaps)> {
        let cam = g.detach(fwd.b_out);
        let lid = g.detach(fwd.b_lidar);
        Ok((dense_heads(g, store, "probe_cam", cam)?, dense_heads(g, store, "probe_lidar", lid)?))
    }

    /// Boxes predicted by each branch probe: the `n` most confident cells
    /// after suppression, with `n` the number of objects in the frame.
    pub fn branch_boxes(&self, store: &ParamStore<f64>, frame: &Frame) -> Result<(Vec<Box3DLite<f64>>, Vec<Box3DLite<f64>>)> {
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, store, frame)?;
        let (cam, lid) = self.probe_maps(&mut g, store, &fwd)?;
        let decode = |maps: &RpnMaps| -> Result<Vec<Box3DLite<f64>>> {
            let dets: Vec<Detection> = rpn_proposals(&g, maps, &self.world, self.cfg.head.rpn_top_k)
                .into_iter()
                .map(|p| Detection { bbox: p.bbox, class_id: 0, score: p.objectness, objectness: p.objectness, entropy: 0.0 })
                .collect();
            Ok(nms(&dets, self.cfg.head.det_nms_iou)?.into_iter().take(frame.boxes.len()).map(|d| d.bbox).collect())
        };
        Ok((decode(&cam)?, decode(&lid)?))
    }

    /// Build the full per-sample loss on an existing forward pass.
    pub fn sample_loss(
        &self,
        g: &mut Graph<f64>,
        store: &ParamStore<f64>,
        frame: &Frame,
        fwd: &Forward,
        labels: Labels<'_>,
        weights: &LossWeights,
        seed: u64,
    ) -> Result<SampleLoss> {
        let hc = &self.cfg.head;
        let (dets, pseudo, uncertainty): (Vec<Detection>, bool, Option<f64>) = match labels {
            Labels::Ground(b) => (b.iter().map(Detection::from_gt).collect(), false, None),
            Labels::Pseudo { dets, uncertainty } => (dets.to_vec(), true, uncertainty),
        };
        if pseudo {
            audit::hit("pseudo_loss");
        }
        let positives = positive_cells(&self.world, &dets);
        let rpn_weights = if let Some(beta) = uncertainty {
            audit::hit("uncertainty");
            let hc = HeadConfig { beta, ..hc.clone() };
            uncertainty_weights(g, &fwd.rpn, &positives, &dets, &self.world, &hc)?
        } else {
            vec![1.0; positives.len()]
        };
        self.sample_loss_with(g, store, frame, fwd, &dets, &positives, &rpn_weights, !pseudo, weights, seed)
    }

    /// As [`Self::sample_loss`] with explicit per-positive-cell RPN weights.
    #[allow(clippy::too_many_arguments)]
    pub fn sample_loss_with(
        &self,
        g: &mut Graph<f64>,
        store: &ParamStore<f64>,
        frame: &Frame,
        fwd: &Forward,
        dets: &[Detection],
        positives: &[head::CellTarget],
        rpn_weights: &[f64],
        train_probes: bool,
        weights: &LossWeights,
        seed: u64,
    ) -> Result<SampleLoss> {
        let mut rng = Rng::seed_from_u64(derive_seed(seed, "proposal-sample", 0));
        let sampled = sample_proposals(g, &fwd.rpn, dets, &self.world, &self.cfg.head, &mut rng)?;
        self.sample_loss_given(g, store, frame, fwd, dets, positives, rpn_weights, &sampled, train_probes, weights)
    }

    /// Loss assembly with the second-stage proposals fixed by the caller.
    #[allow(clippy::too_many_arguments)]
    pub fn sample_loss_given(
        &self,
        g: &mut Graph<f64>,
        store: &ParamStore<f64>,
        frame: &Frame,
        fwd: &Forward,
        dets: &[Detection],
        positives: &[head::CellTarget],
        rpn_weights: &[f64],
        sampled: &[head::Proposal],
        train_probes: bool,
        weights: &LossWeights,
    ) -> Result<SampleLoss> {
        let hc = &self.cfg.head;
        let det = detection_loss(g, store, fwd.b_fuse, &fwd.rpn, dets, positives, rpn_weights, sampled, &self.world, hc)?;

        let mut objective = det.total;
        let pers = if self.cfg.use_perspective && weights.lambda > 0.0 {
            audit::hit("perspective");
            let logits = conv(g, store, "pers", fwd.b_cam, 0)?;
            let boxes: Vec<_> = dets.iter().map(|d| Box3DLite { class_id: d.class_id, ..d.bbox }).collect();
            let target = frame.camera_target(&boxes, &self.world);
            let l = head::perspective_loss(g, logits, target.values())?;
            let lw = g.mul_scalar(l, weights.lambda);
            objective = g.add(objective, lw)?;
            Some(l)
        } else {
            None
        };
        let (align, align_weighted) = if self.cfg.use_ga_fusion && weights.gamma > 0.0 {
            audit::hit("alignment_loss");
            // replay alignment and fusion on a detached LiDAR map: same
            // values, but no path from L_a back into the LiDAR encoder
            let lid = g.detach(fwd.b_lidar);
            let out = moment_align(g, fwd.b_c, lid, self.cfg.moment_eps)?;
            let fused = fuse(g, store, out, lid)?;
            let terms = alignment_loss(g, out, fused, lid, &self.align_net)?;
            (Some(terms.total), Some(g.mul_scalar(terms.total, weights.gamma)))
        } else {
            (None, None)
        };
        let probe = if train_probes {
            let (cam, lid) = self.probe_maps(g, store, fwd)?;
            let ones = vec![1.0; positives.len()];
            let mut parts = Vec::new();
            for m in [cam, lid] {
                parts.push(objectness_loss(g, m.obj, positives)?);
                parts.push(rpn_regression_loss(g, m.reg, positives, &ones, hc.smooth_l1_beta)?);
            }
            Some(fusion::sum_all(g, &parts)?)
        } else {
            None
        };
        Ok(SampleLoss { det, pers, align, probe, objective, align_weighted })
    }

    /// Add `scale ·` gradients of a sample loss into `store` in a single
    /// sweep. The alignment term is built on a detached LiDAR map, so it
    /// never reaches LiDAR-encoder parameters.
    pub fn accumulate_grads(
        &self,
        g: &mut Graph<f64>,
        loss: &SampleLoss,
        store: &mut ParamStore<f64>,
        scale: f64,
    ) -> Result<()> {
        let mut total = loss.objective;
        for v in [loss.probe, loss.align_weighted].into_iter().flatten() {
            total = g.add(total, v)?;
        }
        let total = g.mul_scalar(total, scale);
        g.backward(total)?.accumulate_into(g, store, |_| true)
    }

    /// Objectness probability map of the RPN (value only).
    pub fn objectness(&self, g: &Graph<f64>, fwd: &Forward) -> Vec<f64> {
        g.value(fwd.rpn.obj).iter().map(|&x| sigmoid(x)).collect()
    }
}
