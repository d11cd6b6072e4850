use super::augment::AugTransform;
use super::camera::{add_noise, render_occupancy, CameraWarp};
use super::{SceneDataset, WorldConfig};
use crate::error::{domain_err, Result};
use crate::feature_map::FeatureMap;
use crate::geometry::{Box3DLite, EgoTransform};
use crate::rng::derive_seed;

/// Identity of a frame: sequence index and timestamp.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FrameKey {
    pub seq: usize,
    pub t: usize,
}

/// A past camera observation and the map from its ego frame to the current one.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryFrame {
    pub camera: FeatureMap<f64>,
    pub to_current: EgoTransform<f64>,
}

/// Everything the detector consumes for one timestamp.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub key: FrameKey,
    pub boxes: Vec<Box3DLite<f64>>,
    pub points: Vec<[f64; 2]>,
    /// Noisy, miscalibrated camera-branch occupancy.
    pub camera: FeatureMap<f64>,
    /// True camera warp of this frame (before augmentation).
    pub warp: CameraWarp,
    /// Geometric augmentation applied so far.
    pub aug: AugTransform,
    /// Most recent first; at most `n_max` entries.
    pub history: Vec<HistoryFrame>,
}

fn camera_seed(ds: &SceneDataset, key: FrameKey) -> u64 {
    derive_seed(ds.spec.seed, "camera", (key.seq * 10_000 + key.t) as u64)
}

fn camera_view(ds: &SceneDataset, key: FrameKey) -> Result<(FeatureMap<f64>, CameraWarp)> {
    let world = ds.world();
    let scene = &ds.sequences[key.seq][key.t];
    let seed = camera_seed(ds, key);
    let warp = CameraWarp::draw(&world.misalignment, world, seed);
    let mut map = render_occupancy(&scene.boxes, world, &warp);
    add_noise(&mut map, world.camera_noise, seed)?;
    Ok((map, warp))
}

impl Frame {
    pub fn build(ds: &SceneDataset, key: FrameKey, n_max: usize) -> Result<Self> {
        let seq = ds
            .sequences
            .get(key.seq)
            .ok_or_else(|| domain_err!("sequence {} out of range", key.seq))?;
        let scene = seq.get(key.t).ok_or_else(|| domain_err!("frame {key:?} out of range"))?;
        let (camera, warp) = camera_view(ds, key)?;
        let inv_now = scene.ego_pose.inverse();
        let mut history = Vec::new();
        for n in 1..=n_max.min(key.t) {
            let past = FrameKey { seq: key.seq, t: key.t - n };
            let (cam, _) = camera_view(ds, past)?;
            let to_current = inv_now.compose(&seq[past.t].ego_pose);
            history.push(HistoryFrame { camera: cam, to_current });
        }
        Ok(Self {
            key,
            boxes: scene.boxes.clone(),
            points: scene.points.clone(),
            camera,
            warp,
            aug: AugTransform::identity(),
            history,
        })
    }

    /// Clean class occupancy of `boxes` (given in this frame's augmented
    /// coordinates) as the camera sees it: the perspective-head target.
    pub fn camera_target(&self, boxes: &[Box3DLite<f64>], world: &WorldConfig) -> FeatureMap<f64> {
        let raw: Vec<_> = boxes.iter().map(|b| self.aug.invert_box(world, b)).collect();
        self.aug.apply_map(&render_occupancy(&raw, world, &self.warp))
    }
}
