//! Synthetic BEV world: sequences of oriented boxes seen by a simulated LiDAR
//! and a deliberately miscalibrated camera.

mod augment;
mod camera;
mod frame;
mod lidar;
mod persist;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::geometry::{intersection_area, Box3DLite, EgoTransform};
use crate::rng::rng_for;

pub use augment::{apply_geometric, augment, AugMode, AugParams, AugTransform};
pub use camera::{render_occupancy, simulate_camera_bev, CameraWarp};
pub use frame::{Frame, FrameKey, HistoryFrame};
pub use lidar::simulate_lidar;
pub use persist::{load_dataset, save_dataset, MANIFEST_FILE};

/// Fixed camera-to-LiDAR miscalibration plus a low-frequency distortion field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Misalignment {
    pub rotation_deg: f64,
    /// Translation in cells, (x, y).
    pub translation_cells: [f64; 2],
    pub distortion_amp_cells: f64,
    pub distortion_wavelength_cells: f64,
}

impl Misalignment {
    pub fn none() -> Self {
        Self {
            rotation_deg: 0.0,
            translation_cells: [0.0, 0.0],
            distortion_amp_cells: 0.0,
            distortion_wavelength_cells: 16.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fin = self.rotation_deg.is_finite()
            && self.translation_cells.iter().all(|v| v.is_finite())
            && self.distortion_amp_cells.is_finite()
            && self.distortion_wavelength_cells.is_finite();
        if !fin || self.distortion_amp_cells < 0.0 || self.distortion_wavelength_cells <= 0.0 {
            return Err(config_err!("invalid misalignment {self:?}"));
        }
        Ok(())
    }
}

impl Default for Misalignment {
    fn default() -> Self {
        Self {
            rotation_deg: 3.0,
            translation_cells: [2.5, -1.5],
            distortion_amp_cells: 0.5,
            distortion_wavelength_cells: 24.0,
        }
    }
}

/// Parameters of the synthetic world and its sensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    /// Side of the square BEV extent in meters, centred on the ego vehicle.
    pub world_size: f64,
    pub grid: usize,
    pub classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub points_per_box: usize,
    pub lidar_noise: f64,
    pub clutter_points: usize,
    pub camera_noise: f64,
    pub misalignment: Misalignment,
    /// Maximum ego displacement per frame (m).
    pub ego_speed_max: f64,
    pub ego_yaw_rate_max_deg: f64,
    /// Maximum object displacement per frame (m).
    pub object_speed_max: f64,
    /// Object headings are drawn from `[-yaw_range, yaw_range]` (radians).
    pub yaw_range: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            world_size: 51.2,
            grid: 64,
            classes: 3,
            min_objects: 4,
            max_objects: 8,
            points_per_box: 48,
            lidar_noise: 0.05,
            clutter_points: 64,
            camera_noise: 0.05,
            misalignment: Misalignment::default(),
            ego_speed_max: 1.6,
            ego_yaw_rate_max_deg: 1.5,
            object_speed_max: 0.8,
            yaw_range: std::f64::consts::FRAC_PI_4,
        }
    }
}

impl WorldConfig {
    pub fn cell(&self) -> f64 {
        self.world_size / self.grid as f64
    }

    pub fn half_extent(&self) -> f64 {
        0.5 * self.world_size
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.world_size > 0.0) || self.grid == 0 {
            return Err(config_err!("world_size and grid must be positive"));
        }
        if self.classes == 0 {
            return Err(config_err!("need at least one class"));
        }
        if self.min_objects > self.max_objects {
            return Err(config_err!("min_objects > max_objects"));
        }
        if self.points_per_box == 0 {
            return Err(config_err!("points_per_box must be > 0"));
        }
        if !(self.lidar_noise >= 0.0) || !(self.camera_noise >= 0.0) {
            return Err(config_err!("noise levels must be >= 0"));
        }
        if !(self.yaw_range >= 0.0 && self.yaw_range < std::f64::consts::FRAC_PI_2) {
            return Err(config_err!("yaw_range must lie in [0, π/2)"));
        }
        self.misalignment.validate()
    }

    /// (length, width) template of a class; classes beyond the first three
    /// cycle through the templates with a growing scale.
    pub fn class_template(&self, class_id: usize) -> (f64, f64) {
        const BASE: [(f64, f64); 3] = [(4.2, 2.0), (6.5, 2.6), (2.4, 1.4)];
        let (l, w) = BASE[class_id % 3];
        let scale = 1.0 + 0.25 * (class_id / 3) as f64;
        (l * scale, w * scale)
    }

    /// Metric centre of grid cell `(row, col)`.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        let c = self.cell();
        (-self.half_extent() + (col as f64 + 0.5) * c, -self.half_extent() + (row as f64 + 0.5) * c)
    }

    /// Continuous pixel coordinates `(py, px)` of a metric point.
    pub fn to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        let c = self.cell();
        ((y + self.half_extent()) / c - 0.5, (x + self.half_extent()) / c - 0.5)
    }

    pub fn in_extent(&self, x: f64, y: f64) -> bool {
        let h = self.half_extent();
        x >= -h && x < h && y >= -h && y < h
    }
}

/// One timestamp of a sequence, in the ego frame of that timestamp.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub boxes: Vec<Box3DLite<f64>>,
    /// Ego pose in the sequence's fixed world frame.
    pub ego_pose: EgoTransform<f64>,
    pub timestamp: usize,
    /// Simulated LiDAR returns (ego frame, meters).
    pub points: Vec<[f64; 2]>,
}

/// What to generate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub seed: u64,
    pub n_sequences: usize,
    pub seq_len: usize,
    pub labeled_fraction: f64,
    pub world: WorldConfig,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return Err(config_err!("labeled_fraction must lie in (0, 1], got {}", self.labeled_fraction));
        }
        if self.seq_len == 0 {
            return Err(config_err!("seq_len must be >= 1"));
        }
        if self.n_sequences == 0 {
            return Err(config_err!("n_sequences must be >= 1"));
        }
        self.world.validate()
    }
}

/// Generated sequences plus the labeled/unlabeled split (by sequence index).
#[derive(Clone, Debug, PartialEq)]
pub struct SceneDataset {
    pub spec: DatasetSpec,
    pub sequences: Vec<Vec<Scene>>,
    pub labeled: BTreeSet<usize>,
    pub unlabeled: BTreeSet<usize>,
}

impl SceneDataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn world(&self) -> &WorldConfig {
        &self.spec.world
    }

    /// Every (sequence, frame) key of the given sequences.
    pub fn frame_keys<'a>(&self, seqs: impl IntoIterator<Item = &'a usize>) -> Vec<FrameKey> {
        seqs.into_iter()
            .flat_map(|&s| (0..self.sequences[s].len()).map(move |t| FrameKey { seq: s, t }))
            .collect()
    }
}

/// `⌈fraction · n⌉` labeled sequences chosen by a seeded permutation.
pub fn split_indices(seed: u64, n: usize, fraction: f64) -> (BTreeSet<usize>, BTreeSet<usize>) {
    let n_labeled = ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let n_labeled = n_labeled.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, "split", 0));
    let labeled = order[..n_labeled].iter().copied().collect();
    let unlabeled = order[n_labeled..].iter().copied().collect();
    (labeled, unlabeled)
}

const SEQUENCE_ATTEMPTS: usize = 50;
const OBJECT_ATTEMPTS: usize = 200;
const CLEARANCE: f64 = 0.4;

pub fn generate_dataset(spec: &DatasetSpec) -> Result<SceneDataset> {
    spec.validate()?;
    let sequences = (0..spec.n_sequences)
        .map(|i| generate_sequence(spec, i))
        .collect::<Result<Vec<_>>>()?;
    let (labeled, unlabeled) = split_indices(spec.seed, spec.n_sequences, spec.labeled_fraction);
    Ok(SceneDataset { spec: spec.clone(), sequences, labeled, unlabeled })
}

struct Track {
    start: Box3DLite<f64>,
    velocity: (f64, f64),
}

impl Track {
    fn at(&self, t: usize) -> Box3DLite<f64> {
        let mut b = self.start;
        b.cx += self.velocity.0 * t as f64;
        b.cy += self.velocity.1 * t as f64;
        b
    }
}

fn inflate(b: &Box3DLite<f64>, by: f64) -> Box3DLite<f64> {
    Box3DLite { w: b.w + by, l: b.l + by, ..*b }
}

fn fits(world: &WorldConfig, b: &Box3DLite<f64>) -> bool {
    let (x0, y0, x1, y1) = b.bounds();
    world.in_extent(x0, y0) && world.in_extent(x1, y1)
}

fn generate_sequence(spec: &DatasetSpec, index: usize) -> Result<Vec<Scene>> {
    let world = &spec.world;
    let mut rng = rng_for(spec.seed, "sequence", index as u64);
    for _ in 0..SEQUENCE_ATTEMPTS {
        // ego motion: roughly forward along x with a small yaw rate
        let speed = rng.gen_range(0.0..=world.ego_speed_max);
        let yaw_rate = rng.gen_range(-1.0..=1.0) * world.ego_yaw_rate_max_deg.to_radians();
        let mut poses = Vec::with_capacity(spec.seq_len);
        let mut pose = EgoTransform::identity();
        for _ in 0..spec.seq_len {
            poses.push(pose);
            let step = EgoTransform::from_angle(yaw_rate, speed, 0.0);
            pose = pose.compose(&step);
        }

        let n_obj = rng.gen_range(world.min_objects..=world.max_objects);
        let mut tracks: Vec<Track> = Vec::with_capacity(n_obj);
        'objects: for _ in 0..n_obj {
            for _ in 0..OBJECT_ATTEMPTS {
                let class_id = rng.gen_range(0..world.classes);
                let (l0, w0) = world.class_template(class_id);
                let l = l0 * rng.gen_range(0.92..1.08);
                let w = w0 * rng.gen_range(0.92..1.08);
                let yaw = rng.gen_range(-world.yaw_range..=world.yaw_range);
                let h = world.half_extent();
                let cx = rng.gen_range(-h..h);
                let cy = rng.gen_range(-h..h);
                let v = rng.gen_range(0.0..=world.object_speed_max);
                let track = Track {
                    start: Box3DLite::new(cx, cy, w, l, yaw, class_id),
                    velocity: (v * yaw.cos(), v * yaw.sin()),
                };
                let ok = (0..spec.seq_len).all(|t| {
                    let ego = poses[t].inverse().apply_box(&track.at(t));
                    fits(world, &ego)
                        && tracks.iter().all(|o| {
                            intersection_area(&inflate(&track.at(t), CLEARANCE), &inflate(&o.at(t), CLEARANCE)) == 0.0
                        })
                });
                if ok {
                    tracks.push(track);
                    continue 'objects;
                }
            }
            break;
        }
        if tracks.len() < world.min_objects {
            continue;
        }
        let mut scenes = Vec::with_capacity(spec.seq_len);
        for (t, pose) in poses.iter().enumerate() {
            let inv = pose.inverse();
            let boxes: Vec<Box3DLite<f64>> = tracks.iter().map(|tr| inv.apply_box(&tr.at(t))).collect();
            let mut scene = Scene { boxes, ego_pose: *pose, timestamp: t, points: Vec::new() };
            let lidar_seed = crate::rng::derive_seed(spec.seed, "lidar", (index * 10_000 + t) as u64);
            scene.points = simulate_lidar(&scene, world, world.points_per_box, world.lidar_noise, lidar_seed)?;
            scenes.push(scene);
        }
        return Ok(scenes);
    }
    Err(Error::Generation {
        seed: spec.seed,
        reason: format!(
            "sequence {index}: could not place {} objects in {} attempts",
            world.min_objects, SEQUENCE_ATTEMPTS
        ),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::iou_bev;

    fn spec(seed: u64, n: usize, fraction: f64) -> DatasetSpec {
        DatasetSpec { seed, n_sequences: n, seq_len: 3, labeled_fraction: fraction, world: WorldConfig::default() }
    }

    #[test]
    fn full_supervision_has_no_unlabeled() {
        let ds = generate_dataset(&spec(1, 6, 1.0)).unwrap();
        assert_eq!(ds.labeled.len(), 6);
        assert!(ds.unlabeled.is_empty());
    }

    #[test]
    fn split_uses_ceiling() {
        let (l, u) = split_indices(9, 100, 0.25);
        assert_eq!((l.len(), u.len()), (25, 75));
        let (l, u) = split_indices(9, 10, 0.25);
        assert_eq!((l.len(), u.len()), (3, 7));
        assert!(l.is_disjoint(&u));
        assert_eq!(l.union(&u).count(), 10);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_dataset(&spec(42, 4, 0.5)).unwrap();
        let b = generate_dataset(&spec(42, 4, 0.5)).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&spec(43, 4, 0.5)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn scenes_respect_invariants() {
        let ds = generate_dataset(&spec(5, 8, 0.5)).unwrap();
        for seq in &ds.sequences {
            for scene in seq {
                scene.ego_pose.validate(1e-9).unwrap();
                for (i, a) in scene.boxes.iter().enumerate() {
                    assert!(a.w > 0.0 && a.l > 0.0);
                    assert!(ds.world().in_extent(a.cx, a.cy));
                    for b in &scene.boxes[i + 1..] {
                        assert!(iou_bev(a, b).unwrap() < 0.3);
                    }
                }
            }
        }
    }

    #[test]
    fn impossible_placement_names_the_seed() {
        let mut s = spec(77, 1, 1.0);
        s.world.world_size = 8.0;
        s.world.min_objects = 12;
        s.world.max_objects = 12;
        match generate_dataset(&s) {
            Err(Error::Generation { seed, .. }) => assert_eq!(seed, 77),
            other => panic!("expected generation error, got {other:?}"),
        }
    }

    #[test]
    fn bad_fraction_rejected() {
        assert!(generate_dataset(&spec(1, 3, 0.0)).is_err());
        assert!(generate_dataset(&spec(1, 3, 1.5)).is_err());
    }
}
