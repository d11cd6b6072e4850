use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use super::frame::Frame;
use super::WorldConfig;
use crate::feature_map::FeatureMap;
use crate::geometry::{Box3DLite, EgoTransform};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugMode {
    Weak,
    Strong,
}

/// Magnitudes of the stand-in weak/strong augmentations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugParams {
    pub max_shift_cells: i32,
    pub flip_prob: f64,
    pub dropout_rate: f64,
    pub dropout_patch: usize,
    pub amp_jitter: f64,
}

impl Default for AugParams {
    fn default() -> Self {
        Self { max_shift_cells: 2, flip_prob: 0.5, dropout_rate: 0.15, dropout_patch: 4, amp_jitter: 0.2 }
    }
}

impl AugParams {
    pub fn none() -> Self {
        Self { max_shift_cells: 0, flip_prob: 0.0, dropout_rate: 0.0, dropout_patch: 4, amp_jitter: 0.0 }
    }
}

/// Geometric part: optional reflection about the x axis, then an integer
/// cell shift. `p' = F p + s`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct AugTransform {
    pub flip: bool,
    /// (rows, cols) = (y, x) shift in cells.
    pub shift: (i32, i32),
}

impl AugTransform {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn is_identity(&self) -> bool {
        !self.flip && self.shift == (0, 0)
    }

    fn shift_m(&self, world: &WorldConfig) -> (f64, f64) {
        let c = world.cell();
        (self.shift.1 as f64 * c, self.shift.0 as f64 * c)
    }

    pub fn apply_point(&self, world: &WorldConfig, x: f64, y: f64) -> (f64, f64) {
        let (sx, sy) = self.shift_m(world);
        let y = if self.flip { -y } else { y };
        (x + sx, y + sy)
    }

    pub fn invert_point(&self, world: &WorldConfig, x: f64, y: f64) -> (f64, f64) {
        let (sx, sy) = self.shift_m(world);
        let y = y - sy;
        (x - sx, if self.flip { -y } else { y })
    }

    pub fn apply_box(&self, world: &WorldConfig, b: &Box3DLite<f64>) -> Box3DLite<f64> {
        let (cx, cy) = self.apply_point(world, b.cx, b.cy);
        let yaw = if self.flip { -b.yaw } else { b.yaw };
        Box3DLite::new(cx, cy, b.w, b.l, yaw, b.class_id)
    }

    pub fn invert_box(&self, world: &WorldConfig, b: &Box3DLite<f64>) -> Box3DLite<f64> {
        let (cx, cy) = self.invert_point(world, b.cx, b.cy);
        let yaw = if self.flip { -b.yaw } else { b.yaw };
        Box3DLite::new(cx, cy, b.w, b.l, yaw, b.class_id)
    }

    /// `other` followed by `self`.
    pub fn after(&self, other: &AugTransform) -> AugTransform {
        let r = if self.flip { -other.shift.0 } else { other.shift.0 };
        AugTransform { flip: self.flip ^ other.flip, shift: (r + self.shift.0, other.shift.1 + self.shift.1) }
    }

    /// Conjugate an ego transform into augmented coordinates:
    /// `R' = F R F`, `t' = F t + s - F R F s`.
    pub fn conjugate(&self, world: &WorldConfig, t: &EgoTransform<f64>) -> EgoTransform<f64> {
        let f = if self.flip { -1.0 } else { 1.0 };
        let r = t.rot;
        let rot = [[r[0][0], f * r[0][1]], [f * r[1][0], r[1][1]]];
        let (sx, sy) = self.shift_m(world);
        let ft = [t.trans[0], f * t.trans[1]];
        let rs = [rot[0][0] * sx + rot[0][1] * sy, rot[1][0] * sx + rot[1][1] * sy];
        EgoTransform { rot, trans: [ft[0] + sx - rs[0], ft[1] + sy - rs[1]] }
    }

    /// Index permutation of a BEV map; cells shifted in from outside are zero.
    pub fn apply_map(&self, map: &FeatureMap<f64>) -> FeatureMap<f64> {
        if self.is_identity() {
            return map.clone();
        }
        let (h, w) = (map.height() as i64, map.width() as i64);
        let mut out = FeatureMap::zeros(map.channels(), map.height(), map.width());
        for c in 0..map.channels() {
            for ro in 0..h {
                let ri = ro - self.shift.0 as i64;
                let ri = if self.flip { h - 1 - ri } else { ri };
                if ri < 0 || ri >= h {
                    continue;
                }
                for co in 0..w {
                    let ci = co - self.shift.1 as i64;
                    if ci < 0 || ci >= w {
                        continue;
                    }
                    *out.at_mut(c, ro as usize, co as usize) = map.at(c, ri as usize, ci as usize);
                }
            }
        }
        out
    }
}

/// Draw and apply an augmentation. Labels and history transforms follow the
/// geometric part; the strong mode additionally perturbs camera features.
pub fn augment(
    frame: &Frame,
    world: &WorldConfig,
    mode: AugMode,
    params: &AugParams,
    seed: u64,
) -> (Frame, AugTransform) {
    let mut rng = Rng::seed_from_u64(seed);
    let flip = params.flip_prob > 0.0 && rng.gen_bool(params.flip_prob.clamp(0.0, 1.0));
    let m = params.max_shift_cells.max(0);
    let shift = if m > 0 { (rng.gen_range(-m..=m), rng.gen_range(-m..=m)) } else { (0, 0) };
    let tf = AugTransform { flip, shift };
    let mut out = apply_geometric(frame, world, &tf);
    if mode == AugMode::Strong {
        perturb_camera(&mut out.camera, params, &mut rng);
        for h in &mut out.history {
            perturb_camera(&mut h.camera, params, &mut rng);
        }
    }
    (out, tf)
}

pub fn apply_geometric(frame: &Frame, world: &WorldConfig, tf: &AugTransform) -> Frame {
    if tf.is_identity() {
        return frame.clone();
    }
    let mut out = frame.clone();
    out.boxes = frame.boxes.iter().map(|b| tf.apply_box(world, b)).collect();
    out.points = frame
        .points
        .iter()
        .map(|p| {
            let (x, y) = tf.apply_point(world, p[0], p[1]);
            [x, y]
        })
        .collect();
    out.camera = tf.apply_map(&frame.camera);
    out.aug = tf.after(&frame.aug);
    for h in &mut out.history {
        h.camera = tf.apply_map(&h.camera);
        h.to_current = tf.conjugate(world, &h.to_current);
    }
    out
}

fn perturb_camera(map: &mut FeatureMap<f64>, params: &AugParams, rng: &mut Rng) {
    let (ch, h, w) = (map.channels(), map.height(), map.width());
    if params.amp_jitter > 0.0 {
        for c in 0..ch {
            let a = rng.gen_range(1.0 - params.amp_jitter..=1.0 + params.amp_jitter);
            for y in 0..h {
                for x in 0..w {
                    *map.at_mut(c, y, x) *= a;
                }
            }
        }
    }
    let rate = params.dropout_rate.clamp(0.0, 1.0);
    if rate > 0.0 {
        let p = params.dropout_patch.max(1);
        for py in (0..h).step_by(p) {
            for px in (0..w).step_by(p) {
                if rate >= 1.0 || rng.gen_bool(rate) {
                    for c in 0..ch {
                        for y in py..(py + p).min(h) {
                            for x in px..(px + p).min(w) {
                                *map.at_mut(c, y, x) = 0.0;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::camera::{render_occupancy, CameraWarp};
    use crate::world::{generate_dataset, DatasetSpec, FrameKey};

    fn frame() -> (Frame, WorldConfig) {
        let world = WorldConfig::default();
        let spec = DatasetSpec { seed: 11, n_sequences: 1, seq_len: 3, labeled_fraction: 1.0, world: world.clone() };
        let ds = generate_dataset(&spec).unwrap();
        (Frame::build(&ds, FrameKey { seq: 0, t: 2 }, 2).unwrap(), world)
    }

    #[test]
    fn zero_magnitude_weak_is_identity() {
        let (f, world) = frame();
        let (g, tf) = augment(&f, &world, AugMode::Weak, &AugParams::none(), 5);
        assert!(tf.is_identity());
        assert_eq!(f, g);
    }

    #[test]
    fn flip_negates_cy_and_yaw() {
        let world = WorldConfig::default();
        let tf = AugTransform { flip: true, shift: (0, 0) };
        let b = Box3DLite::new(3.0, 4.5, 2.0, 4.0, 0.4, 2);
        let f = tf.apply_box(&world, &b);
        assert_eq!((f.cx, f.cy, f.yaw, f.class_id), (3.0, -4.5, -0.4, 2));
        let back = tf.invert_box(&world, &f);
        assert!((back.cy - b.cy).abs() < 1e-12 && (back.yaw - b.yaw).abs() < 1e-12);
    }

    #[test]
    fn strong_total_dropout_zeroes_camera() {
        let (f, world) = frame();
        let params = AugParams { dropout_rate: 1.0, ..AugParams::default() };
        let (g, _) = augment(&f, &world, AugMode::Strong, &params, 9);
        assert!(g.camera.values().iter().all(|v| *v == 0.0));
        assert!(g.history.iter().all(|h| h.camera.values().iter().all(|v| *v == 0.0)));
        // labels only follow the geometric part
        assert_eq!(g.boxes.len(), f.boxes.len());
    }

    #[test]
    fn rerendered_labels_match_permuted_map() {
        let world = WorldConfig::default();
        let warp = CameraWarp::identity();
        let boxes = vec![Box3DLite::new(-3.0, 5.0, 2.0, 4.0, 0.3, 0), Box3DLite::new(7.0, -6.0, 2.6, 6.5, -0.5, 1)];
        let map = render_occupancy(&boxes, &world, &warp);
        for tf in [
            AugTransform { flip: true, shift: (0, 0) },
            AugTransform { flip: false, shift: (2, -1) },
            AugTransform { flip: true, shift: (-2, 2) },
        ] {
            let moved: Vec<_> = boxes.iter().map(|b| tf.apply_box(&world, b)).collect();
            let rerender = render_occupancy(&moved, &world, &warp);
            let permuted = tf.apply_map(&map);
            for (a, b) in rerender.values().iter().zip(permuted.values()) {
                assert!((a - b).abs() < 1e-9, "{tf:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn composed_transforms_agree() {
        let world = WorldConfig::default();
        let a = AugTransform { flip: true, shift: (1, -2) };
        let b = AugTransform { flip: true, shift: (-1, 1) };
        let ab = b.after(&a);
        let (x, y) = (1.5, -3.25);
        let (ax, ay) = a.apply_point(&world, x, y);
        let seq = b.apply_point(&world, ax, ay);
        let once = ab.apply_point(&world, x, y);
        assert!((seq.0 - once.0).abs() < 1e-12 && (seq.1 - once.1).abs() < 1e-12);
    }

    #[test]
    fn camera_target_follows_augmentation() {
        let (f, world) = frame();
        let tf = AugTransform { flip: true, shift: (1, 0) };
        let g = apply_geometric(&f, &world, &tf);
        let direct = tf.apply_map(&f.camera_target(&f.boxes, &world));
        assert_eq!(g.camera_target(&g.boxes, &world), direct);
    }

    #[test]
    fn conjugated_history_transform_commutes() {
        let world = WorldConfig::default();
        let tf = AugTransform { flip: true, shift: (1, -2) };
        let t = EgoTransform::from_angle(0.1, 1.5, -0.7);
        let tc = tf.conjugate(&world, &t);
        tc.validate(1e-9).unwrap();
        let (x, y) = (2.0, 3.0);
        let (ax, ay) = tf.apply_point(&world, x, y);
        let lhs = tc.apply(ax, ay);
        let (tx, ty) = t.apply(x, y);
        let rhs = tf.apply_point(&world, tx, ty);
        assert!((lhs.0 - rhs.0).abs() < 1e-12 && (lhs.1 - rhs.1).abs() < 1e-12);
    }
}
