use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

use super::{Misalignment, Scene, WorldConfig};
use crate::error::{config_err, Result};
use crate::feature_map::FeatureMap;
use crate::geometry::{Box3DLite, EgoTransform};
use crate::rng::Rng;

/// Sub-samples per cell side when rendering soft occupancy.
const SUPERSAMPLE: usize = 3;

/// Concrete camera-to-world sampling map for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraWarp {
    /// World-to-camera rigid part.
    pub rigid: EgoTransform<f64>,
    pub amp_m: f64,
    pub wavelength_m: f64,
    pub phase: f64,
}

impl CameraWarp {
    pub fn identity() -> Self {
        Self { rigid: EgoTransform::identity(), amp_m: 0.0, wavelength_m: 1.0, phase: 0.0 }
    }

    pub fn new(m: &Misalignment, world: &WorldConfig, phase: f64) -> Self {
        let cell = world.cell();
        Self {
            rigid: EgoTransform::from_angle(
                m.rotation_deg.to_radians(),
                m.translation_cells[0] * cell,
                m.translation_cells[1] * cell,
            ),
            amp_m: m.distortion_amp_cells * cell,
            wavelength_m: m.distortion_wavelength_cells * cell,
            phase,
        }
    }

    /// Per-frame warp: the rig transform is fixed, the distortion phase is
    /// drawn from `seed`.
    pub fn draw(m: &Misalignment, world: &WorldConfig, seed: u64) -> Self {
        use rand::Rng as _;
        let mut rng = Rng::seed_from_u64(seed);
        Self::new(m, world, rng.gen_range(0.0..std::f64::consts::TAU))
    }

    /// World point seen at camera-BEV point `(x, y)`.
    pub fn source(&self, inv: &EgoTransform<f64>, x: f64, y: f64) -> (f64, f64) {
        let (qx, qy) = inv.apply(x, y);
        if self.amp_m == 0.0 {
            return (qx, qy);
        }
        let k = std::f64::consts::TAU / self.wavelength_m;
        (qx + self.amp_m * (k * y + self.phase).sin(), qy + self.amp_m * (k * x + self.phase).sin())
    }
}

/// Per-class soft occupancy (fraction of each cell covered) as seen through
/// `warp`.
pub fn render_occupancy(boxes: &[Box3DLite<f64>], world: &WorldConfig, warp: &CameraWarp) -> FeatureMap<f64> {
    let g = world.grid;
    let cell = world.cell();
    let h = world.half_extent();
    let mut map = FeatureMap::<f64>::zeros(world.classes, g, g);
    let inv = warp.rigid.inverse();
    let weight = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for b in boxes {
        if b.class_id >= world.classes {
            continue;
        }
        // camera-frame bounding region of the box, padded by the distortion
        let mut x0 = f64::INFINITY;
        let mut y0 = f64::INFINITY;
        let mut x1 = f64::NEG_INFINITY;
        let mut y1 = f64::NEG_INFINITY;
        for (cx, cy) in b.corners() {
            let (x, y) = warp.rigid.apply(cx, cy);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        let pad = warp.amp_m + cell;
        let col = |v: f64| (((v + h) / cell).floor().max(0.0) as usize).min(g);
        let (c0, c1) = (col(x0 - pad), (col(x1 + pad) + 1).min(g));
        let (r0, r1) = (col(y0 - pad), (col(y1 + pad) + 1).min(g));
        for r in r0..r1 {
            for c in c0..c1 {
                let mut hits = 0usize;
                for sy in 0..SUPERSAMPLE {
                    let y = -h + (r as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64) * cell;
                    for sx in 0..SUPERSAMPLE {
                        let x = -h + (c as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64) * cell;
                        let (qx, qy) = warp.source(&inv, x, y);
                        if b.contains(qx, qy) {
                            hits += 1;
                        }
                    }
                }
                if hits > 0 {
                    let v = map.at_mut(b.class_id, r, c);
                    *v = (*v + hits as f64 * weight).min(1.0);
                }
            }
        }
    }
    map
}

/// Camera-branch BEV: warped class occupancy plus Gaussian feature noise.
pub fn simulate_camera_bev(
    scene: &Scene,
    world: &WorldConfig,
    misalign: &Misalignment,
    seed: u64,
) -> Result<FeatureMap<f64>> {
    misalign.validate()?;
    let warp = CameraWarp::draw(misalign, world, seed);
    let mut map = render_occupancy(&scene.boxes, world, &warp);
    add_noise(&mut map, world.camera_noise, seed)?;
    Ok(map)
}

pub(crate) fn add_noise(map: &mut FeatureMap<f64>, sigma: f64, seed: u64) -> Result<()> {
    if sigma == 0.0 {
        return Ok(());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| config_err!("{e}"))?;
    let mut rng = Rng::seed_from_u64(crate::rng::derive_seed(seed, "camera-noise", 0));
    for v in map.values_mut() {
        *v += normal.sample(&mut rng);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene(boxes: Vec<Box3DLite<f64>>) -> Scene {
        Scene { boxes, ego_pose: EgoTransform::identity(), timestamp: 0, points: vec![] }
    }

    fn quiet() -> WorldConfig {
        WorldConfig { camera_noise: 0.0, ..WorldConfig::default() }
    }

    #[test]
    fn identity_aligns_with_box_cells() {
        let world = quiet();
        let b = Box3DLite::new(4.0, -6.0, 2.0, 4.0, 0.2, 1);
        let map = simulate_camera_bev(&scene(vec![b]), &world, &Misalignment::none(), 1).unwrap();
        let (r, c) = map.argmax(1);
        let (x, y) = world.cell_center(r, c);
        assert!(b.contains(x, y));
        assert_eq!(map.plane(0).iter().sum::<f64>(), 0.0);
        // total coverage approximates the box area in cells
        let cells = b.area() / (world.cell() * world.cell());
        assert!((map.plane(1).iter().sum::<f64>() - cells).abs() < 0.1 * cells);
    }

    #[test]
    fn translation_shifts_argmax() {
        let world = quiet();
        // small box fully inside one cell so the argmax is unique
        let (x, y) = world.cell_center(30, 20);
        let b = Box3DLite::new(x, y, 0.3, 0.3, 0.0, 0);
        let base = simulate_camera_bev(&scene(vec![b]), &world, &Misalignment::none(), 1).unwrap();
        let mut m = Misalignment::none();
        m.translation_cells = [2.0, 0.0];
        let moved = simulate_camera_bev(&scene(vec![b]), &world, &m, 1).unwrap();
        let (r0, c0) = base.argmax(0);
        let (r1, c1) = moved.argmax(0);
        assert_eq!((r0, c0), (30, 20));
        assert_eq!((r1, c1), (r0, c0 + 2));
    }

    #[test]
    fn empty_scene_is_noise_only() {
        let world = WorldConfig::default();
        let map = simulate_camera_bev(&scene(vec![]), &world, &Misalignment::default(), 4).unwrap();
        let mean_abs = map.values().iter().map(|v| v.abs()).sum::<f64>() / map.values().len() as f64;
        assert!(mean_abs < 3.0 * world.camera_noise);
    }

    #[test]
    fn negative_amplitude_rejected() {
        let mut m = Misalignment::none();
        m.distortion_amp_cells = -1.0;
        assert!(simulate_camera_bev(&scene(vec![]), &quiet(), &m, 1).is_err());
    }
}
