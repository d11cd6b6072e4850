use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::{Scene, WorldConfig};
use crate::error::{config_err, Result};
use crate::rng::Rng;
use rand::SeedableRng;

/// Perimeter returns for every box, then `world.clutter_points` uniform
/// background returns. Object points are grouped per box in box order.
pub fn simulate_lidar(
    scene: &Scene,
    world: &WorldConfig,
    points_per_box: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<Vec<[f64; 2]>> {
    if points_per_box == 0 {
        return Err(config_err!("points_per_box must be > 0"));
    }
    if !(noise_sigma >= 0.0) {
        return Err(config_err!("noise_sigma must be >= 0, got {noise_sigma}"));
    }
    let mut rng = Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_sigma).map_err(|e| config_err!("{e}"))?;
    let mut out = Vec::with_capacity(scene.boxes.len() * points_per_box + world.clutter_points);
    for b in &scene.boxes {
        let perimeter = 2.0 * (b.l + b.w);
        let (s, c) = b.yaw.sin_cos();
        for _ in 0..points_per_box {
            let mut u = rng.gen_range(0.0..perimeter);
            // walk the rectangle edges in box coordinates (x along length)
            let (lx, ly) = if u < b.l {
                (u - 0.5 * b.l, -0.5 * b.w)
            } else if {
                u -= b.l;
                u < b.w
            } {
                (0.5 * b.l, u - 0.5 * b.w)
            } else if {
                u -= b.w;
                u < b.l
            } {
                (0.5 * b.l - u, 0.5 * b.w)
            } else {
                u -= b.l;
                (-0.5 * b.l, 0.5 * b.w - u.min(b.w))
            };
            let mut x = b.cx + c * lx - s * ly;
            let mut y = b.cy + s * lx + c * ly;
            if noise_sigma > 0.0 {
                x += noise.sample(&mut rng);
                y += noise.sample(&mut rng);
            }
            out.push([x, y]);
        }
    }
    let h = world.half_extent();
    for _ in 0..world.clutter_points {
        out.push([rng.gen_range(-h..h), rng.gen_range(-h..h)]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Box3DLite, EgoTransform};

    fn scene(boxes: Vec<Box3DLite<f64>>) -> Scene {
        Scene { boxes, ego_pose: EgoTransform::identity(), timestamp: 0, points: vec![] }
    }

    #[test]
    fn zero_noise_points_on_perimeter() {
        let world = WorldConfig { clutter_points: 0, ..WorldConfig::default() };
        let b = Box3DLite::new(1.0, -2.0, 2.0, 4.0, 0.0, 0);
        let pts = simulate_lidar(&scene(vec![b]), &world, 200, 0.0, 3).unwrap();
        assert_eq!(pts.len(), 200);
        for [x, y] in pts {
            let dx = (x - 1.0).abs();
            let dy = (y + 2.0).abs();
            assert!(dx <= 2.0 + 1e-12 && dy <= 1.0 + 1e-12);
            assert!((dx - 2.0).abs() < 1e-12 || (dy - 1.0).abs() < 1e-12, "({x},{y}) not on edge");
        }
    }

    #[test]
    fn empty_scene_is_clutter_only() {
        let world = WorldConfig::default();
        let pts = simulate_lidar(&scene(vec![]), &world, 10, 0.1, 3).unwrap();
        assert_eq!(pts.len(), world.clutter_points);
        assert!(pts.iter().all(|p| world.in_extent(p[0], p[1])));
    }

    #[test]
    fn count_bookkeeping() {
        let world = WorldConfig::default();
        let boxes = vec![
            Box3DLite::new(-5.0, 0.0, 2.0, 4.0, 0.3, 0),
            Box3DLite::new(6.0, 4.0, 2.0, 4.0, -0.2, 1),
        ];
        let pts = simulate_lidar(&scene(boxes), &world, 17, 0.05, 3).unwrap();
        assert_eq!(pts.len(), 2 * 17 + world.clutter_points);
        let again = simulate_lidar(&scene(pts_boxes()), &world, 17, 0.05, 3).unwrap();
        assert_eq!(pts, again);
    }

    fn pts_boxes() -> Vec<Box3DLite<f64>> {
        vec![Box3DLite::new(-5.0, 0.0, 2.0, 4.0, 0.3, 0), Box3DLite::new(6.0, 4.0, 2.0, 4.0, -0.2, 1)]
    }

    #[test]
    fn rejects_bad_args() {
        let world = WorldConfig::default();
        assert!(simulate_lidar(&scene(vec![]), &world, 0, 0.0, 1).is_err());
        assert!(simulate_lidar(&scene(vec![]), &world, 1, -1.0, 1).is_err());
    }
}
