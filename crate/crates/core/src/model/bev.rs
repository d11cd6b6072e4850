//! LiDAR pillar encoder, camera temporal enhancement and the shared
//! deformable convolution block.

use crate::autodiff::{Graph, ParamStore, Var};
use crate::Tensor;
use crate::error::{config_err, Result};
use crate::feature_map::FeatureMap;
use crate::geometry::EgoTransform;
use crate::world::WorldConfig;

pub const PILLAR_CHANNELS: usize = 2;
/// Point count mapped to a density of 1.0.
pub const DENSITY_NORM: f64 = 4.0;

/// Occupancy (0/1) and linear point density per BEV cell. Points outside the
/// extent are dropped.
pub fn pillarize(points: &[[f64; 2]], world: &WorldConfig) -> FeatureMap<f64> {
    let g = world.grid;
    let mut map = FeatureMap::<f64>::zeros(PILLAR_CHANNELS, g, g);
    let cell = world.cell();
    let h = world.half_extent();
    for p in points {
        if !world.in_extent(p[0], p[1]) {
            continue;
        }
        let c = (((p[0] + h) / cell) as usize).min(g - 1);
        let r = (((p[1] + h) / cell) as usize).min(g - 1);
        *map.at_mut(0, r, c) = 1.0;
        *map.at_mut(1, r, c) += 1.0 / DENSITY_NORM;
    }
    map
}

/// Two 3×3 conv + relu layers over the pillar map.
pub fn lidar_to_bev(g: &mut Graph<f64>, store: &ParamStore<f64>, pillars: &FeatureMap<f64>) -> Result<Var> {
    let x = pillars.to_var(g);
    let x = conv_relu(g, store, "lidar_enc.conv1", x, 1)?;
    conv_relu(g, store, "lidar_enc.conv2", x, 1)
}

/// `sigmoid(b) ⊙ b`.
pub fn lidar_self_gate(g: &mut Graph<f64>, b: Var) -> Result<Var> {
    let s = g.sigmoid(b);
    g.mul(s, b)
}

pub(crate) fn conv(g: &mut Graph<f64>, store: &ParamStore<f64>, prefix: &str, x: Var, pad: usize) -> Result<Var> {
    let w = g.param(store, &format!("{prefix}.w"))?;
    let b = g.param(store, &format!("{prefix}.b"))?;
    g.conv2d(x, w, Some(b), 1, pad)
}

pub(crate) fn conv_relu(g: &mut Graph<f64>, store: &ParamStore<f64>, prefix: &str, x: Var, pad: usize) -> Result<Var> {
    let y = conv(g, store, prefix, x, pad)?;
    Ok(g.relu(y))
}

/// Sampling grid for `warp_bev`: output cell centres mapped through the
/// inverse of `to_current` into pixel coordinates of the previous map.
pub fn warp_coords(to_current: &EgoTransform<f64>, world: &WorldConfig) -> Tensor {
    // work in pixel units centred on the ego so identity and whole-cell
    // shifts reproduce the grid exactly
    let g = world.grid;
    let inv = to_current.inverse();
    let r = inv.rot;
    let (tx, ty) = (inv.trans[0] / world.cell(), inv.trans[1] / world.cell());
    let mid = (g as f64 - 1.0) * 0.5;
    let mut data = vec![0.0; 2 * g * g];
    for row in 0..g {
        let v = row as f64 - mid;
        for col in 0..g {
            let u = col as f64 - mid;
            let qu = r[0][0] * u + r[0][1] * v + tx;
            let qv = r[1][0] * u + r[1][1] * v + ty;
            data[row * g + col] = qv + mid;
            data[g * g + row * g + col] = qu + mid;
        }
    }
    Tensor::new(vec![2, g, g], data).expect("warp grid shape")
}

/// Resample a past BEV map into the current ego frame (bilinear, zero
/// outside the past map).
pub fn warp_bev(g: &mut Graph<f64>, prev: Var, to_current: &EgoTransform<f64>, world: &WorldConfig) -> Result<Var> {
    to_current.validate(1e-9)?;
    let shape = g.shape(prev).to_vec();
    if shape.len() != 3 || shape[1] != world.grid || shape[2] != world.grid {
        return Err(config_err!("warp_bev: map {shape:?} does not match the {0}x{0} grid", world.grid));
    }
    let coords = g.input(&warp_coords(to_current, world));
    g.bilinear_sample(prev, coords)
}

/// Value-only convenience wrapper around [`warp_bev`].
pub fn warp_feature_map(prev: &FeatureMap<f64>, to_current: &EgoTransform<f64>, world: &WorldConfig) -> Result<FeatureMap<f64>> {
    let mut g = Graph::new();
    let v = prev.to_var(&mut g);
    let out = warp_bev(&mut g, v, to_current, world)?;
    FeatureMap::from_var(&g, out)
}

/// Offset-predicting 3×3 conv followed by a 3×3 deformable conv.
/// Parameters: `{prefix}.offset.{w,b}` and `{prefix}.main.{w,b}`.
pub fn deformable_conv(g: &mut Graph<f64>, store: &ParamStore<f64>, prefix: &str, input: Var) -> Result<Var> {
    let offsets = conv(g, store, &format!("{prefix}.offset"), input, 1)?;
    let w = g.param(store, &format!("{prefix}.main.w"))?;
    let b = g.param(store, &format!("{prefix}.main.b"))?;
    g.deform_conv2d(input, offsets, w, Some(b))
}

/// Warp each history map into the current frame, concatenate with the current
/// map (zero maps for missing history up to `n_max`), then apply a
/// deformable conv + relu under `temporal`.
pub fn temporal_enhance(
    g: &mut Graph<f64>,
    store: &ParamStore<f64>,
    current: Var,
    history: &[(Var, EgoTransform<f64>)],
    n_max: usize,
    world: &WorldConfig,
) -> Result<Var> {
    let concat = temporal_stack(g, current, history, n_max, world)?;
    let y = deformable_conv(g, store, "temporal", concat)?;
    Ok(g.relu(y))
}

/// The pre-convolution channel stack of [`temporal_enhance`].
pub fn temporal_stack(
    g: &mut Graph<f64>,
    current: Var,
    history: &[(Var, EgoTransform<f64>)],
    n_max: usize,
    world: &WorldConfig,
) -> Result<Var> {
    if history.len() > n_max {
        return Err(config_err!("history of {} frames exceeds n_max = {n_max}", history.len()));
    }
    let shape = g.shape(current).to_vec();
    let mut parts = vec![current];
    for (h, t) in history {
        if g.shape(*h) != shape.as_slice() {
            return Err(config_err!("history map {:?} does not match current {:?}", g.shape(*h), shape));
        }
        parts.push(warp_bev(g, *h, t, world)?);
    }
    for _ in history.len()..n_max {
        let z = g.constant(shape.clone(), vec![0.0; shape.iter().product()])?;
        parts.push(z);
    }
    g.concat(&parts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> WorldConfig {
        WorldConfig { grid: 16, world_size: 12.8, ..WorldConfig::default() }
    }

    #[test]
    fn pillars_count_points() {
        let w = world();
        let (x, y) = w.cell_center(3, 5);
        let one = pillarize(&[[x, y]], &w);
        let two = pillarize(&[[x, y], [x + 0.1, y - 0.1]], &w);
        for r in 0..16 {
            for c in 0..16 {
                let expect = (r, c) == (3, 5);
                assert_eq!(one.at(1, r, c) != 0.0, expect);
            }
        }
        assert_eq!(two.at(1, 3, 5) / one.at(1, 3, 5), 2.0);
        assert_eq!(two.at(0, 3, 5), 1.0);
        assert_eq!(pillarize(&[], &w).sum(), 0.0);
        assert_eq!(pillarize(&[[100.0, 0.0]], &w).sum(), 0.0);
    }

    #[test]
    fn self_gate_values() {
        let mut g = Graph::new();
        let x = g.constant(vec![4], vec![0.0, 2.0, 40.0, 1.0]).unwrap();
        let y = lidar_self_gate(&mut g, x).unwrap();
        let v = g.value(y);
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 1.761_594_155_955_764_9).abs() < 1e-12);
        assert!((v[2] - 40.0).abs() < 1e-12);
        assert!(v[3] <= 1.0);
    }

    fn ramp(c: usize, n: usize) -> FeatureMap<f64> {
        FeatureMap::new(c, n, n, (0..c * n * n).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap()
    }

    #[test]
    fn warp_identity_and_integer_shift() {
        let w = world();
        let m = ramp(2, 16);
        let same = warp_feature_map(&m, &EgoTransform::identity(), &w).unwrap();
        assert_eq!(same, m);
        let t = EgoTransform::from_angle(0.0, w.cell(), 0.0);
        let shifted = warp_feature_map(&m, &t, &w).unwrap();
        for c in 0..2 {
            for r in 0..16 {
                assert_eq!(shifted.at(c, r, 0), 0.0);
                for col in 1..16 {
                    assert!((shifted.at(c, r, col) - m.at(c, r, col - 1)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn warp_roundtrip_interior() {
        let w = world();
        let m = ramp(1, 16);
        let t = EgoTransform::from_angle(0.0, 2.0 * w.cell(), -w.cell());
        let there = warp_feature_map(&m, &t, &w).unwrap();
        let back = warp_feature_map(&there, &t.inverse(), &w).unwrap();
        for r in 2..14 {
            for c in 2..14 {
                assert!((back.at(0, r, c) - m.at(0, r, c)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn temporal_stack_pads_and_checks_channels() {
        let w = world();
        let mut g = Graph::new();
        let cur = ramp(2, 16).to_var(&mut g);
        let stack = temporal_stack(&mut g, cur, &[], 2, &w).unwrap();
        assert_eq!(g.shape(stack), &[6, 16, 16]);
        assert!(g.value(stack)[2 * 256..].iter().all(|v| *v == 0.0));
        let bad = ramp(3, 16).to_var(&mut g);
        assert!(temporal_stack(&mut g, cur, &[(bad, EgoTransform::identity())], 2, &w).is_err());
        let h = ramp(2, 16).to_var(&mut g);
        let id = EgoTransform::identity();
        assert!(temporal_stack(&mut g, cur, &[(h, id), (h, id), (h, id)], 2, &w).is_err());
    }
}
