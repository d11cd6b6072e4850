//! Statistical camera-to-LiDAR alignment, deformable fusion and the
//! alignment loss computed through a frozen random feature network.

use rand_distr::{Distribution, Normal};

use super::bev::deformable_conv;
use crate::autodiff::{Graph, ParamStore, Var};
use crate::Tensor;
use crate::error::{config_err, Result};
use crate::rng::rng_for;

/// Re-statisticize `cam` to the per-channel spatial mean and standard
/// deviation of `lidar`. The camera deviation is floored at `eps`.
pub fn moment_align(g: &mut Graph<f64>, cam: Var, lidar: Var, eps: f64) -> Result<Var> {
    if !(eps > 0.0) {
        return Err(config_err!("moment_align eps must be > 0, got {eps}"));
    }
    g.expect_same_shape(cam, lidar, "moment_align")?;
    let (h, w) = (g.shape(cam)[1], g.shape(cam)[2]);
    let mu_c = g.spatial_mean(cam)?;
    let sd_c = g.spatial_std(cam)?;
    let mu_l = g.spatial_mean(lidar)?;
    let sd_l = g.spatial_std(lidar)?;
    let sd_c = g.clamp_min(sd_c, eps);
    let scale = g.div(sd_l, sd_c)?;
    let mu_c = g.expand_spatial(mu_c, h, w)?;
    let centred = g.sub(cam, mu_c)?;
    let scale = g.expand_spatial(scale, h, w)?;
    let scaled = g.mul(centred, scale)?;
    let mu_l = g.expand_spatial(mu_l, h, w)?;
    g.add(scaled, mu_l)
}

/// Two deformable conv + relu layers over `concat(b_out, b_lidar)`.
pub fn fuse(g: &mut Graph<f64>, store: &ParamStore<f64>, b_out: Var, b_lidar: Var) -> Result<Var> {
    g.expect_same_shape(b_out, b_lidar, "fuse")?;
    let x = g.concat(&[b_out, b_lidar])?;
    let x = deformable_conv(g, store, "fusion.d1", x)?;
    let x = g.relu(x);
    let x = deformable_conv(g, store, "fusion.d2", x)?;
    Ok(g.relu(x))
}

pub const ALIGN_STAGE_CHANNELS: [usize; 4] = [8, 16, 32, 64];

/// Frozen surrogate feature extractor: four (3×3 conv, relu, 2× max-pool)
/// stages and a final 1×1 conv + relu on the last pooled map.
#[derive(Clone, Debug)]
pub struct AlignmentFeatureNet {
    in_channels: usize,
    stages: Vec<(Tensor, Tensor)>,
    last: (Tensor, Tensor),
}

/// Stage activations `f_1..f_4` (post-relu, pre-pool) and the final output.
pub struct AlignFeatures {
    pub stages: Vec<Var>,
    pub last: Var,
}

impl AlignmentFeatureNet {
    pub fn new(in_channels: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, "align-net", 0);
        let mut draw = |shape: Vec<usize>| {
            let fan_in: usize = shape[1..].iter().product();
            let n = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
            let data = (0..shape.iter().product::<usize>()).map(|_| n.sample(&mut rng)).collect();
            Tensor::new(shape, data).expect("weight shape")
        };
        let mut stages = Vec::new();
        let mut cin = in_channels;
        for &cout in &ALIGN_STAGE_CHANNELS {
            stages.push((draw(vec![cout, cin, 3, 3]), Tensor::zeros(vec![cout])));
            cin = cout;
        }
        let last = (draw(vec![cin, cin, 1, 1]), Tensor::zeros(vec![cin]));
        Self { in_channels, stages, last }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn weights(&self) -> impl Iterator<Item = &Tensor> {
        self.stages.iter().flat_map(|(w, b)| [w, b]).chain([&self.last.0, &self.last.1])
    }

    pub fn forward(&self, g: &mut Graph<f64>, x: Var) -> Result<AlignFeatures> {
        if g.shape(x).first() != Some(&self.in_channels) {
            return Err(config_err!("alignment net expects {} channels, got {:?}", self.in_channels, g.shape(x)));
        }
        let mut stages = Vec::with_capacity(4);
        let mut h = x;
        for (w, b) in &self.stages {
            let wv = g.input(w);
            let bv = g.input(b);
            let y = g.conv2d(h, wv, Some(bv), 1, 1)?;
            let y = g.relu(y);
            stages.push(y);
            h = g.max_pool2(y)?;
        }
        let wv = g.input(&self.last.0);
        let bv = g.input(&self.last.1);
        let y = g.conv2d(h, wv, Some(bv), 1, 0)?;
        let last = g.relu(y);
        Ok(AlignFeatures { stages, last })
    }
}

/// Individual terms of the alignment loss.
pub struct AlignTerms {
    pub mean_terms: Var,
    pub std_terms: Var,
    pub final_term: Var,
    pub total: Var,
}

/// `Σ‖μ(f_i(B_fuse))−μ(f_i(B_LiDAR))‖ + Σ‖σ(f_i(B_fuse))−σ(f_i(B_LiDAR))‖
/// + ‖f(B_out)−f(B_LiDAR)‖`.
pub fn alignment_loss(
    g: &mut Graph<f64>,
    b_out: Var,
    b_fuse: Var,
    b_lidar: Var,
    net: &AlignmentFeatureNet,
) -> Result<AlignTerms> {
    g.expect_same_shape(b_out, b_lidar, "alignment_loss")?;
    g.expect_same_shape(b_fuse, b_lidar, "alignment_loss")?;
    let f_fuse = net.forward(g, b_fuse)?;
    let f_lidar = net.forward(g, b_lidar)?;
    let f_out = net.forward(g, b_out)?;
    let mut mean_terms = Vec::new();
    let mut std_terms = Vec::new();
    for (&a, &b) in f_fuse.stages.iter().zip(&f_lidar.stages) {
        let ma = g.spatial_mean(a)?;
        let mb = g.spatial_mean(b)?;
        let d = g.sub(ma, mb)?;
        mean_terms.push(g.l2_norm(d));
        let sa = g.spatial_std(a)?;
        let sb = g.spatial_std(b)?;
        let d = g.sub(sa, sb)?;
        std_terms.push(g.l2_norm(d));
    }
    let mean_terms = sum_all(g, &mean_terms)?;
    let std_terms = sum_all(g, &std_terms)?;
    let d = g.sub(f_out.last, f_lidar.last)?;
    let final_term = g.l2_norm(d);
    let t = g.add(mean_terms, std_terms)?;
    let total = g.add(t, final_term)?;
    Ok(AlignTerms { mean_terms, std_terms, final_term, total })
}

pub(crate) fn sum_all(g: &mut Graph<f64>, vars: &[Var]) -> Result<Var> {
    let (first, rest) = vars.split_first().ok_or_else(|| config_err!("sum of no terms"))?;
    let mut acc = *first;
    for v in rest {
        acc = g.add(acc, *v)?;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_map::FeatureMap;

    fn map(c: usize, h: usize, w: usize, vals: &[f64]) -> FeatureMap<f64> {
        FeatureMap::new(c, h, w, vals.to_vec()).unwrap()
    }

    #[test]
    fn closed_form_example() {
        let mut g = Graph::new();
        let cam = map(1, 2, 2, &[1.0, 3.0, 1.0, 3.0]).to_var(&mut g);
        let lid = map(1, 2, 2, &[0.0, 10.0, 0.0, 10.0]).to_var(&mut g);
        let out = moment_align(&mut g, cam, lid, 1e-5).unwrap();
        let v = g.value(out);
        for (a, b) in v.iter().zip([0.0, 10.0, 0.0, 10.0]) {
            assert!((a - b).abs() < 1e-12, "{v:?}");
        }
    }

    #[test]
    fn constant_camera_maps_to_lidar_mean() {
        let mut g = Graph::new();
        let cam = map(1, 2, 2, &[0.7; 4]).to_var(&mut g);
        let lid = map(1, 2, 2, &[0.0, 10.0, 2.0, 4.0]).to_var(&mut g);
        let out = moment_align(&mut g, cam, lid, 1e-5).unwrap();
        assert!(g.value(out).iter().all(|v| (v - 4.0).abs() < 1e-9));
        assert!(moment_align(&mut g, cam, lid, 0.0).is_err());
    }

    #[test]
    fn self_alignment_is_identity() {
        let mut g = Graph::new();
        let vals: Vec<f64> = (0..18).map(|i| (i as f64 * 0.9).cos()).collect();
        let a = map(2, 3, 3, &vals).to_var(&mut g);
        let out = moment_align(&mut g, a, a, 1e-5).unwrap();
        for (x, y) in g.value(out).iter().zip(&vals) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn net_halves_resolution() {
        let net = AlignmentFeatureNet::new(3, 7);
        let mut g = Graph::new();
        let x = FeatureMap::<f64>::zeros(3, 32, 32).to_var(&mut g);
        let f = net.forward(&mut g, x).unwrap();
        let sizes: Vec<_> = f.stages.iter().map(|v| g.shape(*v).to_vec()).collect();
        assert_eq!(sizes, vec![vec![8, 32, 32], vec![16, 16, 16], vec![32, 8, 8], vec![64, 4, 4]]);
        assert_eq!(g.shape(f.last), &[64, 2, 2]);
        let again = AlignmentFeatureNet::new(3, 7);
        assert!(net.weights().zip(again.weights()).all(|(a, b)| a == b));
    }
}
