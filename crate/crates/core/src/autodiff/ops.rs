//! Forward constructors for the tape ops.

use super::graph::{softmax_row, Graph, Op, Var};
use super::kernels::{self, DeformGeom};
use crate::error::{config_err, Result};
use crate::scalar::Scalar;

impl<T: Scalar> Graph<T> {
    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let shape = self.shape(a).to_vec();
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        self.push(shape, value, op)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>, what: &str) -> Result<Var> {
        self.expect_same_shape(a, b, what)?;
        let shape = self.shape(a).to_vec();
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        Ok(self.push(shape, value, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b), "div")
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x * c, Op::MulScalar(a, c))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, kernels::sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, T::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, T::ln, Op::Ln(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, T::abs, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Square root; the derivative at exactly zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, T::sqrt, Op::Sqrt(a))
    }

    pub fn clamp_min(&mut self, a: Var, lo: T) -> Var {
        self.unary(a, |x| x.max(lo), Op::ClampMin(a, lo))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        self.push(vec![1], vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_usize_lossy(self.numel(a));
        let s: T = self.value(a).iter().copied().sum();
        self.push(vec![1], vec![s / n], Op::Mean(a))
    }

    /// Per-channel mean over the spatial dims of a `[C, H, W]` map.
    pub fn spatial_mean(&mut self, a: Var) -> Result<Var> {
        self.expect_rank(a, 3, "spatial_mean")?;
        let (c, hw) = (self.shape(a)[0], self.shape(a)[1] * self.shape(a)[2]);
        let n = T::from_usize_lossy(hw);
        let value = self.value(a).chunks(hw).map(|ch| ch.iter().copied().sum::<T>() / n).collect();
        Ok(self.push(vec![c], value, Op::SpatialMean(a)))
    }

    /// Per-channel population standard deviation over the spatial dims.
    pub fn spatial_std(&mut self, a: Var) -> Result<Var> {
        self.expect_rank(a, 3, "spatial_std")?;
        let (c, hw) = (self.shape(a)[0], self.shape(a)[1] * self.shape(a)[2]);
        let n = T::from_usize_lossy(hw);
        let value = self
            .value(a)
            .chunks(hw)
            .map(|ch| {
                let mu = ch.iter().copied().sum::<T>() / n;
                let var = ch.iter().map(|&x| (x - mu) * (x - mu)).sum::<T>() / n;
                var.sqrt()
            })
            .collect();
        Ok(self.push(vec![c], value, Op::SpatialStd(a)))
    }

    /// Broadcasts a `[C]` vector to `[C, H, W]`.
    pub fn expand_spatial(&mut self, a: Var, h: usize, w: usize) -> Result<Var> {
        self.expect_rank(a, 1, "expand_spatial")?;
        let c = self.shape(a)[0];
        let mut value = Vec::with_capacity(c * h * w);
        for &v in self.value(a) {
            value.extend(std::iter::repeat(v).take(h * w));
        }
        Ok(self.push(vec![c, h, w], value, Op::ExpandSpatial(a)))
    }

    /// Concatenation along the leading axis; trailing dims must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| config_err!("concat of zero tensors"))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut lead = 0;
        let mut value = Vec::new();
        for &p in parts {
            if self.shape(p)[1..] != tail[..] {
                return Err(config_err!(
                    "concat: trailing shape {:?} vs {:?}",
                    &self.shape(p)[1..],
                    tail
                ));
            }
            lead += self.shape(p)[0];
            value.extend_from_slice(self.value(p));
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        Ok(self.push(shape, value, Op::Concat(parts.to_vec())))
    }

    /// Rows `start..start+len` along the leading axis.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if len == 0 || start + len > shape[0] {
            return Err(config_err!("slice_rows {start}..{} out of {}", start + len, shape[0]));
        }
        let inner: usize = shape[1..].iter().product();
        let value = self.value(a)[start * inner..(start + len) * inner].to_vec();
        let mut out_shape = vec![len];
        out_shape.extend(&shape[1..]);
        Ok(self.push(out_shape, value, Op::SliceRows(a, start * inner)))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.numel(a) {
            return Err(config_err!("reshape {:?} -> {shape:?}", self.shape(a)));
        }
        let value = self.value(a).to_vec();
        Ok(self.push(shape, value, Op::Reshape(a)))
    }

    /// Flat gather: `out[k] = a.flat[idx[k]]`.
    pub fn gather(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let n = self.numel(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(config_err!("gather index {bad} out of {n}"));
        }
        if idx.is_empty() {
            return Err(config_err!("gather with no indices"));
        }
        let src = self.value(a);
        let value = idx.iter().map(|&i| src[i]).collect();
        Ok(self.push(vec![idx.len()], value, Op::Gather(a, idx)))
    }

    /// 2-D convolution of a `[Cin, H, W]` map with `[Cout, Cin, kh, kw]`
    /// weights, zero padding.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        self.expect_rank(input, 3, "conv2d input")?;
        self.expect_rank(weight, 4, "conv2d weight")?;
        let (is, ws) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        if is[0] != ws[1] {
            return Err(config_err!("conv2d: input has {} channels, weight expects {}", is[0], ws[1]));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ws[0]] {
                return Err(config_err!("conv2d: bias shape {:?}, expected [{}]", self.shape(b), ws[0]));
            }
        }
        if stride == 0
            || kernels::conv_out_len(is[1], ws[2], stride, pad).is_none()
            || kernels::conv_out_len(is[2], ws[3], stride, pad).is_none()
        {
            return Err(config_err!("conv2d: kernel {:?} does not fit input {:?}", ws, is));
        }
        let geom = self.conv_geom(input, weight, stride, pad);
        let value = kernels::conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            &geom,
        );
        Ok(self.push(
            vec![geom.cout, geom.ho, geom.wo],
            value,
            Op::Conv2d { input, weight, bias, stride, pad },
        ))
    }

    /// Deformable convolution, stride 1, same padding. `offsets` is
    /// `[2*k*k, H, W]` with (dy, dx) pairs per kernel tap in row-major tap order.
    pub fn deform_conv2d(&mut self, input: Var, offsets: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        self.expect_rank(input, 3, "deform_conv2d input")?;
        self.expect_rank(offsets, 3, "deform_conv2d offsets")?;
        self.expect_rank(weight, 4, "deform_conv2d weight")?;
        let (is, ws, os) = (self.shape(input).to_vec(), self.shape(weight).to_vec(), self.shape(offsets).to_vec());
        let k = ws[2];
        if ws[3] != k || k % 2 == 0 {
            return Err(config_err!("deform_conv2d needs an odd square kernel, got {ws:?}"));
        }
        if is[0] != ws[1] {
            return Err(config_err!("deform_conv2d: input has {} channels, weight expects {}", is[0], ws[1]));
        }
        if os != [2 * k * k, is[1], is[2]] {
            return Err(config_err!("deform_conv2d: offsets shape {os:?}, expected [{}, {}, {}]", 2 * k * k, is[1], is[2]));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ws[0]] {
                return Err(config_err!("deform_conv2d: bias shape {:?}", self.shape(b)));
            }
        }
        let geom = DeformGeom { cin: is[0], h: is[1], w: is[2], cout: ws[0], k };
        let cols = kernels::deform_columns(self.value(input), self.value(offsets), &geom);
        let value = kernels::deform_forward(&cols, self.value(weight), bias.map(|b| self.value(b)), &geom);
        Ok(self.push(
            vec![geom.cout, geom.h, geom.w],
            value,
            Op::DeformConv2d { input, offsets, weight, bias, cols },
        ))
    }

    /// Samples a `[C, H, W]` map at `coords` (`[2, Ho, Wo]`, channel 0 = y,
    /// channel 1 = x, pixel units). Out-of-range neighbours read as zero.
    pub fn bilinear_sample(&mut self, input: Var, coords: Var) -> Result<Var> {
        self.expect_rank(input, 3, "bilinear_sample input")?;
        self.expect_rank(coords, 3, "bilinear_sample coords")?;
        let is = self.shape(input).to_vec();
        let cs = self.shape(coords).to_vec();
        if cs[0] != 2 {
            return Err(config_err!("bilinear_sample coords must have 2 channels, got {}", cs[0]));
        }
        let (c, h, w) = (is[0], is[1], is[2]);
        let npos = cs[1] * cs[2];
        let x = self.value(input);
        let co = self.value(coords);
        let mut value = vec![T::zero(); c * npos];
        for pos in 0..npos {
            let (py, px) = (co[pos], co[npos + pos]);
            for ci in 0..c {
                value[ci * npos + pos] = kernels::bilinear_at(&x[ci * h * w..(ci + 1) * h * w], h, w, py, px);
            }
        }
        Ok(self.push(vec![c, cs[1], cs[2]], value, Op::BilinearSample { input, coords }))
    }

    /// Bilinear reads of a `[C, H, W]` map at fixed points; returns `[N, C]`.
    pub fn sample_points(&mut self, input: Var, points: Vec<(T, T)>) -> Result<Var> {
        self.expect_rank(input, 3, "sample_points input")?;
        if points.is_empty() {
            return Err(config_err!("sample_points with no points"));
        }
        let is = self.shape(input).to_vec();
        let (c, h, w) = (is[0], is[1], is[2]);
        let x = self.value(input);
        let mut value = Vec::with_capacity(points.len() * c);
        for &(py, px) in &points {
            for ci in 0..c {
                value.push(kernels::bilinear_at(&x[ci * h * w..(ci + 1) * h * w], h, w, py, px));
            }
        }
        Ok(self.push(vec![points.len(), c], value, Op::SamplePoints { input, points }))
    }

    /// 2x2 max pooling, stride 2 (odd trailing rows/cols dropped).
    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        self.expect_rank(input, 3, "max_pool2")?;
        let is = self.shape(input).to_vec();
        let (c, h, w) = (is[0], is[1], is[2]);
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return Err(config_err!("max_pool2 on {h}x{w} map"));
        }
        let x = self.value(input);
        let mut value = Vec::with_capacity(c * ho * wo);
        let mut argmax = Vec::with_capacity(c * ho * wo);
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = ci * h * w + (2 * oy) * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let j = ci * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[j] > x[best] {
                            best = j;
                        }
                    }
                    value.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        Ok(self.push(vec![c, ho, wo], value, Op::MaxPool2 { input, argmax }))
    }

    /// `x Wᵀ + b` for `x: [N, D]`, `W: [O, D]`, `b: [O]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        self.expect_rank(input, 2, "linear input")?;
        self.expect_rank(weight, 2, "linear weight")?;
        let (n, din) = (self.shape(input)[0], self.shape(input)[1]);
        let (dout, wdin) = (self.shape(weight)[0], self.shape(weight)[1]);
        if din != wdin {
            return Err(config_err!("linear: input dim {din}, weight expects {wdin}"));
        }
        if let Some(b) = bias {
            if self.shape(b) != [dout] {
                return Err(config_err!("linear: bias shape {:?}", self.shape(b)));
            }
        }
        let x = self.value(input);
        let wt = self.value(weight);
        let mut value = vec![T::zero(); n * dout];
        for r in 0..n {
            let xrow = &x[r * din..(r + 1) * din];
            for o in 0..dout {
                let mut s = bias.map_or(T::zero(), |b| self.value(b)[o]);
                for (&a, &b) in xrow.iter().zip(&wt[o * din..(o + 1) * din]) {
                    s += a * b;
                }
                value[r * dout + o] = s;
            }
        }
        Ok(self.push(vec![n, dout], value, Op::Linear { input, weight, bias }))
    }

    /// Weighted sum of binary cross-entropy terms computed from logits.
    pub fn bce_with_logits(&mut self, logits: Var, target: Vec<T>, weight: Vec<T>) -> Result<Var> {
        let n = self.numel(logits);
        if target.len() != n || weight.len() != n {
            return Err(config_err!("bce: {n} logits, {} targets, {} weights", target.len(), weight.len()));
        }
        let z = self.value(logits);
        let mut s = T::zero();
        for k in 0..n {
            s += weight[k] * (kernels::softplus(z[k]) - target[k] * z[k]);
        }
        Ok(self.push(vec![1], vec![s], Op::BceLogits { logits, target, weight }))
    }

    /// Weighted sum of softmax cross-entropy over the rows of `[N, K]` logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: Vec<usize>, weight: Vec<T>) -> Result<Var> {
        self.expect_rank(logits, 2, "softmax_cross_entropy")?;
        let (n, k) = (self.shape(logits)[0], self.shape(logits)[1]);
        if target.len() != n || weight.len() != n {
            return Err(config_err!("softmax_ce: {n} rows, {} targets, {} weights", target.len(), weight.len()));
        }
        if let Some(&bad) = target.iter().find(|&&t| t >= k) {
            return Err(config_err!("softmax_ce: class {bad} out of {k}"));
        }
        let z = self.value(logits);
        let mut s = T::zero();
        for (r, &t) in target.iter().enumerate() {
            if weight[r] == T::zero() {
                continue;
            }
            let row = &z[r * k..(r + 1) * k];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            s += weight[r] * (lse - row[t]);
        }
        Ok(self.push(vec![1], vec![s], Op::SoftmaxCe { logits, target, weight }))
    }

    /// Weighted sum of smooth-L1 (Huber with transition `beta`) terms.
    pub fn smooth_l1(&mut self, pred: Var, target: Vec<T>, weight: Vec<T>, beta: T) -> Result<Var> {
        let n = self.numel(pred);
        if target.len() != n || weight.len() != n {
            return Err(config_err!("smooth_l1: {n} preds, {} targets, {} weights", target.len(), weight.len()));
        }
        if beta <= T::zero() {
            return Err(config_err!("smooth_l1: beta must be positive"));
        }
        let p = self.value(pred);
        let half = T::lit(0.5);
        let mut s = T::zero();
        for k in 0..n {
            let d = (p[k] - target[k]).abs();
            let l = if d < beta { half * d * d / beta } else { d - half * beta };
            s += weight[k] * l;
        }
        Ok(self.push(vec![1], vec![s], Op::SmoothL1 { pred, target, weight, beta }))
    }

    /// Mean absolute difference.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let d = self.abs(d);
        Ok(self.mean(d))
    }

    /// Euclidean norm of all elements; zero gradient at the origin.
    pub fn l2_norm(&mut self, a: Var) -> Var {
        let sq = self.square(a);
        let s = self.sum(sq);
        self.sqrt(s)
    }

    /// Row-wise softmax probabilities of `[N, K]` logits (value only).
    pub fn softmax_rows(&self, logits: Var) -> Vec<Vec<T>> {
        let k = self.shape(logits)[1];
        self.value(logits).chunks(k).map(softmax_row).collect()
    }
}
