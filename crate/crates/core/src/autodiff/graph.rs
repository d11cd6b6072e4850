use std::collections::BTreeMap;

use super::kernels::{self, ConvGeom, DeformGeom};
use super::tensor::{ParamStore, Tensor};
use crate::error::{config_err, domain_err, Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    Square(Var),
    Sqrt(Var),
    ClampMin(Var, T),
    Sum(Var),
    Mean(Var),
    SpatialMean(Var),
    SpatialStd(Var),
    ExpandSpatial(Var),
    Concat(Vec<Var>),
    SliceRows(Var, usize),
    Reshape(Var),
    Gather(Var, Vec<usize>),
    Conv2d { input: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize },
    DeformConv2d { input: Var, offsets: Var, weight: Var, bias: Option<Var>, cols: Vec<T> },
    BilinearSample { input: Var, coords: Var },
    SamplePoints { input: Var, points: Vec<(T, T)> },
    MaxPool2 { input: Var, argmax: Vec<usize> },
    Linear { input: Var, weight: Var, bias: Option<Var> },
    BceLogits { logits: Var, target: Vec<T>, weight: Vec<T> },
    SoftmaxCe { logits: Var, target: Vec<usize>, weight: Vec<T> },
    SmoothL1 { pred: Var, target: Vec<T>, weight: Vec<T>, beta: T },
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) => vec![*a, *b],
            Neg(a) | AddScalar(a) | MulScalar(a, _) | Sigmoid(a) | Relu(a) | Exp(a) | Ln(a)
            | Abs(a) | Square(a) | Sqrt(a) | ClampMin(a, _) | Sum(a) | Mean(a) | SpatialMean(a)
            | SpatialStd(a) | ExpandSpatial(a) | SliceRows(a, _) | Reshape(a) | Gather(a, _) => vec![*a],
            Concat(parts) => parts.clone(),
            Conv2d { input, weight, bias, .. } | Linear { input, weight, bias } => {
                let mut v = vec![*input, *weight];
                v.extend(bias.iter().copied());
                v
            }
            DeformConv2d { input, offsets, weight, bias, .. } => {
                let mut v = vec![*input, *offsets, *weight];
                v.extend(bias.iter().copied());
                v
            }
            BilinearSample { input, coords } => vec![*input, *coords],
            SamplePoints { input, .. } | MaxPool2 { input, .. } => vec![*input],
            BceLogits { logits, .. } | SoftmaxCe { logits, .. } => vec![*logits],
            SmoothL1 { pred, .. } => vec![*pred],
        }
    }
}

pub(crate) struct Node<T> {
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

/// Dynamic tape. A fresh graph is built for every forward pass.
pub struct Graph<T> {
    pub(crate) nodes: Vec<Node<T>>,
    params: BTreeMap<String, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { shape, value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Value of a single-element node.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    /// Copies a node's value out as a standalone tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("graph node shape is consistent")
    }

    /// Non-trainable input.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.input(&t))
    }

    pub fn input(&mut self, t: &Tensor<T>) -> Var {
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf);
        self.nodes[v.0].requires_grad = t.requires_grad;
        v
    }

    pub fn scalar_const(&mut self, x: T) -> Var {
        self.push(vec![1], vec![x], Op::Leaf)
    }

    /// Binds a stored parameter as a trainable leaf. Repeated binds of the
    /// same name return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store.require(name)?;
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf);
        self.nodes[v.0].requires_grad = true;
        self.params.insert(name.to_owned(), v);
        Ok(v)
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Same value, cut from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, Op::Leaf)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(config_err!(
                "backward root must be a scalar, got shape {:?}",
                self.nodes[root.0].shape
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numerical(format!("non-finite gradient at node {i}")));
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        use Op::*;
        let node = &self.nodes[i];
        let y = &node.value;
        let one = T::one();
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Leaf => {}
            Add(a, b) => {
                acc(grads, self, *a, |d| add_into(d, g));
                acc(grads, self, *b, |d| add_into(d, g));
            }
            Sub(a, b) => {
                acc(grads, self, *a, |d| add_into(d, g));
                acc(grads, self, *b, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g));
            }
            Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(grads, self, *a, |d| {
                    d.iter_mut().zip(g.iter().zip(vb)).for_each(|(d, (&g, &b))| *d += g * b)
                });
                acc(grads, self, *b, |d| {
                    d.iter_mut().zip(g.iter().zip(va)).for_each(|(d, (&g, &a))| *d += g * a)
                });
            }
            Div(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(grads, self, *a, |d| {
                    d.iter_mut().zip(g.iter().zip(vb)).for_each(|(d, (&g, &b))| *d += g / b)
                });
                acc(grads, self, *b, |d| {
                    for k in 0..d.len() {
                        d[k] -= g[k] * va[k] / (vb[k] * vb[k]);
                    }
                });
            }
            Neg(a) => acc(grads, self, *a, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g)),
            AddScalar(a) => acc(grads, self, *a, |d| add_into(d, g)),
            MulScalar(a, c) => {
                let c = *c;
                acc(grads, self, *a, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += c * g))
            }
            Sigmoid(a) => acc(grads, self, *a, |d| {
                for k in 0..d.len() {
                    d[k] += g[k] * y[k] * (one - y[k]);
                }
            }),
            Relu(a) => {
                let x = self.value(*a);
                acc(grads, self, *a, |d| {
                    for k in 0..d.len() {
                        if x[k] > T::zero() {
                            d[k] += g[k];
                        }
                    }
                })
            }
            Exp(a) => acc(grads, self, *a, |d| {
                for k in 0..d.len() {
                    d[k] += g[k] * y[k];
                }
            }),
            Ln(a) => {
                let x = self.value(*a);
                acc(grads, self, *a, |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] / x[k];
                    }
                })
            }
            Abs(a) => {
                let x = self.value(*a);
                acc(grads, self, *a, |d| {
                    for k in 0..d.len() {
                        if x[k] > T::zero() {
                            d[k] += g[k];
                        } else if x[k] < T::zero() {
                            d[k] -= g[k];
                        }
                    }
                })
            }
            Square(a) => {
                let x = self.value(*a);
                let two = T::lit(2.0);
                acc(grads, self, *a, |d| {
                    for k in 0..d.len() {
                        d[k] += two * x[k] * g[k];
                    }
                })
            }
            Sqrt(a) => acc(grads, self, *a, |d| {
                let two = T::lit(2.0);
                for k in 0..d.len() {
                    if y[k] > T::zero() {
                        d[k] += g[k] / (two * y[k]);
                    }
                }
            }),
            ClampMin(a, lo) => {
                let x = self.value(*a);
                let lo = *lo;
                acc(grads, self, *a, |d| {
                    for k in 0..d.len() {
                        if x[k] > lo {
                            d[k] += g[k];
                        }
                    }
                })
            }
            Sum(a) => acc(grads, self, *a, |d| d.iter_mut().for_each(|d| *d += g[0])),
            Mean(a) => {
                let n = T::from_usize_lossy(self.numel(*a));
                acc(grads, self, *a, |d| d.iter_mut().for_each(|d| *d += g[0] / n))
            }
            SpatialMean(a) => {
                let hw = self.numel(*a) / y.len();
                let n = T::from_usize_lossy(hw);
                acc(grads, self, *a, |d| {
                    for (c, chunk) in d.chunks_mut(hw).enumerate() {
                        chunk.iter_mut().for_each(|d| *d += g[c] / n);
                    }
                })
            }
            SpatialStd(a) => {
                let x = self.value(*a);
                let hw = x.len() / y.len();
                let n = T::from_usize_lossy(hw);
                acc(grads, self, *a, |d| {
                    for c in 0..y.len() {
                        if y[c] <= T::zero() {
                            continue;
                        }
                        let xs = &x[c * hw..(c + 1) * hw];
                        let mu = xs.iter().copied().sum::<T>() / n;
                        let scale = g[c] / (n * y[c]);
                        for (d, &xv) in d[c * hw..(c + 1) * hw].iter_mut().zip(xs) {
                            *d += scale * (xv - mu);
                        }
                    }
                })
            }
            ExpandSpatial(a) => {
                let c = self.numel(*a);
                let hw = y.len() / c;
                acc(grads, self, *a, |d| {
                    for (ci, chunk) in g.chunks(hw).enumerate() {
                        d[ci] += chunk.iter().copied().sum::<T>();
                    }
                })
            }
            Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.numel(*p);
                    let slice = &g[off..off + n];
                    acc(grads, self, *p, |d| add_into(d, slice));
                    off += n;
                }
            }
            SliceRows(a, start_elem) => {
                let s = *start_elem;
                acc(grads, self, *a, |d| add_into(&mut d[s..s + g.len()], g))
            }
            Reshape(a) => acc(grads, self, *a, |d| add_into(d, g)),
            Gather(a, idx) => acc(grads, self, *a, |d| {
                for (k, &j) in idx.iter().enumerate() {
                    d[j] += g[k];
                }
            }),
            Conv2d { input, weight, bias, stride, pad } => {
                let geom = self.conv_geom(*input, *weight, *stride, *pad);
                let (gx, gw, gb) =
                    kernels::conv2d_backward(self.value(*input), self.value(*weight), g, &geom, rg(*input));
                if let Some(gx) = gx {
                    acc(grads, self, *input, |d| add_into(d, &gx));
                }
                acc(grads, self, *weight, |d| add_into(d, &gw));
                if let Some(b) = bias {
                    acc(grads, self, *b, |d| add_into(d, &gb));
                }
            }
            DeformConv2d { input, offsets, weight, bias, cols } => {
                let geom = self.deform_geom(*input, *weight);
                let r = kernels::deform_backward(
                    self.value(*input),
                    self.value(*offsets),
                    cols,
                    self.value(*weight),
                    g,
                    &geom,
                    rg(*input),
                    rg(*offsets),
                );
                if let Some(gx) = r.input {
                    acc(grads, self, *input, |d| add_into(d, &gx));
                }
                if let Some(go) = r.offsets {
                    acc(grads, self, *offsets, |d| add_into(d, &go));
                }
                acc(grads, self, *weight, |d| add_into(d, &r.weight));
                if let Some(b) = bias {
                    acc(grads, self, *b, |d| add_into(d, &r.bias));
                }
            }
            BilinearSample { input, coords } => {
                let ish = self.shape(*input);
                let (c, h, w) = (ish[0], ish[1], ish[2]);
                let x = self.value(*input);
                let co = self.value(*coords);
                let npos = co.len() / 2;
                let mut gx = rg(*input).then(|| vec![T::zero(); x.len()]);
                let mut gc = vec![T::zero(); co.len()];
                for pos in 0..npos {
                    let (py, px) = (co[pos], co[npos + pos]);
                    for ci in 0..c {
                        let gv = g[ci * npos + pos];
                        if gv == T::zero() {
                            continue;
                        }
                        let plane = &x[ci * h * w..(ci + 1) * h * w];
                        let gp = gx.as_mut().map(|v| &mut v[ci * h * w..(ci + 1) * h * w]);
                        let (dy, dx) = kernels::bilinear_backward(plane, gp, h, w, py, px, gv);
                        gc[pos] += dy;
                        gc[npos + pos] += dx;
                    }
                }
                if let Some(gx) = gx {
                    acc(grads, self, *input, |d| add_into(d, &gx));
                }
                acc(grads, self, *coords, |d| add_into(d, &gc));
            }
            SamplePoints { input, points } => {
                let ish = self.shape(*input);
                let (c, h, w) = (ish[0], ish[1], ish[2]);
                let x = self.value(*input);
                acc(grads, self, *input, |d| {
                    for (n, &(py, px)) in points.iter().enumerate() {
                        for ci in 0..c {
                            let gv = g[n * c + ci];
                            let plane = &x[ci * h * w..(ci + 1) * h * w];
                            let gp = &mut d[ci * h * w..(ci + 1) * h * w];
                            kernels::bilinear_backward(plane, Some(gp), h, w, py, px, gv);
                        }
                    }
                })
            }
            MaxPool2 { input, argmax } => acc(grads, self, *input, |d| {
                for (k, &j) in argmax.iter().enumerate() {
                    d[j] += g[k];
                }
            }),
            Linear { input, weight, bias } => {
                let x = self.value(*input);
                let wt = self.value(*weight);
                let (n, din) = (self.shape(*input)[0], self.shape(*input)[1]);
                let dout = self.shape(*weight)[0];
                if rg(*input) {
                    acc(grads, self, *input, |d| {
                        for r in 0..n {
                            for o in 0..dout {
                                let gv = g[r * dout + o];
                                let wrow = &wt[o * din..(o + 1) * din];
                                for (dv, &wv) in d[r * din..(r + 1) * din].iter_mut().zip(wrow) {
                                    *dv += gv * wv;
                                }
                            }
                        }
                    });
                }
                acc(grads, self, *weight, |d| {
                    for r in 0..n {
                        let xrow = &x[r * din..(r + 1) * din];
                        for o in 0..dout {
                            let gv = g[r * dout + o];
                            for (dv, &xv) in d[o * din..(o + 1) * din].iter_mut().zip(xrow) {
                                *dv += gv * xv;
                            }
                        }
                    }
                });
                if let Some(b) = bias {
                    acc(grads, self, *b, |d| {
                        for r in 0..n {
                            add_into(d, &g[r * dout..(r + 1) * dout]);
                        }
                    });
                }
            }
            BceLogits { logits, target, weight } => {
                let z = self.value(*logits);
                acc(grads, self, *logits, |d| {
                    for k in 0..d.len() {
                        d[k] += g[0] * weight[k] * (kernels::sigmoid(z[k]) - target[k]);
                    }
                })
            }
            SoftmaxCe { logits, target, weight } => {
                let z = self.value(*logits);
                let k = self.shape(*logits)[1];
                acc(grads, self, *logits, |d| {
                    for (r, &t) in target.iter().enumerate() {
                        if weight[r] == T::zero() {
                            continue;
                        }
                        let row = &z[r * k..(r + 1) * k];
                        let p = softmax_row(row);
                        for j in 0..k {
                            let ind = if j == t { one } else { T::zero() };
                            d[r * k + j] += g[0] * weight[r] * (p[j] - ind);
                        }
                    }
                })
            }
            SmoothL1 { pred, target, weight, beta } => {
                let p = self.value(*pred);
                let beta = *beta;
                acc(grads, self, *pred, |d| {
                    for k in 0..d.len() {
                        let diff = p[k] - target[k];
                        let dd = if diff.abs() < beta { diff / beta } else { diff.signum() };
                        d[k] += g[0] * weight[k] * dd;
                    }
                })
            }
        }
    }

    pub(crate) fn conv_geom(&self, input: Var, weight: Var, stride: usize, pad: usize) -> ConvGeom {
        let is = self.shape(input);
        let ws = self.shape(weight);
        let (h, w) = (is[1], is[2]);
        ConvGeom {
            cin: is[0],
            h,
            w,
            cout: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
            ho: kernels::conv_out_len(h, ws[2], stride, pad).unwrap_or(0),
            wo: kernels::conv_out_len(w, ws[3], stride, pad).unwrap_or(0),
        }
    }

    pub(crate) fn deform_geom(&self, input: Var, weight: Var) -> DeformGeom {
        let is = self.shape(input);
        let ws = self.shape(weight);
        DeformGeom { cin: is[0], h: is[1], w: is[2], cout: ws[0], k: ws[2] }
    }

    pub(crate) fn check_finite(&self, v: Var, what: &str) -> Result<()> {
        if self.value(v).iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numerical(format!("non-finite value in {what}")))
        }
    }

    pub(crate) fn expect_rank(&self, v: Var, rank: usize, what: &str) -> Result<()> {
        if self.shape(v).len() != rank {
            return Err(config_err!(
                "{what}: expected rank {rank}, got shape {:?}",
                self.shape(v)
            ));
        }
        Ok(())
    }

    pub(crate) fn expect_same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(config_err!(
                "{what}: shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }
}

pub(crate) fn softmax_row<T: Scalar>(row: &[T]) -> Vec<T> {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[inline]
fn add_into<T: Scalar>(d: &mut [T], g: &[T]) {
    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
}

#[inline]
fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], graph: &Graph<T>, v: Var, f: impl FnOnce(&mut [T])) {
    let node = &graph.nodes[v.0];
    if !node.requires_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.len()]);
    f(slot);
}

/// Result of a reverse sweep: one optional gradient per tape node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradients of every bound parameter accepted by `keep` into the
    /// store's gradient slots. Bound parameters the root does not depend on
    /// receive an explicit zero gradient.
    pub fn accumulate_into(
        &self,
        graph: &Graph<T>,
        store: &mut ParamStore<T>,
        keep: impl Fn(&str) -> bool,
    ) -> Result<()> {
        for (name, v) in graph.bound_params() {
            if !keep(name) {
                continue;
            }
            let t = store
                .get_mut(name)
                .ok_or_else(|| domain_err!("parameter `{name}` not in target store"))?;
            match self.wrt(v) {
                Some(g) => t.accumulate_grad(g),
                None => {
                    let zeros = vec![T::zero(); t.numel()];
                    t.accumulate_grad(&zeros);
                }
            }
        }
        Ok(())
    }
}
