use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{config_err, Result};
use crate::scalar::Scalar;

/// Dense `channels x height x width` activation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<T>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(config_err!("feature map needs positive extents, got {channels}x{height}x{width}"));
        }
        if values.len() != channels * height * width {
            return Err(config_err!(
                "feature map {channels}x{height}x{width} given {} values",
                values.len()
            ));
        }
        Ok(Self { channels, height, width, values })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, values: vec![T::zero(); channels * height * width] }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn values(&self) -> &[T] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.values[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut T {
        &mut self.values[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.height * self.width;
        &self.values[c * n..(c + 1) * n]
    }

    /// Row-major `(y, x)` of the largest value in channel `c`.
    pub fn argmax(&self, c: usize) -> (usize, usize) {
        let p = self.plane(c);
        let mut best = 0;
        for (i, v) in p.iter().enumerate() {
            if *v > p[best] {
                best = i;
            }
        }
        (best / self.width, best % self.width)
    }

    pub fn sum(&self) -> T {
        self.values.iter().copied().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new(vec![self.channels, self.height, self.width], self.values.clone())
            .expect("feature map extents are positive")
    }

    /// Puts the map on the tape as a constant.
    pub fn to_var(&self, g: &mut Graph<T>) -> Var {
        g.input(&self.to_tensor())
    }

    pub fn from_var(g: &Graph<T>, v: Var) -> Result<Self> {
        let s = g.shape(v);
        if s.len() != 3 {
            return Err(config_err!("expected a rank-3 node, got {s:?}"));
        }
        Self::new(s[0], s[1], s[2], g.value(v).to_vec())
    }
}
