use std::collections::BTreeMap;

use crate::error::{config_err, domain_err, Result};
use crate::scalar::Scalar;

/// Dense row-major array with an optional gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(config_err!("tensor shape {shape:?} has a zero extent"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(config_err!(
                "tensor shape {shape:?} needs {numel} values, got {}",
                data.len()
            ));
        }
        Ok(Self { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self { shape, data: vec![T::zero(); numel], requires_grad: false, grad: None }
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Self {
        let numel = shape.iter().product();
        Self { shape, data: vec![value; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1], data: vec![value], requires_grad: false, grad: None }
    }

    /// Marks the tensor as trainable.
    pub fn into_param(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient slot, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[T]) {
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Named learnable parameters with gradient and importance (Φ) slots.
///
/// Iteration order is the lexicographic order of names, which keeps every
/// reduction over parameters deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, Tensor<T>>,
    importance: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: BTreeMap::new(), importance: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(config_err!("duplicate parameter name `{name}`"));
        }
        self.entries.insert(name, tensor.into_param());
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries.get(name).ok_or_else(|| config_err!("unknown parameter `{name}`"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.entries.values_mut().for_each(Tensor::zero_grad);
    }

    /// Sets Φ for one parameter. Values must be finite and non-negative.
    pub fn set_importance(&mut self, name: &str, phi: Vec<T>) -> Result<()> {
        let t = self.require(name)?;
        if phi.len() != t.numel() {
            return Err(config_err!(
                "importance for `{name}` has {} values, parameter has {}",
                phi.len(),
                t.numel()
            ));
        }
        if phi.iter().any(|v| !v.is_finite() || *v < T::zero()) {
            return Err(domain_err!("importance for `{name}` must be finite and >= 0"));
        }
        self.importance.insert(name.to_owned(), phi);
        Ok(())
    }

    pub fn importance(&self, name: &str) -> Option<&[T]> {
        self.importance.get(name).map(Vec::as_slice)
    }

    pub fn clear_importance(&mut self) {
        self.importance.clear();
    }

    /// Checks that `other` has exactly the same names and shapes.
    pub fn check_aligned(&self, other: &ParamStore<T>) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(config_err!(
                "parameter stores differ in size ({} vs {})",
                self.entries.len(),
                other.entries.len()
            ));
        }
        for ((na, ta), (nb, tb)) in self.entries.iter().zip(&other.entries) {
            if na != nb || ta.shape() != tb.shape() {
                return Err(config_err!(
                    "parameter mismatch: `{na}` {:?} vs `{nb}` {:?}",
                    ta.shape(),
                    tb.shape()
                ));
            }
        }
        Ok(())
    }

    /// Euclidean distance between two aligned stores.
    pub fn l2_distance(&self, other: &ParamStore<T>) -> Result<T> {
        self.check_aligned(other)?;
        let mut acc = T::zero();
        for (a, b) in self.entries.values().zip(other.entries.values()) {
            for (&x, &y) in a.data().iter().zip(b.data()) {
                acc += (x - y) * (x - y);
            }
        }
        Ok(acc.sqrt())
    }

    /// Copy of the values only: gradients and importance are dropped.
    pub fn snapshot(&self) -> Self {
        let entries = self
            .entries
            .iter()
            .map(|(k, v)| {
                let mut t = v.clone();
                t.grad = None;
                (k.clone(), t)
            })
            .collect();
        Self { entries, importance: BTreeMap::new() }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(Tensor::is_finite)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_rejects_bad_shapes() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![0, 3], vec![]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn importance_must_be_shaped_and_non_negative() {
        let mut ps = ParamStore::<f64>::new();
        ps.insert("w", Tensor::zeros(vec![3])).unwrap();
        assert!(ps.set_importance("w", vec![1.0, 2.0]).is_err());
        assert!(ps.set_importance("w", vec![1.0, -2.0, 0.0]).is_err());
        ps.set_importance("w", vec![1.0, 2.0, 0.0]).unwrap();
        assert_eq!(ps.importance("w"), Some(&[1.0, 2.0, 0.0][..]));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParamStore::<f32>::new();
        ps.insert("a", Tensor::zeros(vec![1])).unwrap();
        assert!(ps.insert("a", Tensor::zeros(vec![1])).is_err());
    }
}
