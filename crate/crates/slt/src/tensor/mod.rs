//! Dense-tensor numerical core with reverse-mode differentiation.
//!
//! Everything the models need is covered by a small set of primitives
//! (affine, activations, softmax, strided 2-D convolution, elementwise ops,
//! cross-entropy) recorded on a [`Graph`] and differentiated by one reverse
//! sweep. Training runs in `f32`; gradient checking runs the same code in
//! `f64`.

pub mod graph;
mod gradcheck;

pub use gradcheck::grad_check;
pub use graph::{lstm_step, Gradients, Graph, NodeId, RecurrentCellNodes};

use num_traits::Float;
use rand::Rng;

use crate::error::{Error, Result};

/// Element type of all tensors: `f32` for training storage, `f64` for
/// gradient checking.
pub trait Scalar: Float + std::fmt::Debug + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn cast_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn cast_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn cast_f64(self) -> f64 {
        self
    }
}

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Build a tensor from a shape and row-major data. Rejects length
    /// mismatches and non-finite values.
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} wants {} values, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor construction".into()));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![T::zero(); numel] }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn filled(shape: Vec<usize>, v: T) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![v; numel] }
    }

    /// Uniform init in `[-r, r]` with `r = sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot(shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let r = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| T::from_f64(rng.random_range(-r..r)))
            .collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Extent along `axis`.
    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    /// Element of a rank-2 tensor.
    pub fn at2(&self, i: usize, j: usize) -> T {
        self.data[i * self.shape[1] + j]
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} values) to {:?}",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map_into<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.cast_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Named, ordered parameter store. Iteration order is insertion order, which
/// keeps checkpoints and optimizer sweeps deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: std::collections::HashMap<String, usize>,
}

/// Index of a parameter inside its [`ParamStore`].
pub type ParamId = usize;

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new(), index: Default::default() }
    }

    /// Insert a fresh parameter. Returns an error on duplicate names.
    pub fn insert(&mut self, name: &str, tensor: Tensor<T>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Shape(format!("duplicate parameter name {name:?}")));
        }
        let id = self.tensors.len();
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    /// Insert, or return the existing id when a parameter of that name and
    /// shape is already present (shared components in multi-task stores).
    pub fn insert_or_share(&mut self, name: &str, tensor: Tensor<T>) -> Result<ParamId> {
        if let Some(&id) = self.index.get(name) {
            if self.tensors[id].shape() != tensor.shape() {
                return Err(Error::Shape(format!(
                    "parameter {name:?} exists with shape {:?}, wanted {:?}",
                    self.tensors[id].shape(),
                    tensor.shape()
                )));
            }
            return Ok(id);
        }
        self.insert(name, tensor)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    pub fn to_f64(&self) -> ParamStore<f64> {
        let mut out = ParamStore::new();
        for (name, t) in self.iter() {
            out.insert(name, t.map_into()).expect("names already unique");
        }
        out
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        let err = Tensor::<f64>::from_vec(vec![2, 3], vec![1.0; 5]).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        let err = Tensor::<f64>::from_vec(vec![2], vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn scalar_has_empty_shape_and_one_value() {
        let t = Tensor::scalar(4.0f64);
        assert_eq!(t.shape(), &[] as &[usize]);
        assert_eq!(t.numel(), 1);
        assert_eq!(t.item(), 4.0);
    }

    #[test]
    fn store_is_insertion_ordered() {
        let mut s = ParamStore::<f32>::new();
        s.insert("b", Tensor::zeros(vec![1])).unwrap();
        s.insert("a", Tensor::zeros(vec![1])).unwrap();
        let names: Vec<_> = s.iter().map(|(n, _)| n.to_string()).collect();
        assert_eq!(names, vec!["b", "a"]);
        assert!(s.insert("a", Tensor::zeros(vec![1])).is_err());
    }

    #[test]
    fn store_share_checks_shape() {
        let mut s = ParamStore::<f32>::new();
        let a = s.insert_or_share("w", Tensor::zeros(vec![2, 2])).unwrap();
        let b = s.insert_or_share("w", Tensor::zeros(vec![2, 2])).unwrap();
        assert_eq!(a, b);
        assert!(s.insert_or_share("w", Tensor::zeros(vec![3])).is_err());
    }
}
