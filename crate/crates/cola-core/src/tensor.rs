//! Dense row-major tensors and shared parameter storage.

use std::cell::{Ref, RefCell, RefMut};
use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense real-valued N-dimensional array, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} elements but data has {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); numel],
        }
    }

    pub fn scalar(x: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![x],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n * d);
        for r in rows {
            assert_eq!(r.len(), d, "ragged rows");
            data.extend(r.iter().map(|&x| T::from_f64(x)));
        }
        Tensor {
            shape: vec![n, d],
            data,
        }
    }

    pub fn from_vec1(v: Vec<f64>) -> Self {
        Tensor {
            shape: vec![v.len()],
            data: v.into_iter().map(T::from_f64).collect(),
        }
    }

    /// Filled with `U(-bound, bound)`.
    pub fn uniform(shape: Vec<usize>, bound: f64, rng: &mut impl Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
            .collect();
        Tensor { shape, data }
    }

    /// Kaiming-uniform as used for low-rank A factors: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn kaiming_uniform(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Self {
        Self::uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng)
    }

    /// Xavier-uniform: `U(-sqrt(6/(fan_in+fan_out)), +...)`.
    pub fn xavier_uniform(
        shape: Vec<usize>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self::uniform(shape, (6.0 / (fan_in + fan_out) as f64).sqrt(), rng)
    }

    pub fn full(shape: Vec<usize>, x: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::from_f64(x); numel],
        }
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Row count / column count for 2-D tensors; 1-D is treated as one row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => panic!("rows() on tensor of rank {}", self.shape.len()),
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            _ => panic!("cols() on tensor of rank {}", self.shape.len()),
        }
    }

    #[inline]
    pub fn at2(&self, i: usize, j: usize) -> T {
        self.data[i * self.shape[1] + j]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|&x| x.as_f64()).collect()
    }

    pub fn from_f64_parts(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Tensor::new(shape, data.iter().map(|&x| T::from_f64(x)).collect())
    }

    /// Max |a-b| over elements; shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

pub(crate) fn shape_str(s: &[usize]) -> String {
    format!("{:?}", s)
}

/// Shared, possibly aliased parameter storage.
///
/// Cloning a `Param` aliases the same buffer, which is how the SharedA /
/// SharedB pathway-sharing modes are represented: one storage buffer,
/// reachable from both pathways. Frozen parameters never receive gradients.
#[derive(Debug)]
pub struct Param<T> {
    inner: Rc<ParamInner<T>>,
}

#[derive(Debug)]
struct ParamInner<T> {
    value: RefCell<Tensor<T>>,
    trainable: bool,
}

impl<T> Clone for Param<T> {
    fn clone(&self) -> Self {
        Param {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> Param<T> {
    pub fn trainable(value: Tensor<T>) -> Self {
        Param {
            inner: Rc::new(ParamInner {
                value: RefCell::new(value),
                trainable: true,
            }),
        }
    }

    pub fn frozen(value: Tensor<T>) -> Self {
        Param {
            inner: Rc::new(ParamInner {
                value: RefCell::new(value),
                trainable: false,
            }),
        }
    }

    pub fn is_trainable(&self) -> bool {
        self.inner.trainable
    }

    pub fn value(&self) -> Ref<'_, Tensor<T>> {
        self.inner.value.borrow()
    }

    pub fn value_mut(&self) -> RefMut<'_, Tensor<T>> {
        self.inner.value.borrow_mut()
    }

    pub fn numel(&self) -> usize {
        self.value().numel()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Overwrite with `U(-bound, bound)` draws, e.g. to emulate a trained
    /// state in diagnostics and benchmarks.
    pub fn fill_uniform(&self, bound: f64, rng: &mut impl Rng) {
        let shape = self.shape();
        *self.value_mut() = Tensor::uniform(shape, bound, rng);
    }

    pub fn set_scalar(&self, x: f64) {
        let shape = self.shape();
        *self.value_mut() = Tensor::full(shape, x);
    }

    /// Stable identity of the underlying buffer; aliases compare equal.
    pub fn ptr_id(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }

    pub fn aliases(&self, other: &Self) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}
