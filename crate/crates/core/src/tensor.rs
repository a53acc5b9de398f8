//! Dense row-major tensors over `f32` or `f64`.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive};

use crate::error::{shape_err, Error, Result};

/// Floating-point element type usable by every layer kernel.
pub trait Real: Float + FromPrimitive + Default + Debug + Send + Sync + 'static {
    /// Width in bytes of the little-endian encoding.
    const BYTES: usize;
    const NAME: &'static str;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }
}

impl Real for f64 {
    const BYTES: usize = 8;
    const NAME: &'static str = "f64";

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

impl Real for f32 {
    const BYTES: usize = 4;
    const NAME: &'static str = "f32";

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

/// A dense tensor. `shape` is `[C, H, W]` for feature maps or `[n]` for
/// flat vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return shape_err(format!("tensor extents must be positive, got {shape:?}"));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return shape_err(format!(
                "shape {shape:?} holds {len} values but {} were given",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); len],
        }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Same data viewed under another shape with equal element count.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() || shape.contains(&0) {
            return shape_err(format!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn check_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!("non-finite value in {what}")))
        }
    }

    /// Elementwise `self += alpha * other`.
    pub fn axpy(&mut self, alpha: T, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: T) {
        for a in &mut self.data {
            *a = *a * alpha;
        }
    }

    /// Converts to another precision.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|x| U::from_f64(x.as_f64()).unwrap())
                .collect(),
        }
    }
}
