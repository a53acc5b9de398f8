//! Hashing heads that map a feature vector to an approximate code in
//! `[0, 1]^q`, and the quantizer that turns approximate codes into bits.
//!
//! The divide-and-encode head splits the `d` features into `q` contiguous
//! slices and projects each slice to a single bit through its own weight
//! vector, a slope-`beta` sigmoid and the piecewise threshold. Bit `i`
//! therefore depends only on slice `i`. The fully-connected alternative
//! projects the whole feature vector to every bit.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::index::BitCode;
use crate::nn::activation::{
    check_epsilon, piecewise_threshold_grad, sigmoid_beta, sigmoid_beta_grad, threshold_unchecked,
};
use crate::nn::params::gaussian_tensor;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadVariant {
    #[default]
    DivideAndEncode,
    FullyConnected,
}

impl HeadVariant {
    pub fn name(self) -> &'static str {
        match self {
            HeadVariant::DivideAndEncode => "divide-and-encode",
            HeadVariant::FullyConnected => "fully-connected",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HashHeadSpec {
    pub variant: HeadVariant,
    pub bits: usize,
    pub input_len: usize,
    /// Slice ranges over the features; one per bit for divide-and-encode,
    /// empty for the fully-connected variant.
    pub slices: Vec<Range<usize>>,
    pub beta: f64,
    /// Current threshold half-width; the training schedule overrides it per
    /// call.
    pub epsilon: f64,
    /// Whether the fully-connected variant applies the piecewise threshold
    /// after its sigmoid. Ignored by divide-and-encode, which always does.
    pub fc_threshold: bool,
}

/// Real-valued code in `[0, 1]^q` produced by a head.
#[derive(Clone, Debug, PartialEq)]
pub struct ApproximateCode<T = f64> {
    pub values: Vec<T>,
}

impl<T: Real> ApproximateCode<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Domain("approximate code must have at least one bit".into()));
        }
        if let Some(v) = values.iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
            return Err(Error::Domain(format!(
                "approximate code value {v:?} outside [0, 1]"
            )));
        }
        Ok(Self { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Splits `[0, d)` into `q` contiguous slices; when `d = q*s + c` the first
/// `c` slices get `s + 1` elements and the rest `s`.
pub fn partition_slices(d: usize, q: usize) -> Result<Vec<Range<usize>>> {
    if q == 0 || d < q {
        return Err(Error::Domain(format!(
            "cannot split {d} features into {q} non-empty slices"
        )));
    }
    let (s, c) = (d / q, d % q);
    let mut start = 0;
    Ok((0..q)
        .map(|i| {
            let len = if i < c { s + 1 } else { s };
            let r = start..start + len;
            start += len;
            r
        })
        .collect())
}

impl HashHeadSpec {
    pub fn new(variant: HeadVariant, bits: usize, input_len: usize) -> Result<Self> {
        let slices = match variant {
            HeadVariant::DivideAndEncode => partition_slices(input_len, bits)?,
            HeadVariant::FullyConnected => {
                if bits == 0 || input_len < bits {
                    return Err(Error::Domain(format!(
                        "head needs 1 <= q <= d, got q={bits}, d={input_len}"
                    )));
                }
                Vec::new()
            }
        };
        Ok(Self {
            variant,
            bits,
            input_len,
            slices,
            beta: 1.0,
            epsilon: 0.5,
            fc_threshold: true,
        })
    }

    pub fn with_beta(mut self, beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::Domain(format!("beta must be positive, got {beta}")));
        }
        self.beta = beta;
        Ok(self)
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        match self.variant {
            HeadVariant::DivideAndEncode => vec![self.input_len],
            HeadVariant::FullyConnected => vec![self.bits, self.input_len],
        }
    }

    fn applies_threshold(&self) -> bool {
        self.variant == HeadVariant::DivideAndEncode || self.fc_threshold
    }

    /// Gaussian weights with std `sqrt(1 / fan_in)`, where fan-in is the slice
    /// length (divide-and-encode) or `d`.
    pub fn init_weight<T: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> Tensor<T> {
        match self.variant {
            HeadVariant::DivideAndEncode => {
                let mut data = Vec::with_capacity(self.input_len);
                for r in &self.slices {
                    let t: Tensor<T> = gaussian_tensor(&[r.len()], (1.0 / r.len() as f64).sqrt(), rng);
                    data.extend_from_slice(t.data());
                }
                Tensor::from_vec(data)
            }
            HeadVariant::FullyConnected => gaussian_tensor(
                &self.weight_shape(),
                (1.0 / self.input_len as f64).sqrt(),
                rng,
            ),
        }
    }

    /// Pre-activation `c_i` of every bit.
    fn pre_activations<T: Real>(&self, weight: &Tensor<T>, x: &[T]) -> Vec<T> {
        let w = weight.data();
        match self.variant {
            HeadVariant::DivideAndEncode => self
                .slices
                .iter()
                .map(|r| dot(&w[r.clone()], &x[r.clone()]))
                .collect(),
            HeadVariant::FullyConnected => (0..self.bits)
                .map(|i| dot(&w[i * self.input_len..(i + 1) * self.input_len], x))
                .collect(),
        }
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// State kept by [`head_forward`] for [`head_backward`].
#[derive(Clone, Debug)]
pub struct HeadCache<T> {
    features: Vec<T>,
    sigmoid: Vec<T>,
    epsilon: T,
}

pub fn head_forward<T: Real>(
    spec: &HashHeadSpec,
    weight: &Tensor<T>,
    features: &Tensor<T>,
    epsilon: f64,
) -> Result<(ApproximateCode<T>, HeadCache<T>)> {
    if features.len() != spec.input_len {
        return shape_err(format!(
            "head expects {} features, got {}",
            spec.input_len,
            features.len()
        ));
    }
    if weight.shape() != spec.weight_shape().as_slice() {
        return shape_err(format!(
            "head weight shape {:?}, expected {:?}",
            weight.shape(),
            spec.weight_shape()
        ));
    }
    features.check_finite("head input")?;
    let eps = T::of(epsilon);
    check_epsilon(eps)?;
    let beta = T::of(spec.beta);
    let x = features.data();
    let sigmoid: Vec<T> = spec
        .pre_activations(weight, x)
        .into_iter()
        .map(|c| sigmoid_beta(c, beta))
        .collect();
    let values = if spec.applies_threshold() {
        sigmoid.iter().map(|&s| threshold_unchecked(s, eps)).collect()
    } else {
        sigmoid.clone()
    };
    let code = ApproximateCode::new(values)?;
    Ok((
        code,
        HeadCache {
            features: x.to_vec(),
            sigmoid,
            epsilon: eps,
        },
    ))
}

/// Returns `(feature_gradient, weight_gradient)`.
pub fn head_backward<T: Real>(
    spec: &HashHeadSpec,
    weight: &Tensor<T>,
    cache: &HeadCache<T>,
    code_grad: &[T],
) -> Result<(Tensor<T>, Tensor<T>)> {
    if code_grad.len() != spec.bits {
        return Err(Error::LengthMismatch {
            expected: spec.bits,
            actual: code_grad.len(),
        });
    }
    let beta = T::of(spec.beta);
    // dL/dc_i
    let dc: Vec<T> = code_grad
        .iter()
        .zip(&cache.sigmoid)
        .map(|(&g, &s)| {
            let gs = if spec.applies_threshold() {
                g * piecewise_threshold_grad(s, cache.epsilon)
            } else {
                g
            };
            gs * sigmoid_beta_grad(s, beta)
        })
        .collect();
    let x = &cache.features;
    let w = weight.data();
    let mut gx = vec![T::zero(); spec.input_len];
    let mut gw = vec![T::zero(); w.len()];
    match spec.variant {
        HeadVariant::DivideAndEncode => {
            for (r, &d) in spec.slices.iter().zip(&dc) {
                for j in r.clone() {
                    gx[j] = d * w[j];
                    gw[j] = d * x[j];
                }
            }
        }
        HeadVariant::FullyConnected => {
            let n = spec.input_len;
            for (i, &d) in dc.iter().enumerate() {
                for j in 0..n {
                    gx[j] = gx[j] + d * w[i * n + j];
                    gw[i * n + j] = d * x[j];
                }
            }
        }
    }
    let gx = Tensor::from_vec(gx);
    let gw = Tensor::new(weight.shape().to_vec(), gw)?;
    gx.check_finite("head feature gradient")?;
    gw.check_finite("head weight gradient")?;
    Ok((gx, gw))
}

/// Bit `i` is 1 exactly when value `i` is strictly greater than 0.5.
pub fn quantize_values<T: Real>(values: &[T]) -> Vec<u8> {
    let half = T::of(0.5);
    values.iter().map(|&v| u8::from(v > half)).collect()
}

pub fn quantize<T: Real>(code: &ApproximateCode<T>) -> BitCode {
    BitCode::from_bits(&quantize_values(&code.values)).expect("quantized bits are binary and non-empty")
}
