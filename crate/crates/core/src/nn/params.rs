//! Learnable weights, their momentum buffers, and the binary block format
//! used to checkpoint them.
//!
//! Block layout (all integers little-endian):
//!
//! ```text
//! magic    4 bytes  "HLPS"
//! version  u16      1
//! width    u8       bytes per value (4 or 8)
//! reserved u8       0
//! layers   u32
//! per layer:
//!   tensors u8      0 (no parameters), 2 (weight, velocity) or 4 (+ bias, velocity)
//!   per tensor: rank u8, rank x u32 extents, then the values
//! ```

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const PARAM_MAGIC: &[u8; 4] = b"HLPS";
pub const PARAM_VERSION: u16 = 1;

/// A learnable tensor and its momentum buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub velocity: Tensor<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let velocity = Tensor::zeros(value.shape());
        Self { value, velocity }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

/// Per-layer parameters; `None` for layers without weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T = f64> {
    pub layers: Vec<Option<LayerParams<T>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

/// Gradients laid out congruently with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads<T = f64> {
    pub layers: Vec<Option<LayerGrads<T>>>,
}

impl<T: Real> ParamGrads<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        let layers = store
            .layers
            .iter()
            .map(|l| {
                l.as_ref().map(|p| LayerGrads {
                    weight: Tensor::zeros(p.weight.value.shape()),
                    bias: p.bias.as_ref().map(|b| Tensor::zeros(b.value.shape())),
                })
            })
            .collect();
        Self { layers }
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: T, other: &ParamGrads<T>) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if let (Some(a), Some(b)) = (a, b) {
                a.weight.axpy(alpha, &b.weight);
                if let (Some(ab), Some(bb)) = (a.bias.as_mut(), b.bias.as_ref()) {
                    ab.axpy(alpha, bb);
                }
            }
        }
    }

    pub fn scale(&mut self, alpha: T) {
        for l in self.layers.iter_mut().flatten() {
            l.weight.scale(alpha);
            if let Some(b) = l.bias.as_mut() {
                b.scale(alpha);
            }
        }
    }

    /// All gradient values in layer order, weights before biases.
    pub fn flat(&self) -> Vec<T> {
        let mut out = Vec::new();
        for l in self.layers.iter().flatten() {
            out.extend_from_slice(l.weight.data());
            if let Some(b) = &l.bias {
                out.extend_from_slice(b.data());
            }
        }
        out
    }
}

impl<T: Real> ParamStore<T> {
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .flatten()
            .map(|l| l.weight.value.len() + l.bias.as_ref().map_or(0, |b| b.value.len()))
            .sum()
    }

    /// Mutable references to every parameter in layer order, weights before
    /// biases. Matches the order of [`ParamGrads::flat`].
    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        for l in self.layers.iter_mut().flatten() {
            out.push(&mut l.weight);
            if let Some(b) = l.bias.as_mut() {
                out.push(b);
            }
        }
        out
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::new();
        for l in self.layers.iter().flatten() {
            out.push(&l.weight);
            if let Some(b) = l.bias.as_ref() {
                out.push(b);
            }
        }
        out
    }

    /// Checks that `grads` has exactly the shapes of this store.
    pub fn check_congruent(&self, grads: &ParamGrads<T>) -> Result<()> {
        let ok = self.layers.len() == grads.layers.len()
            && self.layers.iter().zip(&grads.layers).all(|(p, g)| match (p, g) {
                (None, None) => true,
                (Some(p), Some(g)) => {
                    p.weight.value.shape() == g.weight.shape()
                        && match (&p.bias, &g.bias) {
                            (None, None) => true,
                            (Some(pb), Some(gb)) => pb.value.shape() == gb.shape(),
                            _ => false,
                        }
                }
                _ => false,
            });
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("gradients are not congruent with parameters".into()))
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let cp = |p: &Param<T>| Param {
            value: p.value.cast(),
            velocity: p.velocity.cast(),
        };
        ParamStore {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    l.as_ref().map(|l| LayerParams {
                        weight: cp(&l.weight),
                        bias: l.bias.as_ref().map(cp),
                    })
                })
                .collect(),
        }
    }

    pub fn write_block(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(PARAM_MAGIC);
        out.extend_from_slice(&PARAM_VERSION.to_le_bytes());
        out.push(T::BYTES as u8);
        out.push(0);
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for layer in &self.layers {
            match layer {
                None => out.push(0),
                Some(l) => {
                    let mut tensors = vec![&l.weight.value, &l.weight.velocity];
                    if let Some(b) = &l.bias {
                        tensors.push(&b.value);
                        tensors.push(&b.velocity);
                    }
                    out.push(tensors.len() as u8);
                    for t in tensors {
                        write_tensor(t, out);
                    }
                }
            }
        }
    }

    pub fn read_block(reader: &mut ByteReader<'_>) -> Result<Self> {
        if reader.take(4)? != PARAM_MAGIC {
            return Err(Error::Format("missing parameter block magic".into()));
        }
        let version = reader.u16()?;
        if version != PARAM_VERSION {
            return Err(Error::Format(format!(
                "unsupported parameter block version {version}"
            )));
        }
        let width = reader.u8()? as usize;
        if width != 4 && width != 8 {
            return Err(Error::Format(format!("unsupported value width {width}")));
        }
        reader.u8()?;
        let n_layers = reader.u32()? as usize;
        let mut layers = Vec::with_capacity(n_layers.min(1 << 16));
        for _ in 0..n_layers {
            let count = reader.u8()?;
            let layer = match count {
                0 => None,
                2 | 4 => {
                    let weight = Param {
                        value: read_tensor(reader, width)?,
                        velocity: read_tensor(reader, width)?,
                    };
                    let bias = if count == 4 {
                        Some(Param {
                            value: read_tensor(reader, width)?,
                            velocity: read_tensor(reader, width)?,
                        })
                    } else {
                        None
                    };
                    for p in std::iter::once(&weight).chain(bias.as_ref()) {
                        if p.value.shape() != p.velocity.shape() {
                            return Err(Error::Format(
                                "velocity shape differs from its parameter".into(),
                            ));
                        }
                    }
                    Some(LayerParams { weight, bias })
                }
                n => return Err(Error::Format(format!("bad tensor count {n}"))),
            };
            layers.push(layer);
        }
        Ok(Self { layers })
    }
}

fn write_tensor<T: Real>(t: &Tensor<T>, out: &mut Vec<u8>) {
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

fn read_tensor<T: Real>(reader: &mut ByteReader<'_>, width: usize) -> Result<Tensor<T>> {
    let rank = reader.u8()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(reader.u32()? as usize);
    }
    let len = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::Format("tensor extent overflow".into()))?;
    let bytes = reader.take(len.checked_mul(width).ok_or_else(|| {
        Error::Format("tensor byte length overflow".into())
    })?)?;
    let data = bytes
        .chunks_exact(width)
        .map(|c| {
            if width == 8 {
                T::of(f64::read_le(c))
            } else {
                T::of(f32::read_le(c) as f64)
            }
        })
        .collect();
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}

/// Bounds-checked little-endian cursor; every short read is a format error.
pub struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated input at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn is_at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }

    pub fn position(&self) -> usize {
        self.pos
    }
}

/// Draws a zero-mean Gaussian tensor with standard deviation `std`.
pub(crate) fn gaussian_tensor<T: Real, R: Rng + ?Sized>(
    shape: &[usize],
    std: f64,
    rng: &mut R,
) -> Tensor<T> {
    let normal = Normal::new(0.0, std).expect("finite std");
    let len = shape.iter().product();
    let data = (0..len).map(|_| T::of(normal.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("positive shape")
}
