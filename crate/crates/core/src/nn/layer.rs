//! Layer descriptions and output-extent arithmetic.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// How a fractional window count is rounded when computing output extents.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rounding {
    #[default]
    Floor,
    Ceil,
}

/// Output channel (or unit) count, either fixed or proportional to the
/// number of hash bits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Channels {
    Fixed(usize),
    PerBit { per_bit: usize },
}

impl Channels {
    pub fn resolve(self, bits: usize) -> Channels {
        match self {
            Channels::PerBit { per_bit } => Channels::Fixed(per_bit * bits),
            fixed => fixed,
        }
    }

    pub fn fixed(self) -> Result<usize> {
        match self {
            Channels::Fixed(n) => Ok(n),
            Channels::PerBit { per_bit } => Err(Error::Shape(format!(
                "channel count {per_bit} per bit is unresolved; bind a bit count first"
            ))),
        }
    }
}

fn one() -> usize {
    1
}

fn default_beta() -> f64 {
    1.0
}

fn default_epsilon() -> f64 {
    0.5
}

/// One entry of a network description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    Conv {
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        pad: usize,
        channels: Channels,
        #[serde(default)]
        rounding: Rounding,
    },
    Maxpool {
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        pad: usize,
        #[serde(default)]
        rounding: Rounding,
    },
    Avgpool {
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        pad: usize,
        #[serde(default)]
        rounding: Rounding,
    },
    FullyConnected {
        channels: Channels,
    },
    Relu,
    Sigmoid {
        #[serde(default = "default_beta")]
        beta: f64,
    },
    PiecewiseThreshold {
        #[serde(default = "default_epsilon")]
        epsilon: f64,
    },
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Maxpool { .. } => "maxpool",
            LayerSpec::Avgpool { .. } => "avgpool",
            LayerSpec::FullyConnected { .. } => "fully-connected",
            LayerSpec::Relu => "relu",
            LayerSpec::Sigmoid { .. } => "sigmoid",
            LayerSpec::PiecewiseThreshold { .. } => "piecewise-threshold",
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(
            self,
            LayerSpec::Conv { .. } | LayerSpec::FullyConnected { .. }
        )
    }

    pub(crate) fn bind_bits(&self, bits: usize) -> LayerSpec {
        match *self {
            LayerSpec::Conv {
                kernel,
                stride,
                pad,
                channels,
                rounding,
            } => LayerSpec::Conv {
                kernel,
                stride,
                pad,
                channels: channels.resolve(bits),
                rounding,
            },
            LayerSpec::FullyConnected { channels } => LayerSpec::FullyConnected {
                channels: channels.resolve(bits),
            },
            ref other => other.clone(),
        }
    }

    /// Output shape for a given input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.is_empty() || input.contains(&0) {
            return shape_err(format!("{}: zero-extent input {input:?}", self.name()));
        }
        match *self {
            LayerSpec::Conv {
                kernel,
                stride,
                pad,
                channels,
                rounding,
            } => {
                let (_, h, w) = spatial(self.name(), input)?;
                let out_c = channels.fixed()?;
                if out_c == 0 {
                    return shape_err("conv: zero output channels");
                }
                let oh = output_extent(h, kernel, stride, pad, rounding)?;
                let ow = output_extent(w, kernel, stride, pad, rounding)?;
                Ok(vec![out_c, oh, ow])
            }
            LayerSpec::Maxpool {
                kernel,
                stride,
                pad,
                rounding,
            }
            | LayerSpec::Avgpool {
                kernel,
                stride,
                pad,
                rounding,
            } => {
                let (c, h, w) = spatial(self.name(), input)?;
                if pad >= kernel {
                    return shape_err(format!(
                        "{}: padding {pad} must be smaller than kernel {kernel}",
                        self.name()
                    ));
                }
                let oh = output_extent(h, kernel, stride, pad, rounding)?;
                let ow = output_extent(w, kernel, stride, pad, rounding)?;
                Ok(vec![c, oh, ow])
            }
            LayerSpec::FullyConnected { channels } => {
                let n = channels.fixed()?;
                if n == 0 {
                    return shape_err("fully-connected: zero outputs");
                }
                Ok(vec![n])
            }
            LayerSpec::Relu | LayerSpec::Sigmoid { .. } | LayerSpec::PiecewiseThreshold { .. } => {
                Ok(input.to_vec())
            }
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        match *self {
            LayerSpec::Conv { kernel, stride, .. }
            | LayerSpec::Maxpool { kernel, stride, .. }
            | LayerSpec::Avgpool { kernel, stride, .. } => {
                if kernel == 0 || stride == 0 {
                    return shape_err(format!(
                        "{}: kernel and stride must be at least 1",
                        self.name()
                    ));
                }
            }
            LayerSpec::Sigmoid { beta } => {
                if !(beta > 0.0 && beta.is_finite()) {
                    return Err(Error::Domain(format!("sigmoid beta must be positive, got {beta}")));
                }
            }
            LayerSpec::PiecewiseThreshold { epsilon } => {
                if !(epsilon > 0.0 && epsilon <= 0.5) {
                    return Err(Error::Domain(format!(
                        "threshold epsilon must lie in (0, 0.5], got {epsilon}"
                    )));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

fn spatial(name: &str, input: &[usize]) -> Result<(usize, usize, usize)> {
    match *input {
        [c, h, w] => Ok((c, h, w)),
        _ => shape_err(format!(
            "{name}: expected a channels x height x width input, got {input:?}"
        )),
    }
}

/// Number of window positions along one axis.
///
/// With ceil rounding the last window may overhang the padded input; it is
/// dropped when it would start entirely inside the right padding.
pub fn output_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    rounding: Rounding,
) -> Result<usize> {
    if kernel == 0 || stride == 0 {
        return shape_err("kernel and stride must be at least 1");
    }
    let span = input + 2 * pad;
    if span < kernel {
        return shape_err(format!(
            "kernel {kernel} exceeds padded extent {span} (input {input}, pad {pad})"
        ));
    }
    let room = span - kernel;
    let mut out = match rounding {
        Rounding::Floor => room / stride + 1,
        Rounding::Ceil => room.div_ceil(stride) + 1,
    };
    if rounding == Rounding::Ceil && pad > 0 && (out - 1) * stride >= input + pad {
        out -= 1;
    }
    Ok(out)
}
