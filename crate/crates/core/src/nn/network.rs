//! Sequential networks: shape inference, forward and backward passes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::activation::{
    check_epsilon, piecewise_threshold_grad, relu, sigmoid_beta, sigmoid_beta_grad,
    threshold_unchecked,
};
use super::kernels::{self, Window};
use super::layer::LayerSpec;
use super::params::{gaussian_tensor, LayerGrads, LayerParams, Param, ParamGrads, ParamStore};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

/// Ordered layer list applied to inputs of a fixed shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_shape: Vec<usize>,
    #[serde(rename = "layer", default)]
    pub layers: Vec<LayerSpec>,
}

/// Activations retained by [`forward`] for the matching [`backward`] call.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    /// `activations[0]` is the input, `activations[i + 1]` the output of layer `i`.
    pub activations: Vec<Tensor<T>>,
    argmax: Vec<Option<Vec<usize>>>,
}

impl<T> ForwardCache<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.activations.last().expect("cache holds the input")
    }
}

impl NetworkSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("network spec: {e}")))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("network spec serialises")
    }

    /// Replaces every per-bit channel count by its value for `bits` hash bits.
    pub fn bind_bits(&self, bits: usize) -> NetworkSpec {
        NetworkSpec {
            input_shape: self.input_shape.clone(),
            layers: self.layers.iter().map(|l| l.bind_bits(bits)).collect(),
        }
    }

    /// Flat length of the final layer's output.
    pub fn output_len(&self) -> Result<usize> {
        let shapes = infer_shapes(self)?;
        Ok(shapes
            .last()
            .map_or_else(|| self.input_shape.iter().product(), |s| s.iter().product()))
    }

    /// Expected `(weight, bias)` shapes for each layer with parameters.
    pub fn param_shapes(&self) -> Result<Vec<Option<(Vec<usize>, Vec<usize>)>>> {
        let shapes = infer_shapes(self)?;
        let mut input = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (layer, output) in self.layers.iter().zip(shapes) {
            out.push(match *layer {
                LayerSpec::Conv { kernel, .. } => {
                    Some((vec![output[0], input[0], kernel, kernel], vec![output[0]]))
                }
                LayerSpec::FullyConnected { .. } => {
                    Some((vec![output[0], input.iter().product()], vec![output[0]]))
                }
                _ => None,
            });
            input = output;
        }
        Ok(out)
    }
}

/// Output shape of every layer, in order.
pub fn infer_shapes(spec: &NetworkSpec) -> Result<Vec<Vec<usize>>> {
    if spec.input_shape.is_empty() || spec.input_shape.contains(&0) {
        return shape_err(format!("input shape {:?} must be positive", spec.input_shape));
    }
    let mut shape = spec.input_shape.clone();
    let mut out = Vec::with_capacity(spec.layers.len());
    for (i, layer) in spec.layers.iter().enumerate() {
        layer.validate()?;
        shape = layer
            .output_shape(&shape)
            .map_err(|e| Error::Shape(format!("layer {i}: {e}")))?;
        out.push(shape.clone());
    }
    Ok(out)
}

/// Fan-in scaled Gaussian weights (std `sqrt(2 / fan_in)`), zero biases and
/// zero momentum buffers. Deterministic in `seed`.
pub fn init_params<T: Real>(spec: &NetworkSpec, seed: u64) -> Result<ParamStore<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_params_with(spec, &mut rng)
}

pub(crate) fn init_params_with<T: Real>(
    spec: &NetworkSpec,
    rng: &mut ChaCha8Rng,
) -> Result<ParamStore<T>> {
    let layers = spec
        .param_shapes()?
        .into_iter()
        .map(|shapes| {
            shapes.map(|(w, b)| {
                let fan_in: usize = w[1..].iter().product();
                LayerParams {
                    weight: Param::new(gaussian_tensor(&w, (2.0 / fan_in as f64).sqrt(), rng)),
                    bias: Some(Param::new(Tensor::zeros(&b))),
                }
            })
        })
        .collect();
    Ok(ParamStore { layers })
}

fn check_params<T: Real>(spec: &NetworkSpec, params: &ParamStore<T>) -> Result<()> {
    if params.layers.len() < spec.layers.len() {
        return shape_err(format!(
            "parameter store has {} layers, network needs {}",
            params.layers.len(),
            spec.layers.len()
        ));
    }
    for (i, (expected, got)) in spec.param_shapes()?.iter().zip(&params.layers).enumerate() {
        let ok = match (expected, got) {
            (None, None) => true,
            (Some((w, b)), Some(p)) => {
                p.weight.value.shape() == w.as_slice()
                    && p.bias.as_ref().is_some_and(|pb| pb.value.shape() == b.as_slice())
            }
            _ => false,
        };
        if !ok {
            return shape_err(format!("layer {i}: parameter shapes do not match the spec"));
        }
    }
    Ok(())
}

fn window(layer: &LayerSpec, out_shape: &[usize]) -> Window {
    let (kernel, stride, pad) = match *layer {
        LayerSpec::Conv {
            kernel, stride, pad, ..
        }
        | LayerSpec::Maxpool {
            kernel, stride, pad, ..
        }
        | LayerSpec::Avgpool {
            kernel, stride, pad, ..
        } => (kernel, stride, pad),
        _ => unreachable!("window requested for a pointwise layer"),
    };
    Window {
        kernel,
        stride,
        pad,
        out_h: out_shape[1],
        out_w: out_shape[2],
    }
}

/// Runs `input` through the network. The first `spec.layers.len()` entries
/// of `params` are used; extra trailing layers (such as a hash head) are
/// ignored.
pub fn forward<T: Real>(
    spec: &NetworkSpec,
    params: &ParamStore<T>,
    input: &Tensor<T>,
) -> Result<(Tensor<T>, ForwardCache<T>)> {
    if input.shape() != spec.input_shape.as_slice() {
        return shape_err(format!(
            "input shape {:?} does not match network input {:?}",
            input.shape(),
            spec.input_shape
        ));
    }
    let shapes = infer_shapes(spec)?;
    check_params(spec, params)?;
    input.check_finite("network input")?;
    let mut activations = Vec::with_capacity(spec.layers.len() + 1);
    let mut argmax = Vec::with_capacity(spec.layers.len());
    activations.push(input.clone());
    for (i, layer) in spec.layers.iter().enumerate() {
        let x = activations.last().unwrap();
        let mut mask = None;
        let y = match *layer {
            LayerSpec::Conv { .. } => {
                let p = params.layers[i].as_ref().unwrap();
                kernels::conv_forward(
                    x,
                    &p.weight.value,
                    &p.bias.as_ref().unwrap().value,
                    &window(layer, &shapes[i]),
                )
            }
            LayerSpec::Maxpool { .. } => {
                let (y, am) = kernels::maxpool_forward(x, &window(layer, &shapes[i]));
                mask = Some(am);
                y
            }
            LayerSpec::Avgpool { .. } => kernels::avgpool_forward(x, &window(layer, &shapes[i])),
            LayerSpec::FullyConnected { .. } => {
                let p = params.layers[i].as_ref().unwrap();
                kernels::fc_forward(x, &p.weight.value, &p.bias.as_ref().unwrap().value)
            }
            LayerSpec::Relu => x.map(relu),
            LayerSpec::Sigmoid { beta } => {
                let b = T::of(beta);
                x.map(|c| sigmoid_beta(c, b))
            }
            LayerSpec::PiecewiseThreshold { epsilon } => {
                let e = T::of(epsilon);
                check_epsilon(e)?;
                if x.data().iter().any(|&s| !(s >= T::zero() && s <= T::one())) {
                    return Err(Error::Domain(format!(
                        "layer {i}: threshold input outside [0, 1]"
                    )));
                }
                x.map(|s| threshold_unchecked(s, e))
            }
        };
        y.check_finite(&format!("layer {i} ({}) output", layer.name()))?;
        debug_assert_eq!(y.shape(), shapes[i].as_slice());
        activations.push(y);
        argmax.push(mask);
    }
    let out = activations.last().unwrap().clone();
    Ok((out, ForwardCache { activations, argmax }))
}

/// Back-propagates `output_grad` through the network, returning the input
/// gradient and per-layer parameter gradients (congruent with the first
/// `spec.layers.len()` layers of `params`).
pub fn backward<T: Real>(
    spec: &NetworkSpec,
    params: &ParamStore<T>,
    cache: &ForwardCache<T>,
    output_grad: &Tensor<T>,
) -> Result<(Tensor<T>, ParamGrads<T>)> {
    if cache.activations.len() != spec.layers.len() + 1 {
        return shape_err("forward cache does not belong to this network");
    }
    if output_grad.shape() != cache.output().shape() {
        return shape_err(format!(
            "output gradient shape {:?} does not match output {:?}",
            output_grad.shape(),
            cache.output().shape()
        ));
    }
    let mut grads: Vec<Option<LayerGrads<T>>> = vec![None; spec.layers.len()];
    let mut g = output_grad.clone();
    for (i, layer) in spec.layers.iter().enumerate().rev() {
        let x = &cache.activations[i];
        let y = &cache.activations[i + 1];
        g = match *layer {
            LayerSpec::Conv { .. } => {
                let p = params.layers[i].as_ref().unwrap();
                let (gx, gw, gb) =
                    kernels::conv_backward(x, &p.weight.value, &g, &window(layer, y.shape()));
                grads[i] = Some(LayerGrads {
                    weight: gw,
                    bias: Some(gb),
                });
                gx
            }
            LayerSpec::Maxpool { .. } => kernels::maxpool_backward(
                x.shape(),
                cache.argmax[i].as_ref().expect("maxpool argmax cached"),
                &g,
            ),
            LayerSpec::Avgpool { .. } => {
                kernels::avgpool_backward(x.shape(), &g, &window(layer, y.shape()))
            }
            LayerSpec::FullyConnected { .. } => {
                let p = params.layers[i].as_ref().unwrap();
                let (gx, gw, gb) = kernels::fc_backward(x, &p.weight.value, &g);
                grads[i] = Some(LayerGrads {
                    weight: gw,
                    bias: Some(gb),
                });
                gx
            }
            LayerSpec::Relu => zip_map(&g, x, |gv, xv| if xv > T::zero() { gv } else { T::zero() }),
            LayerSpec::Sigmoid { beta } => {
                let b = T::of(beta);
                zip_map(&g, y, |gv, s| gv * sigmoid_beta_grad(s, b))
            }
            LayerSpec::PiecewiseThreshold { epsilon } => {
                let e = T::of(epsilon);
                zip_map(&g, x, |gv, s| gv * piecewise_threshold_grad(s, e))
            }
        };
        g.check_finite(&format!("layer {i} ({}) input gradient", layer.name()))?;
    }
    for lg in grads.iter().flatten() {
        lg.weight.check_finite("weight gradient")?;
        if let Some(b) = &lg.bias {
            b.check_finite("bias gradient")?;
        }
    }
    Ok((g, ParamGrads { layers: grads }))
}

fn zip_map<T: Real>(g: &Tensor<T>, x: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = g.data().iter().zip(x.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::new(x.shape().to_vec(), data).unwrap()
}
