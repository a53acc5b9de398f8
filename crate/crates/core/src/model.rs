//! A convolutional sub-network followed by a hashing head.
//!
//! Parameters live in a single [`ParamStore`]: one entry per network layer,
//! then one entry for the head weights (no bias).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::head::{head_backward, head_forward, ApproximateCode, HashHeadSpec, HeadCache, HeadVariant};
use crate::nn::network::{backward, forward, infer_shapes, init_params_with, ForwardCache, NetworkSpec};
use crate::nn::params::{LayerGrads, LayerParams, Param, ParamGrads, ParamStore};
use crate::tensor::{Real, Tensor};

fn default_beta() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    #[serde(default)]
    pub variant: HeadVariant,
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Apply the piecewise threshold after the fully-connected variant's
    /// sigmoid. `false` gives the plain sigmoid head.
    #[serde(default = "yes")]
    pub fc_threshold: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            variant: HeadVariant::DivideAndEncode,
            beta: 1.0,
            fc_threshold: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HashModel {
    pub network: NetworkSpec,
    pub head: HashHeadSpec,
    pub head_config: HeadConfig,
}

#[derive(Serialize, Deserialize)]
struct Descriptor {
    bits: usize,
    head: HeadConfig,
    network: NetworkSpec,
}

/// Caches of one forward pass through network and head.
#[derive(Clone, Debug)]
pub struct ModelCache<T> {
    network: ForwardCache<T>,
    head: HeadCache<T>,
}

impl HashModel {
    /// Binds `bits` into the network template and attaches a head whose
    /// input length is the network's flat output length.
    pub fn new(network: &NetworkSpec, head: &HeadConfig, bits: usize) -> Result<Self> {
        let network = network.bind_bits(bits);
        infer_shapes(&network)?;
        let d = network.output_len()?;
        let mut spec = HashHeadSpec::new(head.variant, bits, d)?.with_beta(head.beta)?;
        spec.fc_threshold = head.fc_threshold;
        Ok(Self {
            network,
            head: spec,
            head_config: head.clone(),
        })
    }

    pub fn bits(&self) -> usize {
        self.head.bits
    }

    pub fn layer_count(&self) -> usize {
        self.network.layers.len() + 1
    }

    pub fn init_params<T: Real>(&self, seed: u64) -> Result<ParamStore<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = init_params_with(&self.network, &mut rng)?;
        store.layers.push(Some(LayerParams {
            weight: Param::new(self.head.init_weight(&mut rng)),
            bias: None,
        }));
        Ok(store)
    }

    fn head_weight<'a, T: Real>(&self, params: &'a ParamStore<T>) -> Result<&'a Tensor<T>> {
        if params.layers.len() != self.layer_count() {
            return shape_err(format!(
                "model expects {} parameter layers, store has {}",
                self.layer_count(),
                params.layers.len()
            ));
        }
        match &params.layers[self.network.layers.len()] {
            Some(LayerParams { weight, bias: None }) => Ok(&weight.value),
            _ => shape_err("last parameter layer must hold the head weight only"),
        }
    }

    pub fn forward<T: Real>(
        &self,
        params: &ParamStore<T>,
        input: &Tensor<T>,
        epsilon: f64,
    ) -> Result<(ApproximateCode<T>, ModelCache<T>)> {
        let w = self.head_weight(params)?;
        let (features, network) = forward(&self.network, params, input)?;
        let (code, head) = head_forward(&self.head, w, &features, epsilon)?;
        Ok((code, ModelCache { network, head }))
    }

    pub fn backward<T: Real>(
        &self,
        params: &ParamStore<T>,
        cache: &ModelCache<T>,
        code_grad: &[T],
    ) -> Result<ParamGrads<T>> {
        let w = self.head_weight(params)?;
        let (feature_grad, head_grad) = head_backward(&self.head, w, &cache.head, code_grad)?;
        let out_shape = cache.network.output().shape().to_vec();
        let feature_grad = feature_grad.reshape(out_shape)?;
        let (_, mut grads) = backward(&self.network, params, &cache.network, &feature_grad)?;
        grads.layers.push(Some(LayerGrads {
            weight: head_grad,
            bias: None,
        }));
        Ok(grads)
    }

    /// Approximate code at the head's current epsilon.
    pub fn encode<T: Real>(&self, params: &ParamStore<T>, input: &Tensor<T>) -> Result<ApproximateCode<T>> {
        Ok(self.forward(params, input, self.head.epsilon)?.0)
    }

    pub fn to_descriptor(&self) -> String {
        toml::to_string(&Descriptor {
            bits: self.bits(),
            head: self.head_config.clone(),
            network: self.network.clone(),
        })
        .expect("model descriptor serialises")
    }

    pub fn from_descriptor(text: &str) -> Result<Self> {
        let d: Descriptor =
            toml::from_str(text).map_err(|e| Error::Format(format!("model descriptor: {e}")))?;
        Self::new(&d.network, &d.head, d.bits)
    }
}
