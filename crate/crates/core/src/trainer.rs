//! Mini-batch SGD with momentum over triplets.
//!
//! Each step encodes the anchor, positive and negative of every triplet,
//! evaluates the relaxed triplet loss, back-propagates its subgradients and
//! sums the branch gradients into the owning network: the single shared
//! network, or network P (anchors) and Q (positives and negatives) in
//! query-independent mode. The batch gradient is the mean over triplets.
//!
//! Trainer checkpoint layout: the first network's parameter block (see
//! [`crate::nn::params`]), then an extension block
//!
//! ```text
//! magic      4 bytes "HLTX"
//! version    u16     1
//! sharing    u8      0 fully shared, 1 query independent
//! reserved   u8      0
//! iteration  u64
//! epsilon    f64
//! last_loss  f64
//! loss_sum   f64
//! loss_count u64
//! desc_len   u32, then the model descriptor (TOML, UTF-8)
//! extra      u8 count of further parameter blocks, then the blocks
//! ```

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::HashModel;
use crate::nn::params::{ByteReader, ParamGrads, ParamStore};
use crate::objective::{Triplet, TripletLoss, TripletSampler};
use crate::tensor::{Real, Tensor};

pub const STATE_MAGIC: &[u8; 4] = b"HLTX";
pub const STATE_VERSION: u16 = 1;

/// Which branches share a sub-network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SharingMode {
    /// One network for anchor, positive and negative.
    #[default]
    FullyShared,
    /// Network P for anchors, network Q for positives and negatives.
    QueryIndependent,
}

impl SharingMode {
    pub fn name(self) -> &'static str {
        match self {
            SharingMode::FullyShared => "fully-shared",
            SharingMode::QueryIndependent => "query-independent",
        }
    }

    pub fn network_count(self) -> usize {
        match self {
            SharingMode::FullyShared => 1,
            SharingMode::QueryIndependent => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Multiplier applied to the learning rate every `lr_step` iterations.
    pub lr_decay: f64,
    pub lr_step: u64,
    pub momentum: f64,
    /// Batch size in images; a triplet holds three. Ignored when
    /// `batch_triplets` is set.
    pub batch_images: usize,
    pub batch_triplets: Option<usize>,
    pub weight_decay: f64,
    pub epsilon_initial: f64,
    pub epsilon_decay: f64,
    pub epsilon_step: u64,
    pub max_iterations: u64,
    pub seed: u64,
    pub sharing: SharingMode,
    pub margin: f64,
    pub multilabel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            lr_decay: 0.1,
            lr_step: 10_000,
            momentum: 0.9,
            batch_images: 64,
            batch_triplets: None,
            weight_decay: 0.0005,
            epsilon_initial: 0.5,
            epsilon_decay: 0.8,
            epsilon_step: 20_000,
            max_iterations: 2_000,
            seed: 0,
            sharing: SharingMode::FullyShared,
            margin: 1.0,
            multilabel: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Config(format!("train.{field}: {why}")));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be a non-negative number");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", "must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", "must be non-negative");
        }
        if !(self.epsilon_initial > 0.0 && self.epsilon_initial <= 0.5) {
            return bad("epsilon_initial", "must lie in (0, 0.5]");
        }
        if !(self.epsilon_decay > 0.0 && self.epsilon_decay <= 1.0) {
            return bad("epsilon_decay", "must lie in (0, 1]");
        }
        if self.epsilon_step == 0 || self.lr_step == 0 {
            return bad("epsilon_step", "schedule steps must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay", "must lie in (0, 1]");
        }
        if self.batch_size() == 0 {
            return bad("batch_images", "batch must hold at least one triplet");
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return bad("margin", "must be non-negative");
        }
        Ok(())
    }

    /// Triplets per mini-batch.
    pub fn batch_size(&self) -> usize {
        self.batch_triplets.unwrap_or(self.batch_images / 3)
    }

    pub fn loss(&self) -> TripletLoss {
        TripletLoss {
            margin: self.margin,
        }
    }
}

/// Threshold half-width at `iteration`: the initial value times
/// `decay^floor(iteration / step)`. Never reaches zero.
pub fn epsilon_at(iteration: u64, config: &TrainConfig) -> f64 {
    let k = (iteration / config.epsilon_step) as f64;
    (config.epsilon_initial * config.epsilon_decay.powf(k)).max(f64::MIN_POSITIVE)
}

/// Step-decayed learning rate at `iteration`.
pub fn learning_rate_at(iteration: u64, config: &TrainConfig) -> f64 {
    let k = (iteration / config.lr_step) as f64;
    config.learning_rate * config.lr_decay.powf(k)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossStats {
    pub last: f64,
    pub sum: f64,
    pub count: u64,
}

impl LossStats {
    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum / self.count as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T = f64> {
    pub iteration: u64,
    pub epsilon: f64,
    pub sharing: SharingMode,
    /// One store per network; momentum buffers live inside.
    pub networks: Vec<ParamStore<T>>,
    pub loss: LossStats,
}

/// Classical heavy-ball update with weight decay folded into the gradient:
/// `v <- momentum * v - lr * (g + weight_decay * w)`, `w <- w + v`.
/// Nothing is modified when any updated value would be non-finite.
pub fn sgd_momentum_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &ParamGrads<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    params.check_congruent(grads)?;
    let (lr, mu, wd) = (T::of(lr), T::of(momentum), T::of(weight_decay));
    let flat = grads.flat();
    let mut updates = Vec::with_capacity(flat.len() * 2);
    let mut offset = 0;
    for p in params.params() {
        for ((&w, &v), &g) in p
            .value
            .data()
            .iter()
            .zip(p.velocity.data())
            .zip(&flat[offset..offset + p.value.len()])
        {
            let v_new = mu * v - lr * (g + wd * w);
            let w_new = w + v_new;
            if !(v_new.is_finite() && w_new.is_finite()) {
                return Err(Error::Numeric("non-finite parameter update".into()));
            }
            updates.push((w_new, v_new));
        }
        offset += p.value.len();
    }
    let mut it = updates.into_iter();
    for p in params.params_mut() {
        for (w, v) in p.value.data_mut().iter_mut().zip(p.velocity.data_mut().iter_mut()) {
            let (wn, vn) = it.next().unwrap();
            *w = wn;
            *v = vn;
        }
    }
    Ok(())
}

/// Summed (not averaged) loss and per-network gradients of a batch.
#[derive(Clone, Debug)]
pub struct BatchGradients<T> {
    pub loss_sum: f64,
    pub active: usize,
    pub grads: Vec<ParamGrads<T>>,
}

/// Loss and parameter gradients summed over `batch`. Per-triplet work runs
/// in parallel; the reduction is sequential in batch order.
pub fn batch_gradients<T: Real>(
    model: &HashModel,
    networks: &[ParamStore<T>],
    data: &[Tensor<T>],
    batch: &[Triplet],
    epsilon: f64,
    loss: TripletLoss,
) -> Result<BatchGradients<T>> {
    if networks.is_empty() || networks.len() > 2 {
        return Err(Error::Config("one or two networks are supported".into()));
    }
    for t in batch {
        let max = t.anchor.max(t.positive).max(t.negative);
        if max >= data.len() {
            return Err(Error::Domain(format!(
                "triplet index {max} out of range for {} items",
                data.len()
            )));
        }
    }
    let p_net = &networks[0];
    let q_net = &networks[networks.len() - 1];
    let q_slot = networks.len() - 1;
    let per_triplet = batch
        .par_iter()
        .map(|t| -> Result<(f64, Option<[ParamGrads<T>; 3]>)> {
            let (ca, cache_a) = model.forward(p_net, &data[t.anchor], epsilon)?;
            let (cp, cache_p) = model.forward(q_net, &data[t.positive], epsilon)?;
            let (cn, cache_n) = model.forward(q_net, &data[t.negative], epsilon)?;
            let l = loss.relaxed(&ca.values, &cp.values, &cn.values)?;
            if !l.active {
                return Ok((l.value.as_f64(), None));
            }
            let g = loss.subgradients(&ca.values, &cp.values, &cn.values)?;
            Ok((
                l.value.as_f64(),
                Some([
                    model.backward(p_net, &cache_a, &g.anchor)?,
                    model.backward(q_net, &cache_p, &g.positive)?,
                    model.backward(q_net, &cache_n, &g.negative)?,
                ]),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grads: Vec<ParamGrads<T>> = networks.iter().map(ParamGrads::zeros_like).collect();
    let mut loss_sum = 0.0;
    let mut active = 0;
    for (l, g) in per_triplet {
        loss_sum += l;
        if let Some([ga, gp, gn]) = g {
            active += 1;
            grads[0].axpy(T::one(), &ga);
            grads[q_slot].axpy(T::one(), &gp);
            grads[q_slot].axpy(T::one(), &gn);
        }
    }
    Ok(BatchGradients {
        loss_sum,
        active,
        grads,
    })
}

impl<T: Real> TrainState<T> {
    pub fn new(model: &HashModel, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let networks = (0..config.sharing.network_count())
            .map(|i| model.init_params(config.seed.wrapping_add(i as u64)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            iteration: 0,
            epsilon: epsilon_at(0, config),
            sharing: config.sharing,
            networks,
            loss: LossStats::default(),
        })
    }

    /// Network that encodes queries (P in query-independent mode).
    pub fn query_network(&self) -> &ParamStore<T> {
        &self.networks[0]
    }

    /// Network that encodes database items (Q in query-independent mode).
    pub fn database_network(&self) -> &ParamStore<T> {
        self.networks.last().expect("at least one network")
    }

    pub fn to_bytes(&self, model: &HashModel) -> Vec<u8> {
        let mut out = Vec::new();
        self.networks[0].write_block(&mut out);
        out.extend_from_slice(STATE_MAGIC);
        out.extend_from_slice(&STATE_VERSION.to_le_bytes());
        out.push(match self.sharing {
            SharingMode::FullyShared => 0,
            SharingMode::QueryIndependent => 1,
        });
        out.push(0);
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&self.epsilon.to_le_bytes());
        out.extend_from_slice(&self.loss.last.to_le_bytes());
        out.extend_from_slice(&self.loss.sum.to_le_bytes());
        out.extend_from_slice(&self.loss.count.to_le_bytes());
        let desc = model.to_descriptor();
        out.extend_from_slice(&(desc.len() as u32).to_le_bytes());
        out.extend_from_slice(desc.as_bytes());
        out.push((self.networks.len() - 1) as u8);
        for n in &self.networks[1..] {
            n.write_block(&mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, HashModel)> {
        let mut r = ByteReader::new(bytes);
        let first = ParamStore::read_block(&mut r)?;
        if r.take(4)? != STATE_MAGIC {
            return Err(Error::Format("missing trainer state block".into()));
        }
        let version = r.u16()?;
        if version != STATE_VERSION {
            return Err(Error::Format(format!("unsupported trainer state version {version}")));
        }
        let sharing = match r.u8()? {
            0 => SharingMode::FullyShared,
            1 => SharingMode::QueryIndependent,
            b => return Err(Error::Format(format!("bad sharing mode {b}"))),
        };
        r.u8()?;
        let iteration = r.u64()?;
        let epsilon = r.f64()?;
        let loss = LossStats {
            last: r.f64()?,
            sum: r.f64()?,
            count: r.u64()?,
        };
        let desc_len = r.u32()? as usize;
        let desc = std::str::from_utf8(r.take(desc_len)?)
            .map_err(|_| Error::Format("model descriptor is not UTF-8".into()))?;
        let mut model = HashModel::from_descriptor(desc)?;
        model.head.epsilon = epsilon;
        let extra = r.u8()? as usize;
        let mut networks = vec![first];
        for _ in 0..extra {
            networks.push(ParamStore::read_block(&mut r)?);
        }
        if !r.is_at_end() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        if networks.len() != sharing.network_count() {
            return Err(Error::Format("network count does not match sharing mode".into()));
        }
        for n in &networks {
            let probe = crate::nn::params::ParamGrads::zeros_like(n);
            let expected: ParamStore<T> = model.init_params(0)?;
            expected
                .check_congruent(&probe)
                .map_err(|_| Error::Format("checkpoint parameters do not match the model".into()))?;
        }
        Ok((
            Self {
                iteration,
                epsilon,
                sharing,
                networks,
                loss,
            },
            model,
        ))
    }

    pub fn save(&self, model: &HashModel, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes(model))
    }

    pub fn load(path: &Path) -> Result<(Self, HashModel)> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Bytes per stored value of a checkpoint (4 or 8), read from its header.
pub fn checkpoint_width(bytes: &[u8]) -> Result<usize> {
    if bytes.len() < 8 || &bytes[..4] != crate::nn::params::PARAM_MAGIC {
        return Err(Error::Format("not a checkpoint".into()));
    }
    Ok(bytes[6] as usize)
}

/// Triplets of the mini-batch for `iteration`. Each iteration draws from its
/// own RNG stream, so a resumed run sees the same batches.
pub fn batch_for_iteration(sampler: &TripletSampler, config: &TrainConfig, iteration: u64) -> Result<Vec<Triplet>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(iteration);
    sampler.sample(config.batch_size(), &mut rng)
}

/// One optimizer step on `batch`. Returns the batch mean loss measured
/// before the update.
pub fn train_step<T: Real>(
    model: &HashModel,
    state: &mut TrainState<T>,
    config: &TrainConfig,
    data: &[Tensor<T>],
    batch: &[Triplet],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Infeasible("empty mini-batch".into()));
    }
    let epsilon = epsilon_at(state.iteration, config);
    let lr = learning_rate_at(state.iteration, config);
    let mut bg = batch_gradients(model, &state.networks, data, batch, epsilon, config.loss())?;
    let scale = T::of(1.0 / batch.len() as f64);
    for (net, g) in state.networks.iter_mut().zip(bg.grads.iter_mut()) {
        g.scale(scale);
        sgd_momentum_step(net, g, lr, config.momentum, config.weight_decay)?;
    }
    let loss = bg.loss_sum / batch.len() as f64;
    state.iteration += 1;
    state.epsilon = epsilon_at(state.iteration, config);
    state.loss.last = loss;
    state.loss.sum += loss;
    state.loss.count += 1;
    Ok(loss)
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub iteration: u64,
    pub loss: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
}

pub const LOG_HEADER: &str = "iteration,loss,epsilon,learning_rate";

impl LogRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{}",
            self.iteration, self.loss, self.epsilon, self.learning_rate
        )
    }
}

/// Runs steps until `config.max_iterations`, calling `on_step` after each.
pub fn train<T: Real>(
    model: &HashModel,
    state: &mut TrainState<T>,
    config: &TrainConfig,
    data: &[Tensor<T>],
    labels: &[crate::index::LabelSet],
    mut on_step: impl FnMut(&LogRow, &TrainState<T>) -> Result<()>,
) -> Result<()> {
    config.validate()?;
    if data.len() != labels.len() {
        return Err(Error::LengthMismatch {
            expected: data.len(),
            actual: labels.len(),
        });
    }
    let sampler = TripletSampler::new(labels, config.multilabel)?;
    while state.iteration < config.max_iterations {
        let it = state.iteration;
        let batch = batch_for_iteration(&sampler, config, it)?;
        let loss = train_step(model, state, config, data, &batch)?;
        let row = LogRow {
            iteration: it,
            loss,
            epsilon: epsilon_at(it, config),
            learning_rate: learning_rate_at(it, config),
        };
        on_step(&row, state)?;
    }
    Ok(())
}
