//! Finite-difference gradient checks shared by the unit-level tests and the
//! acceptance run. Every check returns the worst norm-wise relative error
//! seen over its trials; points near a kink are redrawn, not skipped.

use hashlab_core::head::{head_backward, head_forward, HashHeadSpec, HeadVariant};
use hashlab_core::nn::{self, output_extent, Channels, LayerSpec, NetworkSpec, ParamStore, Rounding};
use hashlab_core::trainer::batch_gradients;
use hashlab_core::{HashModel, HeadConfig, Tensor, Triplet, TripletLoss};

use super::oracles::{central_diff, rel_error, SplitMix};

pub const STEP: f64 = 1e-5;
pub const KINK_MARGIN: f64 = 1e-4;
pub const HINGE_MARGIN: f64 = 1e-3;

#[derive(Clone, Copy, Debug, Default)]
pub struct CheckStats {
    pub trials: usize,
    pub redrawn: usize,
    pub max_rel: f64,
}

impl CheckStats {
    fn record(&mut self, err: f64) {
        self.trials += 1;
        self.max_rel = self.max_rel.max(err);
    }
}

pub fn flat_params(store: &ParamStore) -> Vec<f64> {
    store.params().iter().flat_map(|p| p.value.data().to_vec()).collect()
}

pub fn set_flat_params(store: &mut ParamStore, flat: &[f64]) {
    let mut off = 0;
    for p in store.params_mut() {
        let n = p.value.len();
        p.value.data_mut().copy_from_slice(&flat[off..off + n]);
        off += n;
    }
    assert_eq!(off, flat.len());
}

fn gaussian(rng: &mut SplitMix, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.normal()).collect()
}

#[derive(Clone, Copy, Debug)]
pub enum InputKind {
    Gaussian,
    /// Values in (0, 1) for threshold layers.
    Unit,
}

pub struct LayerCase {
    pub name: &'static str,
    pub spec: NetworkSpec,
    pub input: InputKind,
}

fn net(input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> NetworkSpec {
    NetworkSpec {
        input_shape,
        layers,
    }
}

/// One small network per layer kind, with configurations that exercise
/// padding, striding and ceil-rounded overhanging windows.
pub fn layer_cases() -> Vec<LayerCase> {
    vec![
        LayerCase {
            name: "conv 3x3/2 pad 1 ceil",
            spec: net(
                vec![2, 6, 5],
                vec![LayerSpec::Conv {
                    kernel: 3,
                    stride: 2,
                    pad: 1,
                    channels: Channels::Fixed(3),
                    rounding: Rounding::Ceil,
                }],
            ),
            input: InputKind::Gaussian,
        },
        LayerCase {
            name: "conv 1x1",
            spec: net(
                vec![3, 4, 4],
                vec![LayerSpec::Conv {
                    kernel: 1,
                    stride: 1,
                    pad: 0,
                    channels: Channels::Fixed(2),
                    rounding: Rounding::Floor,
                }],
            ),
            input: InputKind::Gaussian,
        },
        LayerCase {
            name: "maxpool 3/2 ceil",
            spec: net(
                vec![2, 6, 6],
                vec![LayerSpec::Maxpool {
                    kernel: 3,
                    stride: 2,
                    pad: 0,
                    rounding: Rounding::Ceil,
                }],
            ),
            input: InputKind::Gaussian,
        },
        LayerCase {
            name: "maxpool 3/2 pad 1",
            spec: net(
                vec![2, 5, 5],
                vec![LayerSpec::Maxpool {
                    kernel: 3,
                    stride: 2,
                    pad: 1,
                    rounding: Rounding::Floor,
                }],
            ),
            input: InputKind::Gaussian,
        },
        LayerCase {
            name: "avgpool 3/2 pad 1 ceil",
            spec: net(
                vec![2, 6, 6],
                vec![LayerSpec::Avgpool {
                    kernel: 3,
                    stride: 2,
                    pad: 1,
                    rounding: Rounding::Ceil,
                }],
            ),
            input: InputKind::Gaussian,
        },
        LayerCase {
            name: "fully-connected",
            spec: net(
                vec![2, 3, 3],
                vec![LayerSpec::FullyConnected {
                    channels: Channels::Fixed(4),
                }],
            ),
            input: InputKind::Gaussian,
        },
        LayerCase {
            name: "relu",
            spec: net(vec![3, 4, 4], vec![LayerSpec::Relu]),
            input: InputKind::Gaussian,
        },
        LayerCase {
            name: "sigmoid beta 2.5",
            spec: net(vec![12], vec![LayerSpec::Sigmoid { beta: 2.5 }]),
            input: InputKind::Gaussian,
        },
        LayerCase {
            name: "piecewise threshold eps 0.3",
            spec: net(vec![20], vec![LayerSpec::PiecewiseThreshold { epsilon: 0.3 }]),
            input: InputKind::Unit,
        },
    ]
}

/// Smallest gap between the largest and second-largest value of any
/// pooling window (clipped to the input).
fn min_pool_gap(x: &[f64], (c, h, w): (usize, usize, usize), k: usize, s: usize, pad: usize, r: Rounding) -> f64 {
    let oh = output_extent(h, k, s, pad, r).unwrap();
    let ow = output_extent(w, k, s, pad, r).unwrap();
    let mut gap = f64::INFINITY;
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut vals = Vec::new();
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * s + ky) as isize - pad as isize;
                        let ix = (ox * s + kx) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            vals.push(x[(ch * h + iy as usize) * w + ix as usize]);
                        }
                    }
                }
                vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
                if vals.len() > 1 {
                    gap = gap.min(vals[0] - vals[1]);
                }
            }
        }
    }
    gap
}

/// Whether every kink-bearing layer of `spec` sees inputs at least
/// `KINK_MARGIN` away from its non-differentiable points.
fn clear_of_kinks(spec: &NetworkSpec, activations: &[Tensor]) -> bool {
    for (i, layer) in spec.layers.iter().enumerate() {
        let x = &activations[i];
        let ok = match *layer {
            LayerSpec::Relu => x.data().iter().all(|v| v.abs() > KINK_MARGIN),
            LayerSpec::Maxpool {
                kernel,
                stride,
                pad,
                rounding,
            } => {
                let sh = x.shape();
                min_pool_gap(x.data(), (sh[0], sh[1], sh[2]), kernel, stride, pad, rounding) > KINK_MARGIN
            }
            LayerSpec::PiecewiseThreshold { epsilon } => x.data().iter().all(|&v| {
                (v - (0.5 - epsilon)).abs() > KINK_MARGIN
                    && (v - (0.5 + epsilon)).abs() > KINK_MARGIN
                    && v > KINK_MARGIN
                    && v < 1.0 - KINK_MARGIN
            }),
            _ => true,
        };
        if !ok {
            return false;
        }
    }
    true
}

fn randomize(store: &mut ParamStore, rng: &mut SplitMix) {
    let n = flat_params(store).len();
    set_flat_params(store, &gaussian(rng, n, 0.5));
}

/// Checks input and parameter gradients of `L = <r, f(x)>` for one layer.
pub fn check_layer(case: &LayerCase, trials: usize, seed: u64) -> CheckStats {
    let spec = &case.spec;
    let mut rng = SplitMix(seed);
    let mut stats = CheckStats::default();
    let in_len: usize = spec.input_shape.iter().product();
    let out_len = spec.output_len().unwrap();
    while stats.trials < trials {
        let mut params: ParamStore = nn::init_params(spec, rng.next_u64()).unwrap();
        randomize(&mut params, &mut rng);
        let x: Vec<f64> = match case.input {
            InputKind::Gaussian => gaussian(&mut rng, in_len, 1.0),
            InputKind::Unit => (0..in_len).map(|_| rng.range(0.01, 0.99)).collect(),
        };
        let x = Tensor::new(spec.input_shape.clone(), x).unwrap();
        let (y, cache) = nn::forward(spec, &params, &x).unwrap();
        if !clear_of_kinks(spec, &cache.activations) {
            stats.redrawn += 1;
            continue;
        }
        let r = Tensor::new(y.shape().to_vec(), gaussian(&mut rng, out_len, 1.0)).unwrap();
        let (gx, gp) = nn::backward(spec, &params, &cache, &r).unwrap();
        let objective = |p: &ParamStore, input: &Tensor| -> f64 {
            let (y, _) = nn::forward(spec, p, input).unwrap();
            y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };
        let num_x = central_diff(
            &mut |v| objective(&params, &Tensor::new(spec.input_shape.clone(), v.to_vec()).unwrap()),
            x.data(),
            STEP,
        );
        let mut err = rel_error(gx.data(), &num_x);
        let theta = flat_params(&params);
        if !theta.is_empty() {
            let mut probe = params.clone();
            let num_p = central_diff(
                &mut |v| {
                    set_flat_params(&mut probe, v);
                    objective(&probe, &x)
                },
                &theta,
                STEP,
            );
            err = err.max(rel_error(&gp.flat(), &num_p));
        }
        stats.record(err);
    }
    stats
}

/// Checks feature and weight gradients of `L = <r, head(x)>`.
pub fn check_head(variant: HeadVariant, fc_threshold: bool, trials: usize, seed: u64) -> CheckStats {
    let (d, q) = (23, 5);
    let mut rng = SplitMix(seed);
    let mut stats = CheckStats::default();
    while stats.trials < trials {
        let beta = rng.range(0.5, 3.0);
        let eps = rng.range(0.05, 0.5);
        let mut spec = HashHeadSpec::new(variant, q, d).unwrap().with_beta(beta).unwrap();
        spec.fc_threshold = fc_threshold;
        let w = Tensor::new(spec.weight_shape(), gaussian(&mut rng, spec.weight_shape().iter().product(), 0.5)).unwrap();
        let x = Tensor::from_vec(gaussian(&mut rng, d, 1.0));
        let pre = head_pre_activations(&spec, w.data(), x.data());
        let thresholded = variant == HeadVariant::DivideAndEncode || fc_threshold;
        let near = pre.iter().any(|&c| {
            let s = 1.0 / (1.0 + (-beta * c).exp());
            thresholded && ((s - 0.5 + eps).abs() <= KINK_MARGIN || (s - 0.5 - eps).abs() <= KINK_MARGIN)
        });
        if near {
            stats.redrawn += 1;
            continue;
        }
        let r = gaussian(&mut rng, q, 1.0);
        let (_, cache) = head_forward(&spec, &w, &x, eps).unwrap();
        let (gx, gw) = head_backward(&spec, &w, &cache, &r).unwrap();
        let objective = |w: &[f64], x: &[f64]| -> f64 {
            let w = Tensor::new(spec.weight_shape(), w.to_vec()).unwrap();
            let (code, _) = head_forward(&spec, &w, &Tensor::from_vec(x.to_vec()), eps).unwrap();
            code.values.iter().zip(&r).map(|(a, b)| a * b).sum()
        };
        let num_x = central_diff(&mut |v| objective(w.data(), v), x.data(), STEP);
        let num_w = central_diff(&mut |v| objective(v, x.data()), w.data(), STEP);
        stats.record(rel_error(gx.data(), &num_x).max(rel_error(gw.data(), &num_w)));
    }
    stats
}

/// Pre-activations recomputed from the slice layout.
pub fn head_pre_activations(spec: &HashHeadSpec, w: &[f64], x: &[f64]) -> Vec<f64> {
    match spec.variant {
        HeadVariant::DivideAndEncode => spec
            .slices
            .iter()
            .map(|r| r.clone().map(|j| w[j] * x[j]).sum())
            .collect(),
        HeadVariant::FullyConnected => (0..spec.bits)
            .map(|i| (0..spec.input_len).map(|j| w[i * spec.input_len + j] * x[j]).sum())
            .collect(),
    }
}

/// Tiny conv net used by the end-to-end check: conv, relu, maxpool,
/// 1x1 conv with units per bit, relu, global average pool.
pub fn tiny_network() -> NetworkSpec {
    NetworkSpec::from_toml_str(
        r#"
input_shape = [1, 6, 6]

[[layer]]
kind = "conv"
kernel = 3
pad = 1
channels = 3

[[layer]]
kind = "relu"

[[layer]]
kind = "maxpool"
kernel = 2
stride = 2
rounding = "ceil"

[[layer]]
kind = "conv"
kernel = 1
channels = { per_bit = 2 }

[[layer]]
kind = "relu"

[[layer]]
kind = "avgpool"
kernel = 3
"#,
    )
    .unwrap()
}

/// Summed relaxed loss of a mini-batch against every parameter of every
/// network, through network, head and hinge. `networks` is 1 (shared) or
/// 2 (query-independent).
pub fn check_end_to_end(networks: usize, trials: usize, seed: u64) -> CheckStats {
    let bits = 4;
    let model = HashModel::new(&tiny_network(), &HeadConfig::default(), bits).unwrap();
    let loss = TripletLoss::default();
    let mut rng = SplitMix(seed);
    let mut stats = CheckStats::default();
    let n_items = 5;
    while stats.trials < trials {
        let eps = rng.range(0.2, 0.5);
        let mut stores: Vec<ParamStore> = (0..networks)
            .map(|_| model.init_params(rng.next_u64()).unwrap())
            .collect();
        for s in stores.iter_mut() {
            randomize(s, &mut rng);
        }
        let data: Vec<Tensor> = (0..n_items)
            .map(|_| Tensor::new(vec![1, 6, 6], gaussian(&mut rng, 36, 1.0)).unwrap())
            .collect();
        let batch: Vec<Triplet> = (0..3)
            .map(|_| {
                let a = rng.below(n_items as u64) as usize;
                let p = (a + 1 + rng.below(n_items as u64 - 1) as usize) % n_items;
                let n = (a + 1 + rng.below(n_items as u64 - 1) as usize) % n_items;
                Triplet::new(a, p, n)
            })
            .collect();
        if !pipeline_clear(&model, &stores, &data, &batch, eps, loss) {
            stats.redrawn += 1;
            continue;
        }
        let bg = batch_gradients(&model, &stores, &data, &batch, eps, loss).unwrap();
        if bg.active == 0 {
            stats.redrawn += 1;
            continue;
        }
        let analytic: Vec<f64> = bg.grads.iter().flat_map(|g| g.flat()).collect();
        let sizes: Vec<usize> = stores.iter().map(|s| flat_params(s).len()).collect();
        let theta: Vec<f64> = stores.iter().flat_map(flat_params).collect();
        let mut probe = stores.clone();
        let numeric = central_diff(
            &mut |v| {
                let mut off = 0;
                for (s, &n) in probe.iter_mut().zip(&sizes) {
                    set_flat_params(s, &v[off..off + n]);
                    off += n;
                }
                batch_gradients(&model, &probe, &data, &batch, eps, loss).unwrap().loss_sum
            },
            &theta,
            STEP,
        );
        stats.record(rel_error(&analytic, &numeric));
    }
    stats
}

fn pipeline_clear(
    model: &HashModel,
    stores: &[ParamStore],
    data: &[Tensor],
    batch: &[Triplet],
    eps: f64,
    loss: TripletLoss,
) -> bool {
    let head_w = |s: &ParamStore| s.layers.last().unwrap().as_ref().unwrap().weight.value.data().to_vec();
    let code = |s: &ParamStore, i: usize| -> Option<Vec<f64>> {
        let (feat, cache) = nn::forward(&model.network, s, &data[i]).unwrap();
        if !clear_of_kinks(&model.network, &cache.activations) {
            return None;
        }
        let pre = head_pre_activations(&model.head, &head_w(s), feat.data());
        let beta = model.head.beta;
        let sig: Vec<f64> = pre.iter().map(|&c| 1.0 / (1.0 + (-beta * c).exp())).collect();
        if sig
            .iter()
            .any(|s| (s - 0.5 + eps).abs() <= KINK_MARGIN || (s - 0.5 - eps).abs() <= KINK_MARGIN)
        {
            return None;
        }
        Some(model.forward(s, &data[i], eps).unwrap().0.values)
    };
    let p = &stores[0];
    let q = stores.last().unwrap();
    for t in batch {
        let (Some(a), Some(pos), Some(neg)) = (code(p, t.anchor), code(q, t.positive), code(q, t.negative)) else {
            return false;
        };
        if loss.slack(&a, &pos, &neg).unwrap().abs() <= HINGE_MARGIN {
            return false;
        }
    }
    true
}
