//! Supervised deep hashing: a convolutional sub-network with a
//! divide-and-encode (or fully-connected) hashing head, trained under a
//! triplet ranking loss and evaluated by Hamming-space retrieval.

pub mod error;
pub mod head;
pub mod index;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objective;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use head::{
    head_backward, head_forward, partition_slices, quantize, quantize_values, ApproximateCode,
    HashHeadSpec, HeadVariant,
};
pub use index::{hamming, pack, radius_search, rank_all, unpack, BitCode, CodeDatabase, LabelSet};
pub use metrics::{
    average_precision, evaluate, mean_average_precision, precision_at_topk,
    precision_recall_curve, precision_within_radius, ApDenominator, EmptyRetrieval, MetricOptions,
    MetricReport, RelevanceRule,
};
pub use model::{HashModel, HeadConfig};
pub use nn::{LayerSpec, NetworkSpec, ParamStore};
pub use objective::{
    hamming_triplet_loss, relaxed_triplet_loss, sample_triplets, triplet_subgradients,
    triplets_from_pairs, LossValue, Triplet, TripletLoss,
};
pub use tensor::{Real, Tensor};
pub use trainer::{
    epsilon_at, sgd_momentum_step, train, train_step, SharingMode, TrainConfig, TrainState,
};

/// Layer configuration reproducing the reference 256x256 sub-network
/// (applied to a 224x224 crop).
pub const REFERENCE_NETWORK: &str = include_str!("../configs/reference.toml");
