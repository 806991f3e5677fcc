//! Contrastive information-bottleneck hashing.
//!
//! Learns compact binary codes for feature vectors with a contrastive loss
//! applied directly to stochastic Bernoulli codes (straight-through
//! gradients), optionally regularized by a symmetric Bernoulli KL term that
//! pulls the two views' code distributions together. Ships with a bit-packed
//! Hamming retrieval engine, standard retrieval metrics, and non-learned
//! baselines.

pub mod baselines;
pub mod binarizer;
pub mod dataio;
pub mod encoder;
pub mod error;
pub mod loss;
pub mod matrix;
pub mod retrieval;
pub mod stream;
pub mod trainer;
pub mod views;

pub use binarizer::{
    binarize_inference, sample_st, sigmoid, soft_forward, st_backward, CodeProbabilities,
    DeterministicCode, StochasticCode,
};
pub use dataio::{FeatureDataset, LabelSet, SyntheticSpec};
pub use encoder::{AdamConfig, AdamState, EncoderParams, ForwardTrace};
pub use error::{Error, Result};
pub use loss::{bernoulli_kl, cib_loss, cosine_sim, ntxent, LossConfig, LossOutput};
pub use matrix::Matrix;
pub use retrieval::{PackedCodes, PrPoint, RankedList, Relevance};
pub use trainer::{GradCheckConfig, GradCheckReport, Mode, TrainConfig, TrainReport};
pub use views::{make_views, ViewConfig, ViewPairBatch};
