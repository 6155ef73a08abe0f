//! Identity verification by metric learning.
//!
//! An encoder maps feature vectors to embeddings and is trained with a
//! triplet hinge loss so that records of the same patient land close
//! together. Pairs are then scored by squared embedding distance and
//! summarized with ROC/AUROC/EER; linear probes on the frozen embeddings
//! measure which attributes the representation exposes.
//!
//! Modules:
//! - [`dataset`]: records, CSV manifests, patient-disjoint splits, synthetic data.
//! - [`encoder`]: the MLP embedding network and its checkpoints.
//! - [`metric`]: distance, triplet loss and gradients, triplet mining.
//! - [`trainer`]: mini-batch SGD over mined triplets.
//! - [`eval`]: pair construction, scoring, ROC/AUROC/EER, thresholds.
//! - [`probe`]: linear probes on frozen embeddings.
//! - [`config`] and [`pipeline`]: the file-driven stages used by the CLI.

pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fsutil;
pub mod metric;
pub mod pipeline;
pub mod probe;
pub mod seeds;
pub mod trainer;

pub use dataset::{DataSet, Record, SplitSpec, SyntheticConfig};
pub use encoder::{Embed, EncoderConfig, EncoderParams, RawFeatures};
pub use error::{Error, Result};
pub use eval::{PairSetting, VerificationReport};
pub use metric::{MiningStrategy, Triplet};
pub use probe::{LinearProbe, ProbeConfig, ProbeReport};
pub use trainer::{TrainConfig, TrainHistory};
