//! One-shot style adaptation at the feature level.
//!
//! The pieces, bottom up:
//!
//! - [`tensor`]: rank-4 feature maps `(B, C, H, W)`.
//! - [`stats`]: per-channel spatial mean/std and instance normalization,
//!   with exact hand-written gradients.
//! - [`style`]: AdaIN and its noise-perturbed variant, which scales a target
//!   style's statistics by multiplicative Gaussian noise `N(1, std^2)` drawn
//!   fresh per application, per instance, per channel.
//! - [`prototype`]: style prototypes captured once from one (or a few)
//!   target-domain images at named backbone layers, plus serialization.
//! - [`backbone`]: a small conv classifier with a frozen stem and named
//!   insertion points where the transform is applied in-flight.
//! - [`domains`]: procedural source/target datasets with a controllable,
//!   content-preserving style gap (fog blend + blur).
//! - [`train`]: the deterministic training/evaluation harness that applies
//!   the transform probabilistically during training and never at eval.

pub mod backbone;
pub mod domains;
pub mod error;
pub mod image;
pub mod prototype;
pub mod rng;
pub mod stats;
pub mod style;
pub mod tensor;
pub mod train;

pub use backbone::{build_backbone, ArchConfig, Backbone, InsertionPoint, INSERTION_POINTS};
pub use domains::{apply_fog, generate_dataset, Dataset, DomainSpec, StyleParams};
pub use error::{Error, Result};
pub use image::Image;
pub use prototype::{
    average_prototypes, extract_prototype, load_prototype, save_prototype, style_gap,
    StylePrototype,
};
pub use rng::SeededRng;
pub use stats::{channel_mean, channel_std, channel_stats, instance_normalize, ChannelStats};
pub use style::{adain, ossa, sample_perturbation, NoiseSpec};
pub use tensor::FeatureMap;
pub use train::{
    evaluate, forward_with_ossa, train, DataConfig, EvalMetrics, OssaConfig, PrototypeSource,
    RunReport, TrainConfig,
};
