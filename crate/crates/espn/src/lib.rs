//! Evolution-strategies training for prototypical networks.
//!
//! The crate trains a 4-block convolutional embedding for few-shot image
//! classification using only forward passes: a population of parameter
//! perturbations is evaluated on an episode, the rewards are combined into
//! a gradient estimate (weighted-sum-of-rewards, NES or finite
//! differences), and the mean model takes a step. A simulated worker pool
//! shards the population and reduces gradients the way a ring AllReduce
//! would, so the distributed semantics can be tested on one machine.
//!
//! Modules, bottom up:
//!
//! * [`rng`] counter-based random streams (reproducible across shardings)
//! * [`tensor`] minimal NCHW tensor
//! * [`nncore`] the embedding network and its parameter layout
//! * [`protonet`] prototypes, episode loss, fitness
//! * [`episodes`] dataset ingestion, augmentation, episode sampling
//! * [`synth`] synthetic stroke-glyph corpus generator
//! * [`es`] populations and gradient estimators
//! * [`dist`] sharded evaluation and gradient reduction
//! * [`trainer`] training/eval loops, sweeps, metrics
//! * [`checkpoint`] parameter serialization
//! * [`costmodel`] analytical memory-cost comparison
//!
//! The `examples/` directory has one runnable example per capability; the
//! `espn` binary wraps the same entry points as subcommands.

pub mod checkpoint;
pub mod costmodel;
pub mod dist;
pub mod episodes;
pub mod error;
pub mod es;
pub mod nncore;
pub mod protonet;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{EspnError, Result};
