//! The book under `book/` is the narrative documentation of the workspace;
//! this crate exists so `cargo test` compiles and runs every code block in
//! it as a doctest, keeping the prose and the API in lockstep.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/tensors-and-gradients.md")]
pub mod tensors_and_gradients {}

#[doc = include_str!("../../../book/src/conditional-layers.md")]
pub mod conditional_layers {}

#[doc = include_str!("../../../book/src/three-players.md")]
pub mod three_players {}

#[doc = include_str!("../../../book/src/losses-and-metrics.md")]
pub mod losses_and_metrics {}

#[doc = include_str!("../../../book/src/synthetic-data.md")]
pub mod synthetic_data {}

#[doc = include_str!("../../../book/src/augmentation-strategies.md")]
pub mod augmentation_strategies {}

#[doc = include_str!("../../../book/src/paired-statistics.md")]
pub mod paired_statistics {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
