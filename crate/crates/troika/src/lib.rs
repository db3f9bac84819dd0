//! Conditional adversarial augmentation for segmentation datasets.
//!
//! The crate implements a three-player training scheme: a generator
//! synthesizes images from a segmentation mask plus a global class id
//! (e.g. acquisition site or lesion type), a multiscale patch discriminator
//! judges them, and a segmentor — trained beforehand and frozen during the
//! game — feeds its feature maps to the discriminator so that synthesis is
//! steered toward segmentation-relevant structure. Synthetic images inherit
//! their conditioning mask as a free ground-truth label, which makes them
//! directly usable to rebalance skewed datasets.
//!
//! Everything runs on a small, self-contained reverse-mode autodiff core
//! ([`graph`]) over dense tensors ([`tensor`]); there is no GPU path. The
//! [`pipeline`] module ties the pieces into the measurement protocol
//! (repeated 90/10 splits, per-class Dice, paired Wilcoxon tests) and the
//! `troika` CLI exposes it as batch commands.
//!
//! See the book under `book/` for a guided tour; its code snippets are
//! compiled as doctests.

pub mod config;
pub mod data;
pub mod error;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod rgt1;
pub mod selfcheck;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, Node};
pub use tensor::{Dtype, Scalar, Shape, Tensor};
