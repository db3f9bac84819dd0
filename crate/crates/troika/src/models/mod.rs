//! The three players: generator, discriminator, frozen segmentor.

pub mod discriminator;
pub mod generator;
pub mod segmentor;

pub use discriminator::{Discriminator, DiscriminatorSpec};
pub use generator::{Generator, GeneratorSpec};
pub use segmentor::{FeatureKind, FrozenSegmentor, Segmentor, SegmentorSpec};

use crate::error::{Error, Result};
use crate::rgt1::Container;

/// Checkpoint kind tag stored in the container header.
pub const KIND_KEY: &str = "kind";

pub fn save_checkpoint(path: &std::path::Path, c: &Container) -> Result<()> {
    c.save(path)
}

pub fn load_checkpoint(path: &std::path::Path, expect_kind: &str) -> Result<Container> {
    let c = Container::load(path)?;
    let kind = c.get(KIND_KEY)?;
    if kind != expect_kind {
        return Err(Error::format(format!(
            "checkpoint at {} is `{kind}`, expected `{expect_kind}`",
            path.display()
        )));
    }
    Ok(c)
}
