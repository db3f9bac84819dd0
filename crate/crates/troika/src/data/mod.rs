//! Dataset model: records, manifests, on-disk formats, the procedural
//! dataset generator and the split protocol.

pub mod record;
pub mod shapesmed;
pub mod split;

pub use record::{load_record, save_record, write_pgm, DatasetManifest, ManifestEntry};
pub use shapesmed::{generate_shapesmed, ClassStyle, ShapesMedConfig};
pub use split::split_protocol;

use crate::error::{Error, Result};
use crate::nn::mask::LabelMap;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::format(format!("unknown split tag `{other}`"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// One training sample: image stack, label mask, global class, split tag.
/// Synthetic records also carry the id of the real record whose mask
/// conditioned them.
#[derive(Debug, Clone)]
pub struct Record {
    pub id: String,
    /// [C_mod, S, S], values in [-1, 1]. Stored as f32 on disk.
    pub image: Tensor<f32>,
    pub mask: LabelMap,
    pub global_class: usize,
    pub split: Split,
    pub provenance: Option<String>,
}

impl Record {
    pub fn validate(&self) -> Result<()> {
        let dims = self.image.shape().dims();
        let (c, h, w) = match dims {
            &[c, h, w] => (c, h, w),
            other => {
                return Err(Error::dim(format!(
                    "record image must be [C,S,S], got {other:?}"
                )))
            }
        };
        if c == 0 || h != w || h != self.mask.size {
            return Err(Error::dim(format!(
                "record image {c}x{h}x{w} does not match mask size {}",
                self.mask.size
            )));
        }
        if !self.image.all_finite() {
            return Err(Error::numeric(format!(
                "record {} has non-finite image",
                self.id
            )));
        }
        if !self.mask.labels.contains(&0) {
            return Err(Error::domain(format!(
                "record {} mask has no background pixel",
                self.id
            )));
        }
        Ok(())
    }

    pub fn image_size(&self) -> usize {
        self.mask.size
    }

    pub fn n_modalities(&self) -> usize {
        self.image.shape()[0]
    }
}
