//! Record files, dataset manifests and the PGM dump.
//!
//! A record file is a container with a one-line header (`id=`, `class=`,
//! `split=`, optionally `provenance=`) and two entries: `image` (f32
//! [C,S,S]) and `mask` (u8 [S,S]). The manifest is UTF-8 text, one record
//! per line: `path<TAB>class_id<TAB>split`, with a `#`-prefixed version
//! line on top.

use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::nn::mask::LabelMap;
use crate::rgt1::{Container, RawTensor};
use crate::tensor::Shape;

use super::{Record, Split};

pub const MANIFEST_NAME: &str = "manifest.tsv";
const MANIFEST_VERSION: &str = "# troika-manifest v1";

pub fn save_record(path: &Path, record: &Record) -> Result<()> {
    record.validate()?;
    let mut c = Container::new();
    c.set("id", &record.id);
    c.set("class", record.global_class);
    c.set("split", record.split);
    if let Some(p) = &record.provenance {
        c.set("provenance", p);
    }
    c.push("image", &record.image);
    c.push_raw(
        "mask",
        RawTensor::U8(
            Shape::new(&[record.mask.size, record.mask.size]),
            record.mask.labels.clone(),
        ),
    );
    c.save(path)
}

pub fn load_record(path: &Path) -> Result<Record> {
    let c = Container::load(path)?;
    let image_raw = c.entry("image")?;
    let image = match image_raw {
        RawTensor::F32(..) => image_raw.to_tensor::<f32>(),
        other => {
            return Err(Error::format(format!(
                "record image must be f32, found {:?}",
                other.dtype()
            )))
        }
    };
    let mask_raw = c.entry("mask")?;
    let mask_labels = mask_raw.as_u8()?.to_vec();
    let size = match mask_raw.shape().dims() {
        &[h, w] if h == w => h,
        other => return Err(Error::format(format!("mask shape {other:?} not square"))),
    };
    let record = Record {
        id: c.get("id")?.to_string(),
        image,
        mask: LabelMap::new(size, mask_labels)?,
        global_class: c.get_parsed("class")?,
        split: Split::parse(c.get("split")?)?,
        provenance: c.header.get("provenance").cloned(),
    };
    record.validate()?;
    Ok(record)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub class: usize,
    pub split: Split,
}

#[derive(Debug, Clone, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn validate(&self, n_classes: usize) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(&e.path) {
                return Err(Error::format(format!(
                    "duplicate manifest path {:?}",
                    e.path
                )));
            }
            if e.class >= n_classes {
                return Err(Error::format(format!(
                    "manifest class {} out of range for {} classes",
                    e.class, n_classes
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut f = std::fs::File::create(dir.join(MANIFEST_NAME))?;
        writeln!(f, "{MANIFEST_VERSION}")?;
        for e in &self.entries {
            writeln!(
                f,
                "{}\t{}\t{}",
                e.path.display(),
                e.class,
                e.split
            )?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<DatasetManifest> {
        let text = std::fs::read_to_string(dir.join(MANIFEST_NAME))?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.starts_with('#') || line.is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let (path, class, split) = match (parts.next(), parts.next(), parts.next()) {
                (Some(p), Some(c), Some(s)) => (p, c, s),
                _ => {
                    return Err(Error::format(format!(
                        "manifest line {} is not path<TAB>class<TAB>split",
                        i + 1
                    )))
                }
            };
            entries.push(ManifestEntry {
                path: PathBuf::from(path),
                class: class
                    .parse()
                    .map_err(|_| Error::format(format!("manifest line {}: bad class", i + 1)))?,
                split: Split::parse(split)?,
            });
        }
        Ok(DatasetManifest { entries })
    }
}

/// Write a dataset directory: `records/<id>.rgt` plus the manifest.
pub fn save_dataset(dir: &Path, records: &[Record]) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir.join("records"))?;
    let mut manifest = DatasetManifest::default();
    for r in records {
        let rel = PathBuf::from("records").join(format!("{}.rgt", r.id));
        save_record(&dir.join(&rel), r)?;
        manifest.entries.push(ManifestEntry {
            path: rel,
            class: r.global_class,
            split: r.split,
        });
    }
    manifest.save(dir)?;
    Ok(manifest)
}

/// Read every record named by the manifest in `dir`.
pub fn load_dataset(dir: &Path) -> Result<Vec<Record>> {
    let manifest = DatasetManifest::load(dir)?;
    let mut records = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let r = load_record(&dir.join(&e.path))?;
        if r.global_class != e.class || r.split != e.split {
            return Err(Error::format(format!(
                "record {:?} disagrees with its manifest row",
                e.path
            )));
        }
        records.push(r);
    }
    Ok(records)
}

/// Binary PGM (P5), maxval 255. `values` are [-1, 1] floats mapped linearly
/// onto the gray range.
pub fn write_pgm(path: &Path, values: &[f32], width: usize, height: usize) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::dim(format!(
            "pgm wants {}x{} = {} values, got {}",
            width,
            height,
            width * height,
            values.len()
        )));
    }
    let mut out = Vec::with_capacity(values.len() + 32);
    out.extend_from_slice(format!("P5\n{width} {height}\n255\n").as_bytes());
    for &v in values {
        let g = ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8;
        out.push(g);
    }
    std::fs::write(path, out)?;
    Ok(())
}
