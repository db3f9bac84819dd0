//! Procedural desk-scale dataset with controllable global-class imbalance.
//!
//! Every record is an elliptical "anatomy" region with a handful of lesion
//! blobs drawn into the label mask; image channels are rendered from the
//! mask under the record's class style (intensity gain, sinusoidal texture
//! frequency, additive noise). Classes therefore differ in appearance the
//! way acquisition sites differ, while the mask/image correspondence stays
//! identical — exactly the premise the conditional generator is supposed to
//! exploit.
//!
//! Generation is fully deterministic: each record derives its own RNG
//! stream from (seed, index), so parallel generation is byte-identical to
//! sequential.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::mask::LabelMap;
use crate::tensor::Tensor;

use super::{Record, Split};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassStyle {
    /// Multiplies every rendered intensity.
    pub gain: f64,
    /// Spatial frequency of the sinusoidal texture (cycles per image).
    pub texture_freq: f64,
    /// Additive Gaussian pixel noise.
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapesMedConfig {
    pub n_records: usize,
    pub image_size: usize,
    pub n_classes: usize,
    /// Must sum to 1; records are allotted by floor allocation with the
    /// remainder going to the largest class.
    pub class_proportions: Vec<f64>,
    pub styles: Vec<ClassStyle>,
    /// Lesion labels run 1..=n_labels.
    pub n_labels: usize,
    pub n_modalities: usize,
    /// Inclusive range of lesion blobs per record.
    pub lesion_count: (usize, usize),
    /// Lesion radius range as a fraction of the image size.
    pub lesion_radius: (f64, f64),
    pub seed: u64,
}

impl Default for ShapesMedConfig {
    fn default() -> Self {
        ShapesMedConfig {
            n_records: 100,
            image_size: 64,
            n_classes: 3,
            class_proportions: vec![0.7, 0.2, 0.1],
            styles: vec![
                ClassStyle { gain: 1.0, texture_freq: 2.0, noise_sigma: 0.03 },
                ClassStyle { gain: 0.62, texture_freq: 5.0, noise_sigma: 0.05 },
                ClassStyle { gain: 0.38, texture_freq: 9.0, noise_sigma: 0.08 },
            ],
            n_labels: 2,
            n_modalities: 2,
            lesion_count: (1, 3),
            lesion_radius: (0.06, 0.14),
            seed: 7,
        }
    }
}

impl ShapesMedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_records == 0 {
            return Err(Error::domain("n_records must be positive"));
        }
        if self.image_size < 16 || !self.image_size.is_power_of_two() {
            return Err(Error::domain(format!(
                "image_size must be a power of two >= 16, got {}",
                self.image_size
            )));
        }
        if self.class_proportions.len() != self.n_classes
            || self.styles.len() != self.n_classes
            || self.n_classes == 0
        {
            return Err(Error::domain(format!(
                "class_proportions and styles must list exactly n_classes = {} entries",
                self.n_classes
            )));
        }
        if self.class_proportions.iter().any(|&p| p <= 0.0) {
            return Err(Error::domain("class_proportions must be positive"));
        }
        let sum: f64 = self.class_proportions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::domain(format!(
                "class_proportions must sum to 1, got {sum}"
            )));
        }
        if self.n_labels == 0 || self.n_labels > 254 {
            return Err(Error::domain("n_labels must be in 1..=254"));
        }
        if self.lesion_count.0 == 0 || self.lesion_count.0 > self.lesion_count.1 {
            return Err(Error::domain("lesion_count range must be 1 <= lo <= hi"));
        }
        if self.lesion_radius.0 <= 0.0 || self.lesion_radius.0 > self.lesion_radius.1 {
            return Err(Error::domain("lesion_radius range must be 0 < lo <= hi"));
        }
        Ok(())
    }

    /// Floor allocation of records to classes; remainder to the largest
    /// class. Exact proportions therefore yield exact counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts: Vec<usize> = self
            .class_proportions
            .iter()
            .map(|p| (p * self.n_records as f64).floor() as usize)
            .collect();
        let assigned: usize = counts.iter().sum();
        let largest = self
            .class_proportions
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        counts[largest] += self.n_records - assigned;
        counts
    }

    /// Global class of record `idx` (records are allotted in class blocks).
    pub fn class_of(&self, idx: usize) -> usize {
        let counts = self.class_counts();
        let mut acc = 0;
        for (k, &c) in counts.iter().enumerate() {
            acc += c;
            if idx < acc {
                return k;
            }
        }
        self.n_classes - 1
    }
}

fn derive_seed(base: u64, idx: u64) -> u64 {
    // splitmix64 step keeps per-record streams decorrelated
    let mut z = base ^ idx.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    theta: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.theta.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }
}

fn render_record(cfg: &ShapesMedConfig, idx: usize) -> Record {
    let s = cfg.image_size;
    let sf = s as f64;
    let class = cfg.class_of(idx);
    let style = cfg.styles[class];
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, idx as u64));

    // anatomy ellipse; the tight axis range keeps whole-image intensity a
    // reliable class signature
    let anatomy = Ellipse {
        cy: sf * rng.gen_range(0.47..0.53),
        cx: sf * rng.gen_range(0.47..0.53),
        ry: sf * rng.gen_range(0.31..0.35),
        rx: sf * rng.gen_range(0.31..0.35),
        theta: rng.gen_range(0.0..std::f64::consts::PI),
    };

    let n_lesions = rng.gen_range(cfg.lesion_count.0..=cfg.lesion_count.1);
    let mut lesions = Vec::with_capacity(n_lesions);
    for _ in 0..n_lesions {
        // polar placement keeps the blob center inside the anatomy
        let ang = rng.gen_range(0.0..std::f64::consts::TAU);
        let rad = rng.gen_range(0.0..0.75f64).sqrt();
        let (sa, ca) = ang.sin_cos();
        let cy = anatomy.cy + sa * rad * anatomy.ry;
        let cx = anatomy.cx + ca * rad * anatomy.rx;
        let r1 = sf * rng.gen_range(cfg.lesion_radius.0..=cfg.lesion_radius.1);
        let r2 = sf * rng.gen_range(cfg.lesion_radius.0..=cfg.lesion_radius.1);
        let label = rng.gen_range(1..=cfg.n_labels) as u8;
        lesions.push((
            Ellipse {
                cy,
                cx,
                ry: r1,
                rx: r2,
                theta: rng.gen_range(0.0..std::f64::consts::PI),
            },
            label,
        ));
    }

    let mut labels = vec![0u8; s * s];
    for y in 0..s {
        for x in 0..s {
            for (e, l) in &lesions {
                if e.contains(y as f64 + 0.5, x as f64 + 0.5) {
                    labels[y * s + x] = *l;
                }
            }
        }
    }
    let mask = LabelMap::new(s, labels).unwrap();

    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut image = vec![0f32; cfg.n_modalities * s * s];
    // noise drawn per (modality, pixel) in a fixed order
    for m in 0..cfg.n_modalities {
        let mf = m as f64;
        for y in 0..s {
            for x in 0..s {
                let inside = anatomy.contains(y as f64 + 0.5, x as f64 + 0.5);
                let label = mask.get(y, x);
                let level = if label > 0 {
                    (0.6 + 0.12 * label as f64) * (1.0 - 0.2 * mf)
                } else if inside {
                    0.45 * (1.0 + 0.1 * mf)
                } else {
                    0.05
                };
                let texture = if inside || label > 0 {
                    0.08 * (std::f64::consts::TAU * style.texture_freq
                        * ((x + y) as f64 / sf)
                        + phase)
                        .sin()
                } else {
                    0.0
                };
                let noise: f64 = {
                    use rand_distr::Distribution;
                    rand_distr::Normal::new(0.0, style.noise_sigma)
                        .unwrap()
                        .sample(&mut rng)
                };
                let raw = (style.gain * (level + texture) + noise).clamp(0.0, 1.3);
                image[(m * s + y) * s + x] = (raw / 1.3 * 2.0 - 1.0) as f32;
            }
        }
    }

    Record {
        id: format!("rec_{idx:05}"),
        image: Tensor::new([cfg.n_modalities, s, s], image).unwrap(),
        mask,
        global_class: class,
        split: Split::Train,
        provenance: None,
    }
}

/// Generate the full dataset; deterministic in `cfg.seed` and thread-count
/// independent.
pub fn generate_shapesmed(cfg: &ShapesMedConfig) -> Result<Vec<Record>> {
    cfg.validate()?;
    let records: Vec<Record> = (0..cfg.n_records)
        .into_par_iter()
        .map(|i| render_record(cfg, i))
        .collect();
    for r in &records {
        r.validate()?;
    }
    Ok(records)
}
