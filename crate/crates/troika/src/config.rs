//! Flat key=value run configuration.
//!
//! One file configures the dataset, the three model specs and the training
//! schedule. Parsing is strict: unknown keys and malformed values are
//! errors that name the offending key and line. `#` starts a comment.

use crate::data::{ClassStyle, ShapesMedConfig};
use crate::error::{Error, Result};
use crate::models::{DiscriminatorSpec, FeatureKind, GeneratorSpec, SegmentorSpec};
use crate::nn::spade::SPADE_HIDDEN;
use crate::pipeline::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // dataset
    pub n_records: usize,
    pub image_size: usize,
    pub n_classes: usize,
    pub class_proportions: Vec<f64>,
    pub class_gains: Vec<f64>,
    pub class_texture_freqs: Vec<f64>,
    pub class_noise_sigmas: Vec<f64>,
    pub n_labels: usize,
    pub n_modalities: usize,
    pub lesion_count_min: usize,
    pub lesion_count_max: usize,
    pub lesion_radius_min: f64,
    pub lesion_radius_max: f64,
    pub data_seed: u64,
    // generator
    pub gen_base_channels: usize,
    pub gen_min_channels: usize,
    pub gen_embed_dim: usize,
    pub gen_spade_hidden: usize,
    pub gen_n_upsamples: usize,
    // discriminator
    pub disc_width1: usize,
    pub disc_width2: usize,
    // segmentor
    pub seg_base_channels: usize,
    pub seg_stage_depths: Vec<usize>,
    pub seg_feature_kind: FeatureKind,
    // training
    pub epochs_seg: usize,
    pub epochs_gan: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub lr_seg: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub train_seed: u64,
    pub third_player: bool,
    pub max_gan_steps: usize,
    pub max_seg_steps: usize,
    pub lambda_fm: f64,
    pub lambda_jaccard: f64,
    // experiment
    pub n_repeats: usize,
    pub test_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            n_records: 100,
            image_size: 64,
            n_classes: 3,
            class_proportions: vec![0.7, 0.2, 0.1],
            class_gains: vec![1.0, 0.62, 0.38],
            class_texture_freqs: vec![2.0, 5.0, 9.0],
            class_noise_sigmas: vec![0.03, 0.05, 0.08],
            n_labels: 2,
            n_modalities: 2,
            lesion_count_min: 1,
            lesion_count_max: 3,
            lesion_radius_min: 0.06,
            lesion_radius_max: 0.14,
            data_seed: 7,
            gen_base_channels: 128,
            gen_min_channels: 32,
            gen_embed_dim: 64,
            gen_spade_hidden: SPADE_HIDDEN,
            gen_n_upsamples: 3,
            disc_width1: 32,
            disc_width2: 64,
            seg_base_channels: 16,
            seg_stage_depths: vec![1, 1, 1, 1],
            seg_feature_kind: FeatureKind::Probability,
            epochs_seg: 100,
            epochs_gan: 80,
            lr_g: 1e-4,
            lr_d: 4e-4,
            lr_seg: 1e-3,
            beta1: 0.0,
            beta2: 0.9,
            batch_size: 4,
            train_seed: 1,
            third_player: true,
            max_gan_steps: 0,
            max_seg_steps: 0,
            lambda_fm: 10.0,
            lambda_jaccard: 1.0,
            n_repeats: 3,
            test_fraction: 0.1,
        }
    }
}

fn parse_list<T: std::str::FromStr>(v: &str) -> std::result::Result<Vec<T>, ()> {
    v.split(',').map(|s| s.trim().parse().map_err(|_| ())).collect()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::domain(format!(
                    "config line {line_no}: expected key=value, got `{line}`"
                )));
            };
            let key = key.trim();
            let value = value.trim();
            cfg.set(key, value).map_err(|e| {
                Error::domain(format!("config line {line_no}, key `{key}`: {e}"))
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        macro_rules! p {
            ($field:ident) => {
                self.$field = v.parse().map_err(|_| format!("cannot parse `{v}`"))?
            };
        }
        macro_rules! pl {
            ($field:ident) => {
                self.$field = parse_list(v).map_err(|_| format!("cannot parse list `{v}`"))?
            };
        }
        match key {
            "data.n_records" => p!(n_records),
            "data.image_size" => p!(image_size),
            "data.n_classes" => p!(n_classes),
            "data.class_proportions" => pl!(class_proportions),
            "data.class_gains" => pl!(class_gains),
            "data.class_texture_freqs" => pl!(class_texture_freqs),
            "data.class_noise_sigmas" => pl!(class_noise_sigmas),
            "data.n_labels" => p!(n_labels),
            "data.n_modalities" => p!(n_modalities),
            "data.lesion_count_min" => p!(lesion_count_min),
            "data.lesion_count_max" => p!(lesion_count_max),
            "data.lesion_radius_min" => p!(lesion_radius_min),
            "data.lesion_radius_max" => p!(lesion_radius_max),
            "data.seed" => p!(data_seed),
            "gen.base_channels" => p!(gen_base_channels),
            "gen.min_channels" => p!(gen_min_channels),
            "gen.embed_dim" => p!(gen_embed_dim),
            "gen.spade_hidden" => p!(gen_spade_hidden),
            "gen.n_upsamples" => p!(gen_n_upsamples),
            "disc.width1" => p!(disc_width1),
            "disc.width2" => p!(disc_width2),
            "seg.base_channels" => p!(seg_base_channels),
            "seg.stage_depths" => pl!(seg_stage_depths),
            "seg.feature_kind" => {
                self.seg_feature_kind = FeatureKind::parse(v).map_err(|e| e.to_string())?
            }
            "train.epochs_seg" => p!(epochs_seg),
            "train.epochs_gan" => p!(epochs_gan),
            "train.lr_g" => p!(lr_g),
            "train.lr_d" => p!(lr_d),
            "train.lr_seg" => p!(lr_seg),
            "train.beta1" => p!(beta1),
            "train.beta2" => p!(beta2),
            "train.batch_size" => p!(batch_size),
            "train.seed" => p!(train_seed),
            "train.third_player" => p!(third_player),
            "train.max_gan_steps" => p!(max_gan_steps),
            "train.max_seg_steps" => p!(max_seg_steps),
            "train.lambda_fm" => p!(lambda_fm),
            "train.lambda_jaccard" => p!(lambda_jaccard),
            "exp.n_repeats" => p!(n_repeats),
            "exp.test_fraction" => p!(test_fraction),
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.shapesmed().validate()?;
        self.generator_spec().validate()?;
        self.segmentor_spec().validate()?;
        if self.batch_size == 0 {
            return Err(Error::domain("train.batch_size must be >= 1"));
        }
        if self.epochs_seg == 0 || self.epochs_gan == 0 {
            return Err(Error::domain("epoch counts must be positive"));
        }
        Ok(())
    }

    pub fn shapesmed(&self) -> ShapesMedConfig {
        let styles = (0..self.n_classes.min(self.class_gains.len()))
            .map(|k| ClassStyle {
                gain: self.class_gains[k],
                texture_freq: *self.class_texture_freqs.get(k).unwrap_or(&3.0),
                noise_sigma: *self.class_noise_sigmas.get(k).unwrap_or(&0.05),
            })
            .collect();
        ShapesMedConfig {
            n_records: self.n_records,
            image_size: self.image_size,
            n_classes: self.n_classes,
            class_proportions: self.class_proportions.clone(),
            styles,
            n_labels: self.n_labels,
            n_modalities: self.n_modalities,
            lesion_count: (self.lesion_count_min, self.lesion_count_max),
            lesion_radius: (self.lesion_radius_min, self.lesion_radius_max),
            seed: self.data_seed,
        }
    }

    pub fn generator_spec(&self) -> GeneratorSpec {
        GeneratorSpec {
            image_size: self.image_size,
            n_upsamples: self.gen_n_upsamples,
            n_modalities: self.n_modalities,
            n_labels: self.n_labels,
            n_classes: self.n_classes,
            base_channels: self.gen_base_channels,
            min_channels: self.gen_min_channels,
            embed_dim: self.gen_embed_dim,
            spade_hidden: self.gen_spade_hidden,
        }
    }

    pub fn segmentor_spec(&self) -> SegmentorSpec {
        SegmentorSpec {
            in_channels: self.n_modalities,
            n_labels: self.n_labels,
            base_channels: self.seg_base_channels,
            stage_depths: self.seg_stage_depths.clone(),
            feature_kind: self.seg_feature_kind,
        }
    }

    pub fn discriminator_spec(&self) -> DiscriminatorSpec {
        let feature_ch = self.segmentor_spec().feature_channels();
        DiscriminatorSpec {
            in_channels: (self.n_labels + 1) + self.n_modalities + feature_ch,
            width1: self.disc_width1,
            width2: self.disc_width2,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs_seg: self.epochs_seg,
            epochs_gan: self.epochs_gan,
            lr_g: self.lr_g,
            lr_d: self.lr_d,
            lr_seg: self.lr_seg,
            beta1: self.beta1,
            beta2: self.beta2,
            batch_size: self.batch_size,
            seed: self.train_seed,
            third_player: self.third_player,
            max_gan_steps: self.max_gan_steps,
            max_seg_steps: self.max_seg_steps,
            lambda_fm: self.lambda_fm,
            lambda_jaccard: self.lambda_jaccard,
        }
    }

    /// Canonical text form: every key, sorted, one per line. This is what
    /// gets fingerprinted.
    pub fn canonical_text(&self) -> String {
        let join = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        let joinu = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut lines = vec![
            format!("data.class_gains={}", join(&self.class_gains)),
            format!("data.class_noise_sigmas={}", join(&self.class_noise_sigmas)),
            format!("data.class_proportions={}", join(&self.class_proportions)),
            format!("data.class_texture_freqs={}", join(&self.class_texture_freqs)),
            format!("data.image_size={}", self.image_size),
            format!("data.lesion_count_max={}", self.lesion_count_max),
            format!("data.lesion_count_min={}", self.lesion_count_min),
            format!("data.lesion_radius_max={}", self.lesion_radius_max),
            format!("data.lesion_radius_min={}", self.lesion_radius_min),
            format!("data.n_classes={}", self.n_classes),
            format!("data.n_labels={}", self.n_labels),
            format!("data.n_modalities={}", self.n_modalities),
            format!("data.n_records={}", self.n_records),
            format!("data.seed={}", self.data_seed),
            format!("disc.width1={}", self.disc_width1),
            format!("disc.width2={}", self.disc_width2),
            format!("exp.n_repeats={}", self.n_repeats),
            format!("exp.test_fraction={}", self.test_fraction),
            format!("gen.base_channels={}", self.gen_base_channels),
            format!("gen.embed_dim={}", self.gen_embed_dim),
            format!("gen.min_channels={}", self.gen_min_channels),
            format!("gen.n_upsamples={}", self.gen_n_upsamples),
            format!("gen.spade_hidden={}", self.gen_spade_hidden),
            format!("seg.base_channels={}", self.seg_base_channels),
            format!("seg.feature_kind={}", self.seg_feature_kind),
            format!("seg.stage_depths={}", joinu(&self.seg_stage_depths)),
            format!("train.batch_size={}", self.batch_size),
            format!("train.beta1={}", self.beta1),
            format!("train.beta2={}", self.beta2),
            format!("train.epochs_gan={}", self.epochs_gan),
            format!("train.epochs_seg={}", self.epochs_seg),
            format!("train.lambda_fm={}", self.lambda_fm),
            format!("train.lambda_jaccard={}", self.lambda_jaccard),
            format!("train.lr_d={}", self.lr_d),
            format!("train.lr_g={}", self.lr_g),
            format!("train.lr_seg={}", self.lr_seg),
            format!("train.max_gan_steps={}", self.max_gan_steps),
            format!("train.max_seg_steps={}", self.max_seg_steps),
            format!("train.seed={}", self.train_seed),
            format!("train.third_player={}", self.third_player),
        ];
        lines.sort();
        lines.join("\n")
    }

    /// SHA-256 of the canonical text; reports carry this to prove two runs
    /// used the same configuration.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.canonical_text().as_bytes());
        format!("{:x}", h.finalize())[..16].to_string()
    }
}
