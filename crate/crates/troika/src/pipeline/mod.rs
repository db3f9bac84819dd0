//! End-to-end orchestration: segmentor pretraining, the three-player
//! adversarial game, synthesis strategies, augmented retraining and report
//! assembly.

pub mod experiment;
pub mod report;

pub use experiment::{run_dilemma_comparison, run_experiment, Strategy};
pub use report::ExperimentReport;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Record, Split};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::{feature_matching, hinge_loss_d, hinge_loss_g, jaccard_ce_loss};
use crate::metrics::dice_foreground_mean;
use crate::models::{
    Discriminator, DiscriminatorSpec, FrozenSegmentor, Generator, GeneratorSpec, Segmentor,
    SegmentorSpec,
};
use crate::nn::mask::{one_hot_batch, LabelMap};
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs_seg: usize,
    pub epochs_gan: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub lr_seg: f64,
    /// Adam betas for the adversarial game.
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub third_player: bool,
    /// Optional hard caps on optimizer steps (0 = epochs decide).
    pub max_gan_steps: usize,
    pub max_seg_steps: usize,
    pub lambda_fm: f64,
    pub lambda_jaccard: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_seg: 100,
            epochs_gan: 80,
            lr_g: 1e-4,
            lr_d: 4e-4,
            lr_seg: 1e-3,
            beta1: 0.0,
            beta2: 0.9,
            batch_size: 4,
            seed: 1,
            third_player: true,
            max_gan_steps: 0,
            max_seg_steps: 0,
            lambda_fm: 10.0,
            lambda_jaccard: 1.0,
        }
    }
}

fn mix_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0xD6E8_FEB8_6659_FD93);
    z = (z ^ (z >> 32)).wrapping_mul(0xD6E8_FEB8_6659_FD93);
    z ^ (z >> 32)
}

// -- batch assembly ---------------------------------------------------------

pub fn image_batch<T: Scalar>(records: &[&Record]) -> Result<Tensor<T>> {
    if records.is_empty() {
        return Err(Error::domain("empty batch"));
    }
    let (c, s) = (records[0].n_modalities(), records[0].image_size());
    let mut data = Vec::with_capacity(records.len() * c * s * s);
    for r in records {
        if r.n_modalities() != c || r.image_size() != s {
            return Err(Error::dim("records in a batch must share shape"));
        }
        data.extend(r.image.data().iter().map(|&v| T::from_f64(v as f64)));
    }
    Tensor::new([records.len(), c, s, s], data)
}

pub fn target_batch<T: Scalar>(records: &[&Record], n_labels: usize) -> Result<Tensor<T>> {
    let masks: Vec<&LabelMap> = records.iter().map(|r| &r.mask).collect();
    one_hot_batch(&masks, n_labels)
}

// -- segmentor training -----------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct SegStepLoss {
    pub step: usize,
    pub total: f64,
    pub cross_entropy: f64,
    pub jaccard_term: f64,
}

/// Adam-train a fresh segmentor on `records`. No augmentations are applied
/// beyond whatever synthetic records the caller already mixed in.
pub fn train_segmentor<T: Scalar>(
    records: &[&Record],
    spec: &SegmentorSpec,
    cfg: &TrainConfig,
) -> Result<(Segmentor<T>, Vec<SegStepLoss>)> {
    if records.is_empty() {
        return Err(Error::domain("train_segmentor on empty set"));
    }
    let seg = Segmentor::<T>::new(spec.clone(), mix_seed(cfg.seed, 101))?;
    train_segmentor_warm(seg, records, cfg)
}

/// Continue training an existing segmentor (used by the warm-started arms).
pub fn train_segmentor_warm<T: Scalar>(
    mut seg: Segmentor<T>,
    records: &[&Record],
    cfg: &TrainConfig,
) -> Result<(Segmentor<T>, Vec<SegStepLoss>)> {
    let n_labels = seg.spec.n_labels;
    let mut opt = AdamState::new(AdamConfig {
        lr: cfg.lr_seg,
        ..AdamConfig::new(cfg.lr_seg)
    });
    let mut trace = Vec::new();
    let mut step = 0usize;
    'epochs: for epoch in 0..cfg.epochs_seg {
        let mut order: Vec<usize> = (0..records.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 7000 + epoch as u64));
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Record> = chunk.iter().map(|&i| records[i]).collect();
            let images = image_batch::<T>(&batch)?;
            let targets = target_batch::<T>(&batch, n_labels)?;
            let mut g = Graph::<T>::new();
            let x = g.constant(images);
            let (logits, bound) = seg.forward(&mut g, x, true)?;
            let parts = jaccard_ce_loss(&mut g, logits, &targets, cfg.lambda_jaccard)?;
            let total = g.value(parts.total).item()?.to_f64();
            if !total.is_finite() {
                return Err(Error::numeric(format!(
                    "segmentor training diverged at step {step}"
                )));
            }
            trace.push(SegStepLoss {
                step,
                total,
                cross_entropy: g.value(parts.cross_entropy).item()?.to_f64(),
                jaccard_term: g.value(parts.jaccard_term).item()?.to_f64(),
            });
            g.backward(parts.total)
                .map_err(|e| annotate_step(e, step))?;
            let grads = bound.grads(&g);
            drop(g);
            opt.step(&mut seg.params.params, &grads)
                .map_err(|e| annotate_step(e, step))?;
            step += 1;
            if cfg.max_seg_steps > 0 && step >= cfg.max_seg_steps {
                break 'epochs;
            }
        }
    }
    Ok((seg, trace))
}

fn annotate_step(e: Error, step: usize) -> Error {
    match e {
        Error::Numeric(m) => Error::numeric(format!("{m} (at step {step})")),
        other => other,
    }
}

// -- the adversarial game ---------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct GanStepLoss {
    pub step: usize,
    pub d_loss: f64,
    pub g_hinge: f64,
    pub g_fm: f64,
}

pub struct GanOutcome<T> {
    pub generator: Generator<T>,
    pub discriminator: Discriminator<T>,
    pub trace: Vec<GanStepLoss>,
    pub frozen_checksum_before: String,
    pub frozen_checksum_after: String,
}

/// Train generator + discriminator against a frozen segmentor. One D step
/// then one G step per batch. With `cfg.third_player` off, the segmentor
/// features are replaced by a zero tensor of the same shape (the ablation
/// arm); the frozen model itself is untouched either way.
pub fn train_gan<T: Scalar>(
    records: &[&Record],
    frozen: &FrozenSegmentor<T>,
    gen_spec: &GeneratorSpec,
    disc_spec: &DiscriminatorSpec,
    cfg: &TrainConfig,
) -> Result<GanOutcome<T>> {
    if records.is_empty() {
        return Err(Error::domain("train_gan on empty set"));
    }
    let checksum_before = frozen.checksum();
    let mut gen = Generator::<T>::new(*gen_spec, mix_seed(cfg.seed, 201))?;
    let mut disc = Discriminator::<T>::new(*disc_spec, mix_seed(cfg.seed, 202))?;
    let mut opt_g = AdamState::new(AdamConfig {
        lr: cfg.lr_g,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: 1e-8,
    });
    let mut opt_d = AdamState::new(AdamConfig {
        lr: cfg.lr_d,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: 1e-8,
    });
    let n_labels = gen_spec.n_labels;
    let feat_ch = frozen.spec().feature_channels();
    let s = gen_spec.image_size;

    let mut trace = Vec::new();
    let mut step = 0usize;
    'epochs: for epoch in 0..cfg.epochs_gan {
        let mut order: Vec<usize> = (0..records.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 9000 + epoch as u64));
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Record> = chunk.iter().map(|&i| records[i]).collect();
            let masks: Vec<&LabelMap> = batch.iter().map(|r| &r.mask).collect();
            let classes: Vec<usize> = batch.iter().map(|r| r.global_class).collect();
            let images = image_batch::<T>(&batch)?;
            let mask_t = one_hot_batch::<T>(&masks, n_labels)?;
            let n = batch.len();
            let zero_feats = || Tensor::<T>::zeros([n, feat_ch, s, s]);

            // ---- discriminator step ----
            let d_loss = {
                let mut g = Graph::<T>::new();
                let (fake, _) = gen.forward(&mut g, &masks, &classes, false, false)?;
                let mask_node = g.constant(mask_t.clone());
                let real_node = g.constant(images.clone());
                let (feats_real, feats_fake) = if cfg.third_player {
                    (
                        frozen.features(&mut g, real_node)?,
                        frozen.features(&mut g, fake)?,
                    )
                } else {
                    (g.constant(zero_feats()), g.constant(zero_feats()))
                };
                let (out_real, bound_d) =
                    disc.forward(&mut g, mask_node, real_node, feats_real, true, true)?;
                let out_fake =
                    disc.forward_bound(&mut g, &bound_d, mask_node, fake, feats_fake, false)?;
                let loss = hinge_loss_d(&mut g, &out_real.patch_maps, &out_fake.patch_maps)?;
                let v = g.value(loss).item()?.to_f64();
                g.backward(loss).map_err(|e| annotate_step(e, step))?;
                let grads = bound_d.grads(&g);
                drop(g);
                opt_d
                    .step(&mut disc.params.params, &grads)
                    .map_err(|e| annotate_step(e, step))?;
                v
            };

            // ---- generator step ----
            let (g_hinge, g_fm) = {
                let mut g = Graph::<T>::new();
                let (fake, bound_g) = gen.forward(&mut g, &masks, &classes, true, true)?;
                let mask_node = g.constant(mask_t.clone());
                let real_node = g.constant(images.clone());
                let (feats_real, feats_fake) = if cfg.third_player {
                    (
                        frozen.features(&mut g, real_node)?,
                        frozen.features(&mut g, fake)?,
                    )
                } else {
                    (g.constant(zero_feats()), g.constant(zero_feats()))
                };
                let (out_fake, bound_d) =
                    disc.forward(&mut g, mask_node, fake, feats_fake, false, false)?;
                let out_real =
                    disc.forward_bound(&mut g, &bound_d, mask_node, real_node, feats_real, false)?;
                let hinge = hinge_loss_g(&mut g, &out_fake.patch_maps)?;
                let fm = feature_matching(&mut g, &out_real.features, &out_fake.features)?;
                let fm_w = g.scalar_mul(fm, T::from_f64(cfg.lambda_fm))?;
                let loss = g.add(hinge, fm_w)?;
                let hinge_v = g.value(hinge).item()?.to_f64();
                let fm_v = g.value(fm).item()?.to_f64();
                if !hinge_v.is_finite() || !fm_v.is_finite() {
                    return Err(Error::numeric(format!(
                        "adversarial training diverged at step {step}"
                    )));
                }
                g.backward(loss).map_err(|e| annotate_step(e, step))?;
                let grads = bound_g.grads(&g);
                drop(g);
                opt_g
                    .step(&mut gen.params.params, &grads)
                    .map_err(|e| annotate_step(e, step))?;
                (hinge_v, fm_v)
            };

            trace.push(GanStepLoss {
                step,
                d_loss,
                g_hinge,
                g_fm,
            });
            step += 1;
            if cfg.max_gan_steps > 0 && step >= cfg.max_gan_steps {
                break 'epochs;
            }
        }
        log::debug!("gan epoch {epoch}: {} steps so far", step);
    }
    let checksum_after = frozen.checksum();
    assert_eq!(
        checksum_before, checksum_after,
        "frozen segmentor parameters mutated during the adversarial game"
    );
    Ok(GanOutcome {
        generator: gen,
        discriminator: disc,
        trace,
        frozen_checksum_before: checksum_before,
        frozen_checksum_after: checksum_after,
    })
}

// -- synthesis --------------------------------------------------------------

/// (source record index, conditioning class) pairs; the pure counting core
/// of the synthesis strategies.
pub type SynthesisPlan = Vec<(usize, usize)>;

/// One synthetic image per record whose global class differs from `target`,
/// conditioned on that record's mask and on `target`. Brings class `target`
/// up to the full original set size.
pub fn plan_strategy_i(records: &[&Record], target_class: usize) -> SynthesisPlan {
    records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.global_class != target_class)
        .map(|(i, _)| (i, target_class))
        .collect()
}

/// The union of strategy I over every class: all per-class totals end up
/// equal to the original set size.
pub fn plan_strategy_ii(records: &[&Record], n_classes: usize) -> SynthesisPlan {
    let mut plan = Vec::new();
    for c in 0..n_classes {
        plan.extend(plan_strategy_i(records, c));
    }
    plan
}

/// One synthetic image per record, conditioned on the record's own class;
/// the synthetic-only probe used to score generators.
pub fn plan_identity(records: &[&Record]) -> SynthesisPlan {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| (i, r.global_class))
        .collect()
}

/// Execute a synthesis plan. Deterministic in (generator checkpoint, plan
/// order); fans out over a read-shared clone of the generator per worker.
pub fn synthesize<T: Scalar>(
    gen: &Generator<T>,
    records: &[&Record],
    plan: &SynthesisPlan,
) -> Result<Vec<Record>> {
    use rayon::prelude::*;
    plan.par_iter()
        .map(|&(src, class)| {
            let mut g = gen.clone();
            let source = records[src];
            let image = g.synthesize(&source.mask, class)?;
            let rec = Record {
                id: format!("syn_c{class}_{}", source.id),
                image: image.cast::<f32>(),
                mask: source.mask.clone(),
                global_class: class,
                split: Split::Train,
                provenance: Some(source.id.clone()),
            };
            rec.validate()?;
            Ok(rec)
        })
        .collect()
}

// -- evaluation ---------------------------------------------------------------

/// Per-record foreground-mean Dice of the segmentor on `records`.
pub fn evaluate_dice<T: Scalar>(seg: &Segmentor<T>, records: &[&Record]) -> Result<Vec<f64>> {
    use rayon::prelude::*;
    records
        .par_iter()
        .map(|r| {
            let pred = seg.predict(&r.image.cast::<T>())?;
            dice_foreground_mean(&pred, &r.mask, seg.spec.n_labels)
        })
        .collect()
}
