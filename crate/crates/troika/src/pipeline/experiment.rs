//! The measurement protocol: repeated 90/10 splits, baseline vs augmented
//! segmentor training, per-class Dice aggregation and paired testing.

use std::collections::BTreeMap;

use crate::config::RunConfig;
use crate::data::Record;
use crate::error::{Error, Result};
use crate::models::{Generator, GeneratorSpec};
use crate::stats::{summarize, wilcoxon_signed_rank, PairedSample};
use crate::tensor::Scalar;

use super::report::{ExperimentReport, ReportCell, WilcoxonRow};
use super::{
    evaluate_dice, plan_strategy_i, plan_strategy_ii, synthesize, train_gan, train_segmentor,
    TrainConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Baseline,
    /// Inflate one class to full-dataset size from other classes' masks.
    SingleClass(usize),
    /// Strategy I applied to every class: balanced totals.
    Balanced,
}

impl Strategy {
    pub fn condition_name(&self) -> String {
        match self {
            Strategy::Baseline => "baseline".to_string(),
            Strategy::SingleClass(c) => format!("strategy_I_c{c}"),
            Strategy::Balanced => "strategy_II".to_string(),
        }
    }
}

/// Per-record test scores of one condition in one fold, keyed by record id.
type FoldScores = BTreeMap<String, (usize, f64)>;

const PAIRING_NOTE: &str = "per-record-test-dice";

/// Run the full protocol. Every fold trains a baseline segmentor; non-
/// baseline strategies additionally train the adversarial game on the fold's
/// train split, synthesize per strategy, retrain a fresh segmentor on
/// original + synthetic, and evaluate on the same real test split. Fold
/// seeds are shared across conditions so the paired test sees the same
/// records on both sides.
pub fn run_experiment<T: Scalar>(
    cfg: &RunConfig,
    records: &[Record],
    strategy: Strategy,
) -> Result<ExperimentReport> {
    let tc = cfg.train_config();
    let splits = crate::data::split_protocol(
        records.len(),
        cfg.n_repeats,
        cfg.test_fraction,
        mix(tc.seed, 0x5eed_5011),
    )?;
    let seg_spec = cfg.segmentor_spec();
    let gen_spec = cfg.generator_spec();
    let disc_spec = cfg.discriminator_spec();
    let condition = strategy.condition_name();

    let mut baseline_scores: Vec<Option<FoldScores>> = Vec::new();
    let mut condition_scores: Vec<Option<FoldScores>> = Vec::new();

    for (fold, (train_ids, test_ids)) in splits.iter().enumerate() {
        let fold_cfg = TrainConfig {
            seed: mix(tc.seed, 1000 + fold as u64),
            ..tc
        };
        let train: Vec<&Record> = train_ids.iter().map(|&i| &records[i]).collect();
        let test: Vec<&Record> = test_ids.iter().map(|&i| &records[i]).collect();
        log::info!(
            "fold {fold}: {} train / {} test records, condition `{condition}`",
            train.len(),
            test.len()
        );

        let baseline = train_segmentor::<T>(&train, &seg_spec, &fold_cfg)
            .and_then(|(seg, _)| score_fold(&seg, &test).map(|s| (seg, s)));
        match baseline {
            Ok((baseline_seg, scores)) => {
                baseline_scores.push(Some(scores));
                if strategy == Strategy::Baseline {
                    condition_scores.push(None);
                    continue;
                }
                let arm = || -> Result<FoldScores> {
                    let frozen = baseline_seg.clone().freeze();
                    let gan = train_gan::<T>(&train, &frozen, &gen_spec, &disc_spec, &fold_cfg)?;
                    let plan = match strategy {
                        Strategy::SingleClass(c) => {
                            if c >= cfg.n_classes {
                                return Err(Error::domain(format!(
                                    "target class {c} out of range"
                                )));
                            }
                            plan_strategy_i(&train, c)
                        }
                        Strategy::Balanced => plan_strategy_ii(&train, cfg.n_classes),
                        Strategy::Baseline => unreachable!(),
                    };
                    if plan.is_empty() {
                        log::warn!("fold {fold}: empty synthesis plan");
                    }
                    let synth = synthesize(&gan.generator, &train, &plan)?;
                    let mut combined: Vec<&Record> = train.clone();
                    combined.extend(synth.iter());
                    let (aug_seg, _) = train_segmentor::<T>(&combined, &seg_spec, &fold_cfg)?;
                    verify_hygiene(&synth, &test)?;
                    score_fold(&aug_seg, &test)
                };
                match arm() {
                    Ok(scores) => condition_scores.push(Some(scores)),
                    Err(e) => {
                        log::warn!("fold {fold} condition `{condition}` failed: {e}");
                        condition_scores.push(None);
                    }
                }
            }
            Err(e) => {
                log::warn!("fold {fold} baseline failed: {e}");
                baseline_scores.push(None);
                condition_scores.push(None);
            }
        }
    }

    let mut report = ExperimentReport {
        fingerprint: cfg.fingerprint(),
        pairing: PAIRING_NOTE.to_string(),
        ..Default::default()
    };
    push_cells(&mut report, "baseline", cfg.n_classes, &splits, records, &baseline_scores);
    if strategy != Strategy::Baseline {
        push_cells(&mut report, &condition, cfg.n_classes, &splits, records, &condition_scores);
        for class in 0..cfg.n_classes {
            let mut a = Vec::new();
            let mut b = Vec::new();
            for fold in 0..splits.len() {
                if let (Some(cond), Some(base)) =
                    (&condition_scores[fold], &baseline_scores[fold])
                {
                    for (id, &(cls, d)) in cond {
                        if cls == class {
                            if let Some(&(_, bd)) = base.get(id) {
                                a.push(d);
                                b.push(bd);
                            }
                        }
                    }
                }
            }
            let (w, p) = if a.is_empty() {
                (0.0, 1.0)
            } else {
                wilcoxon_signed_rank(&PairedSample::new(a, b)?)?
            };
            report.wilcoxon.push(WilcoxonRow {
                condition: condition.clone(),
                class,
                w,
                p,
            });
        }
    }
    Ok(report)
}

fn mix(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0xA076_1D64_78BD_642F);
    z = (z ^ (z >> 29)).wrapping_mul(0xE703_7ED1_A0B4_28DB);
    z ^ (z >> 32)
}

fn score_fold<T: Scalar>(
    seg: &crate::models::Segmentor<T>,
    test: &[&Record],
) -> Result<FoldScores> {
    let dice = evaluate_dice(seg, test)?;
    Ok(test
        .iter()
        .zip(dice)
        .map(|(r, d)| (r.id.clone(), (r.global_class, d)))
        .collect())
}

/// Train/test hygiene: no synthetic record may trace back to a test record.
fn verify_hygiene(synth: &[Record], test: &[&Record]) -> Result<()> {
    for s in synth {
        let Some(src) = &s.provenance else {
            return Err(Error::domain(format!("synthetic {} lacks provenance", s.id)));
        };
        if test.iter().any(|t| &t.id == src) {
            return Err(Error::domain(format!(
                "synthetic {} leaked from test record {src}",
                s.id
            )));
        }
    }
    Ok(())
}

fn push_cells(
    report: &mut ExperimentReport,
    condition: &str,
    n_classes: usize,
    splits: &[(Vec<usize>, Vec<usize>)],
    records: &[Record],
    scores: &[Option<FoldScores>],
) {
    for (fold, (_, test_ids)) in splits.iter().enumerate() {
        for class in 0..n_classes {
            let n_test = test_ids
                .iter()
                .filter(|&&i| records[i].global_class == class)
                .count();
            let cell = match &scores[fold] {
                Some(s) => {
                    let vals: Vec<f64> = s
                        .values()
                        .filter(|(cls, _)| *cls == class)
                        .map(|&(_, d)| d)
                        .collect();
                    if vals.is_empty() {
                        ReportCell {
                            condition: condition.to_string(),
                            fold,
                            class,
                            n_test,
                            dice_mean: None,
                            dice_std: None,
                        }
                    } else {
                        let (m, sd) = summarize(&vals).expect("non-empty");
                        ReportCell {
                            condition: condition.to_string(),
                            fold,
                            class,
                            n_test,
                            dice_mean: Some(m),
                            dice_std: Some(sd),
                        }
                    }
                }
                None => ReportCell {
                    condition: condition.to_string(),
                    fold,
                    class,
                    n_test,
                    dice_mean: None,
                    dice_std: None,
                },
            };
            report.cells.push(cell);
        }
    }
}

/// Outcome of the generator-scope comparison: a per-class generator trained
/// only on the target class's records vs the globally conditioned generator
/// trained on everything, both feeding single-class augmentation.
#[derive(Debug, Clone)]
pub struct DilemmaOutcome {
    pub per_class_trained: f64,
    pub globally_conditioned: f64,
    pub fingerprint: String,
    /// ids of the shared test split, proving both arms saw the same data
    pub test_ids: Vec<String>,
}

pub fn run_dilemma_comparison<T: Scalar>(
    cfg: &RunConfig,
    records: &[Record],
    target_class: usize,
) -> Result<DilemmaOutcome> {
    if target_class >= cfg.n_classes {
        return Err(Error::domain(format!("target class {target_class} out of range")));
    }
    let tc = cfg.train_config();
    let splits = crate::data::split_protocol(
        records.len(),
        1,
        cfg.test_fraction,
        mix(tc.seed, 0x5eed_5011),
    )?;
    let (train_ids, test_ids) = &splits[0];
    let train: Vec<&Record> = train_ids.iter().map(|&i| &records[i]).collect();
    let test: Vec<&Record> = test_ids.iter().map(|&i| &records[i]).collect();
    let class_test: Vec<&Record> = test
        .iter()
        .copied()
        .filter(|r| r.global_class == target_class)
        .collect();
    if class_test.is_empty() {
        return Err(Error::domain(format!(
            "no test records of class {target_class}; pick a different seed or class"
        )));
    }
    let seg_spec = cfg.segmentor_spec();
    let disc_spec = cfg.discriminator_spec();
    let fold_cfg = TrainConfig {
        seed: mix(tc.seed, 2000),
        ..tc
    };

    let (baseline_seg, _) = train_segmentor::<T>(&train, &seg_spec, &fold_cfg)?;
    let frozen = baseline_seg.freeze();

    // Arm A: unconditioned generator (K = 1) on the target class's records only.
    let class_train: Vec<Record> = train
        .iter()
        .filter(|r| r.global_class == target_class)
        .map(|r| {
            let mut c = (*r).clone();
            c.global_class = 0;
            c
        })
        .collect();
    if class_train.len() < fold_cfg.batch_size {
        return Err(Error::domain(format!(
            "class {target_class} has only {} train records, fewer than batch size {}",
            class_train.len(),
            fold_cfg.batch_size
        )));
    }
    let class_train_refs: Vec<&Record> = class_train.iter().collect();
    let gen_spec_a = GeneratorSpec {
        n_classes: 1,
        ..cfg.generator_spec()
    };
    let gan_a = train_gan::<T>(&class_train_refs, &frozen, &gen_spec_a, &disc_spec, &fold_cfg)?;
    let score_a = augment_and_score::<T>(
        cfg,
        &fold_cfg,
        &gan_a.generator,
        &train,
        &class_test,
        target_class,
        0,
    )?;

    // Arm B: the globally conditioned generator on the whole train split.
    let gan_b = train_gan::<T>(&train, &frozen, &cfg.generator_spec(), &disc_spec, &fold_cfg)?;
    let score_b = augment_and_score::<T>(
        cfg,
        &fold_cfg,
        &gan_b.generator,
        &train,
        &class_test,
        target_class,
        target_class,
    )?;

    Ok(DilemmaOutcome {
        per_class_trained: score_a,
        globally_conditioned: score_b,
        fingerprint: cfg.fingerprint(),
        test_ids: test.iter().map(|r| r.id.clone()).collect(),
    })
}

fn augment_and_score<T: Scalar>(
    cfg: &RunConfig,
    fold_cfg: &TrainConfig,
    gen: &Generator<T>,
    train: &[&Record],
    class_test: &[&Record],
    target_class: usize,
    conditioning_id: usize,
) -> Result<f64> {
    // one synthetic image per non-target-class train record
    let plan: super::SynthesisPlan = train
        .iter()
        .enumerate()
        .filter(|(_, r)| r.global_class != target_class)
        .map(|(i, _)| (i, conditioning_id))
        .collect();
    let mut synth = synthesize(gen, train, &plan)?;
    for s in &mut synth {
        s.global_class = target_class;
    }
    let mut combined: Vec<&Record> = train.to_vec();
    combined.extend(synth.iter());
    let (seg, _) = train_segmentor::<T>(&combined, &cfg.segmentor_spec(), fold_cfg)?;
    let dice = evaluate_dice(&seg, class_test)?;
    Ok(dice.iter().sum::<f64>() / dice.len() as f64)
}
