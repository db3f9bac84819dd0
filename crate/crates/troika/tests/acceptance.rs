//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.
//!
//! Run with:
//!
//! ```sh
//! cargo test -p troika --test acceptance -- --test-threads=1 --nocapture
//! ```
//!
//! The directional criteria (7, 8) train real models at desk scale and
//! dominate the runtime; the suite as a whole is built to stay within a
//! couple of hours on a small CPU.

use std::sync::OnceLock;
use std::time::Instant;

use troika::config::RunConfig;
use troika::data::{generate_shapesmed, split_protocol, ShapesMedConfig};
use troika::models::{DiscriminatorSpec, Generator, GeneratorSpec, SegmentorSpec};
use troika::pipeline::{
    evaluate_dice, plan_identity, plan_strategy_i, plan_strategy_ii, run_experiment, synthesize,
    train_gan, train_segmentor, GanOutcome, Strategy, TrainConfig,
};
use troika::stats::{wilcoxon_signed_rank, PairedSample};

fn pass(criterion: usize, detail: &str) {
    println!("PASS criterion {criterion}: {detail}");
}

// ---------------------------------------------------------------------------
// criterion 1: gradient integrity
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_gradient_integrity() {
    let t0 = Instant::now();
    let results = troika::selfcheck::run_all(None);
    let grad = results.iter().find(|r| r.name == "gradients").unwrap();
    assert!(grad.passed, "gradient suite failed: {}", grad.detail);
    let elapsed = t0.elapsed().as_secs_f64();
    assert!(
        elapsed < 60.0,
        "gradient/oracle suite took {elapsed:.1}s, budget is 60s"
    );
    pass(1, &format!("{} in {elapsed:.1}s", grad.detail));
}

// ---------------------------------------------------------------------------
// criterion 2: oracle equivalence
// ---------------------------------------------------------------------------

#[test]
fn criterion_2_oracle_equivalence() {
    let results = troika::selfcheck::run_all(None);
    for name in [
        "conv_oracle",
        "pool_oracle",
        "adam_oracle",
        "spectral_oracle",
        "dice_oracle",
        "wilcoxon_oracle",
    ] {
        let suite = results.iter().find(|r| r.name == name).unwrap();
        assert!(suite.passed, "{name} failed: {}", suite.detail);
    }
    pass(2, "conv/pool/adam/spectral/dice/wilcoxon oracles all agree");
}

// ---------------------------------------------------------------------------
// criterion 3: strategy arithmetic (exact)
// ---------------------------------------------------------------------------

#[test]
fn criterion_3_strategy_arithmetic() {
    // train distribution (70, 20, 10)
    let records = generate_shapesmed(&ShapesMedConfig {
        image_size: 32,
        ..Default::default()
    })
    .unwrap();
    let refs: Vec<_> = records.iter().collect();
    let mut counts = vec![0usize; 3];
    for r in &records {
        counts[r.global_class] += 1;
    }
    assert_eq!(counts, vec![70, 20, 10]);

    let gen = Generator::<f32>::new(
        GeneratorSpec {
            image_size: 32,
            n_upsamples: 2,
            base_channels: 8,
            min_channels: 4,
            embed_dim: 8,
            spade_hidden: 8,
            ..GeneratorSpec::desk()
        },
        5,
    )
    .unwrap();

    // strategy I(c=2): exactly 90 synthetic records, class totals (70, 20, 100)
    let plan = plan_strategy_i(&refs, 2);
    let synth = synthesize(&gen, &refs, &plan).unwrap();
    assert_eq!(synth.len(), 90);
    assert!(synth.iter().all(|s| s.global_class == 2));
    let mut totals = counts.clone();
    for s in &synth {
        totals[s.global_class] += 1;
    }
    assert_eq!(totals, vec![70, 20, 100]);

    // strategy II: the union of per-class complements. Its per-class totals
    // all reach the original set size exactly; with (70, 20, 10) that is
    // 30 + 80 + 90 = 200 synthetic records for totals (100, 100, 100).
    let plan2 = plan_strategy_ii(&refs, 3);
    let synth2 = synthesize(&gen, &refs, &plan2).unwrap();
    assert_eq!(synth2.len(), 200);
    let mut totals2 = counts;
    for s in &synth2 {
        totals2[s.global_class] += 1;
    }
    assert_eq!(totals2, vec![100, 100, 100]);
    pass(3, "I(c=2): 90 records, totals (70,20,100); II: totals (100,100,100)");
}

// ---------------------------------------------------------------------------
// criteria 4 + 5 + 6 share one overfit run (8 records, S=32, 2000 GAN steps)
// ---------------------------------------------------------------------------

struct OverfitOutcome {
    seg_train_dice: f64,
    seg_steps: usize,
    gan: GanOutcome<f32>,
    seconds: f64,
    records: Vec<troika::data::Record>,
}

fn overfit_run() -> &'static OverfitOutcome {
    static RUN: OnceLock<OverfitOutcome> = OnceLock::new();
    RUN.get_or_init(|| {
        let t0 = Instant::now();
        let records = generate_shapesmed(&ShapesMedConfig {
            n_records: 8,
            image_size: 32,
            class_proportions: vec![0.5, 0.25, 0.25],
            ..Default::default()
        })
        .unwrap();
        let refs: Vec<_> = records.iter().collect();

        let seg_spec = SegmentorSpec::desk();
        let seg_cfg = TrainConfig {
            epochs_seg: 200,
            batch_size: 4,
            ..Default::default()
        };
        let (seg, trace) = train_segmentor::<f32>(&refs, &seg_spec, &seg_cfg).unwrap();
        let dice = evaluate_dice(&seg, &refs).unwrap();
        let seg_train_dice = dice.iter().sum::<f64>() / dice.len() as f64;

        let gen_spec = GeneratorSpec {
            image_size: 32,
            n_upsamples: 2,
            base_channels: 64,
            min_channels: 16,
            embed_dim: 32,
            ..GeneratorSpec::desk()
        };
        let disc_spec = DiscriminatorSpec::new(3, 2, 3);
        let gan_cfg = TrainConfig {
            epochs_gan: 1000,
            batch_size: 2,
            max_gan_steps: 2000,
            ..Default::default()
        };
        let frozen = seg.freeze();
        let gan = train_gan::<f32>(&refs, &frozen, &gen_spec, &disc_spec, &gan_cfg).unwrap();
        OverfitOutcome {
            seg_train_dice,
            seg_steps: trace.len(),
            gan,
            seconds: t0.elapsed().as_secs_f64(),
            records,
        }
    })
}

#[test]
fn criterion_4_freeze_invariant() {
    let run = overfit_run();
    assert_eq!(run.gan.trace.len(), 2000, "full 2000-step run required");
    assert_eq!(
        run.gan.frozen_checksum_before, run.gan.frozen_checksum_after,
        "frozen segmentor parameters changed during the adversarial game"
    );
    pass(
        4,
        &format!(
            "checksum {} stable across 2000 steps",
            &run.gan.frozen_checksum_before[..12]
        ),
    );
}

#[test]
fn criterion_5_overfit_sanity() {
    let run = overfit_run();
    assert!(
        run.seg_train_dice >= 0.95,
        "segmentor train dice {:.4} < 0.95 after {} steps",
        run.seg_train_dice,
        run.seg_steps
    );

    let fm: Vec<f64> = run.gan.trace.iter().map(|r| r.g_fm).collect();
    let start_ma: f64 = fm[..10].iter().sum::<f64>() / 10.0;
    let mut best_ma = f64::INFINITY;
    for i in 10..=fm.len() {
        let ma = fm[i - 10..i].iter().sum::<f64>() / 10.0;
        best_ma = best_ma.min(ma);
    }
    assert!(
        best_ma <= 0.5 * start_ma,
        "feature-matching loss fell only to {best_ma:.4} from a start of {start_ma:.4}"
    );
    assert!(
        run.seconds <= 600.0,
        "overfit run took {:.0}s, budget is 600s",
        run.seconds
    );
    pass(
        5,
        &format!(
            "train dice {:.3}, fm {:.4} -> {:.4} ({:.0}% of start), {:.0}s total",
            run.seg_train_dice,
            start_ma,
            best_ma,
            100.0 * best_ma / start_ma,
            run.seconds
        ),
    );
}

#[test]
fn criterion_6_class_conditioning_sensitivity() {
    let run = overfit_run();
    let mut gen = run.gan.generator.clone();
    let mut sensitive = 0usize;
    let mut diffs = Vec::new();
    for r in &run.records {
        // all class pairs must separate, not just one
        let imgs: Vec<_> = (0..3).map(|c| gen.synthesize(&r.mask, c).unwrap()).collect();
        let mut min_pair = f64::INFINITY;
        for a in 0..3 {
            for b in a + 1..3 {
                let d: f64 = imgs[a]
                    .data()
                    .iter()
                    .zip(imgs[b].data())
                    .map(|(x, y)| (x - y).abs() as f64)
                    .sum::<f64>()
                    / imgs[a].numel() as f64;
                min_pair = min_pair.min(d);
            }
        }
        diffs.push(min_pair);
        if min_pair > 0.01 {
            sensitive += 1;
        }
    }
    let frac = sensitive as f64 / run.records.len() as f64;
    assert!(
        frac >= 0.9,
        "class-sensitive on only {sensitive}/{} masks (diffs {diffs:?})",
        run.records.len()
    );

    // bit-determinism of synthesis
    let a = gen.synthesize(&run.records[0].mask, 1).unwrap();
    let b = gen.synthesize(&run.records[0].mask, 1).unwrap();
    assert!(a.bit_eq(&b), "synthesis is not bit-deterministic");
    pass(
        6,
        &format!(
            "{sensitive}/{} masks class-sensitive (min pair diff {:.3}), synthesis bit-stable",
            run.records.len(),
            diffs.iter().cloned().fold(f64::INFINITY, f64::min)
        ),
    );
}

// ---------------------------------------------------------------------------
// criteria 7 + 8: the imbalanced desk dataset (300 records, 70/20/10, S=64)
// ---------------------------------------------------------------------------

fn desk_dataset() -> &'static Vec<troika::data::Record> {
    static DATA: OnceLock<Vec<troika::data::Record>> = OnceLock::new();
    DATA.get_or_init(|| {
        generate_shapesmed(&ShapesMedConfig {
            n_records: 300,
            image_size: 64,
            ..Default::default()
        })
        .unwrap()
    })
}

fn desk_gen_spec() -> GeneratorSpec {
    GeneratorSpec {
        base_channels: 64,
        min_channels: 16,
        embed_dim: 32,
        ..GeneratorSpec::desk()
    }
}

fn desk_train_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs_seg: 16,
        epochs_gan: 5,
        batch_size: 4,
        seed,
        ..Default::default()
    }
}

#[test]
fn criterion_7_third_player_directional() {
    let t0 = Instant::now();
    let records = desk_dataset();
    let seg_spec = SegmentorSpec::desk();
    let gen_spec = desk_gen_spec();
    let disc_spec = DiscriminatorSpec::new(3, 2, 3);

    let mut with_third = Vec::new();
    let mut without_third = Vec::new();
    for seed in 1..=3u64 {
        let splits = split_protocol(records.len(), 1, 0.1, seed).unwrap();
        let (train_ids, test_ids) = &splits[0];
        let train: Vec<_> = train_ids.iter().map(|&i| &records[i]).collect();
        let test: Vec<_> = test_ids.iter().map(|&i| &records[i]).collect();
        let cfg = desk_train_cfg(seed);
        let (frozen_seg, _) = train_segmentor::<f32>(&train, &seg_spec, &cfg).unwrap();
        let frozen = frozen_seg.freeze();

        for third in [true, false] {
            let arm_cfg = TrainConfig {
                third_player: third,
                ..cfg
            };
            let gan = train_gan::<f32>(&train, &frozen, &gen_spec, &disc_spec, &arm_cfg).unwrap();
            // synthetic-only probe: one image per training mask, own class
            let plan = plan_identity(&train);
            let synth = synthesize(&gan.generator, &train, &plan).unwrap();
            let synth_refs: Vec<_> = synth.iter().collect();
            let (seg, _) = train_segmentor::<f32>(&synth_refs, &seg_spec, &arm_cfg).unwrap();
            let dice = evaluate_dice(&seg, &test).unwrap();
            let mean = dice.iter().sum::<f64>() / dice.len() as f64;
            println!("  criterion 7 seed {seed} third={third}: synthetic-only dice {mean:.4}");
            if third {
                with_third.push(mean);
            } else {
                without_third.push(mean);
            }
        }
    }
    let on = with_third.iter().sum::<f64>() / 3.0;
    let off = without_third.iter().sum::<f64>() / 3.0;
    let elapsed = t0.elapsed().as_secs_f64();
    assert!(
        elapsed <= 7200.0,
        "criterion 7 took {elapsed:.0}s, budget is 2h"
    );
    assert!(
        on >= off - 0.02,
        "synthetic-only dice with third player {on:.4} fell more than 0.02 below {off:.4} \
         (per-seed: with {with_third:?}, without {without_third:?})"
    );
    pass(
        7,
        &format!("synthetic-only dice {on:.4} (third on) vs {off:.4} (off), {elapsed:.0}s"),
    );
}

#[test]
fn criterion_8_single_class_injection_directional() {
    let records = desk_dataset();
    let rare = 2usize; // 10% class
    let cfg = RunConfig {
        n_records: 300,
        gen_base_channels: 64,
        gen_min_channels: 16,
        gen_embed_dim: 32,
        epochs_seg: 16,
        epochs_gan: 5,
        batch_size: 4,
        train_seed: 11,
        n_repeats: 3,
        ..RunConfig::default()
    };
    cfg.validate().unwrap();
    let report = run_experiment::<f32>(&cfg, records, Strategy::SingleClass(rare)).unwrap();

    let mut wins = 0usize;
    let mut lines = Vec::new();
    for fold in 0..3 {
        let base = report
            .cells
            .iter()
            .find(|c| c.condition == "baseline" && c.fold == fold && c.class == rare)
            .and_then(|c| c.dice_mean)
            .expect("baseline cell");
        let aug = report
            .cells
            .iter()
            .find(|c| c.condition == "strategy_I_c2" && c.fold == fold && c.class == rare)
            .and_then(|c| c.dice_mean)
            .expect("augmented cell");
        lines.push(format!("fold {fold}: baseline {base:.4} vs injected {aug:.4}"));
        if aug >= base {
            wins += 1;
        }
    }
    println!("  criterion 8 {}", lines.join("; "));
    assert!(
        wins >= 2,
        "injected class improved in only {wins}/3 folds ({})",
        lines.join("; ")
    );
    pass(8, &format!("rare-class injection won {wins}/3 folds"));
}

// ---------------------------------------------------------------------------
// criterion 9: byte-identical reproducibility (f64, single thread)
// ---------------------------------------------------------------------------

fn tiny_experiment_config() -> RunConfig {
    RunConfig {
        n_records: 24,
        image_size: 32,
        gen_base_channels: 8,
        gen_min_channels: 4,
        gen_embed_dim: 8,
        gen_spade_hidden: 8,
        gen_n_upsamples: 2,
        disc_width1: 8,
        disc_width2: 8,
        seg_base_channels: 4,
        epochs_seg: 2,
        epochs_gan: 1,
        max_gan_steps: 4,
        max_seg_steps: 6,
        batch_size: 2,
        n_repeats: 2,
        test_fraction: 0.25,
        train_seed: 3,
        ..RunConfig::default()
    }
}

#[test]
fn criterion_9_deterministic_reports() {
    let cfg = tiny_experiment_config();
    let records = generate_shapesmed(&cfg.shapesmed()).unwrap();
    let run = || {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        pool.install(|| run_experiment::<f64>(&cfg, &records, Strategy::SingleClass(2)).unwrap())
    };
    let a = run();
    let b = run();
    assert_eq!(
        a.dice_csv().into_bytes(),
        b.dice_csv().into_bytes(),
        "dice CSVs differ between identical runs"
    );
    assert_eq!(
        a.wilcoxon_csv().into_bytes(),
        b.wilcoxon_csv().into_bytes(),
        "wilcoxon CSVs differ between identical runs"
    );
    pass(9, "two f64 single-threaded runs produced byte-identical CSVs");
}

// ---------------------------------------------------------------------------
// criterion 10: statistics plumbing
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_statistics_plumbing() {
    // every class-condition pair gets a two-sided p
    let cfg = tiny_experiment_config();
    let records = generate_shapesmed(&cfg.shapesmed()).unwrap();
    let report = run_experiment::<f64>(&cfg, &records, Strategy::Balanced).unwrap();
    assert_eq!(report.wilcoxon.len(), cfg.n_classes);
    for row in &report.wilcoxon {
        assert!(row.p > 0.0 && row.p <= 1.0, "p out of range: {row:?}");
    }

    // the degenerate all-equal case yields p = 1 without error
    let s = PairedSample::new(vec![0.4, 0.5, 0.6], vec![0.4, 0.5, 0.6]).unwrap();
    assert_eq!(wilcoxon_signed_rank(&s).unwrap(), (0.0, 1.0));
    pass(
        10,
        &format!(
            "{} paired tests emitted; degenerate case p = 1",
            report.wilcoxon.len()
        ),
    );
}
