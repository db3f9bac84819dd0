use std::time::Instant;
use troika::data::{generate_shapesmed, split_protocol, ShapesMedConfig};
use troika::models::*;
use troika::pipeline::*;

fn main() {
    let seed: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(1);
    let t0 = Instant::now();
    let data_cfg = ShapesMedConfig {
        n_records: 300,
        image_size: 64,
        ..Default::default()
    };
    let records = generate_shapesmed(&data_cfg).unwrap();
    let splits = split_protocol(300, 1, 0.1, seed).unwrap();
    let (train_ids, test_ids) = &splits[0];
    let train: Vec<&_> = train_ids.iter().map(|&i| &records[i]).collect();
    let test: Vec<&_> = test_ids.iter().map(|&i| &records[i]).collect();

    let seg_spec = SegmentorSpec::desk();
    let gen_spec = GeneratorSpec {
        base_channels: 64,
        min_channels: 16,
        embed_dim: 32,
        ..GeneratorSpec::desk()
    };
    let disc_spec = DiscriminatorSpec::new(3, 2, 3);
    let tc = TrainConfig {
        epochs_seg: 12,
        epochs_gan: 4,
        batch_size: 4,
        seed,
        ..Default::default()
    };

    let (frozen_seg, tr) = train_segmentor::<f32>(&train, &seg_spec, &tc).unwrap();
    let base_dice = evaluate_dice(&frozen_seg, &test).unwrap();
    let base_mean: f64 = base_dice.iter().sum::<f64>() / base_dice.len() as f64;
    println!(
        "[seed {seed}] frozen seg: {} steps, loss {:.3}, real test dice {:.4} [{:.0}s]",
        tr.len(),
        tr.last().unwrap().total,
        base_mean,
        t0.elapsed().as_secs_f64()
    );
    let frozen = frozen_seg.freeze();

    for third in [true, false] {
        let t1 = Instant::now();
        let cfg_arm = TrainConfig {
            third_player: third,
            ..tc
        };
        let gan = train_gan::<f32>(&train, &frozen, &gen_spec, &disc_spec, &cfg_arm).unwrap();
        let fm_last: f64 =
            gan.trace.iter().rev().take(20).map(|r| r.g_fm).sum::<f64>() / 20.0;
        let plan = plan_identity(&train);
        let synth = synthesize(&gan.generator, &train, &plan).unwrap();
        let synth_refs: Vec<&_> = synth.iter().collect();
        let (seg2, _) = train_segmentor::<f32>(&synth_refs, &seg_spec, &cfg_arm).unwrap();
        let dice = evaluate_dice(&seg2, &test).unwrap();
        let mean: f64 = dice.iter().sum::<f64>() / dice.len() as f64;
        println!(
            "[seed {seed}] third={third}: {} gan steps, fm_end {:.4}, synthetic-only test dice {:.4} [{:.0}s]",
            gan.trace.len(),
            fm_last,
            mean,
            t1.elapsed().as_secs_f64()
        );
    }
    println!("[seed {seed}] total {:.0}s", t0.elapsed().as_secs_f64());
}
