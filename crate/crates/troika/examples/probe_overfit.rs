use troika::data::{generate_shapesmed, ShapesMedConfig};
use troika::models::*;
use troika::pipeline::*;
use std::time::Instant;

fn main() {
    let t0 = Instant::now();
    let cfg_data = ShapesMedConfig {
        n_records: 8,
        image_size: 32,
        class_proportions: vec![0.5, 0.25, 0.25],
        ..Default::default()
    };
    let records = generate_shapesmed(&cfg_data).unwrap();
    let refs: Vec<&_> = records.iter().collect();

    // segmentor overfit
    let seg_spec = SegmentorSpec { base_channels: 16, ..SegmentorSpec::desk() };
    let tc = TrainConfig { epochs_seg: 200, batch_size: 4, lr_seg: 1e-3, max_seg_steps: 0, ..Default::default() };
    let (seg, trace) = train_segmentor::<f32>(&refs, &seg_spec, &tc).unwrap();
    let dice = evaluate_dice(&seg, &refs).unwrap();
    let mean: f64 = dice.iter().sum::<f64>() / dice.len() as f64;
    println!("seg overfit: {} steps, final loss {:.4}, train dice {:.4} [{:.1}s]",
        trace.len(), trace.last().unwrap().total, mean, t0.elapsed().as_secs_f64());

    // GAN overfit
    let t1 = Instant::now();
    let gen_spec = GeneratorSpec {
        image_size: 32, n_upsamples: 2, base_channels: 64, min_channels: 16,
        embed_dim: 32, spade_hidden: 64, ..GeneratorSpec::desk()
    };
    let disc_spec = DiscriminatorSpec::new(3, 2, 3);
    let gan_tc = TrainConfig { epochs_gan: 1000, batch_size: 2, max_gan_steps: 2000, ..Default::default() };
    let frozen = seg.freeze();
    let out = train_gan::<f32>(&refs, &frozen, &gen_spec, &disc_spec, &gan_tc).unwrap();
    let fm: Vec<f64> = out.trace.iter().map(|r| r.g_fm).collect();
    let ma10: f64 = fm[..10].iter().sum::<f64>() / 10.0;
    // trailing MA(10) minimum
    let mut best = f64::INFINITY;
    let mut best_at = 0;
    for i in 10..=fm.len() {
        let ma: f64 = fm[i-10..i].iter().sum::<f64>() / 10.0;
        if ma < best { best = ma; best_at = i; }
    }
    println!("gan: {} steps in {:.1}s ({:.2} s/step)", out.trace.len(), t1.elapsed().as_secs_f64(),
        t1.elapsed().as_secs_f64() / out.trace.len() as f64);
    println!("fm: ma10(start) {:.4}, best trailing ma10 {:.4} at step {} (ratio {:.3})",
        ma10, best, best_at, best / ma10);

    // class sensitivity
    let mut gen = out.generator;
    let mut hits = 0;
    for r in &records {
        let a = gen.synthesize(&r.mask, 0).unwrap();
        let b = gen.synthesize(&r.mask, 1).unwrap();
        let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / a.numel() as f64;
        if diff > 0.01 { hits += 1; }
        print!("{:.4} ", diff);
    }
    println!("\nclass sensitivity: {}/8 masks over 0.01", hits);
    println!("total: {:.1}s", t0.elapsed().as_secs_f64());
}
