use std::time::Instant;
use troika::data::{generate_shapesmed, ShapesMedConfig};
use troika::graph::Graph;
use troika::models::*;
use troika::nn::mask::{one_hot_batch, LabelMap};
use troika::pipeline::*;

fn main() {
    let records = generate_shapesmed(&ShapesMedConfig {
        n_records: 8,
        image_size: 32,
        class_proportions: vec![0.5, 0.25, 0.25],
        ..Default::default()
    })
    .unwrap();
    let refs: Vec<&_> = records.iter().collect();
    let batch = &refs[..4];

    let gen_spec = GeneratorSpec {
        image_size: 32,
        n_upsamples: 2,
        base_channels: 64,
        min_channels: 16,
        embed_dim: 32,
        spade_hidden: 64,
        ..GeneratorSpec::desk()
    };
    let mut gen = Generator::<f32>::new(gen_spec, 1).unwrap();
    let seg = Segmentor::<f32>::new(
        SegmentorSpec {
            base_channels: 16,
            ..SegmentorSpec::desk()
        },
        2,
    )
    .unwrap();
    let frozen = seg.freeze();
    let mut disc = Discriminator::<f32>::new(DiscriminatorSpec::new(3, 2, 3), 3).unwrap();

    let masks: Vec<&LabelMap> = batch.iter().map(|r| &r.mask).collect();
    let classes: Vec<usize> = batch.iter().map(|r| r.global_class).collect();
    let images = image_batch::<f32>(batch).unwrap();
    let mask_t = one_hot_batch::<f32>(&masks, 2).unwrap();

    for round in 0..3 {
        let t = Instant::now();
        let mut g = Graph::<f32>::new();
        let (fake, bound_g) = gen.forward(&mut g, &masks, &classes, true, true).unwrap();
        println!("[{round}] G fwd: {:.3}s ({} nodes)", t.elapsed().as_secs_f64(), g.len());

        let t = Instant::now();
        let mask_node = g.constant(mask_t.clone());
        let real_node = g.constant(images.clone());
        let fr = frozen.features(&mut g, real_node).unwrap();
        let ff = frozen.features(&mut g, fake).unwrap();
        println!("[{round}] seg feats x2: {:.3}s ({} nodes)", t.elapsed().as_secs_f64(), g.len());

        let t = Instant::now();
        let (out_fake, bd) = disc.forward(&mut g, mask_node, fake, ff, false, false).unwrap();
        let out_real = disc
            .forward_bound(&mut g, &bd, mask_node, real_node, fr, false)
            .unwrap();
        println!("[{round}] D fwd x2: {:.3}s ({} nodes)", t.elapsed().as_secs_f64(), g.len());

        let t = Instant::now();
        let hinge = troika::losses::hinge_loss_g(&mut g, &out_fake.patch_maps).unwrap();
        let fm =
            troika::losses::feature_matching(&mut g, &out_real.features, &out_fake.features).unwrap();
        let fmw = g.scalar_mul(fm, 10.0f32).unwrap();
        let loss = g.add(hinge, fmw).unwrap();
        println!("[{round}] losses: {:.3}s", t.elapsed().as_secs_f64());

        let t = Instant::now();
        g.backward(loss).unwrap();
        println!("[{round}] backward: {:.3}s", t.elapsed().as_secs_f64());

        let t = Instant::now();
        let grads = bound_g.grads(&g);
        println!(
            "[{round}] collect {} grads: {:.3}s",
            grads.len(),
            t.elapsed().as_secs_f64()
        );
    }
}
