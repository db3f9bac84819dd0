//! Spatially-adaptive normalization and the residual block built around it.
//!
//! `spade_normalize` replaces the affine part of a normalization layer with
//! per-pixel scale and shift maps computed from the one-hot segmentation
//! mask:
//!
//! ```text
//! out = gamma(M) * (h - mu) / sigma + beta(M)
//! ```
//!
//! where mu/sigma are per-sample per-channel spatial statistics and
//! gamma/beta come from a small conv net on the mask (shared 3x3 conv to a
//! hidden map, relu, then one 3x3 conv each). All mask convs are
//! stride 1 with pad = kernel/2, so spatial extent is preserved; none carry
//! a bias, so zeroed gamma/beta weights annihilate the output exactly.

use rand::Rng;

use crate::error::Result;
use crate::graph::Node;
use crate::nn::{instance_normalize, spectral, Ctx, ParamStore};

/// Default hidden width of the mask-processing convs.
pub const SPADE_HIDDEN: usize = 64;
/// Init scale for generator-side convolutions.
pub const GAN_INIT_STD: f64 = 0.02;

/// Register `{prefix}.shared/.gamma/.beta` for normalizing `channels`
/// feature maps against a mask with `mask_ch` channels.
pub fn init_spade<T: crate::tensor::Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    channels: usize,
    mask_ch: usize,
    hidden: usize,
    rng: &mut impl Rng,
) {
    store.init_conv(&format!("{prefix}.shared"), hidden, mask_ch, 3, GAN_INIT_STD, rng);
    store.init_conv(&format!("{prefix}.gamma"), channels, hidden, 3, GAN_INIT_STD, rng);
    store.init_conv(&format!("{prefix}.beta"), channels, hidden, 3, GAN_INIT_STD, rng);
}

/// Mask-conditioned normalization of `h` [N,C,H,W]; `mask` must be one-hot
/// at the same spatial size.
pub fn spade_normalize<T: crate::tensor::Scalar>(
    ctx: &mut Ctx<'_, T>,
    prefix: &str,
    h: Node,
    mask: Node,
) -> Result<Node> {
    let normed = instance_normalize(ctx.g, h)?;
    let shared = ctx.bound.node(&format!("{prefix}.shared"))?;
    let hid = ctx.g.conv2d(mask, shared, None, 1, 1)?;
    let hid = ctx.g.relu(hid)?;
    let gamma_w = ctx.bound.node(&format!("{prefix}.gamma"))?;
    let beta_w = ctx.bound.node(&format!("{prefix}.beta"))?;
    let gamma = ctx.g.conv2d(hid, gamma_w, None, 1, 1)?;
    let beta = ctx.g.conv2d(hid, beta_w, None, 1, 1)?;
    let scaled = ctx.g.mul(gamma, normed)?;
    ctx.g.add(scaled, beta)
}

/// Register all parameters of one residual block under `prefix`.
///
/// Main path: spade -> lrelu -> sn-conv3x3 (c_in -> c_mid) -> spade -> lrelu
/// -> sn-conv3x3 (c_mid -> c_out), c_mid = min(c_in, c_out). Skip path:
/// identity when channel counts match, else spade -> sn-conv1x1.
pub fn init_resblock<T: crate::tensor::Scalar>(
    store: &mut ParamStore<T>,
    bank: &mut spectral::SpectralBank<T>,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    mask_ch: usize,
    hidden: usize,
    rng: &mut impl Rng,
) {
    let c_mid = c_in.min(c_out);
    init_spade(store, &format!("{prefix}.spade1"), c_in, mask_ch, hidden, rng);
    store.init_conv(&format!("{prefix}.conv1.weight"), c_mid, c_in, 3, GAN_INIT_STD, rng);
    store.init_zeros(&format!("{prefix}.conv1.bias"), [c_mid]);
    bank.register(&format!("{prefix}.conv1.weight"), c_mid, rng);
    init_spade(store, &format!("{prefix}.spade2"), c_mid, mask_ch, hidden, rng);
    store.init_conv(&format!("{prefix}.conv2.weight"), c_out, c_mid, 3, GAN_INIT_STD, rng);
    store.init_zeros(&format!("{prefix}.conv2.bias"), [c_out]);
    bank.register(&format!("{prefix}.conv2.weight"), c_out, rng);
    if c_in != c_out {
        init_spade(store, &format!("{prefix}.skip_spade"), c_in, mask_ch, hidden, rng);
        store.init_conv(&format!("{prefix}.skip.weight"), c_out, c_in, 1, GAN_INIT_STD, rng);
        bank.register(&format!("{prefix}.skip.weight"), c_out, rng);
    }
}

/// Forward one residual block; `mask` is one-hot at h's resolution.
pub fn resblock<T: crate::tensor::Scalar>(
    ctx: &mut Ctx<'_, T>,
    prefix: &str,
    h: Node,
    mask: Node,
) -> Result<Node> {
    let c_in = ctx.g.shape(h)[1];
    let c_out = ctx.store.get(&format!("{prefix}.conv2.weight"))?.shape()[0];

    let main = spade_normalize(ctx, &format!("{prefix}.spade1"), h, mask)?;
    let main = ctx.g.leaky_relu(main, 0.2)?;
    let main = spectral::sn_conv(ctx, &format!("{prefix}.conv1"), main, 1, 1)?;
    let main = spade_normalize(ctx, &format!("{prefix}.spade2"), main, mask)?;
    let main = ctx.g.leaky_relu(main, 0.2)?;
    let main = spectral::sn_conv(ctx, &format!("{prefix}.conv2"), main, 1, 1)?;

    let skip = if c_in == c_out {
        h
    } else {
        let s = spade_normalize(ctx, &format!("{prefix}.skip_spade"), h, mask)?;
        spectral::sn_conv(ctx, &format!("{prefix}.skip"), s, 1, 0)?
    };
    ctx.g.add(main, skip)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::gradcheck::{finite_diff_check, CheckOpts, DEFAULT_TOL};
    use crate::graph::Graph;
    use crate::nn::mask::{one_hot_batch, LabelMap};
    use crate::nn::{Bound, ParamStore};
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    fn test_mask(size: usize) -> Tensor<f64> {
        let mut labels = vec![0u8; size * size];
        for y in 0..size / 2 {
            for x in 0..size / 2 {
                labels[y * size + x] = 1;
            }
        }
        labels[size * size - 1] = 2;
        let m = LabelMap::new(size, labels).unwrap();
        one_hot_batch(&[&m], 2).unwrap()
    }

    fn make_ctx_parts(
        build: impl FnOnce(&mut ParamStore<f64>, &mut spectral::SpectralBank<f64>, &mut rand_chacha::ChaCha8Rng),
        seed: u64,
    ) -> (ParamStore<f64>, spectral::SpectralBank<f64>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut bank = spectral::SpectralBank::new();
        build(&mut store, &mut bank, &mut rng);
        (store, bank)
    }

    #[test]
    fn zero_gamma_beta_weights_annihilate_output() {
        let (mut store, mut bank) = make_ctx_parts(
            |s, _b, rng| init_spade(s, "sp", 4, 3, 8, rng),
            1,
        );
        store.set("sp.gamma", Tensor::zeros([4, 8, 3, 3])).unwrap();
        store.set("sp.beta", Tensor::zeros([4, 8, 3, 3])).unwrap();
        let mut g = Graph::<f64>::new();
        let bound = Bound::bind(&mut g, &store, false);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let h = g.leaf(Tensor::randn([1, 4, 8, 8], 1.0, &mut rng), false);
        let mask = g.constant(test_mask(8));
        let mut ctx = Ctx {
            g: &mut g,
            store: &store,
            bound: &bound,
            bank: &mut bank,
            sn_update: false,
        };
        let out = spade_normalize(&mut ctx, "sp", h, mask).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spade_matches_direct_formula_oracle() {
        // Oracle: explicit loops computing mean/var per (n,c), the mask conv
        // stack, and gamma*(h-mu)/sigma + beta, written independently of the
        // graph ops.
        let (store, mut bank) = make_ctx_parts(
            |s, _b, rng| init_spade(s, "sp", 3, 3, 8, rng),
            7,
        );
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let h_t = Tensor::<f64>::randn([2, 3, 8, 8], 1.3, &mut rng);
        let mask_t = {
            let mut labels = vec![0u8; 64];
            for i in 20..40 {
                labels[i] = 1;
            }
            for i in 50..55 {
                labels[i] = 2;
            }
            let m0 = LabelMap::new(8, labels.clone()).unwrap();
            labels.rotate_right(9);
            let m1 = LabelMap::new(8, labels).unwrap();
            one_hot_batch::<f64>(&[&m0, &m1], 2).unwrap()
        };

        let mut g = Graph::<f64>::new();
        let bound = Bound::bind(&mut g, &store, false);
        let h = g.leaf(h_t.clone(), false);
        let mask = g.constant(mask_t.clone());
        let mut ctx = Ctx {
            g: &mut g,
            store: &store,
            bound: &bound,
            bank: &mut bank,
            sn_update: false,
        };
        let out = spade_normalize(&mut ctx, "sp", h, mask).unwrap();
        let got = g.value(out).clone();

        // ---- oracle ----
        let conv3 = |inp: &[f64], ci: usize, co: usize, w: &[f64], s: usize| -> Vec<f64> {
            let mut out = vec![0.0; co * s * s];
            for o in 0..co {
                for y in 0..s as isize {
                    for x in 0..s as isize {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for ky in -1..=1isize {
                                for kx in -1..=1isize {
                                    let (iy, ix) = (y + ky, x + kx);
                                    if iy < 0 || ix < 0 || iy >= s as isize || ix >= s as isize {
                                        continue;
                                    }
                                    acc += inp[(c * s * s) as usize
                                        + (iy as usize) * s
                                        + ix as usize]
                                        * w[((o * ci + c) * 3 + (ky + 1) as usize) * 3
                                            + (kx + 1) as usize];
                                }
                            }
                        }
                        out[o * s * s + y as usize * s + x as usize] = acc;
                    }
                }
            }
            out
        };
        let sw = store.get("sp.shared").unwrap().data();
        let gw = store.get("sp.gamma").unwrap().data();
        let bw = store.get("sp.beta").unwrap().data();
        let s = 8usize;
        let mut max_err: f64 = 0.0;
        for n in 0..2 {
            let mask_n = &mask_t.data()[n * 3 * 64..][..3 * 64];
            let hid: Vec<f64> = conv3(mask_n, 3, 8, sw, s).iter().map(|&v| v.max(0.0)).collect();
            let gamma = conv3(&hid, 8, 3, gw, s);
            let beta = conv3(&hid, 8, 3, bw, s);
            for c in 0..3 {
                let plane = &h_t.data()[(n * 3 + c) * 64..][..64];
                let mu: f64 = plane.iter().sum::<f64>() / 64.0;
                let var: f64 = plane.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 64.0;
                let sigma = var.sqrt().max(1e-5);
                for pix in 0..64 {
                    let want = gamma[c * 64 + pix] * (plane[pix] - mu) / sigma + beta[c * 64 + pix];
                    let have = got.data()[(n * 3 + c) * 64 + pix];
                    max_err = max_err.max((want - have).abs());
                }
            }
        }
        assert!(max_err <= 1e-5, "max err {max_err}");
    }

    #[test]
    fn resblock_identity_when_zeroed_and_channels_match() {
        let (mut store, mut bank) = make_ctx_parts(
            |s, b, rng| init_resblock(s, b, "blk", 4, 4, 3, 8, rng),
            3,
        );
        store.set("blk.conv2.weight", Tensor::zeros([4, 4, 3, 3])).unwrap();
        store.set("blk.conv2.bias", Tensor::zeros([4])).unwrap();
        let mut g = Graph::<f64>::new();
        let bound = Bound::bind(&mut g, &store, false);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let h_t = Tensor::<f64>::randn([1, 4, 8, 8], 1.0, &mut rng);
        let h = g.leaf(h_t.clone(), false);
        let mask = g.constant(test_mask(8));
        let mut ctx = Ctx {
            g: &mut g,
            store: &store,
            bound: &bound,
            bank: &mut bank,
            sn_update: false,
        };
        let out = resblock(&mut ctx, "blk", h, mask).unwrap();
        for (a, b) in g.value(out).data().iter().zip(h_t.data()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn resblock_output_shape_contract() {
        let (store, mut bank) = make_ctx_parts(
            |s, b, rng| init_resblock(s, b, "blk", 64, 32, 3, 16, rng),
            5,
        );
        let mut g = Graph::<f64>::new();
        let bound = Bound::bind(&mut g, &store, false);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let h = g.leaf(Tensor::randn([2, 64, 8, 8], 0.5, &mut rng), false);
        let mask = {
            let m0 = test_mask(8);
            let d = [m0.data(), m0.data()].concat();
            g.constant(Tensor::new([2, 3, 8, 8], d).unwrap())
        };
        let mut ctx = Ctx {
            g: &mut g,
            store: &store,
            bound: &bound,
            bank: &mut bank,
            sn_update: false,
        };
        let out = resblock(&mut ctx, "blk", h, mask).unwrap();
        assert_eq!(g.value(out).shape().dims(), &[2, 32, 8, 8]);
    }

    #[test]
    fn resblock_gradient_check() {
        for seed in 0..5u64 {
            let (store, bank) = make_ctx_parts(
                |s, b, rng| init_resblock(s, b, "blk", 3, 2, 3, 4, rng),
                seed,
            );
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(100 + seed);
            let h_t = Tensor::<f64>::randn([1, 3, 4, 4], 1.0, &mut rng);
            let mask_t = {
                let mut labels = vec![0u8; 16];
                labels[3] = 1;
                labels[7] = 2;
                labels[12] = 1;
                let m = LabelMap::new(4, labels).unwrap();
                one_hot_batch::<f64>(&[&m], 2).unwrap()
            };
            // check grads w.r.t. h and every block parameter
            let names: Vec<String> = store.params.keys().cloned().collect();
            let mut inputs = vec![h_t];
            for n in &names {
                inputs.push(store.get(n).unwrap().clone());
            }
            let rep = finite_diff_check(
                &inputs,
                CheckOpts { seed, max_coords: 6, ..Default::default() },
                |g, nodes| {
                    let mut st = ParamStore::new();
                    for (i, n) in names.iter().enumerate() {
                        st.insert(n, g.value(nodes[i + 1]).clone());
                    }
                    // route the leaf nodes in as bound parameters
                    let mut bound_nodes = indexmap::IndexMap::new();
                    for (i, n) in names.iter().enumerate() {
                        bound_nodes.insert(n.clone(), nodes[i + 1]);
                    }
                    let bound = Bound::from_nodes(bound_nodes, true);
                    let mask = g.constant(mask_t.clone());
                    let mut bank = bank.clone();
                    let mut ctx = Ctx {
                        g,
                        store: &st,
                        bound: &bound,
                        bank: &mut bank,
                        sn_update: false,
                    };
                    let out = resblock(&mut ctx, "blk", nodes[0], mask)?;
                    let sq = ctx.g.mul(out, out)?;
                    ctx.g.mean_all(sq)
                },
            )
            .unwrap();
            assert!(rep.passes(DEFAULT_TOL), "seed {seed}: {rep:?}");
        }
    }
}
