//! Runtime verification suites: gradient checks and oracle comparisons,
//! all in f64. The CLI `selfcheck` command runs these and fails loudly;
//! the test suite reuses the same entry points.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::gradcheck::{finite_diff_check, CheckOpts, DEFAULT_TOL};
use crate::graph::{Graph, Node};
use crate::losses;
use crate::metrics::dice_per_class;
use crate::nn::mask::{one_hot_batch, LabelMap};
use crate::nn::{instance_normalize, spade, spectral, Bound, Ctx, ParamStore};
use crate::optim::{AdamConfig, AdamState};
use crate::stats::{wilcoxon_signed_rank, PairedSample};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

/// Run every suite; `fault` optionally injects a broken backward rule into
/// the gradient suite to prove the checks can fail.
pub fn run_all(fault: Option<&str>) -> Vec<SuiteResult> {
    let suites: Vec<(&str, Box<dyn Fn() -> Result<String, String>>)> = vec![
        (
            "gradients",
            Box::new({
                let fault = fault.map(|s| s.to_string());
                move || gradient_suite(fault.as_deref())
            }),
        ),
        ("conv_oracle", Box::new(conv_oracle_suite)),
        ("pool_oracle", Box::new(pool_oracle_suite)),
        ("adam_oracle", Box::new(adam_oracle_suite)),
        ("spectral_oracle", Box::new(spectral_oracle_suite)),
        ("dice_oracle", Box::new(dice_oracle_suite)),
        ("wilcoxon_oracle", Box::new(wilcoxon_oracle_suite)),
    ];
    let mut out = Vec::new();
    for (name, f) in suites {
        let t0 = Instant::now();
        let r = f();
        out.push(SuiteResult {
            name: name.to_string(),
            passed: r.is_ok(),
            detail: match r {
                Ok(d) => d,
                Err(d) => d,
            },
            seconds: t0.elapsed().as_secs_f64(),
        });
    }
    out
}

fn small_mask(size: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<u8> = (0..size * size).map(|_| rng.gen_range(0..=2)).collect();
    let m = LabelMap::new(size, labels).unwrap();
    one_hot_batch(&[&m], 2).unwrap()
}

/// Central finite differences against every primitive, composite layer and
/// loss, over 5 seeds each.
fn gradient_suite(fault: Option<&str>) -> Result<String, String> {
    let mut worst: f64 = 0.0;
    let mut n_cases = 0;
    let mut run = |name: &str,
                   inputs: &[Tensor<f64>],
                   f: &dyn Fn(&mut Graph<f64>, &[Node]) -> crate::Result<Node>|
     -> Result<(), String> {
        for seed in 0..5u64 {
            let opts = CheckOpts {
                seed,
                max_coords: 12,
                ..Default::default()
            };
            let fault = fault.map(|s| s.to_string());
            let rep = finite_diff_check(inputs, opts, |g, n| {
                if let Some(op) = &fault {
                    g.inject_backward_fault(op);
                }
                f(g, n)
            })
            .map_err(|e| format!("{name}: {e}"))?;
            worst = worst.max(rep.max_rel_err);
            n_cases += 1;
            if !rep.passes(DEFAULT_TOL) {
                return Err(format!(
                    "gradient check failed for op `{name}` (seed {seed}): max rel err {:.3e}",
                    rep.max_rel_err
                ));
            }
        }
        Ok(())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x44 = Tensor::<f64>::randn([1, 2, 4, 4], 1.0, &mut rng);
    let x66 = Tensor::<f64>::randn([1, 2, 6, 6], 1.0, &mut rng);
    let w = Tensor::<f64>::randn([3, 2, 3, 3], 0.4, &mut rng);
    let b = Tensor::<f64>::randn([3], 0.2, &mut rng);
    let a2 = Tensor::<f64>::randn([3, 4], 0.8, &mut rng);
    let b2 = Tensor::<f64>::randn([4, 2], 0.8, &mut rng);
    let pos = x44.map(|v| v.abs() + 0.3);

    run("conv2d", &[x66.clone(), w.clone(), b.clone()], &|g, n| {
        let y = g.conv2d(n[0], n[1], Some(n[2]), 2, 1)?;
        let sq = g.mul(y, y)?;
        g.mean_all(sq)
    })?;
    run("matmul", &[a2.clone(), b2.clone()], &|g, n| {
        let y = g.matmul(n[0], n[1])?;
        let sq = g.mul(y, y)?;
        g.sum_all(sq)
    })?;
    run("elementwise", &[x44.clone()], &|g, n| {
        let r = g.leaky_relu(n[0], 0.2)?;
        let t = g.tanh(r)?;
        let s = g.sigmoid(t)?;
        let m = g.mul(s, t)?;
        g.mean_all(m)
    })?;
    run("log_exp", &[pos.clone()], &|g, n| {
        let l = g.log(n[0])?;
        let e = g.exp(l)?;
        let pr = g.mul(e, l)?;
        g.sum_all(pr)
    })?;
    run("softmax_c", &[x44.clone()], &|g, n| {
        let p = g.softmax_c(n[0])?;
        let sq = g.mul(p, p)?;
        g.sum_all(sq)
    })?;
    run("avg_pool2d", &[x66.clone()], &|g, n| {
        let p = g.avg_pool2d(n[0], 2, 2)?;
        let sq = g.mul(p, p)?;
        g.mean_all(sq)
    })?;
    run("upsample_nearest2x", &[x44.clone()], &|g, n| {
        let u = g.upsample_nearest2x(n[0])?;
        let sq = g.mul(u, u)?;
        g.mean_all(sq)
    })?;
    run("reductions_concat", &[x44.clone(), x44.clone()], &|g, n| {
        let c = g.concat_c(&[n[0], n[1]])?;
        let m = g.mean_axes(c, &[2, 3])?;
        let s = g.sum_axes(m, &[1])?;
        let sq = g.mul(s, s)?;
        g.sum_all(sq)
    })?;
    run("instance_normalize", &[x44.clone()], &|g, n| {
        let z = instance_normalize(g, n[0])?;
        let sq = g.mul(z, z)?;
        g.mean_all(sq)
    })?;

    // composite layers with parameters as inputs
    let mask4 = small_mask(4, 3);
    {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut store = ParamStore::<f64>::new();
        spade::init_spade(&mut store, "sp", 2, 3, 4, &mut rng);
        let names: Vec<String> = store.params.keys().cloned().collect();
        let mut inputs = vec![x44.clone()];
        inputs.extend(names.iter().map(|n| store.get(n).unwrap().clone()));
        let mask = mask4.clone();
        run("spade_normalize", &inputs, &|g, n| {
            let mut st = ParamStore::new();
            let mut bn = indexmap::IndexMap::new();
            for (i, nm) in names.iter().enumerate() {
                st.insert(nm, g.value(n[i + 1]).clone());
                bn.insert(nm.clone(), n[i + 1]);
            }
            let bound = Bound::from_nodes(bn, true);
            let mut bank = spectral::SpectralBank::new();
            let m = g.constant(mask.clone());
            let mut ctx = Ctx {
                g,
                store: &st,
                bound: &bound,
                bank: &mut bank,
                sn_update: false,
            };
            let y = spade::spade_normalize(&mut ctx, "sp", n[0], m)?;
            let sq = ctx.g.mul(y, y)?;
            ctx.g.mean_all(sq)
        })?;
    }
    {
        // spectrally normalized conv: fixed u, gradient flows through
        // sigma_hat = u^T W v
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let mut store = ParamStore::<f64>::new();
        store.init_conv("c.weight", 3, 2, 3, 0.3, &mut rng);
        store.init_zeros("c.bias", [3]);
        let mut bank0 = spectral::SpectralBank::new();
        bank0.register("c.weight", 3, &mut rng);
        let wt = store.get("c.weight").unwrap().clone();
        let bt = store.get("c.bias").unwrap().clone();
        run("spectral_norm_conv", &[x44.clone(), wt, bt], &|g, n| {
            let mut st = ParamStore::new();
            st.insert("c.weight", g.value(n[1]).clone());
            st.insert("c.bias", g.value(n[2]).clone());
            let mut bn = indexmap::IndexMap::new();
            bn.insert("c.weight".to_string(), n[1]);
            bn.insert("c.bias".to_string(), n[2]);
            let bound = Bound::from_nodes(bn, true);
            let mut bank = bank0.clone();
            let mut ctx = Ctx {
                g,
                store: &st,
                bound: &bound,
                bank: &mut bank,
                sn_update: false,
            };
            let y = spectral::sn_conv(&mut ctx, "c", n[0], 1, 1)?;
            let sq = ctx.g.mul(y, y)?;
            ctx.g.mean_all(sq)
        })?;
    }
    {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut store = ParamStore::<f64>::new();
        let spec = crate::nn::embed::ClassEmbeddingSpec {
            n_classes: 3,
            embed_dim: 4,
            out_channels: 2,
            base: 2,
        };
        crate::nn::embed::init_embedding(&mut store, "emb", &spec, &mut rng);
        let names: Vec<String> = store.params.keys().cloned().collect();
        let inputs: Vec<Tensor<f64>> =
            names.iter().map(|n| store.get(n).unwrap().clone()).collect();
        run("embed_class", &inputs, &|g, n| {
            let mut st = ParamStore::new();
            let mut bn = indexmap::IndexMap::new();
            for (i, nm) in names.iter().enumerate() {
                st.insert(nm, g.value(n[i]).clone());
                bn.insert(nm.clone(), n[i]);
            }
            let bound = Bound::from_nodes(bn, true);
            let mut bank = spectral::SpectralBank::new();
            let mut ctx = Ctx {
                g,
                store: &st,
                bound: &bound,
                bank: &mut bank,
                sn_update: false,
            };
            let y = crate::nn::embed::embed_class(&mut ctx, "emb", &[1, 2], &spec)?;
            let sq = ctx.g.mul(y, y)?;
            ctx.g.mean_all(sq)
        })?;
    }
    {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let mut store = ParamStore::<f64>::new();
        let mut bank0 = spectral::SpectralBank::new();
        spade::init_resblock(&mut store, &mut bank0, "blk", 2, 3, 3, 4, &mut rng);
        let names: Vec<String> = store.params.keys().cloned().collect();
        let mut inputs = vec![x44.clone()];
        inputs.extend(names.iter().map(|n| store.get(n).unwrap().clone()));
        let mask = mask4.clone();
        run("spade_resblock", &inputs, &|g, n| {
            let mut st = ParamStore::new();
            let mut bn = indexmap::IndexMap::new();
            for (i, nm) in names.iter().enumerate() {
                st.insert(nm, g.value(n[i + 1]).clone());
                bn.insert(nm.clone(), n[i + 1]);
            }
            let bound = Bound::from_nodes(bn, true);
            let mut bank = bank0.clone();
            let m = g.constant(mask.clone());
            let mut ctx = Ctx {
                g,
                store: &st,
                bound: &bound,
                bank: &mut bank,
                sn_update: false,
            };
            let y = spade::resblock(&mut ctx, "blk", n[0], m)?;
            let sq = ctx.g.mul(y, y)?;
            ctx.g.mean_all(sq)
        })?;
    }

    // losses
    let r_feat = Tensor::<f64>::randn([1, 2, 3, 3], 1.0, &mut rng);
    run("hinge_losses", &[x44.clone(), x44.clone()], &|g, n| {
        let d = losses::hinge_loss_d(g, &[n[0]], &[n[1]])?;
        let ge = losses::hinge_loss_g(g, &[n[1]])?;
        g.add(d, ge)
    })?;
    run("feature_matching", &[r_feat.clone()], &|g, n| {
        let r = g.constant(r_feat.clone());
        losses::feature_matching(g, &[vec![r]], &[vec![n[0]]])
    })?;
    let ce_target = {
        let labels: Vec<u8> = (0..16).map(|i| (i % 2) as u8).collect();
        let m = LabelMap::new(4, labels).unwrap();
        one_hot_batch::<f64>(&[&m], 1).unwrap()
    };
    run("jaccard_ce", &[x44.map(|v| v * 1.5)], &|g, n| {
        Ok(losses::jaccard_ce_loss(g, n[0], &ce_target, 1.0)?.total)
    })?;

    Ok(format!("{n_cases} sweeps, worst rel err {worst:.2e}"))
}

/// conv2d against a naive quadruple-loop convolution.
pub fn conv_loop_oracle(
    x: &[f64],
    (n, ci, h, w): (usize, usize, usize, usize),
    wgt: &[f64],
    (co, kh, kw): (usize, usize, usize),
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let h_out = (h + 2 * pad - kh) / stride + 1;
    let w_out = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * co * h_out * w_out];
    for s in 0..n {
        for o in 0..co {
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let mut acc = bias.map(|b| b[o]).unwrap_or(0.0);
                    for c in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x[((s * ci + c) * h + iy as usize) * w + ix as usize]
                                    * wgt[((o * ci + c) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((s * co + o) * h_out + oy) * w_out + ox] = acc;
                }
            }
        }
    }
    out
}

fn conv_oracle_suite() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let cases = [
        (1usize, 1usize, 5usize, 5usize, 2usize, 3usize, 1usize, 1usize),
        (2, 3, 8, 8, 4, 4, 2, 1),
        (1, 2, 7, 9, 3, 3, 1, 0),
        (1, 4, 6, 6, 1, 5, 3, 2),
    ];
    for (case_no, &(n, ci, h, w, co, k, stride, pad)) in cases.iter().enumerate() {
        let x = Tensor::<f64>::randn([n, ci, h, w], 1.0, &mut rng);
        let wt = Tensor::<f64>::randn([co, ci, k, k], 0.5, &mut rng);
        let b = Tensor::<f64>::randn([co], 0.5, &mut rng);
        let mut g = Graph::<f64>::new();
        let xn = g.constant(x.clone());
        let wn = g.constant(wt.clone());
        let bn = g.constant(b.clone());
        let y = g
            .conv2d(xn, wn, Some(bn), stride, pad)
            .map_err(|e| e.to_string())?;
        let want = conv_loop_oracle(
            x.data(),
            (n, ci, h, w),
            wt.data(),
            (co, k, k),
            Some(b.data()),
            stride,
            pad,
        );
        let got = g.value(y).data();
        let max_err = got
            .iter()
            .zip(&want)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if max_err > 1e-6 {
            return Err(format!("conv case {case_no}: max err {max_err:.2e}"));
        }
    }
    Ok(format!("{} shapes within 1e-6", cases.len()))
}

fn pool_oracle_suite() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    for &(h, w, win, stride) in &[(6usize, 6usize, 2usize, 2usize), (7, 5, 3, 2), (4, 4, 4, 4)] {
        let x = Tensor::<f64>::randn([1, 2, h, w], 1.0, &mut rng);
        let mut g = Graph::<f64>::new();
        let xn = g.constant(x.clone());
        let y = g.avg_pool2d(xn, win, stride).map_err(|e| e.to_string())?;
        let h_out = (h - win) / stride + 1;
        let w_out = (w - win) / stride + 1;
        for c in 0..2 {
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let mut acc = 0.0;
                    for dy in 0..win {
                        for dx in 0..win {
                            acc += x.data()[(c * h + oy * stride + dy) * w + ox * stride + dx];
                        }
                    }
                    let want = acc / (win * win) as f64;
                    let got = g.value(y).data()[(c * h_out + oy) * w_out + ox];
                    if (got - want).abs() > 1e-6 {
                        return Err(format!("pool mismatch at ({c},{oy},{ox})"));
                    }
                }
            }
        }
    }
    Ok("3 shapes within 1e-6".to_string())
}

fn adam_oracle_suite() -> Result<String, String> {
    // 10-step trace on the quadratic p^2 against plain scalar arithmetic,
    // using the adversarial-game betas.
    let (lr, b1, b2, eps) = (1e-4f64, 0.0f64, 0.9f64, 1e-8f64);
    let mut p_ref = 0.7f64;
    let (mut m, mut v) = (0.0f64, 0.0f64);
    let mut reference = Vec::new();
    for t in 1..=10 {
        let g = 2.0 * p_ref;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        p_ref -= lr * mh / (vh.sqrt() + eps);
        reference.push(p_ref);
    }
    let mut params = indexmap::IndexMap::new();
    params.insert("p".to_string(), Tensor::<f64>::scalar(0.7));
    let mut st = AdamState::new(AdamConfig {
        lr,
        beta1: b1,
        beta2: b2,
        eps,
    });
    for (step, want) in reference.iter().enumerate() {
        let g = 2.0 * params["p"].data()[0];
        st.step(&mut params, &[("p".to_string(), Tensor::scalar(g))])
            .map_err(|e| e.to_string())?;
        let got = params["p"].data()[0];
        if (got - want).abs() > 1e-12 {
            return Err(format!("adam step {step}: {got} vs {want}"));
        }
    }
    Ok("10-step trace within 1e-12".to_string())
}

fn spectral_oracle_suite() -> Result<String, String> {
    // power iteration vs the Rayleigh quotient fixed point on W W^T,
    // computed by an independent Jacobi eigenvalue sweep
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let (rows, cols) = (8usize, 24usize);
    let w = Tensor::<f64>::randn([rows, cols], 1.0, &mut rng);
    // gram = W W^T (rows x rows)
    let mut gram = vec![0.0; rows * rows];
    for i in 0..rows {
        for j in 0..rows {
            let mut acc = 0.0;
            for k in 0..cols {
                acc += w.data()[i * cols + k] * w.data()[j * cols + k];
            }
            gram[i * rows + j] = acc;
        }
    }
    let sigma_true = jacobi_top_eigenvalue(&mut gram, rows).sqrt();
    let mut u = vec![0.0; rows];
    u[0] = 1.0;
    let (sigma, _) = spectral::power_iteration(w.data(), rows, cols, &mut u, 1000);
    let rel = (sigma - sigma_true).abs() / sigma_true;
    if rel > 0.01 {
        return Err(format!("sigma {sigma} vs eigen {sigma_true} (rel {rel:.3})"));
    }
    Ok(format!("sigma within {:.3}% of eigen oracle", rel * 100.0))
}

/// Classical Jacobi rotations on a symmetric matrix; returns the largest
/// eigenvalue. Destroys its input.
fn jacobi_top_eigenvalue(a: &mut [f64], n: usize) -> f64 {
    for _ in 0..100 {
        // find largest off-diagonal element
        let (mut p, mut q, mut max) = (0, 1, 0.0f64);
        for i in 0..n {
            for j in i + 1..n {
                if a[i * n + j].abs() > max {
                    max = a[i * n + j].abs();
                    p = i;
                    q = j;
                }
            }
        }
        if max < 1e-12 {
            break;
        }
        let theta = 0.5 * (2.0 * a[p * n + q]).atan2(a[p * n + p] - a[q * n + q]);
        let (s, c) = theta.sin_cos();
        for k in 0..n {
            let akp = a[k * n + p];
            let akq = a[k * n + q];
            a[k * n + p] = c * akp + s * akq;
            a[k * n + q] = -s * akp + c * akq;
        }
        for k in 0..n {
            let apk = a[p * n + k];
            let aqk = a[q * n + k];
            a[p * n + k] = c * apk + s * aqk;
            a[q * n + k] = -s * apk + c * aqk;
        }
    }
    (0..n).map(|i| a[i * n + i]).fold(f64::MIN, f64::max)
}

fn dice_oracle_suite() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    for case in 0..50 {
        let size = 8;
        let pv: Vec<u8> = (0..size * size).map(|_| rng.gen_range(0..3)).collect();
        let tv: Vec<u8> = (0..size * size).map(|_| rng.gen_range(0..3)).collect();
        let p = LabelMap::new(size, pv.clone()).unwrap();
        let t = LabelMap::new(size, tv.clone()).unwrap();
        for c in 0..3u8 {
            let got = dice_per_class(&p, &t, c, 2).map_err(|e| e.to_string())?;
            // independent pixel-count oracle
            let np = pv.iter().filter(|&&l| l == c).count();
            let nt = tv.iter().filter(|&&l| l == c).count();
            let ni = pv
                .iter()
                .zip(&tv)
                .filter(|(&a, &b)| a == c && b == c)
                .count();
            let want = if np + nt == 0 {
                1.0
            } else {
                2.0 * ni as f64 / (np + nt) as f64
            };
            if got != want {
                return Err(format!("dice case {case} class {c}: {got} vs {want}"));
            }
        }
    }
    Ok("50 random maps exact".to_string())
}

fn wilcoxon_oracle_suite() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(59);
    let mut checked = 0;
    for case in 0..100 {
        let n = rng.gen_range(1..=10usize);
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(0..8) as f64 / 4.0).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(0..8) as f64 / 4.0).collect();
        let s = PairedSample::new(a.clone(), b.clone()).map_err(|e| e.to_string())?;
        let (w, p) = wilcoxon_signed_rank(&s).map_err(|e| e.to_string())?;
        // independent enumerator with its own ranking
        let d: Vec<f64> = a
            .iter()
            .zip(&b)
            .map(|(x, y)| x - y)
            .filter(|v| *v != 0.0)
            .collect();
        if d.is_empty() {
            if (w, p) != (0.0, 1.0) {
                return Err(format!("case {case}: degenerate input gave ({w}, {p})"));
            }
            continue;
        }
        let m = d.len();
        let mut ranks = vec![0.0; m];
        for i in 0..m {
            let ai = d[i].abs();
            let smaller = d.iter().filter(|x| x.abs() < ai).count();
            let equal = d.iter().filter(|x| x.abs() == ai).count();
            ranks[i] = smaller as f64 + (equal as f64 + 1.0) / 2.0;
        }
        let total: f64 = ranks.iter().sum();
        let wp: f64 = (0..m).filter(|&i| d[i] > 0.0).map(|i| ranks[i]).sum();
        let w_want = wp.min(total - wp);
        let mut hits = 0u64;
        for mask in 0u64..(1 << m) {
            let s: f64 = (0..m)
                .filter(|&i| mask >> i & 1 == 1)
                .map(|i| ranks[i])
                .sum();
            if s.min(total - s) <= w_want {
                hits += 1;
            }
        }
        let p_want = hits as f64 / (1u64 << m) as f64;
        if (w - w_want).abs() > 1e-12 || (p - p_want).abs() > 1e-12 {
            return Err(format!(
                "case {case}: ({w}, {p}) vs oracle ({w_want}, {p_want})"
            ));
        }
        checked += 1;
    }
    Ok(format!("{checked} samples within 1e-12"))
}
