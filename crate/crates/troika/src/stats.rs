//! Paired nonparametric testing and score aggregation.
//!
//! The Wilcoxon signed-rank test here uses the textbook defaults: zero
//! differences are dropped, tied absolute differences share average ranks,
//! and W = min(W+, W-). For n <= 20 pairs the two-sided p-value is exact —
//! all 2^n sign assignments are enumerated and p = P(min(W+, W-) <= W_obs)
//! under the symmetric null. Larger n uses the normal approximation with tie
//! and continuity corrections.

use statrs::distribution::ContinuousCDF;

use crate::error::{Error, Result};

/// Two equal-length score lists to compare pairwise.
#[derive(Debug, Clone)]
pub struct PairedSample {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl PairedSample {
    pub fn new(a: Vec<f64>, b: Vec<f64>) -> Result<PairedSample> {
        if a.len() != b.len() {
            return Err(Error::domain(format!(
                "paired sample length mismatch: {} vs {}",
                a.len(),
                b.len()
            )));
        }
        if a.is_empty() {
            return Err(Error::domain("paired sample must be non-empty"));
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::domain("paired sample contains non-finite values"));
        }
        Ok(PairedSample { a, b })
    }
}

/// Largest n that still enumerates exactly.
pub const EXACT_LIMIT: usize = 20;

/// Average ranks of |d|, ties sharing their mean rank.
fn average_ranks(abs_d: &[f64]) -> Vec<f64> {
    let n = abs_d.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| abs_d[i].partial_cmp(&abs_d[j]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && abs_d[order[j + 1]] == abs_d[order[i]] {
            j += 1;
        }
        // ranks are 1-based; the tied group i..=j shares the mean rank
        let mean_rank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = mean_rank;
        }
        i = j + 1;
    }
    ranks
}

/// Wilcoxon signed-rank test. Returns (W, two-sided p in (0, 1]).
///
/// All-zero difference vectors are the degenerate no-signal case: W = 0,
/// p = 1.
pub fn wilcoxon_signed_rank(s: &PairedSample) -> Result<(f64, f64)> {
    let diffs: Vec<f64> = s
        .a
        .iter()
        .zip(&s.b)
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    let n = diffs.len();
    if n == 0 {
        return Ok((0.0, 1.0));
    }
    let abs_d: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs_d);
    let w_plus: f64 = ranks
        .iter()
        .zip(&diffs)
        .filter(|(_, d)| **d > 0.0)
        .map(|(r, _)| r)
        .sum();
    let total: f64 = ranks.iter().sum();
    let w_minus = total - w_plus;
    let w = w_plus.min(w_minus);

    let p = if n <= EXACT_LIMIT {
        exact_two_sided_p(&ranks, w)
    } else {
        normal_two_sided_p(&ranks, w)
    };
    Ok((w, p.clamp(f64::MIN_POSITIVE, 1.0)))
}

/// p = #{sign assignments with min(W+, W-) <= w_obs} / 2^n. Ranks are
/// multiples of 0.5, so all sums are exact in f64 and the comparison needs
/// no epsilon.
fn exact_two_sided_p(ranks: &[f64], w_obs: f64) -> f64 {
    let n = ranks.len();
    let total: f64 = ranks.iter().sum();
    let mut extreme = 0u64;
    for mask in 0u64..(1u64 << n) {
        let mut w_plus = 0.0;
        for (i, r) in ranks.iter().enumerate() {
            if mask >> i & 1 == 1 {
                w_plus += r;
            }
        }
        if w_plus.min(total - w_plus) <= w_obs {
            extreme += 1;
        }
    }
    extreme as f64 / (1u64 << n) as f64
}

fn normal_two_sided_p(ranks: &[f64], w: f64) -> f64 {
    let n = ranks.len() as f64;
    let mu = n * (n + 1.0) / 4.0;
    // tie correction: group sizes from repeated ranks
    let mut sorted = ranks.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    // W = min side sits at or below the mean; continuity-correct toward it
    let z = (w - mu + 0.5) / var.sqrt();
    let normal = statrs::distribution::Normal::new(0.0, 1.0).expect("standard normal");
    (2.0 * normal.cdf(z)).min(1.0)
}

/// Arithmetic mean and sample standard deviation (n - 1 denominator;
/// a single observation reports std 0).
pub fn summarize(scores: &[f64]) -> Result<(f64, f64)> {
    if scores.is_empty() {
        return Err(Error::domain("summarize of empty list"));
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    if scores.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = scores.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    /// Independent brute-force oracle: its own ranking (insertion style) and
    /// its own enumeration, sharing no code with the implementation.
    fn oracle_exact(a: &[f64], b: &[f64]) -> (f64, f64) {
        let d: Vec<f64> = a
            .iter()
            .zip(b)
            .map(|(x, y)| x - y)
            .filter(|v| *v != 0.0)
            .collect();
        let n = d.len();
        if n == 0 {
            return (0.0, 1.0);
        }
        // rank of |d_i| = (#strictly smaller) + (1 + #equal) / 2 ... as the
        // average of the occupied positions
        let mut ranks = vec![0.0; n];
        for i in 0..n {
            let ai = d[i].abs();
            let smaller = d.iter().filter(|x| x.abs() < ai).count();
            let equal = d.iter().filter(|x| x.abs() == ai).count();
            ranks[i] = smaller as f64 + (equal as f64 + 1.0) / 2.0;
        }
        let total: f64 = ranks.iter().sum();
        let wp: f64 = (0..n).filter(|&i| d[i] > 0.0).map(|i| ranks[i]).sum();
        let w_obs = wp.min(total - wp);
        let mut hits = 0u64;
        for mask in 0u64..(1 << n) {
            let s: f64 = (0..n).filter(|&i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
            if s.min(total - s) <= w_obs {
                hits += 1;
            }
        }
        (w_obs, hits as f64 / (1u64 << n) as f64)
    }

    #[test]
    fn identical_lists_give_w0_p1() {
        let s = PairedSample::new(vec![0.5, 0.7, 0.9], vec![0.5, 0.7, 0.9]).unwrap();
        let (w, p) = wilcoxon_signed_rank(&s).unwrap();
        assert_eq!(w, 0.0);
        assert_eq!(p, 1.0);
    }

    #[test]
    fn six_negative_differences_exact_p() {
        // all six differences strictly negative, no ties:
        // W = 0, p = 2/2^6 = 0.03125
        let a = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = vec![1.5, 2.7, 3.9, 4.4, 5.8, 6.6];
        let s = PairedSample::new(a, b).unwrap();
        let (w, p) = wilcoxon_signed_rank(&s).unwrap();
        assert_eq!(w, 0.0);
        assert!((p - 0.03125).abs() < 1e-15);
    }

    #[test]
    fn exact_matches_bruteforce_oracle_for_100_random_samples() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for case in 0..100 {
            let n = rng.gen_range(1..=10usize);
            // coarse grid values provoke ties and zero differences
            let a: Vec<f64> = (0..n).map(|_| rng.gen_range(0..8) as f64 / 4.0).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(0..8) as f64 / 4.0).collect();
            if a.iter().zip(&b).all(|(x, y)| x == y) {
                continue;
            }
            let s = PairedSample::new(a.clone(), b.clone()).unwrap();
            let (w, p) = wilcoxon_signed_rank(&s).unwrap();
            let (w_o, p_o) = oracle_exact(&a, &b);
            assert!((w - w_o).abs() <= 1e-12, "case {case}: W {w} vs {w_o}");
            assert!((p - p_o).abs() <= 1e-12, "case {case}: p {p} vs {p_o}");
        }
    }

    #[test]
    fn p_invariant_under_common_affine_shift() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let a: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (w1, p1) =
            wilcoxon_signed_rank(&PairedSample::new(a.clone(), b.clone()).unwrap()).unwrap();
        let shift = |v: &[f64]| v.iter().map(|x| 3.0 * x + 11.0).collect::<Vec<_>>();
        let (w2, p2) =
            wilcoxon_signed_rank(&PairedSample::new(shift(&a), shift(&b)).unwrap()).unwrap();
        assert_eq!(w1, w2);
        assert_eq!(p1, p2);
    }

    #[test]
    fn swapping_sides_preserves_two_sided_p() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let n = rng.gen_range(2..=12usize);
            let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (w1, p1) =
                wilcoxon_signed_rank(&PairedSample::new(a.clone(), b.clone()).unwrap()).unwrap();
            let (w2, p2) = wilcoxon_signed_rank(&PairedSample::new(b, a).unwrap()).unwrap();
            assert_eq!(w1, w2, "W = min(W+, W-) is swap-invariant");
            assert_eq!(p1, p2);
        }
    }

    #[test]
    fn exact_and_normal_branch_agree_at_the_crossover() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for case in 0..20 {
            let n = 20;
            let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let diffs: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
            let abs_d: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
            let ranks = average_ranks(&abs_d);
            let total: f64 = ranks.iter().sum();
            let wp: f64 = ranks
                .iter()
                .zip(&diffs)
                .filter(|(_, d)| **d > 0.0)
                .map(|(r, _)| r)
                .sum();
            let w = wp.min(total - wp);
            let p_exact = exact_two_sided_p(&ranks, w);
            let p_norm = normal_two_sided_p(&ranks, w);
            assert!(
                (p_exact - p_norm).abs() <= 0.01,
                "case {case}: exact {p_exact} vs normal {p_norm}"
            );
        }
    }

    #[test]
    fn summarize_examples() {
        assert_eq!(summarize(&[4.2]).unwrap(), (4.2, 0.0));
        let (m, s) = summarize(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
        let (m, s) = summarize(&[0.7, 0.7, 0.7, 0.7]).unwrap();
        assert_eq!(m, 0.7);
        assert_eq!(s, 0.0);
        assert!(summarize(&[]).is_err());
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(PairedSample::new(vec![1.0], vec![1.0, 2.0]).is_err());
        assert!(PairedSample::new(vec![], vec![]).is_err());
        assert!(PairedSample::new(vec![f64::NAN], vec![0.0]).is_err());
    }
}
