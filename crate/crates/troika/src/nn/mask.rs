//! Label maps and their one-hot encodings.
//!
//! A [`LabelMap`] is an S x S grid of semantic labels in `[0, L]`, label 0
//! being background. Masks condition the generator at every block resolution;
//! resizing uses nearest-neighbor sampling so the one-hot property survives
//! exactly.

use crate::error::{Error, Result};
use crate::graph::{Graph, Node};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub size: usize,
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(size: usize, labels: Vec<u8>) -> Result<LabelMap> {
        if labels.len() != size * size {
            return Err(Error::dim(format!(
                "label map wants {}x{} = {} labels, got {}",
                size,
                size,
                size * size,
                labels.len()
            )));
        }
        Ok(LabelMap { size, labels })
    }

    pub fn zeros(size: usize) -> LabelMap {
        LabelMap {
            size,
            labels: vec![0; size * size],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.size + x]
    }

    pub fn max_label(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Fraction of pixels carrying `label`.
    pub fn label_fraction(&self, label: u8) -> f64 {
        let n = self.labels.iter().filter(|&&l| l == label).count();
        n as f64 / self.labels.len() as f64
    }

    /// Nearest-neighbor downsample to `target` (must divide `size` evenly);
    /// picks the top-left sample of each cell, so labels are copied, never
    /// blended.
    pub fn downsample_to(&self, target: usize) -> Result<LabelMap> {
        if target == 0 || self.size % target != 0 {
            return Err(Error::dim(format!(
                "cannot resize {}-px mask to {} px",
                self.size, target
            )));
        }
        let f = self.size / target;
        let mut labels = Vec::with_capacity(target * target);
        for y in 0..target {
            for x in 0..target {
                labels.push(self.get(y * f, x * f));
            }
        }
        Ok(LabelMap {
            size: target,
            labels,
        })
    }
}

/// One-hot a batch of equally sized masks into [N, L+1, S, S] with {0,1}
/// entries; errors if any label exceeds `n_labels`.
pub fn one_hot_batch<T: Scalar>(masks: &[&LabelMap], n_labels: usize) -> Result<Tensor<T>> {
    if masks.is_empty() {
        return Err(Error::domain("one_hot_batch of zero masks"));
    }
    let s = masks[0].size;
    let ch = n_labels + 1;
    let mut data = vec![T::zero(); masks.len() * ch * s * s];
    for (i, m) in masks.iter().enumerate() {
        if m.size != s {
            return Err(Error::dim("masks in a batch must share size"));
        }
        for (pix, &l) in m.labels.iter().enumerate() {
            if l as usize > n_labels {
                return Err(Error::domain(format!(
                    "label {l} exceeds configured max {n_labels}"
                )));
            }
            data[(i * ch + l as usize) * s * s + pix] = T::one();
        }
    }
    Tensor::new([masks.len(), ch, s, s], data)
}

/// True iff every pixel's channels sum to exactly one and all entries are
/// 0 or 1.
pub fn is_one_hot<T: Scalar>(t: &Tensor<T>) -> bool {
    let Ok((n, c, h, w)) = t.shape().nchw() else {
        return false;
    };
    let d = t.data();
    for s in 0..n {
        for pix in 0..h * w {
            let mut total = 0.0;
            for ch in 0..c {
                let v = d[(s * c + ch) * h * w + pix].to_f64();
                if v != 0.0 && v != 1.0 {
                    return false;
                }
                total += v;
            }
            if total != 1.0 {
                return false;
            }
        }
    }
    true
}

/// One-hot masks for each requested resolution, coarsest first. Shared by
/// the generator blocks, which consume the mask at their own scale.
pub struct MaskPyramid<T> {
    pub levels: Vec<(usize, Tensor<T>)>,
}

impl<T: Scalar> MaskPyramid<T> {
    pub fn build(masks: &[&LabelMap], n_labels: usize, resolutions: &[usize]) -> Result<MaskPyramid<T>> {
        let mut levels = Vec::new();
        for &res in resolutions {
            let small: Vec<LabelMap> = masks
                .iter()
                .map(|m| m.downsample_to(res))
                .collect::<Result<_>>()?;
            let refs: Vec<&LabelMap> = small.iter().collect();
            levels.push((res, one_hot_batch(&refs, n_labels)?));
        }
        Ok(MaskPyramid { levels })
    }

    pub fn at(&self, res: usize) -> Result<&Tensor<T>> {
        self.levels
            .iter()
            .find(|(r, _)| *r == res)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::dim(format!("mask pyramid has no level {res}")))
    }

    pub fn node_at(&self, g: &mut Graph<T>, res: usize) -> Result<Node> {
        Ok(g.constant(self.at(res)?.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_mask(size: usize, n_labels: u8, seed: u64) -> LabelMap {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        LabelMap::new(
            size,
            (0..size * size).map(|_| rng.gen_range(0..=n_labels)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn one_hot_is_exactly_one_hot() {
        let m = random_mask(16, 2, 3);
        let t = one_hot_batch::<f32>(&[&m], 2).unwrap();
        assert_eq!(t.shape().dims(), &[1, 3, 16, 16]);
        assert!(is_one_hot(&t));
    }

    #[test]
    fn nearest_resize_preserves_one_hotness() {
        for seed in 0..8u64 {
            let m = random_mask(32, 2, seed);
            for target in [16, 8, 4] {
                let small = m.downsample_to(target).unwrap();
                let t = one_hot_batch::<f64>(&[&small], 2).unwrap();
                assert!(is_one_hot(&t), "seed {seed} target {target}");
            }
        }
    }

    #[test]
    fn resize_requires_divisible_target() {
        let m = random_mask(32, 1, 0);
        assert!(m.downsample_to(12).is_err());
        assert!(m.downsample_to(0).is_err());
    }

    #[test]
    fn out_of_range_label_rejected() {
        let m = LabelMap::new(2, vec![0, 1, 2, 3]).unwrap();
        assert!(one_hot_batch::<f32>(&[&m], 2).is_err());
        assert!(one_hot_batch::<f32>(&[&m], 3).is_ok());
    }
}
