//! Training objectives: hinge adversarial losses, feature matching, and the
//! Jaccard + cross-entropy segmentation loss.

use crate::error::{Error, Result};
use crate::graph::{Graph, Node};
use crate::nn::mask::is_one_hot;
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub lambda_fm: f64,
    pub lambda_jaccard: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_fm: 10.0,
            lambda_jaccard: 1.0,
        }
    }
}

/// Discriminator hinge loss, averaged over scales:
/// mean(relu(1 - real)) + mean(relu(1 + fake)).
pub fn hinge_loss_d<T: Scalar>(
    g: &mut Graph<T>,
    real_scores: &[Node],
    fake_scores: &[Node],
) -> Result<Node> {
    if real_scores.is_empty() || real_scores.len() != fake_scores.len() {
        return Err(Error::domain("hinge_loss_d wants matching non-empty score lists"));
    }
    let mut per_scale = Vec::new();
    for (&r, &f) in real_scores.iter().zip(fake_scores) {
        let one_minus_r = g.rsub_scalar(1.0, r)?;
        let r_term = g.relu(one_minus_r)?;
        let r_term = g.mean_all(r_term)?;
        let one_plus_f = g.add_scalar(f, 1.0)?;
        let f_term = g.relu(one_plus_f)?;
        let f_term = g.mean_all(f_term)?;
        per_scale.push(g.add(r_term, f_term)?);
    }
    g.mean_nodes(&per_scale)
}

/// Generator hinge loss, averaged over scales: -mean(fake).
pub fn hinge_loss_g<T: Scalar>(g: &mut Graph<T>, fake_scores: &[Node]) -> Result<Node> {
    if fake_scores.is_empty() {
        return Err(Error::domain("hinge_loss_g wants at least one score map"));
    }
    let mut per_scale = Vec::new();
    for &f in fake_scores {
        let m = g.mean_all(f)?;
        per_scale.push(g.neg(m)?);
    }
    g.mean_nodes(&per_scale)
}

/// Mean absolute difference between discriminator activations on real and
/// fake inputs, averaged over layers within each scale and then over scales.
/// The real side is detached: this loss trains the generator only.
pub fn feature_matching<T: Scalar>(
    g: &mut Graph<T>,
    real_feats: &[Vec<Node>],
    fake_feats: &[Vec<Node>],
) -> Result<Node> {
    if real_feats.is_empty() || real_feats.len() != fake_feats.len() {
        return Err(Error::domain("feature_matching wants matching non-empty stacks"));
    }
    let mut per_scale = Vec::new();
    for (rs, fs) in real_feats.iter().zip(fake_feats) {
        if rs.is_empty() || rs.len() != fs.len() {
            return Err(Error::domain("feature_matching layer counts disagree"));
        }
        let mut per_layer = Vec::new();
        for (&r, &f) in rs.iter().zip(fs) {
            if g.shape(r) != g.shape(f) {
                return Err(Error::dim(format!(
                    "feature_matching shapes {:?} vs {:?}",
                    g.shape(r),
                    g.shape(f)
                )));
            }
            let r_const = g.detach(r)?;
            let diff = g.sub(f, r_const)?;
            let ad = g.abs_t(diff)?;
            per_layer.push(g.mean_all(ad)?);
        }
        per_scale.push(g.mean_nodes(&per_layer)?);
    }
    g.mean_nodes(&per_scale)
}

/// Pieces of the segmentation loss, all scalar nodes.
pub struct SegLoss {
    pub total: Node,
    pub cross_entropy: Node,
    pub jaccard_term: Node,
}

/// Cross-entropy plus soft-Jaccard complement:
///
/// ```text
/// CE   = -mean over pixels of log softmax at the target channel
/// J_c  = sum(p_c * t_c) / (sum(p_c) + sum(t_c) - sum(p_c * t_c))
/// loss = CE + lambda * (1 - mean over classes present of J_c)
/// ```
///
/// `target` must be one-hot [N, L+1, S, S].
pub fn jaccard_ce_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: Node,
    target: &Tensor<T>,
    lambda_jaccard: f64,
) -> Result<SegLoss> {
    let lshape = g.shape(logits).clone();
    if &lshape != target.shape() {
        return Err(Error::dim(format!(
            "logits {:?} vs target {:?}",
            lshape,
            target.shape()
        )));
    }
    if !is_one_hot(target) {
        return Err(Error::domain("jaccard_ce_loss target is not one-hot"));
    }
    let (n, ch, h, w) = target.shape().nchw()?;
    let t_node = g.constant(target.clone());

    let probs = g.softmax_c(logits)?;
    // log(p + 1e-12) keeps saturated wrong channels finite; the 0 target
    // entries zero them out of the loss anyway.
    let safe = g.add_scalar(probs, 1e-12)?;
    let lp = g.log(safe)?;
    let picked = g.mul(lp, t_node)?;
    let per_pixel = g.sum_axes(picked, &[1])?;
    let ce_mean = g.mean_all(per_pixel)?;
    let cross_entropy = g.neg(ce_mean)?;

    // per-class presence from the target tensor
    let mut class_sums = vec![0.0f64; ch];
    for s in 0..n {
        for c in 0..ch {
            let plane = &target.data()[(s * ch + c) * h * w..][..h * w];
            class_sums[c] += plane.iter().map(|v| v.to_f64()).sum::<f64>();
        }
    }
    let mut per_class = Vec::new();
    for (c, &t_total) in class_sums.iter().enumerate() {
        if t_total == 0.0 {
            continue;
        }
        let mut sel = Tensor::<T>::zeros(Shape::new(&[1, ch, 1, 1]));
        sel.data_mut()[c] = T::one();
        let sel = g.constant(sel);
        let p_sel = g.mul(probs, sel)?;
        let p_c = g.sum_axes(p_sel, &[1])?;
        let t_sel = g.mul(t_node, sel)?;
        let t_c = g.sum_axes(t_sel, &[1])?;
        let pt = g.mul(p_c, t_c)?;
        let inter = g.sum_all(pt)?;
        let p_sum = g.sum_all(p_c)?;
        let t_sum = g.sum_all(t_c)?;
        let sums = g.add(p_sum, t_sum)?;
        let union = g.sub(sums, inter)?;
        let inv = g.recip_pos(union)?;
        per_class.push(g.mul(inter, inv)?);
    }
    let jaccard = g.mean_nodes(&per_class)?;
    let jaccard_term = g.rsub_scalar(1.0, jaccard)?;
    let weighted = g.scalar_mul(jaccard_term, T::from_f64(lambda_jaccard))?;
    let total = g.add(cross_entropy, weighted)?;
    Ok(SegLoss {
        total,
        cross_entropy,
        jaccard_term,
    })
}
