//! Hard pixel-count Dice for evaluation.

use crate::error::{Error, Result};
use crate::nn::mask::LabelMap;

/// 2|P ∩ T| / (|P| + |T|) for pixels of class `c`. When both maps lack the
/// class entirely, the score is 1 (they agree the class is absent).
pub fn dice_per_class(pred: &LabelMap, target: &LabelMap, c: u8, n_labels: usize) -> Result<f64> {
    if pred.size != target.size {
        return Err(Error::dim(format!(
            "label maps disagree in size: {} vs {}",
            pred.size, target.size
        )));
    }
    if c as usize > n_labels {
        return Err(Error::domain(format!("class {c} exceeds max label {n_labels}")));
    }
    for &l in pred.labels.iter().chain(target.labels.iter()) {
        if l as usize > n_labels {
            return Err(Error::domain(format!(
                "label {l} out of range [0, {n_labels}]"
            )));
        }
    }
    let mut p = 0usize;
    let mut t = 0usize;
    let mut inter = 0usize;
    for (&lp, &lt) in pred.labels.iter().zip(&target.labels) {
        let ip = lp == c;
        let it = lt == c;
        p += usize::from(ip);
        t += usize::from(it);
        inter += usize::from(ip && it);
    }
    if p + t == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + t) as f64)
}

/// Per-class Dice for every label 0..=L.
pub fn dice_all_classes(pred: &LabelMap, target: &LabelMap, n_labels: usize) -> Result<Vec<f64>> {
    (0..=n_labels as u8)
        .map(|c| dice_per_class(pred, target, c, n_labels))
        .collect()
}

/// Unweighted mean Dice over the foreground classes 1..=L (background is
/// excluded so trivially large background overlap cannot mask poor lesions).
pub fn dice_foreground_mean(pred: &LabelMap, target: &LabelMap, n_labels: usize) -> Result<f64> {
    if n_labels == 0 {
        return Err(Error::domain("dice_foreground_mean needs at least one foreground class"));
    }
    let mut acc = 0.0;
    for c in 1..=n_labels as u8 {
        acc += dice_per_class(pred, target, c, n_labels)?;
    }
    Ok(acc / n_labels as f64)
}
