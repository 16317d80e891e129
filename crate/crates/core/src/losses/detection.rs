use crate::charset::LabelSet;
use crate::error::{Error, Result};
use crate::nn::softmax_rows;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Weight of cross-entropy terms whose target is a null class.
pub const NULL_CLASS_WEIGHT: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct DetectionLoss<T> {
    pub det_char: T,
    pub det_pos: T,
    pub d_char_logits: Matrix<T>,
    pub d_pos_logits: Matrix<T>,
}

/// Weighted mean cross-entropy over the matched pairs for one head.
/// Returns the loss and its gradient with respect to `logits`.
fn weighted_ce<T: Scalar>(
    logits: &Matrix<T>,
    targets: &[usize],
    null_class: usize,
    perm: &[usize],
) -> (T, Matrix<T>) {
    let mut probs = logits.clone();
    softmax_rows(&mut probs);
    let null_w = T::of(NULL_CLASS_WEIGHT);
    let weights: Vec<T> = targets
        .iter()
        .map(|&t| if t == null_class { null_w } else { T::one() })
        .collect();
    let total_w: T = weights.iter().copied().sum();
    let mut loss = T::zero();
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    for (i, (&t, &w)) in targets.iter().zip(&weights).enumerate() {
        let j = perm[i];
        let row = logits.row(j);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        loss += w * (lse - row[t]);
        let scale = w / total_w;
        for (g, &p) in grad.row_mut(j).iter_mut().zip(probs.row(j)) {
            *g += scale * p;
        }
        grad[(j, t)] -= scale;
    }
    (loss / total_w, grad)
}

/// Character and position cross-entropy on the matched pairs, with the null
/// classes down-weighted by [`NULL_CLASS_WEIGHT`].
pub fn detection_loss<T: Scalar>(
    char_logits: &Matrix<T>,
    pos_logits: &Matrix<T>,
    labels: &LabelSet,
    perm: &[usize],
) -> Result<DetectionLoss<T>> {
    let n = labels.n();
    if char_logits.rows() != n || pos_logits.rows() != n || perm.len() != n || pos_logits.cols() != n + 1 {
        return Err(Error::shape(format!(
            "detection loss: char {:?}, pos {:?}, {} matches, {n} slots",
            char_logits.shape(),
            pos_logits.shape(),
            perm.len()
        )));
    }
    let null_char = char_logits.cols() - 1;
    let (det_char, d_char_logits) = weighted_ce(char_logits, &labels.char_classes, null_char, perm);
    let (det_pos, d_pos_logits) = weighted_ce(pos_logits, &labels.pos_classes, n, perm);
    Ok(DetectionLoss {
        det_char,
        det_pos,
        d_char_logits,
        d_pos_logits,
    })
}
