//! Training objective: bipartite-matched detection loss plus CTC
//! recognition loss.

mod ctc;
mod detection;
mod matching;

pub use ctc::{ctc_loss, ctc_required_slots, CtcLoss};
pub use detection::{detection_loss, DetectionLoss, NULL_CLASS_WEIGHT};
pub use matching::{hungarian_assign, match_cost_matrix, MatchAssignment};

use crate::charset::{CharSet, LabelSet};
use crate::error::{Error, Result};
use crate::nn::softmax_rows;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Raw network outputs for one image.
#[derive(Clone, Debug)]
pub struct Predictions<T> {
    /// `N x 37`, from the detection character head.
    pub char_logits: Matrix<T>,
    /// `N x (N+1)`, from the detection position head.
    pub pos_logits: Matrix<T>,
    /// `N x 37`, from the word decoder.
    pub slot_logits: Matrix<T>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown<T> {
    pub det_char: T,
    pub det_pos: T,
    pub recog: T,
    pub total: T,
}

impl<T: Scalar> LossBreakdown<T> {
    pub fn new(det_char: T, det_pos: T, recog: T) -> Self {
        Self {
            det_char,
            det_pos,
            recog,
            total: det_char + det_pos + recog,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.det_char.is_finite() && self.det_pos.is_finite() && self.recog.is_finite() && self.total.is_finite()
    }
}

/// Loss of one sample with gradients for every logit matrix.
#[derive(Clone, Debug)]
pub struct SampleLoss<T> {
    pub breakdown: LossBreakdown<T>,
    pub assignment: MatchAssignment<T>,
    pub d_char_logits: Matrix<T>,
    pub d_pos_logits: Matrix<T>,
    pub d_slot_logits: Matrix<T>,
}

impl<T: Scalar> SampleLoss<T> {
    fn scale_grads(&mut self, s: T) {
        self.d_char_logits.scale(s);
        self.d_pos_logits.scale(s);
        self.d_slot_logits.scale(s);
    }
}

/// Matches detections to labels on detached probabilities, then evaluates
/// the detection and CTC terms.
pub fn sample_loss<T: Scalar>(pred: &Predictions<T>, labels: &LabelSet, beta: T) -> Result<SampleLoss<T>> {
    let mut char_probs = pred.char_logits.clone();
    softmax_rows(&mut char_probs);
    let mut pos_probs = pred.pos_logits.clone();
    softmax_rows(&mut pos_probs);
    let cost = match_cost_matrix(&char_probs, &pos_probs, labels, beta)?;
    let assignment = hungarian_assign(&cost)?;
    let det = detection_loss(&pred.char_logits, &pred.pos_logits, labels, &assignment.perm)?;
    let ctc = ctc_loss(&pred.slot_logits, &labels.target(), CharSet::NULL)?;
    Ok(SampleLoss {
        breakdown: LossBreakdown::new(det.det_char, det.det_pos, ctc.loss),
        assignment,
        d_char_logits: det.d_char_logits,
        d_pos_logits: det.d_pos_logits,
        d_slot_logits: ctc.d_logits,
    })
}

/// Batch mean of the per-sample losses. Returned gradients are those of the
/// batch mean.
pub fn total_loss<T: Scalar>(
    preds: &[Predictions<T>],
    labels: &[LabelSet],
    beta: T,
) -> Result<(LossBreakdown<T>, Vec<SampleLoss<T>>)> {
    if preds.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if preds.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} label sets",
            preds.len(),
            labels.len()
        )));
    }
    let inv = T::one() / T::of(preds.len() as f64);
    let mut parts = Vec::with_capacity(preds.len());
    let (mut c, mut p, mut r) = (T::zero(), T::zero(), T::zero());
    for (pred, lab) in preds.iter().zip(labels) {
        let mut s = sample_loss(pred, lab, beta)?;
        c += s.breakdown.det_char;
        p += s.breakdown.det_pos;
        r += s.breakdown.recog;
        s.scale_grads(inv);
        parts.push(s);
    }
    let breakdown = LossBreakdown::new(c * inv, p * inv, r * inv);
    if !breakdown.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    Ok((breakdown, parts))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::charset::{derive_labels, PositionSet};

    fn random_pred(n: usize, rng: &mut ChaCha8Rng) -> Predictions<f64> {
        Predictions {
            char_logits: Matrix::uniform(n, 37, 3.0, rng),
            pos_logits: Matrix::uniform(n, n + 1, 3.0, rng),
            slot_logits: Matrix::uniform(n, 37, 3.0, rng),
        }
    }

    #[test]
    fn empty_batch() {
        assert!(matches!(
            total_loss::<f64>(&[], &[], 1.0),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn perfect_sample_is_zero() {
        let ps = PositionSet::new(8);
        let labels = derive_labels("tree", &CharSet, &ps).unwrap();
        let big = 300.0;
        let mut pred = Predictions {
            char_logits: Matrix::zeros(8, 37),
            pos_logits: Matrix::zeros(8, 9),
            slot_logits: Matrix::zeros(8, 37),
        };
        for i in 0..8 {
            pred.char_logits[(i, labels.char_classes[i])] = big;
            pred.pos_logits[(i, labels.pos_classes[i])] = big;
        }
        // CTC path t r e - e - - -
        let path = [29, 27, 14, 36, 14, 36, 36, 36];
        for (t, &k) in path.iter().enumerate() {
            pred.slot_logits[(t, k)] = big;
        }
        let (b, _) = total_loss::<f64>(&[pred], &[labels], 1.0).unwrap();
        assert!(b.total.abs() < 1e-12 && b.recog.abs() < 1e-12 && b.det_char.abs() < 1e-12);
    }

    #[test]
    fn batch_is_mean_of_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let ps = PositionSet::new(10);
        let words = ["cat", "hello", "a1b2"];
        let preds: Vec<_> = (0..3).map(|_| random_pred(10, &mut rng)).collect();
        let labels: Vec<_> = words.iter().map(|w| derive_labels(w, &CharSet, &ps).unwrap()).collect();
        let (batch, _) = total_loss(&preds, &labels, 1.0).unwrap();
        let mean: f64 = preds
            .iter()
            .zip(&labels)
            .map(|(p, l)| total_loss(std::slice::from_ref(p), std::slice::from_ref(l), 1.0).unwrap().0.total)
            .sum::<f64>()
            / 3.0;
        assert!((batch.total - mean).abs() < 1e-12);
        assert!((batch.total - (batch.det_char + batch.det_pos + batch.recog)).abs() < 1e-12);
    }
}
