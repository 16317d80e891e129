//! Connectionist temporal classification over the detection slots.

use crate::error::{Error, Result};
use crate::nn::softmax_rows;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Debug)]
pub struct CtcLoss<T> {
    /// `-ln p(target | logits)`.
    pub loss: T,
    pub d_logits: Matrix<T>,
}

/// Minimum number of slots a target needs: one per symbol plus a blank
/// between each pair of equal neighbours.
pub fn ctc_required_slots(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn log_add<T: Scalar>(a: T, b: T) -> T {
    if a == T::neg_infinity() {
        return b;
    }
    if b == T::neg_infinity() {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

fn log_softmax_rows<T: Scalar>(logits: &Matrix<T>) -> Matrix<T> {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let slice = out.row_mut(r);
        let max = slice.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + slice.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        slice.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

/// Negative log-likelihood of `target` summed over every alignment path that
/// collapses to it, via the log-space forward/backward recursions over the
/// blank-extended target. Also returns the gradient with respect to `logits`.
pub fn ctc_loss<T: Scalar>(logits: &Matrix<T>, target: &[usize], blank: usize) -> Result<CtcLoss<T>> {
    let (slots, classes) = logits.shape();
    if blank >= classes || target.iter().any(|&c| c >= classes || c == blank) {
        return Err(Error::shape("CTC target symbol outside the alphabet or equal to blank"));
    }
    let required = ctc_required_slots(target);
    if required > slots || slots == 0 {
        return Err(Error::InfeasibleTarget {
            target_len: target.len(),
            required,
            slots,
        });
    }
    let logp = log_softmax_rows(logits);
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &c in target {
        ext.push(c);
        ext.push(blank);
    }
    let s_len = ext.len();
    let ninf = T::neg_infinity();
    let can_skip = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];

    let mut alpha = Matrix::filled(slots, s_len, ninf);
    alpha[(0, 0)] = logp[(0, blank)];
    if s_len > 1 {
        alpha[(0, 1)] = logp[(0, ext[1])];
    }
    for t in 1..slots {
        for s in 0..s_len {
            let mut a = alpha[(t - 1, s)];
            if s >= 1 {
                a = log_add(a, alpha[(t - 1, s - 1)]);
            }
            if can_skip(s) {
                a = log_add(a, alpha[(t - 1, s - 2)]);
            }
            if a != ninf {
                alpha[(t, s)] = a + logp[(t, ext[s])];
            }
        }
    }
    let last = slots - 1;
    let mut log_p = alpha[(last, s_len - 1)];
    if s_len > 1 {
        log_p = log_add(log_p, alpha[(last, s_len - 2)]);
    }
    if !log_p.is_finite() {
        return Err(Error::NonFinite("CTC likelihood"));
    }

    // beta[t][s]: log-probability of completing the target from state s at
    // slot t, excluding slot t's own emission.
    let mut beta = Matrix::filled(slots, s_len, ninf);
    beta[(last, s_len - 1)] = T::zero();
    if s_len > 1 {
        beta[(last, s_len - 2)] = T::zero();
    }
    for t in (0..last).rev() {
        for s in 0..s_len {
            let mut b = beta[(t + 1, s)] + logp[(t + 1, ext[s])];
            if s + 1 < s_len {
                b = log_add(b, beta[(t + 1, s + 1)] + logp[(t + 1, ext[s + 1])]);
            }
            if s + 2 < s_len && can_skip(s + 2) {
                b = log_add(b, beta[(t + 1, s + 2)] + logp[(t + 1, ext[s + 2])]);
            }
            beta[(t, s)] = b;
        }
    }

    let mut d_logits = logits.clone();
    softmax_rows(&mut d_logits);
    let mut occupancy = vec![ninf; classes];
    for t in 0..slots {
        occupancy.iter_mut().for_each(|o| *o = ninf);
        for s in 0..s_len {
            let k = ext[s];
            occupancy[k] = log_add(occupancy[k], alpha[(t, s)] + beta[(t, s)]);
        }
        for (k, &o) in occupancy.iter().enumerate() {
            if o != ninf {
                d_logits[(t, k)] -= (o - log_p).exp();
            }
        }
    }
    Ok(CtcLoss {
        loss: -log_p,
        d_logits,
    })
}
