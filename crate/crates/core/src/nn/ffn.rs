use rand::Rng;

use super::{join, relu_in_place, Linear, Module, Param};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// `max(0, x W1 + b1) W2 + b2`.
#[derive(Clone, Debug)]
pub struct FeedForward<T> {
    pub expand: Linear<T>,
    pub contract: Linear<T>,
}

#[derive(Clone, Debug)]
pub struct FfnCache<T> {
    input: Matrix<T>,
    hidden: Matrix<T>,
}

impl<T: Scalar> FeedForward<T> {
    pub fn new(expand: Linear<T>, contract: Linear<T>) -> Self {
        assert_eq!(expand.out_dim(), contract.in_dim());
        Self { expand, contract }
    }

    pub fn xavier<R: Rng + ?Sized>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self::new(
            Linear::xavier(dim, hidden, true, rng),
            Linear::xavier(hidden, dim, true, rng),
        )
    }

    pub fn forward(&self, x: &Matrix<T>) -> (Matrix<T>, FfnCache<T>) {
        let mut hidden = self.expand.forward(x);
        relu_in_place(&mut hidden);
        let y = self.contract.forward(&hidden);
        (
            y,
            FfnCache {
                input: x.clone(),
                hidden,
            },
        )
    }

    pub fn backward(&mut self, cache: &FfnCache<T>, dy: &Matrix<T>) -> Matrix<T> {
        let mut dh = self.contract.backward(&cache.hidden, dy);
        for (g, &h) in dh.as_mut_slice().iter_mut().zip(cache.hidden.as_slice()) {
            if h <= T::zero() {
                *g = T::zero();
            }
        }
        self.expand.backward(&cache.input, &dh)
    }
}

impl<T: Scalar> Module<T> for FeedForward<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.expand.visit(&join(prefix, "expand"), f);
        self.contract.visit(&join(prefix, "contract"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.expand.visit_mut(&join(prefix, "expand"), f);
        self.contract.visit_mut(&join(prefix, "contract"), f);
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn ffn_with(w1: Matrix<f64>, b1: Matrix<f64>, w2: Matrix<f64>, b2: Matrix<f64>) -> FeedForward<f64> {
        FeedForward::new(Linear::new(w1, Some(b1)), Linear::new(w2, Some(b2)))
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b2 = Matrix::uniform(1, 4, 1.0, &mut rng);
        let ffn = ffn_with(
            Matrix::zeros(4, 6),
            Matrix::uniform(1, 6, 1.0, &mut rng),
            Matrix::zeros(6, 4),
            b2.clone(),
        );
        let x = Matrix::uniform(3, 4, 5.0, &mut rng);
        let (y, _) = ffn.forward(&x);
        for row in y.row_iter() {
            assert_eq!(row, b2.row(0));
        }
    }

    #[test]
    fn negative_preactivations_are_zeroed() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b2 = Matrix::uniform(1, 3, 1.0, &mut rng);
        // positive inputs times negative weights with a negative bias
        let ffn = ffn_with(
            Matrix::filled(3, 5, -1.0),
            Matrix::filled(1, 5, -0.5),
            Matrix::uniform(5, 3, 1.0, &mut rng),
            b2.clone(),
        );
        let x = Matrix::uniform(4, 3, 1.0, &mut rng).map(f64::abs);
        let (y, _) = ffn.forward(&x);
        for row in y.row_iter() {
            assert_eq!(row, b2.row(0));
        }
    }

    #[test]
    fn matches_elementwise_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (d, h) = (4, 7);
        let w1 = Matrix::uniform(d, h, 1.0, &mut rng);
        let b1 = Matrix::uniform(1, h, 1.0, &mut rng);
        let w2 = Matrix::uniform(h, d, 1.0, &mut rng);
        let b2 = Matrix::uniform(1, d, 1.0, &mut rng);
        let x = Matrix::uniform(5, d, 2.0, &mut rng);
        let ffn = ffn_with(w1.clone(), b1.clone(), w2.clone(), b2.clone());
        let (y, _) = ffn.forward(&x);
        for r in 0..5 {
            for o in 0..d {
                let mut acc = b2[(0, o)];
                for j in 0..h {
                    let pre: f64 = (0..d).map(|k| x[(r, k)] * w1[(k, j)]).sum::<f64>() + b1[(0, j)];
                    acc += pre.max(0.0) * w2[(j, o)];
                }
                assert!((y[(r, o)] - acc).abs() < 1e-10);
            }
        }
    }
}
