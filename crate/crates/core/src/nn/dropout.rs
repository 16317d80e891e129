use rand::Rng;

use super::Mode;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Inverted dropout; identity outside training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dropout {
    pub rate: f64,
}

#[derive(Clone, Debug)]
pub struct DropoutMask<T>(Option<Vec<T>>);

impl Dropout {
    pub fn new(rate: f64) -> Self {
        assert!((0.0..1.0).contains(&rate), "dropout rate in [0, 1)");
        Self { rate }
    }

    pub fn forward<T: Scalar>(&self, x: &mut Matrix<T>, mode: &mut Mode<'_>) -> DropoutMask<T> {
        let rng = match mode {
            Mode::Train(rng) if self.rate > 0.0 => rng,
            _ => return DropoutMask(None),
        };
        let keep = T::of(1.0 / (1.0 - self.rate));
        let mask: Vec<T> = (0..x.as_slice().len())
            .map(|_| {
                if rng.random::<f64>() < self.rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        for (v, &m) in x.as_mut_slice().iter_mut().zip(&mask) {
            *v *= m;
        }
        DropoutMask(Some(mask))
    }
}

impl<T: Scalar> DropoutMask<T> {
    pub fn backward(&self, dy: &mut Matrix<T>) {
        if let Some(mask) = &self.0 {
            for (g, &m) in dy.as_mut_slice().iter_mut().zip(mask) {
                *g *= m;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn eval_is_identity_and_train_rescales() {
        let d = Dropout::new(0.5);
        let mut x = Matrix::<f64>::filled(10, 10, 1.0);
        d.forward(&mut x, &mut Mode::Eval);
        assert!(x.as_slice().iter().all(|&v| v == 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mask = d.forward(&mut x, &mut Mode::Train(&mut rng));
        assert!(x.as_slice().iter().all(|&v| v == 0.0 || v == 2.0));
        let mut g = Matrix::<f64>::filled(10, 10, 1.0);
        mask.backward(&mut g);
        assert_eq!(g, x);
    }
}
