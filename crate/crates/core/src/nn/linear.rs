use rand::Rng;

use super::{join, Module, Param};
use crate::scalar::Scalar;
use crate::tensor::{gemm, Matrix};

/// `y = x W + b` applied row-wise; `W` is `in x out`.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(weight: Matrix<T>, bias: Option<Matrix<T>>) -> Self {
        if let Some(b) = &bias {
            assert_eq!(b.shape(), (1, weight.cols()));
        }
        Self {
            weight: Param::new(weight),
            bias: bias.map(Param::new),
        }
    }

    pub fn xavier<R: Rng + ?Sized>(input: usize, output: usize, bias: bool, rng: &mut R) -> Self {
        Self::new(
            Matrix::xavier(input, output, rng),
            bias.then(|| Matrix::zeros(1, output)),
        )
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn forward(&self, x: &Matrix<T>) -> Matrix<T> {
        assert_eq!(x.cols(), self.in_dim(), "linear input width");
        let mut y = Matrix::zeros(x.rows(), self.out_dim());
        gemm(T::one(), x.view(), self.weight.value.view(), T::zero(), y.view_mut());
        if let Some(b) = &self.bias {
            y.add_row_broadcast(b.value.as_slice());
        }
        y
    }

    /// Accumulates `dW`, `db` and returns `dx`.
    pub fn backward(&mut self, x: &Matrix<T>, dy: &Matrix<T>) -> Matrix<T> {
        self.backward_params(x, dy);
        let mut dx = Matrix::zeros(x.rows(), x.cols());
        gemm(T::one(), dy.view(), self.weight.value.view().t(), T::zero(), dx.view_mut());
        dx
    }

    /// Accumulates parameter gradients only.
    pub fn backward_params(&mut self, x: &Matrix<T>, dy: &Matrix<T>) {
        gemm(T::one(), x.view().t(), dy.view(), T::one(), self.weight.grad.view_mut());
        if let Some(b) = &mut self.bias {
            dy.sum_rows_into(b.grad.as_mut_slice());
        }
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}
