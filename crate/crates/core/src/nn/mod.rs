//! Transformer building blocks with hand-written backward passes.
//!
//! Every layer follows the same protocol: `forward` returns the output and a
//! cache of intermediates, `backward` consumes that cache and an upstream
//! gradient, accumulates parameter gradients into [`Param::grad`] and returns
//! the gradient with respect to the layer input.

mod attention;
mod conv;
mod dropout;
mod ffn;
pub mod gradcheck;
mod linear;
mod norm;
mod posenc;
mod transformer;

pub use attention::{
    attention, attention_backward, softmax_rows, Attention, MhaCache, MhaConfig,
    MultiHeadAttention,
};
pub use conv::{Conv2d, ConvCache};
pub use dropout::{Dropout, DropoutMask};
pub use ffn::{FeedForward, FfnCache};
pub use linear::Linear;
pub use norm::{LayerNorm, NormCache, LAYER_NORM_EPS};
pub use posenc::positional_encoding_2d;
pub use transformer::{DecoderCache, DecoderLayer, EncoderCache, EncoderLayer};

use rand::RngCore;

use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// A trainable matrix and its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Matrix<T>,
    pub grad: Matrix<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Matrix<T>) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn len(&self) -> usize {
        self.value.as_slice().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Anything that owns named parameters.
pub trait Module<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.len());
        n
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit("", &mut |name, _| names.push(name.to_string()));
        names
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Forward-pass mode. Training enables dropout, driven by the supplied RNG.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

pub(crate) fn relu_in_place<T: Scalar>(m: &mut Matrix<T>) {
    for v in m.as_mut_slice() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}
