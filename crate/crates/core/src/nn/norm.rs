use super::{join, Module, Param};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-row normalization to zero mean and unit variance, then a learned
/// affine map.
#[derive(Clone, Debug)]
pub struct LayerNorm<T> {
    pub gain: Param<T>,
    pub bias: Param<T>,
}

#[derive(Clone, Debug)]
pub struct NormCache<T> {
    normalized: Matrix<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            gain: Param::new(Matrix::filled(1, dim, T::one())),
            bias: Param::new(Matrix::zeros(1, dim)),
        }
    }

    pub fn with_affine(gain: Vec<T>, bias: Vec<T>) -> Self {
        let d = gain.len();
        Self {
            gain: Param::new(Matrix::from_vec(1, d, gain).expect("gain row")),
            bias: Param::new(Matrix::from_vec(1, bias.len(), bias).expect("bias row")),
        }
    }

    pub fn dim(&self) -> usize {
        self.gain.value.cols()
    }

    pub fn forward(&self, x: &Matrix<T>) -> (Matrix<T>, NormCache<T>) {
        let d = self.dim();
        assert_eq!(x.cols(), d, "layer norm width");
        let eps = T::of(LAYER_NORM_EPS);
        let dn = T::of(d as f64);
        let gain = self.gain.value.as_slice();
        let bias = self.bias.value.as_slice();
        let mut normalized = Matrix::zeros(x.rows(), d);
        let mut y = Matrix::zeros(x.rows(), d);
        let mut inv_std = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = x.row(r);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            let nrow = normalized.row_mut(r);
            for (n, &v) in nrow.iter_mut().zip(row) {
                *n = (v - mean) * is;
            }
            let nrow = normalized.row(r);
            for (c, o) in y.row_mut(r).iter_mut().enumerate() {
                *o = nrow[c] * gain[c] + bias[c];
            }
        }
        (y, NormCache { normalized, inv_std })
    }

    pub fn backward(&mut self, cache: &NormCache<T>, dy: &Matrix<T>) -> Matrix<T> {
        let d = self.dim();
        let dn = T::of(d as f64);
        let gain = self.gain.value.as_slice();
        let mut dx = Matrix::zeros(dy.rows(), d);
        let mut dxhat = vec![T::zero(); d];
        for r in 0..dy.rows() {
            let g = dy.row(r);
            let xh = cache.normalized.row(r);
            {
                let dg = self.gain.grad.as_mut_slice();
                for c in 0..d {
                    dg[c] += g[c] * xh[c];
                }
                let db = self.bias.grad.as_mut_slice();
                for c in 0..d {
                    db[c] += g[c];
                }
            }
            let mut sum = T::zero();
            let mut dot = T::zero();
            for c in 0..d {
                dxhat[c] = g[c] * gain[c];
                sum += dxhat[c];
                dot += dxhat[c] * xh[c];
            }
            let scale = cache.inv_std[r] / dn;
            for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                *o = scale * (dn * dxhat[c] - sum - xh[c] * dot);
            }
        }
        dx
    }
}

impl<T: Scalar> Module<T> for LayerNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "gain"), &self.gain);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "gain"), &mut self.gain);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}
