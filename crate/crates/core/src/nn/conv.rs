use rand::Rng;

use super::{join, Module, Param};
use crate::scalar::Scalar;
use crate::tensor::{gemm, Matrix};

const K: usize = 3;
const PAD: usize = 1;

/// 3x3 convolution with padding 1, lowered to a matrix product.
///
/// Feature maps are `channels x (height * width)` matrices.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    /// `out_channels x (in_channels * 9)`.
    pub weight: Param<T>,
    pub bias: Param<T>,
    in_channels: usize,
    stride: usize,
}

#[derive(Clone, Debug)]
pub struct ConvCache<T> {
    cols: Matrix<T>,
    in_h: usize,
    in_w: usize,
}

impl<T: Scalar> Conv2d<T> {
    /// He-uniform initialization, suited to a following ReLU.
    pub fn he<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, stride: usize, rng: &mut R) -> Self {
        let fan_in = in_channels * K * K;
        let bound = (6.0 / fan_in as f64).sqrt();
        Self {
            weight: Param::new(Matrix::uniform(out_channels, fan_in, bound, rng)),
            bias: Param::new(Matrix::zeros(1, out_channels)),
            in_channels,
            stride,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * PAD - K) / self.stride + 1,
            (w + 2 * PAD - K) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &Matrix<T>, h: usize, w: usize) -> Matrix<T> {
        let (oh, ow) = self.output_size(h, w);
        let mut cols = Matrix::zeros(self.in_channels * K * K, oh * ow);
        for c in 0..self.in_channels {
            let plane = x.row(c);
            for ky in 0..K {
                for kx in 0..K {
                    let dst = cols.row_mut((c * K + ky) * K + kx);
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - PAD as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let out = &mut dst[oy * ow..(oy + 1) * ow];
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - PAD as isize;
                            if ix >= 0 && ix < w as isize {
                                *o = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &Matrix<T>, h: usize, w: usize) -> Matrix<T> {
        let (oh, ow) = self.output_size(h, w);
        let mut dx = Matrix::zeros(self.in_channels, h * w);
        for c in 0..self.in_channels {
            let plane = dx.row_mut(c);
            for ky in 0..K {
                for kx in 0..K {
                    let src = dcols.row((c * K + ky) * K + kx);
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - PAD as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - PAD as isize;
                            if ix >= 0 && ix < w as isize {
                                plane[iy * w + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: &Matrix<T>, h: usize, w: usize) -> (Matrix<T>, ConvCache<T>) {
        assert_eq!(x.shape(), (self.in_channels, h * w), "conv input shape");
        let cols = self.im2col(x, h, w);
        let mut y = Matrix::zeros(self.out_channels(), cols.cols());
        gemm(T::one(), self.weight.value.view(), cols.view(), T::zero(), y.view_mut());
        let bias = self.bias.value.as_slice();
        for (o, &b) in bias.iter().enumerate() {
            y.row_mut(o).iter_mut().for_each(|v| *v += b);
        }
        (y, ConvCache { cols, in_h: h, in_w: w })
    }

    /// Accumulates kernel gradients; returns the input gradient when requested.
    pub fn backward(&mut self, cache: &ConvCache<T>, dy: &Matrix<T>, need_input_grad: bool) -> Option<Matrix<T>> {
        gemm(T::one(), dy.view(), cache.cols.view().t(), T::one(), self.weight.grad.view_mut());
        let db = self.bias.grad.as_mut_slice();
        for (o, g) in db.iter_mut().enumerate() {
            *g += dy.row(o).iter().copied().sum::<T>();
        }
        if !need_input_grad {
            return None;
        }
        let mut dcols = Matrix::zeros(cache.cols.rows(), cache.cols.cols());
        gemm(T::one(), self.weight.value.view().t(), dy.view(), T::zero(), dcols.view_mut());
        Some(self.col2im(&dcols, cache.in_h, cache.in_w))
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for stride in [1, 2] {
            let conv = Conv2d::<f64>::he(2, 3, stride, &mut rng);
            let (h, w) = (5, 7);
            let x = Matrix::uniform(2, h * w, 1.0, &mut rng);
            let (y, _) = conv.forward(&x, h, w);
            let (oh, ow) = conv.output_size(h, w);
            for o in 0..3 {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = conv.bias.value[(0, o)];
                        for c in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * stride + ky) as isize - 1;
                                    let ix = (ox * stride + kx) as isize - 1;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += conv.weight.value[(o, (c * 3 + ky) * 3 + kx)]
                                            * x[(c, iy as usize * w + ix as usize)];
                                    }
                                }
                            }
                        }
                        assert!((y[(o, oy * ow + ox)] - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
