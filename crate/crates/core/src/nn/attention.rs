use rand::Rng;

use super::{join, Module, Param};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{gemm, Matrix, View, ViewMut};

/// Numerically stable softmax over every row, in place.
pub fn softmax_rows<T: Scalar>(m: &mut Matrix<T>) {
    let cols = m.cols();
    if cols == 0 {
        return;
    }
    for row in m.as_mut_slice().chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = T::one() / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Output of scaled dot-product attention together with its weights.
#[derive(Clone, Debug)]
pub struct Attention<T> {
    pub output: Matrix<T>,
    /// `L_q x L_k`, each row a probability vector.
    pub weights: Matrix<T>,
}

fn head_forward<T: Scalar>(
    q: View<'_, T>,
    k: View<'_, T>,
    v: View<'_, T>,
    out: ViewMut<'_, T>,
) -> Matrix<T> {
    let scale = T::one() / T::of(q.cols() as f64).sqrt();
    let mut w = Matrix::zeros(q.rows(), k.rows());
    gemm(scale, q, k.t(), T::zero(), w.view_mut());
    softmax_rows(&mut w);
    gemm(T::one(), w.view(), v, T::zero(), out);
    w
}

#[allow(clippy::too_many_arguments)]
fn head_backward<T: Scalar>(
    q: View<'_, T>,
    k: View<'_, T>,
    v: View<'_, T>,
    w: &Matrix<T>,
    dout: View<'_, T>,
    dq: ViewMut<'_, T>,
    dk: ViewMut<'_, T>,
    dv: ViewMut<'_, T>,
) {
    let scale = T::one() / T::of(q.cols() as f64).sqrt();
    gemm(T::one(), w.view().t(), dout, T::zero(), dv);
    let mut ds = Matrix::zeros(w.rows(), w.cols());
    gemm(T::one(), dout, v.t(), T::zero(), ds.view_mut());
    // softmax Jacobian: ds = w * (dw - <dw, w>)
    for r in 0..w.rows() {
        let wr = w.row(r);
        let dr = ds.row_mut(r);
        let dot: T = wr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
        for (d, &a) in dr.iter_mut().zip(wr) {
            *d = a * (*d - dot);
        }
    }
    gemm(scale, ds.view(), k, T::zero(), dq);
    gemm(scale, ds.view().t(), q, T::zero(), dk);
}

/// `softmax(Q K^T / sqrt(d_k)) V`.
pub fn attention<T: Scalar>(q: &Matrix<T>, k: &Matrix<T>, v: &Matrix<T>) -> Result<Attention<T>> {
    if q.cols() != k.cols() || k.rows() != v.rows() {
        return Err(Error::shape(format!(
            "attention Q {:?} K {:?} V {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let mut output = Matrix::zeros(q.rows(), v.cols());
    let weights = head_forward(q.view(), k.view(), v.view(), output.view_mut());
    Ok(Attention { output, weights })
}

/// Gradients of [`attention`] with respect to `Q`, `K` and `V`.
pub fn attention_backward<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    weights: &Matrix<T>,
    dout: &Matrix<T>,
) -> (Matrix<T>, Matrix<T>, Matrix<T>) {
    let mut dq = Matrix::zeros(q.rows(), q.cols());
    let mut dk = Matrix::zeros(k.rows(), k.cols());
    let mut dv = Matrix::zeros(v.rows(), v.cols());
    head_backward(
        q.view(),
        k.view(),
        v.view(),
        weights,
        dout.view(),
        dq.view_mut(),
        dk.view_mut(),
        dv.view_mut(),
    );
    (dq, dk, dv)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MhaConfig {
    pub model_dim: usize,
    pub num_heads: usize,
}

impl MhaConfig {
    pub fn new(model_dim: usize, num_heads: usize) -> Result<Self> {
        if num_heads == 0 || model_dim % num_heads != 0 {
            return Err(Error::shape(format!(
                "model dim {model_dim} not divisible by {num_heads} heads"
            )));
        }
        Ok(Self {
            model_dim,
            num_heads,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

/// `Concat(head_1, ..., head_M) W^O` with `head_i = Attention(Q W^Q_i, K W^K_i, V W^V_i)`.
///
/// The per-head projections are stored side by side: head `i` owns columns
/// `i*d_k .. (i+1)*d_k` of `w_q`, `w_k` and `w_v`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention<T> {
    cfg: MhaConfig,
    pub w_q: Param<T>,
    pub w_k: Param<T>,
    pub w_v: Param<T>,
    pub w_o: Param<T>,
}

#[derive(Clone, Debug)]
pub struct MhaCache<T> {
    q_in: Matrix<T>,
    k_in: Matrix<T>,
    v_in: Matrix<T>,
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    concat: Matrix<T>,
    weights: Vec<Matrix<T>>,
}

impl<T: Scalar> MhaCache<T> {
    /// Attention weights per head.
    pub fn weights(&self) -> &[Matrix<T>] {
        &self.weights
    }

    /// Weights averaged over heads.
    pub fn mean_weights(&self) -> Matrix<T> {
        let mut mean = self.weights[0].clone();
        for w in &self.weights[1..] {
            mean.add_assign(w);
        }
        mean.scale(T::one() / T::of(self.weights.len() as f64));
        mean
    }
}

fn project<T: Scalar>(x: &Matrix<T>, w: &Matrix<T>) -> Matrix<T> {
    let mut y = Matrix::zeros(x.rows(), w.cols());
    gemm(T::one(), x.view(), w.view(), T::zero(), y.view_mut());
    y
}

impl<T: Scalar> MultiHeadAttention<T> {
    pub fn new(cfg: MhaConfig, w_q: Matrix<T>, w_k: Matrix<T>, w_v: Matrix<T>, w_o: Matrix<T>) -> Self {
        let d = cfg.model_dim;
        for w in [&w_q, &w_k, &w_v, &w_o] {
            assert_eq!(w.shape(), (d, d), "projection shape");
        }
        Self {
            cfg,
            w_q: Param::new(w_q),
            w_k: Param::new(w_k),
            w_v: Param::new(w_v),
            w_o: Param::new(w_o),
        }
    }

    pub fn xavier<R: Rng + ?Sized>(cfg: MhaConfig, rng: &mut R) -> Self {
        let d = cfg.model_dim;
        let w_q = Matrix::xavier(d, d, rng);
        let w_k = Matrix::xavier(d, d, rng);
        let w_v = Matrix::xavier(d, d, rng);
        let w_o = Matrix::xavier(d, d, rng);
        Self::new(cfg, w_q, w_k, w_v, w_o)
    }

    pub fn config(&self) -> MhaConfig {
        self.cfg
    }

    pub fn forward(
        &self,
        q_in: &Matrix<T>,
        k_in: &Matrix<T>,
        v_in: &Matrix<T>,
    ) -> Result<(Matrix<T>, MhaCache<T>)> {
        let d = self.cfg.model_dim;
        if q_in.cols() != d || k_in.cols() != d || v_in.cols() != d || k_in.rows() != v_in.rows() {
            return Err(Error::shape(format!(
                "multi-head attention Q {:?} K {:?} V {:?} with D={d}",
                q_in.shape(),
                k_in.shape(),
                v_in.shape()
            )));
        }
        let q = project(q_in, &self.w_q.value);
        let k = project(k_in, &self.w_k.value);
        let v = project(v_in, &self.w_v.value);
        let dk = self.cfg.head_dim();
        let mut concat = Matrix::zeros(q.rows(), d);
        let mut weights = Vec::with_capacity(self.cfg.num_heads);
        for h in 0..self.cfg.num_heads {
            let w = head_forward(
                q.col_block(h * dk, dk),
                k.col_block(h * dk, dk),
                v.col_block(h * dk, dk),
                concat.col_block_mut(h * dk, dk),
            );
            weights.push(w);
        }
        let out = project(&concat, &self.w_o.value);
        Ok((
            out,
            MhaCache {
                q_in: q_in.clone(),
                k_in: k_in.clone(),
                v_in: v_in.clone(),
                q,
                k,
                v,
                concat,
                weights,
            },
        ))
    }

    /// Returns gradients with respect to the query, key and value inputs.
    pub fn backward(
        &mut self,
        cache: &MhaCache<T>,
        dout: &Matrix<T>,
    ) -> (Matrix<T>, Matrix<T>, Matrix<T>) {
        let d = self.cfg.model_dim;
        let dk = self.cfg.head_dim();
        gemm(T::one(), cache.concat.view().t(), dout.view(), T::one(), self.w_o.grad.view_mut());
        let mut dconcat = Matrix::zeros(dout.rows(), d);
        gemm(T::one(), dout.view(), self.w_o.value.view().t(), T::zero(), dconcat.view_mut());

        let mut dq = Matrix::zeros(cache.q.rows(), d);
        let mut dkm = Matrix::zeros(cache.k.rows(), d);
        let mut dv = Matrix::zeros(cache.v.rows(), d);
        for h in 0..self.cfg.num_heads {
            let o = h * dk;
            head_backward(
                cache.q.col_block(o, dk),
                cache.k.col_block(o, dk),
                cache.v.col_block(o, dk),
                &cache.weights[h],
                dconcat.col_block(o, dk),
                dq.col_block_mut(o, dk),
                dkm.col_block_mut(o, dk),
                dv.col_block_mut(o, dk),
            );
        }
        let input_grad = |x: &Matrix<T>, dproj: &Matrix<T>, w: &mut Param<T>| {
            gemm(T::one(), x.view().t(), dproj.view(), T::one(), w.grad.view_mut());
            let mut dx = Matrix::zeros(x.rows(), d);
            gemm(T::one(), dproj.view(), w.value.view().t(), T::zero(), dx.view_mut());
            dx
        };
        let dq_in = input_grad(&cache.q_in, &dq, &mut self.w_q);
        let dk_in = input_grad(&cache.k_in, &dkm, &mut self.w_k);
        let dv_in = input_grad(&cache.v_in, &dv, &mut self.w_v);
        (dq_in, dk_in, dv_in)
    }
}

impl<T: Scalar> Module<T> for MultiHeadAttention<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "w_q"), &self.w_q);
        f(&join(prefix, "w_k"), &self.w_k);
        f(&join(prefix, "w_v"), &self.w_v);
        f(&join(prefix, "w_o"), &self.w_o);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "w_q"), &mut self.w_q);
        f(&join(prefix, "w_k"), &mut self.w_k);
        f(&join(prefix, "w_v"), &mut self.w_v);
        f(&join(prefix, "w_o"), &mut self.w_o);
    }
}
