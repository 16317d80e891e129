//! Character-to-word mapping: learned word queries attend over the
//! positional character embeddings and emit one character distribution per
//! slot; the word is read off by greedy CTC decoding.

use rand::Rng;

use crate::charset::{classes_to_string, collapse_b, CharSet};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::i2c::PositionalCharEmbeddings;
use crate::nn::{join, DecoderCache, DecoderLayer, Linear, Mode, Module, Param};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Debug)]
pub struct C2w<T> {
    /// Learned word queries `E_W`, one row per output slot.
    pub queries: Param<T>,
    pub decoder: Vec<DecoderLayer<T>>,
    pub char_head: Linear<T>,
}

#[derive(Clone, Debug)]
pub struct C2wCache<T> {
    e_pc: Matrix<T>,
    hidden: Matrix<T>,
    layers: Vec<DecoderCache<T>>,
}

/// Slot logits and the word they decode to.
#[derive(Clone, Debug, PartialEq)]
pub struct C2wOutput<T> {
    pub slot_logits: Matrix<T>,
    pub decoded_word: String,
}

impl<T: Scalar> C2w<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let mha = cfg.mha()?;
        Ok(Self {
            queries: Param::new(Matrix::xavier(cfg.n_queries, cfg.model_dim, rng)),
            decoder: (0..cfg.c2w_decoder_layers)
                .map(|_| DecoderLayer::xavier(mha, cfg.ffn_dim, cfg.dropout, rng))
                .collect(),
            char_head: Linear::xavier(cfg.model_dim, CharSet::SIZE, true, rng),
        })
    }

    /// Slot logits (`N x 37`). No positional encoding is added to `E_PC`.
    pub fn forward(
        &self,
        e_pc: &PositionalCharEmbeddings<T>,
        mode: &mut Mode<'_>,
    ) -> Result<(Matrix<T>, C2wCache<T>)> {
        let d = self.queries.value.cols();
        if e_pc.dim() != d || e_pc.slots() == 0 {
            return Err(Error::shape(format!(
                "word decoder expects E_PC with D={d}, got {:?}",
                e_pc.0.shape()
            )));
        }
        if !e_pc.0.is_finite() {
            return Err(Error::NonFinite("positional character embeddings"));
        }
        let mut tgt = self.queries.value.clone();
        let mut layers = Vec::with_capacity(self.decoder.len());
        for layer in &self.decoder {
            let (y, c) = layer.forward(&tgt, &e_pc.0, None, mode)?;
            layers.push(c);
            tgt = y;
        }
        let logits = self.char_head.forward(&tgt);
        Ok((
            logits,
            C2wCache {
                e_pc: e_pc.0.clone(),
                hidden: tgt,
                layers,
            },
        ))
    }

    /// Returns the gradient with respect to `E_PC`.
    pub fn backward(&mut self, cache: &C2wCache<T>, d_logits: &Matrix<T>) -> Matrix<T> {
        let mut dtgt = self.char_head.backward(&cache.hidden, d_logits);
        let mut de = Matrix::zeros(cache.e_pc.rows(), cache.e_pc.cols());
        for (layer, c) in self.decoder.iter_mut().zip(&cache.layers).rev() {
            let (dt, dm) = layer.backward(c, &dtgt);
            de.add_assign(&dm);
            dtgt = dt;
        }
        self.queries.grad.add_assign(&dtgt);
        de
    }

    pub fn recognize(&self, e_pc: &PositionalCharEmbeddings<T>) -> Result<C2wOutput<T>> {
        let (slot_logits, _) = self.forward(e_pc, &mut Mode::Eval)?;
        let decoded_word = ctc_greedy_decode(&slot_logits);
        Ok(C2wOutput {
            slot_logits,
            decoded_word,
        })
    }
}

impl<T: Scalar> Module<T> for C2w<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "queries"), &self.queries);
        for (i, l) in self.decoder.iter().enumerate() {
            l.visit(&join(prefix, &format!("decoder{i}")), f);
        }
        self.char_head.visit(&join(prefix, "char_head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "queries"), &mut self.queries);
        for (i, l) in self.decoder.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("decoder{i}")), f);
        }
        self.char_head.visit_mut(&join(prefix, "char_head"), f);
    }
}

/// Per-slot argmax (first maximum wins).
pub fn slot_argmax<T: Scalar>(logits: &Matrix<T>) -> Vec<usize> {
    logits
        .row_iter()
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Best-path CTC decoding with the "not a character" class as blank.
pub fn ctc_greedy_decode<T: Scalar>(slot_logits: &Matrix<T>) -> String {
    let path = slot_argmax(slot_logits);
    classes_to_string(&collapse_b(&path, CharSet::NULL), &CharSet)
}
