//! Image-to-character mapping: convolutional features, a transformer
//! encoder with 2-D positional encoding, and a decoder that turns `N` learned
//! queries into positional character embeddings in one parallel pass.

use std::cmp::Ordering;

use rand::Rng;

use crate::charset::{CharSet, PositionSet};
use crate::config::{BackboneConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{
    join, positional_encoding_2d, softmax_rows, Conv2d, ConvCache, DecoderCache, DecoderLayer,
    EncoderCache, EncoderLayer, Linear, Mode, Module, Param,
};
use crate::scalar::Scalar;
use crate::synthdata::{CANVAS_HEIGHT, CANVAS_WIDTH};
use crate::tensor::Matrix;

/// Strided 3x3 convolutions with ReLU.
#[derive(Clone, Debug)]
pub struct Backbone<T> {
    pub convs: Vec<Conv2d<T>>,
}

#[derive(Clone, Debug)]
pub struct BackboneCache<T> {
    stages: Vec<(ConvCache<T>, Matrix<T>)>,
}

impl<T: Scalar> Backbone<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &BackboneConfig, rng: &mut R) -> Self {
        let mut in_ch = 3;
        let convs = cfg
            .stages
            .iter()
            .map(|&(ch, stride)| {
                let conv = Conv2d::he(in_ch, ch, stride, rng);
                in_ch = ch;
                conv
            })
            .collect();
        Self { convs }
    }

    pub fn output_size(&self) -> (usize, usize) {
        self.convs
            .iter()
            .fold((CANVAS_HEIGHT, CANVAS_WIDTH), |(h, w), c| c.output_size(h, w))
    }

    /// `3 x (32*128)` image to `C x (H*W)` features.
    pub fn forward(&self, image: &Matrix<T>) -> Result<(Matrix<T>, BackboneCache<T>)> {
        if image.shape() != (3, CANVAS_HEIGHT * CANVAS_WIDTH) {
            return Err(Error::shape(format!(
                "backbone expects 3x{}x{} input, got {:?}",
                CANVAS_HEIGHT,
                CANVAS_WIDTH,
                image.shape()
            )));
        }
        let (mut h, mut w) = (CANVAS_HEIGHT, CANVAS_WIDTH);
        let mut x = image.clone();
        let mut stages = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let (mut y, cache) = conv.forward(&x, h, w);
            crate::nn::relu_in_place(&mut y);
            (h, w) = conv.output_size(h, w);
            stages.push((cache, y.clone()));
            x = y;
        }
        Ok((x, BackboneCache { stages }))
    }

    pub fn backward(&mut self, cache: &BackboneCache<T>, dfeat: &Matrix<T>) {
        let mut grad = dfeat.clone();
        for (i, conv) in self.convs.iter_mut().enumerate().rev() {
            let (conv_cache, out) = &cache.stages[i];
            for (g, &o) in grad.as_mut_slice().iter_mut().zip(out.as_slice()) {
                if o <= T::zero() {
                    *g = T::zero();
                }
            }
            match conv.backward(conv_cache, &grad, i > 0) {
                Some(dx) => grad = dx,
                None => break,
            }
        }
    }
}

impl<T: Scalar> Module<T> for Backbone<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&join(prefix, &format!("conv{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("conv{i}")), f);
        }
    }
}

/// Positional character embeddings, one `D`-dimensional row per detection
/// slot (the `D x N` matrix stored slot-major).
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalCharEmbeddings<T>(pub Matrix<T>);

impl<T: Scalar> PositionalCharEmbeddings<T> {
    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn slots(&self) -> usize {
        self.0.rows()
    }
}

/// One detection slot decoded into its most likely character and position.
#[derive(Clone, Debug, PartialEq)]
pub struct CharCandidate {
    pub query: usize,
    pub char_class: usize,
    pub pos_class: usize,
    pub char_probs: Vec<f64>,
    pub pos_probs: Vec<f64>,
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

impl CharCandidate {
    pub fn from_probs(query: usize, char_probs: Vec<f64>, pos_probs: Vec<f64>) -> Self {
        Self {
            query,
            char_class: argmax(&char_probs),
            pos_class: argmax(&pos_probs),
            char_probs,
            pos_probs,
        }
    }

    pub fn char_prob(&self) -> f64 {
        self.char_probs[self.char_class]
    }

    pub fn pos_prob(&self) -> f64 {
        self.pos_probs[self.pos_class]
    }
}

/// Reads a word from detection candidates alone: drop null characters and
/// out-of-word positions, keep the most confident candidate per position
/// (lowest query index on ties), and concatenate in position order.
pub fn i2c_standalone_decode(candidates: &[CharCandidate], cs: &CharSet, ps: &PositionSet) -> String {
    let mut best: Vec<Option<&CharCandidate>> = vec![None; ps.n()];
    for c in candidates {
        if c.char_class == cs.null_char_index() || c.pos_class >= ps.null_pos_index() {
            continue;
        }
        let slot = &mut best[c.pos_class];
        let replace = match slot {
            None => true,
            Some(cur) => match c.char_prob().partial_cmp(&cur.char_prob()) {
                Some(Ordering::Greater) => true,
                Some(Ordering::Equal) => c.query < cur.query,
                _ => false,
            },
        };
        if replace {
            *slot = Some(c);
        }
    }
    best.iter().flatten().map(|c| cs.symbol(c.char_class)).collect()
}

/// Detection half of the network.
#[derive(Clone, Debug)]
pub struct I2c<T> {
    pub backbone: Backbone<T>,
    pub input_proj: Linear<T>,
    pub encoder: Vec<EncoderLayer<T>>,
    /// Learned character queries `E_C`, one row per slot.
    pub queries: Param<T>,
    pub decoder: Vec<DecoderLayer<T>>,
    pub char_head: Linear<T>,
    pub pos_head: Linear<T>,
    pos_enc: Matrix<T>,
    use_pos_enc: bool,
    feat_hw: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct I2cOutput<T> {
    pub e_pc: PositionalCharEmbeddings<T>,
    pub char_logits: Matrix<T>,
    pub pos_logits: Matrix<T>,
}

#[derive(Clone, Debug)]
pub struct EncodeCache<T> {
    backbone: BackboneCache<T>,
    features_t: Matrix<T>,
    layers: Vec<EncoderCache<T>>,
}

impl<T: Scalar> EncodeCache<T> {
    pub fn layers(&self) -> &[EncoderCache<T>] {
        &self.layers
    }
}

#[derive(Clone, Debug)]
pub struct DecodeCache<T> {
    layers: Vec<DecoderCache<T>>,
}

impl<T: Scalar> DecodeCache<T> {
    pub fn layers(&self) -> &[DecoderCache<T>] {
        &self.layers
    }
}

#[derive(Clone, Debug)]
pub struct I2cCache<T> {
    pub encode: EncodeCache<T>,
    pub decode: DecodeCache<T>,
    pub memory: Matrix<T>,
}

impl<T: Scalar> I2c<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mha = cfg.mha()?;
        let d = cfg.model_dim;
        let n = cfg.n_queries;
        let backbone = Backbone::new(&cfg.backbone, rng);
        let (fh, fw) = backbone.output_size();
        Ok(Self {
            input_proj: Linear::xavier(cfg.backbone.out_channels(), d, true, rng),
            encoder: (0..cfg.encoder_layers)
                .map(|_| EncoderLayer::xavier(mha, cfg.ffn_dim, cfg.dropout, rng))
                .collect(),
            queries: Param::new(Matrix::xavier(n, d, rng)),
            decoder: (0..cfg.i2c_decoder_layers)
                .map(|_| DecoderLayer::xavier(mha, cfg.ffn_dim, cfg.dropout, rng))
                .collect(),
            char_head: Linear::xavier(d, CharSet::SIZE, true, rng),
            pos_head: Linear::xavier(d, n + 1, true, rng),
            pos_enc: positional_encoding_2d(fh, fw, d)?,
            use_pos_enc: true,
            feat_hw: (fh, fw),
            backbone,
        })
    }

    /// Spatial size of the encoded feature map.
    pub fn feature_size(&self) -> (usize, usize) {
        self.feat_hw
    }

    /// Disables the 2-D positional encoding; exposed for equivariance tests.
    pub fn set_positional_encoding(&mut self, enabled: bool) {
        self.use_pos_enc = enabled;
    }

    fn pos(&self) -> Option<&Matrix<T>> {
        self.use_pos_enc.then_some(&self.pos_enc)
    }

    pub fn backbone_forward(&self, image: &Matrix<T>) -> Result<(Matrix<T>, BackboneCache<T>)> {
        self.backbone.forward(image)
    }

    /// Runs the encoder over a token sequence (`HW x D`) directly.
    pub fn encode_tokens(&self, tokens: &Matrix<T>, mode: &mut Mode<'_>) -> Result<(Matrix<T>, Vec<EncoderCache<T>>)> {
        let mut x = tokens.clone();
        let mut caches = Vec::with_capacity(self.encoder.len());
        for layer in &self.encoder {
            let (y, c) = layer.forward(&x, self.pos(), mode)?;
            caches.push(c);
            x = y;
        }
        Ok((x, caches))
    }

    /// Image to encoded sequence `z_e` (`HW x D`).
    pub fn encode(&self, image: &Matrix<T>, mode: &mut Mode<'_>) -> Result<(Matrix<T>, EncodeCache<T>)> {
        let (features, backbone) = self.backbone_forward(image)?;
        let features_t = features.transpose();
        let tokens = self.input_proj.forward(&features_t);
        let (z, layers) = self.encode_tokens(&tokens, mode)?;
        Ok((
            z,
            EncodeCache {
                backbone,
                features_t,
                layers,
            },
        ))
    }

    /// Parallel query decoding over `z_e`.
    pub fn decode(&self, memory: &Matrix<T>, mode: &mut Mode<'_>) -> Result<(I2cOutput<T>, DecodeCache<T>)> {
        let mut tgt = self.queries.value.clone();
        let mut layers = Vec::with_capacity(self.decoder.len());
        for layer in &self.decoder {
            let (y, c) = layer.forward(&tgt, memory, self.pos(), mode)?;
            layers.push(c);
            tgt = y;
        }
        let char_logits = self.char_head.forward(&tgt);
        let pos_logits = self.pos_head.forward(&tgt);
        Ok((
            I2cOutput {
                e_pc: PositionalCharEmbeddings(tgt),
                char_logits,
                pos_logits,
            },
            DecodeCache { layers },
        ))
    }

    pub fn forward(&self, image: &Matrix<T>, mode: &mut Mode<'_>) -> Result<(I2cOutput<T>, I2cCache<T>)> {
        let (memory, encode) = self.encode(image, mode)?;
        let (out, decode) = self.decode(&memory, mode)?;
        Ok((out, I2cCache { encode, decode, memory }))
    }

    /// Back-propagates head gradients plus any extra gradient arriving at
    /// `E_PC` (from the word decoder).
    pub fn backward(
        &mut self,
        cache: &I2cCache<T>,
        output: &I2cOutput<T>,
        d_char_logits: &Matrix<T>,
        d_pos_logits: &Matrix<T>,
        d_e_pc: Option<&Matrix<T>>,
    ) {
        let e_pc = &output.e_pc.0;
        let mut dtgt = self.char_head.backward(e_pc, d_char_logits);
        dtgt.add_assign(&self.pos_head.backward(e_pc, d_pos_logits));
        if let Some(extra) = d_e_pc {
            dtgt.add_assign(extra);
        }
        let mut dmem = Matrix::zeros(cache.memory.rows(), cache.memory.cols());
        for (layer, c) in self.decoder.iter_mut().zip(&cache.decode.layers).rev() {
            let (dt, dm) = layer.backward(c, &dtgt);
            dmem.add_assign(&dm);
            dtgt = dt;
        }
        self.queries.grad.add_assign(&dtgt);

        let mut dx = dmem;
        for (layer, c) in self.encoder.iter_mut().zip(&cache.encode.layers).rev() {
            dx = layer.backward(c, &dx);
        }
        let dfeat_t = self.input_proj.backward(&cache.encode.features_t, &dx);
        self.backbone.backward(&cache.encode.backbone, &dfeat_t.transpose());
    }

    /// Candidates from head logits.
    pub fn candidates(char_logits: &Matrix<T>, pos_logits: &Matrix<T>) -> Vec<CharCandidate> {
        let mut cp = char_logits.clone();
        softmax_rows(&mut cp);
        let mut pp = pos_logits.clone();
        softmax_rows(&mut pp);
        (0..cp.rows())
            .map(|q| {
                CharCandidate::from_probs(
                    q,
                    cp.row(q).iter().map(|v| v.as_f64()).collect(),
                    pp.row(q).iter().map(|v| v.as_f64()).collect(),
                )
            })
            .collect()
    }
}

impl<T: Scalar> Module<T> for I2c<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.backbone.visit(&join(prefix, "backbone"), f);
        self.input_proj.visit(&join(prefix, "input_proj"), f);
        for (i, l) in self.encoder.iter().enumerate() {
            l.visit(&join(prefix, &format!("encoder{i}")), f);
        }
        f(&join(prefix, "queries"), &self.queries);
        for (i, l) in self.decoder.iter().enumerate() {
            l.visit(&join(prefix, &format!("decoder{i}")), f);
        }
        self.char_head.visit(&join(prefix, "char_head"), f);
        self.pos_head.visit(&join(prefix, "pos_head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.backbone.visit_mut(&join(prefix, "backbone"), f);
        self.input_proj.visit_mut(&join(prefix, "input_proj"), f);
        for (i, l) in self.encoder.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("encoder{i}")), f);
        }
        f(&join(prefix, "queries"), &mut self.queries);
        for (i, l) in self.decoder.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("decoder{i}")), f);
        }
        self.char_head.visit_mut(&join(prefix, "char_head"), f);
        self.pos_head.visit_mut(&join(prefix, "pos_head"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand(cs: &CharSet, ps: &PositionSet, q: usize, ch: char, pos: usize, p: f64) -> CharCandidate {
        let ci = cs.char_index(ch).unwrap();
        let mut cp = vec![(1.0 - p) / 36.0; 37];
        cp[ci] = p;
        let mut pp = vec![0.0; ps.size()];
        pp[pos] = 1.0;
        CharCandidate::from_probs(q, cp, pp)
    }

    #[test]
    fn standalone_decode_filters_nulls() {
        let (cs, ps) = (CharSet, PositionSet::default());
        let c = vec![
            cand(&cs, &ps, 0, 'p', 0, 0.9),
            cand(&cs, &ps, 1, 'o', 1, 0.7),
            cand(&cs, &ps, 2, 'x', 25, 0.8),
        ];
        assert_eq!(i2c_standalone_decode(&c, &cs, &ps), "po");
    }

    #[test]
    fn standalone_decode_all_null() {
        let (cs, ps) = (CharSet, PositionSet::default());
        let c: Vec<_> = (0..25).map(|q| cand(&cs, &ps, q, '-', 25, 0.99)).collect();
        assert_eq!(i2c_standalone_decode(&c, &cs, &ps), "");
        // null character at an in-word position is dropped too
        let c = vec![cand(&cs, &ps, 0, '-', 0, 0.9), cand(&cs, &ps, 1, 'k', 1, 0.9)];
        assert_eq!(i2c_standalone_decode(&c, &cs, &ps), "k");
    }

    #[test]
    fn standalone_decode_resolves_duplicates() {
        let (cs, ps) = (CharSet, PositionSet::default());
        let c = vec![
            cand(&cs, &ps, 0, 'r', 2, 0.6),
            cand(&cs, &ps, 1, 'n', 2, 0.4),
            cand(&cs, &ps, 2, 'p', 0, 0.9),
            cand(&cs, &ps, 3, 'o', 1, 0.8),
            cand(&cs, &ps, 4, 't', 3, 0.9),
        ];
        assert_eq!(i2c_standalone_decode(&c, &cs, &ps), "port");
        // equal confidence: lower query index wins
        let c = vec![cand(&cs, &ps, 5, 'a', 0, 0.5), cand(&cs, &ps, 2, 'b', 0, 0.5)];
        assert_eq!(i2c_standalone_decode(&c, &cs, &ps), "b");
    }
}
