use rand::Rng;

use super::{
    join, Dropout, DropoutMask, FeedForward, FfnCache, LayerNorm, MhaCache, MhaConfig, Mode,
    Module, MultiHeadAttention, NormCache, Param,
};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

fn with_pos<T: Scalar>(x: &Matrix<T>, pos: Option<&Matrix<T>>) -> Matrix<T> {
    match pos {
        Some(p) => x.add(p),
        None => x.clone(),
    }
}

/// Post-norm encoder layer: self-attention and FFN, each followed by
/// dropout, residual add and layer norm. Positional encodings are added to
/// the attention queries and keys only.
#[derive(Clone, Debug)]
pub struct EncoderLayer<T> {
    pub self_attn: MultiHeadAttention<T>,
    pub norm1: LayerNorm<T>,
    pub ffn: FeedForward<T>,
    pub norm2: LayerNorm<T>,
    pub dropout: Dropout,
}

#[derive(Clone, Debug)]
pub struct EncoderCache<T> {
    attn: MhaCache<T>,
    drop1: DropoutMask<T>,
    norm1: NormCache<T>,
    ffn: FfnCache<T>,
    drop2: DropoutMask<T>,
    norm2: NormCache<T>,
}

impl<T: Scalar> EncoderCache<T> {
    pub fn attention(&self) -> &MhaCache<T> {
        &self.attn
    }
}

impl<T: Scalar> EncoderLayer<T> {
    pub fn xavier<R: Rng + ?Sized>(cfg: MhaConfig, ffn_dim: usize, dropout: f64, rng: &mut R) -> Self {
        Self {
            self_attn: MultiHeadAttention::xavier(cfg, rng),
            norm1: LayerNorm::new(cfg.model_dim),
            ffn: FeedForward::xavier(cfg.model_dim, ffn_dim, rng),
            norm2: LayerNorm::new(cfg.model_dim),
            dropout: Dropout::new(dropout),
        }
    }

    pub fn forward(
        &self,
        x: &Matrix<T>,
        pos: Option<&Matrix<T>>,
        mode: &mut Mode<'_>,
    ) -> Result<(Matrix<T>, EncoderCache<T>)> {
        let qk = with_pos(x, pos);
        let (mut a, attn) = self.self_attn.forward(&qk, &qk, x)?;
        let drop1 = self.dropout.forward(&mut a, mode);
        a.add_assign(x);
        let (h, norm1) = self.norm1.forward(&a);
        let (mut f, ffn) = self.ffn.forward(&h);
        let drop2 = self.dropout.forward(&mut f, mode);
        f.add_assign(&h);
        let (y, norm2) = self.norm2.forward(&f);
        Ok((
            y,
            EncoderCache {
                attn,
                drop1,
                norm1,
                ffn,
                drop2,
                norm2,
            },
        ))
    }

    pub fn backward(&mut self, cache: &EncoderCache<T>, dy: &Matrix<T>) -> Matrix<T> {
        let mut dres = self.norm2.backward(&cache.norm2, dy);
        let mut dh = dres.clone();
        cache.drop2.backward(&mut dres);
        dh.add_assign(&self.ffn.backward(&cache.ffn, &dres));
        let mut da = self.norm1.backward(&cache.norm1, &dh);
        let mut dx = da.clone();
        cache.drop1.backward(&mut da);
        let (dq, dk, dv) = self.self_attn.backward(&cache.attn, &da);
        dx.add_assign(&dq);
        dx.add_assign(&dk);
        dx.add_assign(&dv);
        dx
    }
}

impl<T: Scalar> Module<T> for EncoderLayer<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.self_attn.visit(&join(prefix, "self_attn"), f);
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.ffn.visit(&join(prefix, "ffn"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.self_attn.visit_mut(&join(prefix, "self_attn"), f);
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.ffn.visit_mut(&join(prefix, "ffn"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
    }
}

/// Post-norm decoder layer: self-attention over the query set,
/// cross-attention into a memory sequence, then FFN.
#[derive(Clone, Debug)]
pub struct DecoderLayer<T> {
    pub self_attn: MultiHeadAttention<T>,
    pub norm1: LayerNorm<T>,
    pub cross_attn: MultiHeadAttention<T>,
    pub norm2: LayerNorm<T>,
    pub ffn: FeedForward<T>,
    pub norm3: LayerNorm<T>,
    pub dropout: Dropout,
}

#[derive(Clone, Debug)]
pub struct DecoderCache<T> {
    self_attn: MhaCache<T>,
    drop1: DropoutMask<T>,
    norm1: NormCache<T>,
    cross_attn: MhaCache<T>,
    drop2: DropoutMask<T>,
    norm2: NormCache<T>,
    ffn: FfnCache<T>,
    drop3: DropoutMask<T>,
    norm3: NormCache<T>,
}

impl<T: Scalar> DecoderCache<T> {
    pub fn self_attention(&self) -> &MhaCache<T> {
        &self.self_attn
    }

    pub fn cross_attention(&self) -> &MhaCache<T> {
        &self.cross_attn
    }
}

impl<T: Scalar> DecoderLayer<T> {
    pub fn xavier<R: Rng + ?Sized>(cfg: MhaConfig, ffn_dim: usize, dropout: f64, rng: &mut R) -> Self {
        Self {
            self_attn: MultiHeadAttention::xavier(cfg, rng),
            norm1: LayerNorm::new(cfg.model_dim),
            cross_attn: MultiHeadAttention::xavier(cfg, rng),
            norm2: LayerNorm::new(cfg.model_dim),
            ffn: FeedForward::xavier(cfg.model_dim, ffn_dim, rng),
            norm3: LayerNorm::new(cfg.model_dim),
            dropout: Dropout::new(dropout),
        }
    }

    /// `memory_pos`, when given, is added to the cross-attention keys.
    pub fn forward(
        &self,
        tgt: &Matrix<T>,
        memory: &Matrix<T>,
        memory_pos: Option<&Matrix<T>>,
        mode: &mut Mode<'_>,
    ) -> Result<(Matrix<T>, DecoderCache<T>)> {
        let (mut a, self_attn) = self.self_attn.forward(tgt, tgt, tgt)?;
        let drop1 = self.dropout.forward(&mut a, mode);
        a.add_assign(tgt);
        let (t1, norm1) = self.norm1.forward(&a);
        let keys = with_pos(memory, memory_pos);
        let (mut c, cross_attn) = self.cross_attn.forward(&t1, &keys, memory)?;
        let drop2 = self.dropout.forward(&mut c, mode);
        c.add_assign(&t1);
        let (t2, norm2) = self.norm2.forward(&c);
        let (mut f, ffn) = self.ffn.forward(&t2);
        let drop3 = self.dropout.forward(&mut f, mode);
        f.add_assign(&t2);
        let (y, norm3) = self.norm3.forward(&f);
        Ok((
            y,
            DecoderCache {
                self_attn,
                drop1,
                norm1,
                cross_attn,
                drop2,
                norm2,
                ffn,
                drop3,
                norm3,
            },
        ))
    }

    /// Returns `(d_tgt, d_memory)`.
    pub fn backward(&mut self, cache: &DecoderCache<T>, dy: &Matrix<T>) -> (Matrix<T>, Matrix<T>) {
        let mut dres = self.norm3.backward(&cache.norm3, dy);
        let mut dt2 = dres.clone();
        cache.drop3.backward(&mut dres);
        dt2.add_assign(&self.ffn.backward(&cache.ffn, &dres));

        let mut dc = self.norm2.backward(&cache.norm2, &dt2);
        let mut dt1 = dc.clone();
        cache.drop2.backward(&mut dc);
        let (dq, dk, dv) = self.cross_attn.backward(&cache.cross_attn, &dc);
        dt1.add_assign(&dq);
        let mut dmem = dk;
        dmem.add_assign(&dv);

        let mut da = self.norm1.backward(&cache.norm1, &dt1);
        let mut dtgt = da.clone();
        cache.drop1.backward(&mut da);
        let (dq, dk, dv) = self.self_attn.backward(&cache.self_attn, &da);
        dtgt.add_assign(&dq);
        dtgt.add_assign(&dk);
        dtgt.add_assign(&dv);
        (dtgt, dmem)
    }
}

impl<T: Scalar> Module<T> for DecoderLayer<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.self_attn.visit(&join(prefix, "self_attn"), f);
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.cross_attn.visit(&join(prefix, "cross_attn"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.ffn.visit(&join(prefix, "ffn"), f);
        self.norm3.visit(&join(prefix, "norm3"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.self_attn.visit_mut(&join(prefix, "self_attn"), f);
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.cross_attn.visit_mut(&join(prefix, "cross_attn"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.ffn.visit_mut(&join(prefix, "ffn"), f);
        self.norm3.visit_mut(&join(prefix, "norm3"), f);
    }
}
