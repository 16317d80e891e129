//! The full recognizer: detection (I2C) feeding the word decoder (C2W).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::c2w::{slot_argmax, ctc_greedy_decode, C2w, C2wCache};
use crate::charset::{CharSet, LabelSet};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::i2c::{i2c_standalone_decode, CharCandidate, I2c, I2cCache, I2cOutput};
use crate::losses::{sample_loss, LossBreakdown, Predictions};
use crate::nn::{join, Mode, Module, Param};
use crate::optim::ParamGroup;
use crate::scalar::Scalar;
use crate::synthdata::{GrayImage, CANVAS_HEIGHT, CANVAS_WIDTH};
use crate::tensor::Matrix;

#[derive(Clone, Debug)]
pub struct I2c2w<T> {
    cfg: ModelConfig,
    pub i2c: I2c<T>,
    pub c2w: C2w<T>,
}

#[derive(Clone, Debug)]
pub struct ModelCache<T> {
    i2c: I2cCache<T>,
    i2c_out: I2cOutput<T>,
    c2w: C2wCache<T>,
}

impl<T: Scalar> ModelCache<T> {
    pub fn i2c(&self) -> &I2cCache<T> {
        &self.i2c
    }

    pub fn i2c_output(&self) -> &I2cOutput<T> {
        &self.i2c_out
    }
}

/// Inference result for one image.
#[derive(Clone, Debug)]
pub struct Recognition {
    /// Word from the word decoder.
    pub word: String,
    /// Word obtained by ordering the detected candidates alone.
    pub i2c_word: String,
    pub candidates: Vec<CharCandidate>,
    pub slot_path: Vec<usize>,
}

/// Head-averaged cross-attention of one detection query over the feature grid.
#[derive(Clone, Debug)]
pub struct AttentionMap {
    pub query: usize,
    pub char_class: usize,
    pub pos_class: usize,
    pub height: usize,
    pub width: usize,
    pub weights: Vec<f64>,
}

impl AttentionMap {
    /// `(row, col)` of the largest weight.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.weights.iter().enumerate() {
            if v > self.weights[best] {
                best = i;
            }
        }
        (best / self.width, best % self.width)
    }

    /// Nearest-neighbour upsampling to the canvas, scaled so the peak is 1.
    pub fn to_image(&self) -> GrayImage {
        let peak = self.weights.iter().copied().fold(0.0, f64::max).max(1e-12);
        let mut img = GrayImage::new(CANVAS_HEIGHT, CANVAS_WIDTH);
        for y in 0..CANVAS_HEIGHT {
            for x in 0..CANVAS_WIDTH {
                let (r, c) = (y * self.height / CANVAS_HEIGHT, x * self.width / CANVAS_WIDTH);
                img.set(y, x, (self.weights[r * self.width + c] / peak) as f32);
            }
        }
        img
    }

    /// `attn_q<i>_<char>(<pos>).png`
    pub fn file_name(&self, ps_null: usize) -> String {
        let pos = if self.pos_class == ps_null {
            "-".to_string()
        } else {
            self.pos_class.to_string()
        };
        format!("attn_q{}_{}({}).png", self.query, CharSet.symbol(self.char_class), pos)
    }
}

/// Grayscale canvas replicated into the 3-channel input layout (`3 x HW`).
pub fn image_tensor<T: Scalar>(img: &GrayImage) -> Result<Matrix<T>> {
    if (img.height(), img.width()) != (CANVAS_HEIGHT, CANVAS_WIDTH) {
        return Err(Error::shape(format!(
            "expected a {CANVAS_HEIGHT}x{CANVAS_WIDTH} image, got {}x{}",
            img.height(),
            img.width()
        )));
    }
    let hw = CANVAS_HEIGHT * CANVAS_WIDTH;
    let px = img.as_slice();
    Ok(Matrix::from_fn(3, hw, |_, i| T::of(px[i] as f64)))
}

impl<T: Scalar> I2c2w<T> {
    pub fn new<R: Rng + ?Sized>(cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let i2c = I2c::new(&cfg, rng)?;
        let c2w = C2w::new(&cfg, rng)?;
        Ok(Self { cfg, i2c, c2w })
    }

    /// Initialization from a seed alone.
    pub fn seeded(cfg: ModelConfig, seed: u64) -> Result<Self> {
        Self::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn forward(&self, image: &Matrix<T>, mode: &mut Mode<'_>) -> Result<(Predictions<T>, ModelCache<T>)> {
        let (out, i2c_cache) = self.i2c.forward(image, mode)?;
        let (slot_logits, c2w_cache) = self.c2w.forward(&out.e_pc, mode)?;
        let preds = Predictions {
            char_logits: out.char_logits.clone(),
            pos_logits: out.pos_logits.clone(),
            slot_logits,
        };
        Ok((
            preds,
            ModelCache {
                i2c: i2c_cache,
                i2c_out: out,
                c2w: c2w_cache,
            },
        ))
    }

    /// Accumulates parameter gradients for the given logit gradients.
    pub fn backward(
        &mut self,
        cache: &ModelCache<T>,
        d_char_logits: &Matrix<T>,
        d_pos_logits: &Matrix<T>,
        d_slot_logits: &Matrix<T>,
    ) {
        let d_e_pc = self.c2w.backward(&cache.c2w, d_slot_logits);
        self.i2c
            .backward(&cache.i2c, &cache.i2c_out, d_char_logits, d_pos_logits, Some(&d_e_pc));
    }

    pub fn predict(&self, image: &Matrix<T>) -> Result<Predictions<T>> {
        Ok(self.forward(image, &mut Mode::Eval)?.0)
    }

    /// Forward, loss and backward over a batch, one sample at a time.
    /// Gradients (of the batch mean) are added to the existing ones.
    pub fn accumulate_batch(
        &mut self,
        images: &[&Matrix<T>],
        labels: &[&LabelSet],
        beta: T,
        mode: &mut Mode<'_>,
    ) -> Result<LossBreakdown<T>> {
        if images.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if images.len() != labels.len() {
            return Err(Error::shape(format!("{} images for {} labels", images.len(), labels.len())));
        }
        let inv = T::one() / T::of(images.len() as f64);
        let (mut c, mut p, mut r) = (T::zero(), T::zero(), T::zero());
        for (img, lab) in images.iter().zip(labels) {
            let (pred, cache) = self.forward(img, mode)?;
            let mut s = sample_loss(&pred, lab, beta)?;
            c += s.breakdown.det_char;
            p += s.breakdown.det_pos;
            r += s.breakdown.recog;
            s.d_char_logits.scale(inv);
            s.d_pos_logits.scale(inv);
            s.d_slot_logits.scale(inv);
            self.backward(&cache, &s.d_char_logits, &s.d_pos_logits, &s.d_slot_logits);
        }
        Ok(LossBreakdown::new(c * inv, p * inv, r * inv))
    }

    pub fn recognize(&self, image: &Matrix<T>) -> Result<Recognition> {
        let pred = self.predict(image)?;
        let candidates = I2c::<T>::candidates(&pred.char_logits, &pred.pos_logits);
        let i2c_word = i2c_standalone_decode(&candidates, &CharSet, &self.cfg.position_set());
        Ok(Recognition {
            word: ctc_greedy_decode(&pred.slot_logits),
            i2c_word,
            candidates,
            slot_path: slot_argmax(&pred.slot_logits),
        })
    }

    /// One map per detection query from the last detection decoder layer.
    pub fn attention_maps(&self, image: &Matrix<T>) -> Result<Vec<AttentionMap>> {
        let (out, cache) = self.i2c.forward(image, &mut Mode::Eval)?;
        let last = cache
            .decode
            .layers()
            .last()
            .ok_or_else(|| Error::Config("no detection decoder layer".into()))?;
        let mean = last.cross_attention().mean_weights();
        let (h, w) = self.i2c.feature_size();
        let cands = I2c::<T>::candidates(&out.char_logits, &out.pos_logits);
        Ok(cands
            .iter()
            .map(|c| AttentionMap {
                query: c.query,
                char_class: c.char_class,
                pos_class: c.pos_class,
                height: h,
                width: w,
                weights: mean.row(c.query).iter().map(|v| v.as_f64()).collect(),
            })
            .collect())
    }

    /// Parameters converted to another precision.
    pub fn cast<U: Scalar>(&self) -> I2c2w<U> {
        let mut out = I2c2w::<U>::seeded(self.cfg.clone(), 0).expect("config already validated");
        let mut values = Vec::new();
        self.visit("", &mut |_, p| values.push(p.value.cast::<U>()));
        let mut it = values.into_iter();
        out.visit_mut("", &mut |_, p| p.value = it.next().expect("same layout"));
        out
    }
}

impl<T: Scalar> Module<T> for I2c2w<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.i2c.visit(&join(prefix, "i2c"), f);
        self.c2w.visit(&join(prefix, "c2w"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.i2c.visit_mut(&join(prefix, "i2c"), f);
        self.c2w.visit_mut(&join(prefix, "c2w"), f);
    }
}

/// Parameter names that belong to the convolutional feature extractor.
pub fn is_backbone_param(name: &str) -> bool {
    name.starts_with("i2c.backbone.")
}

pub fn param_group(name: &str) -> ParamGroup {
    if is_backbone_param(name) {
        ParamGroup::Backbone
    } else {
        ParamGroup::Transformer
    }
}
