//! Binary checkpoint: magic, config echo, step, RNG state, named parameter
//! blobs and a trailing CRC-32.
//!
//! ```text
//! "I2C2W1" | u8 scalar bytes | u32 len + config text | u64 step
//! | 32-byte seed, u64 stream, u128 word position
//! | u32 count | { u16 len + name, u32 rows, u32 cols, little-endian values }*
//! | u32 crc32 of everything above
//! ```

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::I2c2w;
use crate::nn::Module;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 6] = b"I2C2W1";

/// Everything needed to resume or serve a model.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub model: I2c2w<T>,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(model: I2c2w<T>, step: u64, rng: ChaCha8Rng) -> Self {
        Self { model, step, rng }
    }
}

pub fn save_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.push(T::BYTES as u8);
    let cfg = ckpt.model.config().to_kv();
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(cfg.as_bytes());
    buf.extend_from_slice(&ckpt.step.to_le_bytes());
    buf.extend_from_slice(&ckpt.rng.get_seed());
    buf.extend_from_slice(&ckpt.rng.get_stream().to_le_bytes());
    buf.extend_from_slice(&ckpt.rng.get_word_pos().to_le_bytes());

    let mut blobs = Vec::new();
    let mut count = 0u32;
    ckpt.model.visit("", &mut |name, p| {
        count += 1;
        blobs.extend_from_slice(&(name.len() as u16).to_le_bytes());
        blobs.extend_from_slice(name.as_bytes());
        blobs.extend_from_slice(&(p.value.rows() as u32).to_le_bytes());
        blobs.extend_from_slice(&(p.value.cols() as u32).to_le_bytes());
        for &v in p.value.as_slice() {
            v.write_le(&mut blobs);
        }
    });
    buf.extend_from_slice(&count.to_le_bytes());
    buf.extend_from_slice(&blobs);
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());

    // write-then-rename so a crash never leaves a half-written checkpoint
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, None)
}

/// Like [`load_checkpoint`] but rejects a checkpoint whose configuration
/// differs from `expected`.
pub fn load_checkpoint_expecting<T: Scalar>(path: &Path, expected: &ModelConfig) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, Some(expected))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::CorruptBlob("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const K: usize>(&mut self) -> Result<[u8; K]> {
        Ok(self.take(K)?.try_into().expect("length checked"))
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::CorruptBlob("invalid UTF-8".into()))
    }
}

fn decode<T: Scalar>(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Checkpoint<T>> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < MAGIC.len() + 4 {
        return Err(Error::CorruptBlob("file too short".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::CorruptBlob("checksum mismatch".into()));
    }
    let mut r = Reader {
        buf: body,
        pos: MAGIC.len(),
    };
    let width = r.take(1)?[0] as usize;
    if width != 4 && width != 8 {
        return Err(Error::CorruptBlob(format!("scalar width {width}")));
    }
    let cfg_len = r.u32()? as usize;
    let cfg_text = r.string(cfg_len)?;
    let cfg = ModelConfig::from_kv(&cfg_text).map_err(|e| Error::CorruptBlob(format!("config echo: {e}")))?;
    if let Some(exp) = expected {
        if exp.n_queries != cfg.n_queries {
            return Err(Error::VersionMismatch(format!(
                "checkpoint has n_queries={}, expected {}",
                cfg.n_queries, exp.n_queries
            )));
        }
        if exp != &cfg {
            return Err(Error::VersionMismatch("model configuration differs".into()));
        }
    }
    let step = r.u64()?;
    let mut rng = ChaCha8Rng::from_seed(r.array::<32>()?);
    rng.set_stream(r.u64()?);
    rng.set_word_pos(u128::from_le_bytes(r.array()?));

    let count = r.u32()? as usize;
    let mut blobs = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u16()? as usize;
        let name = r.string(n)?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::CorruptBlob(format!("{name}: size overflow")))?;
        let raw = r.take(len.checked_mul(width).ok_or_else(|| Error::CorruptBlob(name.clone()))?)?;
        let data: Vec<T> = if width == 8 {
            raw.chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect()
        } else {
            raw.chunks_exact(4).map(|c| T::of(f32::read_le(c) as f64)).collect()
        };
        blobs.push((name, Matrix::from_vec(rows, cols, data)?));
    }
    if r.pos != body.len() {
        return Err(Error::CorruptBlob("trailing bytes".into()));
    }

    let mut model = I2c2w::<T>::seeded(cfg, 0)?;
    let mut it = blobs.into_iter();
    let mut err = None;
    model.visit_mut("", &mut |name, p| {
        if err.is_some() {
            return;
        }
        match it.next() {
            Some((n, m)) if n == name && m.shape() == p.value.shape() => p.value = m,
            Some((n, m)) => {
                err = Some(Error::VersionMismatch(format!(
                    "parameter {n} {:?} where {name} {:?} was expected",
                    m.shape(),
                    p.value.shape()
                )))
            }
            None => err = Some(Error::VersionMismatch(format!("missing parameter {name}"))),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if it.next().is_some() {
        return Err(Error::VersionMismatch("extra parameters".into()));
    }
    Ok(Checkpoint { model, step, rng })
}

#[cfg(test)]
mod tests {
    use rand::RngCore;

    use super::*;
    use crate::config::BackboneConfig;
    use crate::model::image_tensor;
    use crate::synthdata::{layout_word, FontAtlas};

    fn cfg(n: usize) -> ModelConfig {
        ModelConfig {
            n_queries: n,
            model_dim: 16,
            num_heads: 2,
            ffn_dim: 32,
            encoder_layers: 1,
            backbone: BackboneConfig {
                stages: vec![(4, 2), (8, 2), (8, 2)],
            },
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = I2c2w::<f32>::seeded(cfg(8), 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        rng.next_u64();
        save_checkpoint(&Checkpoint::new(model.clone(), 42, rng.clone()), &path).unwrap();
        let mut back = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(back.step, 42);
        assert_eq!(back.rng.next_u64(), rng.next_u64());
        let img = image_tensor(&layout_word("probe", &FontAtlas::builtin()).unwrap().image).unwrap();
        let a = model.predict(&img).unwrap();
        let b = back.model.predict(&img).unwrap();
        assert_eq!(a.char_logits, b.char_logits);
        assert_eq!(a.slot_logits, b.slot_logits);
        assert!(load_checkpoint_expecting::<f32>(&path, &cfg(8)).is_ok());
    }

    #[test]
    fn guards() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = I2c2w::<f32>::seeded(cfg(8), 9).unwrap();
        save_checkpoint(&Checkpoint::new(model, 0, ChaCha8Rng::seed_from_u64(0)), &path).unwrap();
        assert!(matches!(
            load_checkpoint_expecting::<f32>(&path, &cfg(10)),
            Err(Error::VersionMismatch(_))
        ));
        let bytes = fs::read(&path).unwrap();
        let short = dir.path().join("short.ckpt");
        fs::write(&short, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&short), Err(Error::CorruptBlob(_))));
        fs::write(&short, b"NOTACKPT....").unwrap();
        assert!(matches!(load_checkpoint::<f32>(&short), Err(Error::BadMagic)));
        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 1;
        fs::write(&short, &flipped).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&short), Err(Error::CorruptBlob(_))));
    }
}
