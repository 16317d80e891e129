//! Model hyper-parameters and their `key=value` text form, shared by
//! checkpoints and the CLI config file.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::charset::PositionSet;
use crate::error::{Error, Result};
use crate::nn::MhaConfig;

/// Convolution stages of the feature extractor as `(channels, stride)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub stages: Vec<(usize, usize)>,
}

impl BackboneConfig {
    pub fn out_channels(&self) -> usize {
        self.stages.last().map_or(3, |s| s.0)
    }

    pub fn downsample(&self) -> usize {
        self.stages.iter().map(|s| s.1).product()
    }
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stages: vec![(32, 2), (64, 2), (128, 2), (128, 1)],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Detection slots `N`; also the number of word-decoder queries.
    pub n_queries: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub encoder_layers: usize,
    pub i2c_decoder_layers: usize,
    pub c2w_decoder_layers: usize,
    pub backbone: BackboneConfig,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_queries: 25,
            model_dim: 128,
            num_heads: 8,
            ffn_dim: 256,
            encoder_layers: 3,
            i2c_decoder_layers: 1,
            c2w_decoder_layers: 1,
            backbone: BackboneConfig::default(),
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn mha(&self) -> Result<MhaConfig> {
        MhaConfig::new(self.model_dim, self.num_heads)
    }

    pub fn position_set(&self) -> PositionSet {
        PositionSet::new(self.n_queries)
    }

    pub fn validate(&self) -> Result<()> {
        self.mha()?;
        if self.model_dim % 4 != 0 {
            return Err(Error::BadDim(self.model_dim));
        }
        if self.n_queries < 3 {
            return Err(Error::Config("n_queries must be at least 3".into()));
        }
        if self.encoder_layers == 0 || self.i2c_decoder_layers == 0 || self.c2w_decoder_layers == 0 {
            return Err(Error::Config("layer counts must be positive".into()));
        }
        if self.backbone.stages.is_empty() || self.backbone.stages.iter().any(|&(c, s)| c == 0 || s == 0) {
            return Err(Error::Config("backbone stages must be non-empty and positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let stages: Vec<String> = self
            .backbone
            .stages
            .iter()
            .map(|(c, st)| format!("{c}/{st}"))
            .collect();
        let _ = writeln!(s, "n_queries={}", self.n_queries);
        let _ = writeln!(s, "model_dim={}", self.model_dim);
        let _ = writeln!(s, "num_heads={}", self.num_heads);
        let _ = writeln!(s, "ffn_dim={}", self.ffn_dim);
        let _ = writeln!(s, "encoder_layers={}", self.encoder_layers);
        let _ = writeln!(s, "i2c_decoder_layers={}", self.i2c_decoder_layers);
        let _ = writeln!(s, "c2w_decoder_layers={}", self.c2w_decoder_layers);
        let _ = writeln!(s, "backbone={}", stages.join(","));
        let _ = writeln!(s, "dropout={}", self.dropout);
        s
    }

    /// Applies recognized keys from `map`, leaving others untouched.
    pub fn apply_kv(&mut self, map: &BTreeMap<String, String>) -> Result<()> {
        for (k, v) in map {
            match k.as_str() {
                "n_queries" => self.n_queries = parse(k, v)?,
                "model_dim" => self.model_dim = parse(k, v)?,
                "num_heads" => self.num_heads = parse(k, v)?,
                "ffn_dim" => self.ffn_dim = parse(k, v)?,
                "encoder_layers" => self.encoder_layers = parse(k, v)?,
                "i2c_decoder_layers" => self.i2c_decoder_layers = parse(k, v)?,
                "c2w_decoder_layers" => self.c2w_decoder_layers = parse(k, v)?,
                "dropout" => self.dropout = parse(k, v)?,
                "backbone" => {
                    let stages = v
                        .split(',')
                        .map(|st| {
                            let (c, s) = st
                                .split_once('/')
                                .ok_or_else(|| Error::Config(format!("backbone stage {st:?}")))?;
                            Ok((parse(k, c)?, parse(k, s)?))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    self.backbone = BackboneConfig { stages };
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_kv(&parse_kv(text)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

pub(crate) fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}
