//! Joint end-to-end optimization, evaluation and the metrics log.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::charset::{derive_labels, normalize_word, CharSet, LabelSet};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::{parse, parse_kv, ModelConfig};
use crate::error::{Error, Result};
use crate::losses::{ctc_required_slots, LossBreakdown};
use crate::model::{image_tensor, param_group, I2c2w};
use crate::nn::{Mode, Module};
use crate::optim::{AdamW, AdamWConfig};
use crate::scalar::Scalar;
use crate::synthdata::{GrayImage, Manifest};
use crate::tensor::Matrix;

pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_HEADER: &str = "step,det_char,det_pos,recog,total";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr_backbone: f64,
    pub lr_transformer: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Weight of the position term in the matching cost.
    pub beta: f64,
    /// Check training accuracy every this many steps (0 disables).
    pub eval_every: usize,
    /// Number of training samples used for that check.
    pub eval_subset: usize,
    /// Stop once the checked training accuracy reaches this value.
    pub target_accuracy: Option<f64>,
    pub time_limit_secs: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            lr_backbone: 1e-5,
            lr_transformer: 1e-4,
            batch_size: 16,
            steps: 1000,
            weight_decay: 1e-4,
            grad_clip: 0.1,
            seed: 0,
            beta: 1.0,
            eval_every: 0,
            eval_subset: 256,
            target_accuracy: None,
            time_limit_secs: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lr_backbone > 0.0 && self.lr_transformer > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.beta >= 0.0 && self.weight_decay >= 0.0 && self.grad_clip >= 0.0) {
            return Err(Error::Config("beta, weight decay and clip must be non-negative".into()));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr_backbone: self.lr_backbone,
            lr_transformer: self.lr_transformer,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
            ..AdamWConfig::default()
        }
    }

    /// Applies `key=value` overrides; model keys are forwarded to the model
    /// config and unknown keys are rejected.
    pub fn apply_kv(&mut self, map: &BTreeMap<String, String>) -> Result<()> {
        let mut model_keys = BTreeMap::new();
        for (k, v) in map {
            match k.as_str() {
                "lr_backbone" => self.lr_backbone = parse(k, v)?,
                "lr_transformer" => self.lr_transformer = parse(k, v)?,
                "batch_size" => self.batch_size = parse(k, v)?,
                "steps" => self.steps = parse(k, v)?,
                "weight_decay" => self.weight_decay = parse(k, v)?,
                "grad_clip" => self.grad_clip = parse(k, v)?,
                "seed" => self.seed = parse(k, v)?,
                "beta" => self.beta = parse(k, v)?,
                "eval_every" => self.eval_every = parse(k, v)?,
                "eval_subset" => self.eval_subset = parse(k, v)?,
                "target_accuracy" => self.target_accuracy = Some(parse(k, v)?),
                "time_limit_secs" => self.time_limit_secs = Some(parse(k, v)?),
                "n_queries" | "model_dim" | "num_heads" | "ffn_dim" | "encoder_layers" | "i2c_decoder_layers"
                | "c2w_decoder_layers" | "backbone" | "dropout" => {
                    model_keys.insert(k.clone(), v.clone());
                }
                _ => return Err(Error::Config(format!("unknown key {k:?}"))),
            }
        }
        self.model.apply_kv(&model_keys)
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_kv(&parse_kv(text)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
pub struct TrainSample<T> {
    pub image: Matrix<T>,
    pub labels: LabelSet,
    pub word: String,
}

/// Preprocessed training samples for one slot count.
#[derive(Clone, Debug)]
pub struct TrainSet<T> {
    pub samples: Vec<TrainSample<T>>,
    /// Samples whose word does not fit the slot count.
    pub skipped: usize,
}

impl<T: Scalar> TrainSet<T> {
    pub fn new(items: &[(GrayImage, String)], cfg: &ModelConfig) -> Result<Self> {
        let ps = cfg.position_set();
        let mut samples = Vec::with_capacity(items.len());
        let mut skipped = 0;
        for (img, word) in items {
            let labels = match derive_labels(word, &CharSet, &ps) {
                Ok(l) => l,
                Err(Error::WordTooLong { .. }) => {
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            if ctc_required_slots(&labels.target()) > ps.n() {
                skipped += 1;
                continue;
            }
            samples.push(TrainSample {
                image: image_tensor(img)?,
                word: labels.word.clone(),
                labels,
            });
        }
        if samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Self { samples, skipped })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

pub struct Trainer<T> {
    pub cfg: TrainConfig,
    pub model: I2c2w<T>,
    pub opt: AdamW<T>,
    rng: ChaCha8Rng,
    step: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = I2c2w::seeded(cfg.model.clone(), cfg.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Self::resume(cfg, Checkpoint::new(model, 0, rng))
    }

    /// Continues from a checkpoint (optimizer moments restart from zero).
    pub fn resume(cfg: TrainConfig, ckpt: Checkpoint<T>) -> Result<Self> {
        let opt = AdamW::new(cfg.optimizer(), param_group)?;
        Ok(Self {
            model: ckpt.model,
            opt,
            rng: ckpt.rng,
            step: ckpt.step,
            order: Vec::new(),
            cursor: 0,
            cfg,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint::new(self.model.clone(), self.step, self.rng.clone())
    }

    fn next_batch(&mut self, n: usize) -> Vec<usize> {
        if self.order.len() != n {
            self.order = (0..n).collect();
            self.cursor = n;
        }
        let want = self.cfg.batch_size.min(n);
        let mut batch = Vec::with_capacity(want);
        while batch.len() < want {
            if self.cursor == n {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }

    /// One optimizer update. A non-finite loss leaves parameters untouched.
    pub fn train_step(&mut self, data: &TrainSet<T>) -> Result<LossBreakdown<T>> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let batch = self.next_batch(data.len());
        let images: Vec<&Matrix<T>> = batch.iter().map(|&i| &data.samples[i].image).collect();
        let labels: Vec<&LabelSet> = batch.iter().map(|&i| &data.samples[i].labels).collect();
        self.model.zero_grad();
        let beta = T::of(self.cfg.beta);
        let loss = self
            .model
            .accumulate_batch(&images, &labels, beta, &mut Mode::Train(&mut self.rng));
        let diverged = |loss: f64| Error::DivergenceDetected {
            step: self.step as usize,
            loss,
        };
        let loss = match loss {
            Ok(l) if l.is_finite() => l,
            Ok(l) => {
                self.model.zero_grad();
                return Err(diverged(l.total.as_f64()));
            }
            Err(Error::NonFinite(_)) => {
                self.model.zero_grad();
                return Err(diverged(f64::NAN));
            }
            Err(e) => return Err(e),
        };
        if let Err(Error::NonFinite(_)) = self.opt.step(&mut self.model) {
            self.model.zero_grad();
            return Err(diverged(loss.total.as_f64()));
        }
        self.step += 1;
        Ok(loss)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub steps_run: usize,
    pub losses: Vec<LossBreakdown<f64>>,
    pub train_accuracy: Option<f64>,
    pub stopped_early: bool,
    pub skipped: usize,
    pub elapsed_secs: f64,
    pub checkpoint: Option<PathBuf>,
}

fn to_f64<T: Scalar>(l: &LossBreakdown<T>) -> LossBreakdown<f64> {
    LossBreakdown::new(l.det_char.as_f64(), l.det_pos.as_f64(), l.recog.as_f64())
}

fn metrics_line(step: u64, l: &LossBreakdown<f64>) -> String {
    format!("{step},{},{},{},{}\n", l.det_char, l.det_pos, l.recog, l.total)
}

/// Runs the configured number of steps (or until the early-stop target or
/// time limit). With `out_dir`, writes the metrics log and the checkpoint;
/// on divergence the last good checkpoint is written before returning the
/// error.
pub fn train_on<T: Scalar>(
    trainer: &mut Trainer<T>,
    data: &TrainSet<T>,
    out_dir: Option<&Path>,
    observer: &mut dyn FnMut(u64, &LossBreakdown<f64>),
) -> Result<TrainReport> {
    let start = Instant::now();
    let mut metrics = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(METRICS_FILE);
            let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            writeln!(f, "{METRICS_HEADER}").map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };
    let save = |trainer: &Trainer<T>| -> Result<Option<PathBuf>> {
        match out_dir {
            Some(dir) => {
                let p = dir.join(CHECKPOINT_FILE);
                save_checkpoint(&trainer.checkpoint(), &p)?;
                Ok(Some(p))
            }
            None => Ok(None),
        }
    };

    let cfg = trainer.cfg.clone();
    let mut report = TrainReport {
        steps_run: 0,
        losses: Vec::new(),
        train_accuracy: None,
        stopped_early: false,
        skipped: data.skipped,
        elapsed_secs: 0.0,
        checkpoint: None,
    };
    let subset = cfg.eval_subset.min(data.len()).max(1);
    while report.steps_run < cfg.steps {
        let loss = match trainer.train_step(data) {
            Ok(l) => to_f64(&l),
            Err(e @ Error::DivergenceDetected { .. }) => {
                save(trainer)?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        report.steps_run += 1;
        let step = trainer.step_count();
        if let Some((f, path)) = &mut metrics {
            f.write_all(metrics_line(step, &loss).as_bytes())
                .map_err(|e| Error::io(path.as_path(), e))?;
        }
        observer(step, &loss);
        report.losses.push(loss);

        if cfg.eval_every > 0 && report.steps_run % cfg.eval_every == 0 {
            let acc = training_accuracy(&trainer.model, &data.samples[..subset])?;
            report.train_accuracy = Some(acc);
            if cfg.target_accuracy.is_some_and(|t| acc >= t) {
                report.stopped_early = report.steps_run < cfg.steps;
                break;
            }
        }
        if cfg.time_limit_secs.is_some_and(|t| start.elapsed().as_secs_f64() >= t) {
            report.stopped_early = report.steps_run < cfg.steps;
            break;
        }
    }
    report.elapsed_secs = start.elapsed().as_secs_f64();
    report.checkpoint = save(trainer)?;
    Ok(report)
}

/// Loads the manifest, trains a single-precision model and writes
/// `metrics.csv` plus `model.ckpt` into `out_dir`.
pub fn train(cfg: &TrainConfig, manifest: &Manifest, out_dir: &Path) -> Result<TrainReport> {
    let items = manifest.load()?;
    let data = TrainSet::<f32>::new(&items, &cfg.model)?;
    let mut trainer = Trainer::new(cfg.clone())?;
    train_on(&mut trainer, &data, Some(out_dir), &mut |_, _| {})
}

fn training_accuracy<T: Scalar>(model: &I2c2w<T>, samples: &[TrainSample<T>]) -> Result<f64> {
    let mut hits = 0;
    for s in samples {
        if model.recognize(&s.image)?.word == s.word {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    /// Word from the word decoder.
    I2c2w,
    /// Word from ordering the detected candidates.
    I2cOnly,
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "i2c2w" => Ok(Self::I2c2w),
            "i2c_only" => Ok(Self::I2cOnly),
            _ => Err(Error::Config(format!("unknown eval mode {s:?}"))),
        }
    }
}

/// Fraction of exact matches after normalization.
pub fn word_accuracy(predictions: &[String], ground_truth: &[String]) -> Result<f64> {
    if ground_truth.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if predictions.len() != ground_truth.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} references",
            predictions.len(),
            ground_truth.len()
        )));
    }
    let hits = predictions
        .iter()
        .zip(ground_truth)
        .filter(|(p, g)| normalize_word(p) == normalize_word(g))
        .count();
    Ok(hits as f64 / ground_truth.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub i2c2w: f64,
    pub i2c_only: f64,
    pub count: usize,
    pub predictions: Vec<(String, String)>,
}

impl EvalReport {
    pub fn accuracy(&self, mode: EvalMode) -> f64 {
        match mode {
            EvalMode::I2c2w => self.i2c2w,
            EvalMode::I2cOnly => self.i2c_only,
        }
    }
}

/// Scores both decoding paths in one pass. Parameters are not modified.
pub fn evaluate<T: Scalar>(model: &I2c2w<T>, samples: &[(GrayImage, String)]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut full = Vec::with_capacity(samples.len());
    let mut det = Vec::with_capacity(samples.len());
    for (img, _) in samples {
        let r = model.recognize(&image_tensor(img)?)?;
        full.push(r.word);
        det.push(r.i2c_word);
    }
    let gt: Vec<String> = samples.iter().map(|s| s.1.clone()).collect();
    Ok(EvalReport {
        i2c2w: word_accuracy(&full, &gt)?,
        i2c_only: word_accuracy(&det, &gt)?,
        count: samples.len(),
        predictions: full.into_iter().zip(det).collect(),
    })
}

pub fn evaluate_checkpoint(ckpt: &Path, manifest: &Manifest, mode: EvalMode) -> Result<f64> {
    let model = load_checkpoint::<f32>(ckpt)?.model;
    let samples = manifest.load()?;
    Ok(evaluate(&model, &samples)?.accuracy(mode))
}

/// Parses a metrics log back into loss rows.
pub fn read_metrics(path: &Path) -> Result<Vec<(u64, LossBreakdown<f64>)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Config(format!("{}:{}: malformed metrics row", path.display(), i + 1));
        if f.len() != 5 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        out.push((
            f[0].parse().map_err(|_| bad())?,
            LossBreakdown::new(num(f[1])?, num(f[2])?, num(f[3])?),
        ));
    }
    Ok(out)
}

/// Human-readable summary of a run.
pub fn describe(report: &TrainReport) -> String {
    let mut s = String::new();
    let _ = write!(s, "steps={} elapsed={:.1}s", report.steps_run, report.elapsed_secs);
    if let Some(l) = report.losses.last() {
        let _ = write!(s, " loss={:.4}", l.total);
    }
    if let Some(a) = report.train_accuracy {
        let _ = write!(s, " train_acc={a:.3}");
    }
    if report.skipped > 0 {
        let _ = write!(s, " skipped={}", report.skipped);
    }
    s
}
