//! Independent reference implementations shared by the integration and
//! acceptance tests.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use i2c2w::charset::{derive_labels, CharSet, PositionSet};
use i2c2w::config::{BackboneConfig, ModelConfig};
use i2c2w::losses::{ctc_loss, detection_loss, hungarian_assign};
use i2c2w::nn::gradcheck::{grad_check, grad_check_params, GradCheckReport, FD_STEP};
use i2c2w::nn::{
    attention, attention_backward, Conv2d, DecoderLayer, EncoderLayer, FeedForward, LayerNorm, Linear, MhaConfig,
    Mode, Module, MultiHeadAttention,
};
use i2c2w::{Matrix, Result};

pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Minimum over all permutations, by recursive enumeration.
pub fn brute_force_assignment(cost: &[Vec<f64>]) -> f64 {
    fn go(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == cost.len() {
            *best = best.min(acc);
            return;
        }
        for c in 0..cost.len() {
            if !used[c] {
                used[c] = true;
                go(cost, row + 1, used, acc + cost[row][c], best);
                used[c] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(cost, 0, &mut vec![false; cost.len()], 0.0, &mut best);
    best
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `-log` of the summed probability of every slot path that collapses to
/// `target`. Paths are enumerated symbol by symbol; a prefix is abandoned as
/// soon as its collapse stops being a prefix of the target.
pub fn brute_force_ctc(logits: &[Vec<f64>], target: &[usize], blank: usize) -> f64 {
    let probs: Vec<Vec<f64>> = logits.iter().map(|r| softmax(r)).collect();
    fn go(
        probs: &[Vec<f64>],
        target: &[usize],
        blank: usize,
        t: usize,
        prev: Option<usize>,
        emitted: usize,
        p: f64,
    ) -> f64 {
        if t == probs.len() {
            return if emitted == target.len() { p } else { 0.0 };
        }
        let mut total = 0.0;
        for (k, &pk) in probs[t].iter().enumerate() {
            let mut e = emitted;
            if k != blank && Some(k) != prev {
                if e >= target.len() || target[e] != k {
                    continue;
                }
                e += 1;
            }
            total += go(probs, target, blank, t + 1, Some(k), e, p * pk);
        }
        total
    }
    -go(&probs, target, blank, 0, None, 0, 1.0).ln()
}

/// Uniform random matrix as nested rows.
pub fn random_rows(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-scale..scale)).collect())
        .collect()
}

pub fn matrix(rows: &[Vec<f64>]) -> Matrix<f64> {
    Matrix::from_rows(rows).unwrap()
}

/// Case counts and worst error of the CTC oracle comparison.
pub fn ctc_oracle_sweep(cases: usize, seed: u64) -> (usize, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < cases {
        let alphabet = rng.random_range(1..=4usize);
        let blank = alphabet;
        let slots = rng.random_range(1..=8usize);
        let len = rng.random_range(0..=6usize.min(slots));
        let target: Vec<usize> = (0..len).map(|_| rng.random_range(0..alphabet)).collect();
        let logits = random_rows(&mut rng, slots, alphabet + 1, 3.0);
        let ours = match ctc_loss(&matrix(&logits), &target, blank) {
            Ok(l) => l.loss,
            Err(_) => {
                // infeasible targets have zero path mass in the oracle too
                assert_eq!(brute_force_ctc(&logits, &target, blank), f64::INFINITY);
                continue;
            }
        };
        let oracle = brute_force_ctc(&logits, &target, blank);
        worst = worst.max((ours - oracle).abs());
        done += 1;
    }
    (done, worst)
}

/// Number of mismatching matrices out of `cases`.
pub fn matching_oracle_sweep(cases: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    for case in 0..cases {
        let n = rng.random_range(1..=7usize);
        // small integer costs make ties frequent and exact comparison fair
        let cost: Vec<Vec<f64>> = if case % 2 == 0 {
            (0..n).map(|_| (0..n).map(|_| rng.random_range(0..10) as f64).collect()).collect()
        } else {
            random_rows(&mut rng, n, n, 1.0)
        };
        let a = hungarian_assign(&matrix(&cost)).unwrap();
        let by_perm: f64 = a.perm.iter().enumerate().map(|(r, &c)| cost[r][c]).sum();
        if by_perm != brute_force_assignment(&cost) {
            mismatches += 1;
        }
    }
    mismatches
}

fn flat(m: &Matrix<f64>) -> Vec<f64> {
    m.as_slice().to_vec()
}

fn all(n: usize) -> Vec<usize> {
    (0..n).collect()
}

fn weighted_sum(y: &Matrix<f64>, r: &Matrix<f64>) -> f64 {
    y.as_slice().iter().zip(r.as_slice()).map(|(a, b)| a * b).sum()
}

/// Checks the gradient of the input of `forward` for the loss `sum(y * r)`.
fn input_check(
    x: &Matrix<f64>,
    analytic: &Matrix<f64>,
    r: &Matrix<f64>,
    forward: impl Fn(&Matrix<f64>) -> Matrix<f64>,
) -> Result<GradCheckReport> {
    let (rows, cols) = x.shape();
    grad_check(&flat(x), &flat(analytic), &all(rows * cols), FD_STEP, |p| {
        let m = Matrix::from_vec(rows, cols, p.to_vec()).unwrap();
        weighted_sum(&forward(&m), r)
    })
}

pub fn check_attention(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let q = Matrix::<f64>::uniform(4, 6, 1.0, rng);
    let k = Matrix::<f64>::uniform(5, 6, 1.0, rng);
    let v = Matrix::<f64>::uniform(5, 3, 1.0, rng);
    let r = Matrix::<f64>::uniform(4, 3, 1.0, rng);
    let a = attention(&q, &k, &v)?;
    let (dq, dk, dv) = attention_backward(&q, &k, &v, &a.weights, &r);
    let rq = input_check(&q, &dq, &r, |m| attention(m, &k, &v).unwrap().output)?;
    let rk = input_check(&k, &dk, &r, |m| attention(&q, m, &v).unwrap().output)?;
    let rv = input_check(&v, &dv, &r, |m| attention(&q, &k, m).unwrap().output)?;
    Ok(rq.merge(rk).merge(rv))
}

pub fn check_multi_head(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let cfg = MhaConfig::new(8, 2)?;
    let mut mha = MultiHeadAttention::<f64>::xavier(cfg, rng);
    let q = Matrix::<f64>::uniform(3, 8, 1.0, rng);
    let kv = Matrix::<f64>::uniform(5, 8, 1.0, rng);
    let r = Matrix::<f64>::uniform(3, 8, 1.0, rng);
    let params = grad_check_params(&mut mha, 20, rng, |m, back| {
        let (y, c) = m.forward(&q, &kv, &kv)?;
        if back {
            m.backward(&c, &r);
        }
        Ok(weighted_sum(&y, &r))
    })?;
    let (_, c) = mha.forward(&q, &kv, &kv)?;
    let (dq, dk, dv) = mha.backward(&c, &r);
    let mut dkv = dk;
    dkv.add_assign(&dv);
    let iq = input_check(&q, &dq, &r, |m| mha.forward(m, &kv, &kv).unwrap().0)?;
    let ikv = input_check(&kv, &dkv, &r, |m| mha.forward(&q, m, m).unwrap().0)?;
    Ok(params.merge(iq).merge(ikv))
}

pub fn check_ffn(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let mut ffn = FeedForward::<f64>::xavier(6, 12, rng);
    let x = Matrix::<f64>::uniform(4, 6, 1.0, rng);
    let r = Matrix::<f64>::uniform(4, 6, 1.0, rng);
    let params = grad_check_params(&mut ffn, 24, rng, |m, back| {
        let (y, c) = m.forward(&x);
        if back {
            m.backward(&c, &r);
        }
        Ok(weighted_sum(&y, &r))
    })?;
    let (_, c) = ffn.forward(&x);
    let dx = ffn.backward(&c, &r);
    Ok(params.merge(input_check(&x, &dx, &r, |m| ffn.forward(m).0)?))
}

pub fn check_layer_norm(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let gain: Vec<f64> = (0..6).map(|_| rng.random_range(0.5..1.5)).collect();
    let bias: Vec<f64> = (0..6).map(|_| rng.random_range(-0.5..0.5)).collect();
    let mut ln = LayerNorm::with_affine(gain, bias);
    let x = Matrix::<f64>::uniform(4, 6, 2.0, rng);
    let r = Matrix::<f64>::uniform(4, 6, 1.0, rng);
    let params = grad_check_params(&mut ln, 6, rng, |m, back| {
        let (y, c) = m.forward(&x);
        if back {
            m.backward(&c, &r);
        }
        Ok(weighted_sum(&y, &r))
    })?;
    let (_, c) = ln.forward(&x);
    let dx = ln.backward(&c, &r);
    Ok(params.merge(input_check(&x, &dx, &r, |m| ln.forward(m).0)?))
}

/// Character and position heads driven through the detection loss.
pub fn check_heads(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let n = 6;
    let ps = PositionSet::new(n);
    let labels = derive_labels("ab1", &CharSet, &ps)?;
    let e_pc = Matrix::<f64>::uniform(n, 8, 1.0, rng);
    let perm: Vec<usize> = vec![3, 0, 5, 1, 4, 2];
    struct Heads {
        char_head: Linear<f64>,
        pos_head: Linear<f64>,
    }
    impl Module<f64> for Heads {
        fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &i2c2w::nn::Param<f64>)) {
            self.char_head.visit(&format!("{prefix}char"), f);
            self.pos_head.visit(&format!("{prefix}pos"), f);
        }
        fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut i2c2w::nn::Param<f64>)) {
            self.char_head.visit_mut(&format!("{prefix}char"), f);
            self.pos_head.visit_mut(&format!("{prefix}pos"), f);
        }
    }
    let mut heads = Heads {
        char_head: Linear::xavier(8, CharSet::SIZE, true, rng),
        pos_head: Linear::xavier(8, n + 1, true, rng),
    };
    grad_check_params(&mut heads, 30, rng, |h, back| {
        let cl = h.char_head.forward(&e_pc);
        let pl = h.pos_head.forward(&e_pc);
        let d = detection_loss(&cl, &pl, &labels, &perm)?;
        if back {
            h.char_head.backward(&e_pc, &d.d_char_logits);
            h.pos_head.backward(&e_pc, &d.d_pos_logits);
        }
        Ok(d.det_char + d.det_pos)
    })
}

pub fn check_detection_loss(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let n = 7;
    let ps = PositionSet::new(n);
    let labels = derive_labels("xyz", &CharSet, &ps)?;
    let cl = Matrix::<f64>::uniform(n, CharSet::SIZE, 2.0, rng);
    let pl = Matrix::<f64>::uniform(n, n + 1, 2.0, rng);
    let perm = vec![6, 2, 0, 1, 3, 5, 4];
    let d = detection_loss(&cl, &pl, &labels, &perm)?;
    let rc = grad_check(&flat(&cl), &flat(&d.d_char_logits), &all(n * CharSet::SIZE), FD_STEP, |p| {
        let m = Matrix::from_vec(n, CharSet::SIZE, p.to_vec()).unwrap();
        let l = detection_loss(&m, &pl, &labels, &perm).unwrap();
        l.det_char + l.det_pos
    })?;
    let rp = grad_check(&flat(&pl), &flat(&d.d_pos_logits), &all(n * (n + 1)), FD_STEP, |p| {
        let m = Matrix::from_vec(n, n + 1, p.to_vec()).unwrap();
        let l = detection_loss(&cl, &m, &labels, &perm).unwrap();
        l.det_char + l.det_pos
    })?;
    Ok(rc.merge(rp))
}

pub fn check_ctc_loss(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let mut report = GradCheckReport::default();
    for target in [vec![0usize, 1, 1, 2], vec![3], vec![]] {
        let logits = Matrix::<f64>::uniform(8, 5, 2.0, rng);
        let c = ctc_loss(&logits, &target, 4)?;
        let r = grad_check(&flat(&logits), &flat(&c.d_logits), &all(40), FD_STEP, |p| {
            ctc_loss(&Matrix::from_vec(8, 5, p.to_vec()).unwrap(), &target, 4).unwrap().loss
        })?;
        report = report.merge(r);
    }
    Ok(report)
}

pub fn check_first_conv(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let mut conv = Conv2d::<f64>::he(3, 4, 2, rng);
    let (h, w) = (6, 8);
    let x = Matrix::<f64>::uniform(3, h * w, 1.0, rng);
    let (oh, ow) = conv.output_size(h, w);
    let r = Matrix::<f64>::uniform(4, oh * ow, 1.0, rng);
    grad_check_params(&mut conv, 40, rng, |m, back| {
        let (y, c) = m.forward(&x, h, w);
        if back {
            m.backward(&c, &r, false);
        }
        Ok(weighted_sum(&y, &r))
    })
}

pub fn check_encoder_decoder(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let cfg = MhaConfig::new(8, 2)?;
    let pos = Matrix::<f64>::uniform(5, 8, 0.5, rng);
    let x = Matrix::<f64>::uniform(5, 8, 1.0, rng);
    let tgt = Matrix::<f64>::uniform(3, 8, 1.0, rng);
    let r_enc = Matrix::<f64>::uniform(5, 8, 1.0, rng);
    let r_dec = Matrix::<f64>::uniform(3, 8, 1.0, rng);
    let mut enc = EncoderLayer::<f64>::xavier(cfg, 16, 0.0, rng);
    let e = grad_check_params(&mut enc, 10, rng, |m, back| {
        let (y, c) = m.forward(&x, Some(&pos), &mut Mode::Eval)?;
        if back {
            m.backward(&c, &r_enc);
        }
        Ok(weighted_sum(&y, &r_enc))
    })?;
    let mut dec = DecoderLayer::<f64>::xavier(cfg, 16, 0.0, rng);
    let d = grad_check_params(&mut dec, 10, rng, |m, back| {
        let (y, c) = m.forward(&tgt, &x, Some(&pos), &mut Mode::Eval)?;
        if back {
            m.backward(&c, &r_dec);
        }
        Ok(weighted_sum(&y, &r_dec))
    })?;
    Ok(e.merge(d))
}

/// Named gradient checks; every one must pass at [`GRAD_TOLERANCE`].
pub fn gradient_suite(seed: u64) -> Vec<(&'static str, Result<GradCheckReport>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![
        ("attention", check_attention(&mut rng)),
        ("multi-head attention", check_multi_head(&mut rng)),
        ("feed-forward", check_ffn(&mut rng)),
        ("layer norm", check_layer_norm(&mut rng)),
        ("heads", check_heads(&mut rng)),
        ("detection loss", check_detection_loss(&mut rng)),
        ("ctc loss", check_ctc_loss(&mut rng)),
        ("first conv", check_first_conv(&mut rng)),
        ("encoder and decoder layers", check_encoder_decoder(&mut rng)),
    ]
}

/// Small model for fast structural tests.
pub fn tiny_model_config(n: usize) -> ModelConfig {
    ModelConfig {
        n_queries: n,
        model_dim: 16,
        num_heads: 2,
        ffn_dim: 32,
        encoder_layers: 1,
        backbone: BackboneConfig {
            stages: vec![(4, 2), (8, 2), (8, 2)],
        },
        dropout: 0.0,
        ..ModelConfig::default()
    }
}
