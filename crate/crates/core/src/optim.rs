//! Adaptive-moment optimizer with decoupled weight decay and two learning
//! rate groups, plus global gradient-norm clipping.

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Backbone,
    Transformer,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr_backbone: f64,
    pub lr_transformer: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global L2 norm limit; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr_backbone: 1e-5,
            lr_transformer: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            grad_clip: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
struct Slot<T> {
    name: String,
    group: ParamGroup,
    m: Vec<T>,
    v: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct AdamW<T> {
    cfg: AdamWConfig,
    classify: fn(&str) -> ParamGroup,
    slots: Vec<Slot<T>>,
    t: u64,
}

/// Norm before clipping and the factor applied.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub grad_norm: f64,
    pub clip_scale: f64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: AdamWConfig, classify: fn(&str) -> ParamGroup) -> Result<Self> {
        if !(cfg.lr_backbone > 0.0 && cfg.lr_transformer > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if cfg.weight_decay < 0.0 || cfg.grad_clip < 0.0 {
            return Err(Error::Config("weight decay and clip must be non-negative".into()));
        }
        Ok(Self {
            cfg,
            classify,
            slots: Vec::new(),
            t: 0,
        })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Backbone => self.cfg.lr_backbone,
            ParamGroup::Transformer => self.cfg.lr_transformer,
        }
    }

    /// Group assignment of every tracked parameter, in visit order.
    pub fn groups(&self) -> Vec<(String, ParamGroup, f64)> {
        self.slots
            .iter()
            .map(|s| (s.name.clone(), s.group, self.lr(s.group)))
            .collect()
    }

    /// Applies one update from the accumulated gradients. Gradients are left
    /// as they were (after clipping); callers zero them.
    pub fn step<M: Module<T>>(&mut self, model: &mut M) -> Result<StepStats> {
        let mut sq = 0.0f64;
        model.visit("", &mut |_, p| {
            sq += p.grad.as_slice().iter().map(|g| g.as_f64() * g.as_f64()).sum::<f64>();
        });
        let grad_norm = sq.sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
        let clip_scale = if self.cfg.grad_clip > 0.0 && grad_norm > self.cfg.grad_clip {
            self.cfg.grad_clip / grad_norm
        } else {
            1.0
        };

        if self.slots.is_empty() {
            let classify = self.classify;
            let slots = &mut self.slots;
            model.visit("", &mut |name, p| {
                slots.push(Slot {
                    name: name.to_string(),
                    group: classify(name),
                    m: vec![T::zero(); p.len()],
                    v: vec![T::zero(); p.len()],
                })
            });
        }

        self.t += 1;
        let c = self.cfg;
        let t = self.t as f64;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (ob1, ob2) = (T::one() - b1, T::one() - b2);
        let scale = T::of(clip_scale);
        let eps = T::of(c.eps);
        let mut idx = 0;
        let slots = &mut self.slots;
        let mut mismatch = false;
        model.visit_mut("", &mut |name, p| {
            let Some(slot) = slots.get_mut(idx) else {
                mismatch = true;
                return;
            };
            idx += 1;
            if slot.name != name || slot.m.len() != p.len() {
                mismatch = true;
                return;
            }
            let lr = match slot.group {
                ParamGroup::Backbone => c.lr_backbone,
                ParamGroup::Transformer => c.lr_transformer,
            };
            let step = T::of(lr / bc1);
            let inv_bc2 = T::of(1.0 / bc2);
            let decay = T::one() - T::of(lr * c.weight_decay);
            let grads = p.grad.as_mut_slice();
            grads.iter_mut().for_each(|g| *g *= scale);
            for (((w, &g), m), v) in p
                .value
                .as_mut_slice()
                .iter_mut()
                .zip(grads.iter())
                .zip(slot.m.iter_mut())
                .zip(slot.v.iter_mut())
            {
                *m = b1 * *m + ob1 * g;
                *v = b2 * *v + ob2 * g * g;
                *w = *w * decay - step * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        });
        if mismatch || idx != slots.len() {
            return Err(Error::Config("optimizer state does not match the model".into()));
        }
        Ok(StepStats { grad_norm, clip_scale })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Linear, Param};
    use crate::tensor::Matrix;

    struct Two {
        a: Param<f64>,
        b: Param<f64>,
    }

    impl Module<f64> for Two {
        fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<f64>)) {
            f(&format!("{prefix}backbone.a"), &self.a);
            f(&format!("{prefix}head.b"), &self.b);
        }
        fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<f64>)) {
            f(&format!("{prefix}backbone.a"), &mut self.a);
            f(&format!("{prefix}head.b"), &mut self.b);
        }
    }

    fn classify(n: &str) -> ParamGroup {
        if n.starts_with("backbone.") {
            ParamGroup::Backbone
        } else {
            ParamGroup::Transformer
        }
    }

    #[test]
    fn first_step_moves_by_lr_per_group() {
        let mut m = Two {
            a: Param::new(Matrix::filled(1, 2, 1.0)),
            b: Param::new(Matrix::filled(1, 2, 1.0)),
        };
        m.a.grad = Matrix::filled(1, 2, 0.5);
        m.b.grad = Matrix::filled(1, 2, -0.5);
        let cfg = AdamWConfig {
            lr_backbone: 0.01,
            lr_transformer: 0.1,
            weight_decay: 0.0,
            grad_clip: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg, classify).unwrap();
        opt.step(&mut m).unwrap();
        // bias-corrected first step is lr * sign(g)
        assert!((m.a.value[(0, 0)] - 0.99).abs() < 1e-6);
        assert!((m.b.value[(0, 0)] - 1.1).abs() < 1e-6);
        let groups = opt.groups();
        assert_eq!(groups[0].1, ParamGroup::Backbone);
        assert_eq!(groups[0].2, 0.01);
        assert_eq!(groups[1].2, 0.1);
    }

    #[test]
    fn clipping_and_decay() {
        let mut m = Two {
            a: Param::new(Matrix::filled(1, 1, 2.0)),
            b: Param::new(Matrix::filled(1, 1, 0.0)),
        };
        m.a.grad = Matrix::filled(1, 1, 3.0);
        m.b.grad = Matrix::filled(1, 1, 4.0);
        let cfg = AdamWConfig {
            lr_backbone: 0.1,
            lr_transformer: 0.1,
            weight_decay: 0.5,
            grad_clip: 1.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg, classify).unwrap();
        let s = opt.step(&mut m).unwrap();
        assert!((s.grad_norm - 5.0).abs() < 1e-12 && (s.clip_scale - 0.2).abs() < 1e-12);
        assert!((m.a.grad[(0, 0)] - 0.6).abs() < 1e-12);
        assert!((m.a.value[(0, 0)] - (2.0 * 0.95 - 0.1)).abs() < 1e-6);
        assert!(AdamW::<f64>::new(AdamWConfig { lr_backbone: 0.0, ..cfg }, classify).is_err());
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        use rand::SeedableRng;
        let mut lin = Linear::<f64>::xavier(3, 1, true, &mut rng);
        let x = Matrix::from_rows(&[vec![1.0, 0.0, 2.0], vec![0.5, -1.0, 0.0]]).unwrap();
        let y = [1.0, -2.0];
        let cfg = AdamWConfig {
            lr_transformer: 0.05,
            weight_decay: 0.0,
            grad_clip: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg, classify).unwrap();
        let loss = |l: &Linear<f64>| {
            let o = l.forward(&x);
            (0..2).map(|i| (o[(i, 0)] - y[i]).powi(2)).sum::<f64>()
        };
        let start = loss(&lin);
        for _ in 0..500 {
            lin.zero_grad();
            let o = lin.forward(&x);
            let d = Matrix::from_fn(2, 1, |i, _| 2.0 * (o[(i, 0)] - y[i]));
            lin.backward(&x, &d);
            opt.step(&mut lin).unwrap();
        }
        assert!(loss(&lin) < 1e-4 * start.max(1.0));
    }
}
