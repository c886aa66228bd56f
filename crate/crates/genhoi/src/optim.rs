//! AdamW with per-group learning rates, a step schedule and global
//! gradient-norm clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    /// Rate for trainable text-initialized classifier rows.
    pub classifier_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm limit; `0` disables clipping.
    pub clip_norm: f64,
    /// Multiplier applied at the decay epoch.
    pub lr_drop: f64,
    /// Fraction of training after which the rate drops.
    pub drop_fraction: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 1e-4,
            classifier_lr: 1e-5,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 0.1,
            lr_drop: 0.1,
            drop_fraction: 2.0 / 3.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.classifier_lr >= 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.clip_norm >= 0.0
            && self.lr_drop > 0.0
            && (0.0..=1.0).contains(&self.drop_fraction);
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }

    /// Learning-rate multiplier for a 0-based epoch out of `epochs`.
    pub fn schedule(&self, epoch: usize, epochs: usize) -> f64 {
        let drop_at = (epochs as f64 * self.drop_fraction).round() as usize;
        if epochs > 0 && epoch >= drop_at {
            self.lr_drop
        } else {
            1.0
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    config: OptimizerConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamW {
    pub fn new(config: OptimizerConfig, store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.rows(), p.value.cols())).collect();
        AdamW { config, m: zeros(), v: zeros(), step: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads[i]` belongs to the i-th parameter; `None`
    /// means no gradient. Frozen parameters are never touched. Returns the
    /// global gradient norm before clipping.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr_scale: f64) -> f64 {
        assert_eq!(grads.len(), store.len());
        let frozen: Vec<bool> = store.iter().map(|(_, p)| p.group == ParamGroup::Frozen).collect();
        let norm = grads
            .iter()
            .enumerate()
            .filter(|(i, _)| !frozen[*i])
            .filter_map(|(_, g)| g.as_ref())
            .map(Tensor::sq_norm)
            .sum::<f64>()
            .sqrt();
        let clip = if self.config.clip_norm > 0.0 && norm > self.config.clip_norm {
            self.config.clip_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for (i, id) in ids.into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let p = store.param_mut(id);
            let lr = match p.group {
                ParamGroup::Frozen => continue,
                ParamGroup::Main => c.lr,
                ParamGroup::Classifier => c.classifier_lr,
            } * lr_scale;
            let decay = if p.no_decay { 0.0 } else { c.weight_decay };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (k, w) in p.value.data_mut().iter_mut().enumerate() {
                let gk = g.data()[k] * clip;
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                *w -= lr * (mh / (vh.sqrt() + c.eps) + decay * *w);
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::row_vector(vec![1.0, -2.0]), ParamGroup::Main, false);
        s.add("cls", Tensor::row_vector(vec![0.3, 0.4]), ParamGroup::Frozen, true);
        s.add("txt", Tensor::row_vector(vec![0.6, 0.8]), ParamGroup::Classifier, true);
        s
    }

    #[test]
    fn frozen_rows_are_bitwise_unchanged() {
        let mut s = store();
        let before = s.value(s.id("cls").unwrap()).clone();
        let mut opt = AdamW::new(OptimizerConfig::default(), &s);
        let grads = vec![Some(Tensor::row_vector(vec![1.0, 1.0])); 3];
        for _ in 0..5 {
            opt.step(&mut s, &grads, 1.0);
        }
        let after = s.value(s.id("cls").unwrap());
        assert!(before.data().iter().zip(after.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_ne!(s.value(s.id("w").unwrap()).data()[0], 1.0);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // Adam's first step is lr * sign(g) regardless of clipping
        let mut s = store();
        let cfg = OptimizerConfig { weight_decay: 0.0, ..OptimizerConfig::default() };
        let mut opt = AdamW::new(cfg, &s);
        let grads = vec![Some(Tensor::row_vector(vec![3.0, -0.5])), None, Some(Tensor::row_vector(vec![1.0, 1.0]))];
        let norm = opt.step(&mut s, &grads, 1.0);
        assert!((norm - (9.0f64 + 0.25 + 2.0).sqrt()).abs() < 1e-12);
        let w = s.value(s.id("w").unwrap());
        assert!((w.data()[0] - (1.0 - 1e-4)).abs() < 1e-9);
        assert!((w.data()[1] - (-2.0 + 1e-4)).abs() < 1e-9);
        let t = s.value(s.id("txt").unwrap());
        assert!((t.data()[0] - (0.6 - 1e-5)).abs() < 1e-9);
    }

    #[test]
    fn decoupled_decay_shrinks_weights() {
        let mut s = store();
        let cfg = OptimizerConfig { weight_decay: 0.5, lr: 0.1, ..OptimizerConfig::default() };
        let mut opt = AdamW::new(cfg, &s);
        let grads = vec![Some(Tensor::row_vector(vec![0.0, 0.0])), None, None];
        opt.step(&mut s, &grads, 1.0);
        let w = s.value(s.id("w").unwrap());
        assert!((w.data()[0] - (1.0 - 0.1 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn schedule_drops_at_two_thirds() {
        let c = OptimizerConfig::default();
        assert_eq!(c.schedule(59, 90), 1.0);
        assert_eq!(c.schedule(60, 90), 0.1);
    }
}
