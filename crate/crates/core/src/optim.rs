//! AdamW with a warmup + cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::model::{Grads, ParamId, ParamSet};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adamw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Fraction of all steps spent in linear warmup.
    pub warmup_fraction: f64,
    /// Learning rate reached at the final step.
    pub min_lr: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adamw,
            lr: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_fraction: 0.1,
            min_lr: 1e-5,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), String> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && (0.0..=1.0).contains(&self.warmup_fraction)
            && (0.0..=self.lr).contains(&self.min_lr);
        if ok {
            Ok(())
        } else {
            Err(format!("invalid optimizer settings: {self:?}"))
        }
    }
}

/// Linear warmup to `lr`, then cosine decay reaching `min_lr` at the last step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(cfg: &OptimizerConfig, total_steps: usize) -> Self {
        let total_steps = total_steps.max(1);
        let warmup_steps = ((cfg.warmup_fraction * total_steps as f64).round() as usize).clamp(1, total_steps);
        Self { lr: cfg.lr, min_lr: cfg.min_lr, warmup_steps, total_steps }
    }

    /// Learning rate used for the update at 0-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let ws = self.warmup_steps;
        if step < ws {
            return self.lr * (step + 1) as f64 / ws as f64;
        }
        let decay = self.total_steps - ws;
        if decay == 0 {
            return self.lr;
        }
        let p = ((step - ws + 1) as f64 / decay as f64).min(1.0);
        self.min_lr + (self.lr - self.min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

/// Decoupled-weight-decay Adam. Parameters whose gradient buffer was never
/// touched in a step receive no update at all (including no decay).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub cfg: OptimizerConfig,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    /// Updates applied so far, per parameter (for bias correction).
    pub steps: Vec<u64>,
    /// Per-parameter learning-rate multiplier.
    pub lr_scale: Vec<f64>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: OptimizerConfig, params: &ParamSet<T>) -> Self {
        let zeros: Vec<Vec<T>> = params.iter().map(|(_, p)| vec![T::zero(); p.value.len()]).collect();
        Self { cfg, m: zeros.clone(), v: zeros, steps: vec![0; params.len()], lr_scale: vec![1.0; params.len()] }
    }

    pub fn set_lr_scale(&mut self, id: ParamId, scale: f64) {
        self.lr_scale[id.0] = scale;
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &Grads<T>, lr: f64) {
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let (tb1, tb2, teps) = (T::lit(b1), T::lit(b2), T::lit(self.cfg.eps));
        let (one_b1, one_b2) = (T::lit(1.0 - b1), T::lit(1.0 - b2));
        for i in 0..params.len() {
            let id = ParamId(i);
            if !grads.is_touched(id) {
                continue;
            }
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let lr_i = lr * self.lr_scale[i];
            let bc1 = T::lit(1.0 - b1.powi(t));
            let bc2 = T::lit(1.0 - b2.powi(t));
            let decays = params.param(id).shape.len() >= 2;
            let decay = T::lit(if decays { 1.0 - lr_i * self.cfg.weight_decay } else { 1.0 });
            let step = T::lit(lr_i);
            let g = grads.get(id);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, p) in params.get_mut(id).iter_mut().enumerate() {
                m[k] = tb1 * m[k] + one_b1 * g[k];
                v[k] = tb2 * v[k] + one_b2 * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                *p = *p * decay - step * mhat / (vhat.sqrt() + teps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Init;

    #[test]
    fn schedule_endpoints() {
        let cfg = OptimizerConfig::default();
        let s = LrSchedule::new(&cfg, 200);
        assert_eq!(s.warmup_steps, 20);
        assert!((s.lr_at(0) - cfg.lr / 20.0).abs() < 1e-9);
        assert!((s.lr_at(19) - cfg.lr).abs() < 1e-9);
        assert!((s.lr_at(199) - cfg.min_lr).abs() < 1e-9);
        for k in 20..199 {
            assert!(s.lr_at(k + 1) <= s.lr_at(k));
        }
        let one = LrSchedule::new(&cfg, 1);
        assert_eq!(one.lr_at(0), cfg.lr);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut ps = ParamSet::<f64>::new();
        let id = ps.register("x", &[3], Init::Ones, 0);
        let cfg = OptimizerConfig { lr: 0.05, weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(cfg, &ps);
        for _ in 0..2000 {
            let mut g = ps.zero_grads();
            let x = ps.get(id).to_vec();
            for (gi, xi) in g.slot(id).iter_mut().zip(&x) {
                *gi = 2.0 * (xi - 3.0);
            }
            opt.step(&mut ps, &g, 0.05);
        }
        assert!(ps.get(id).iter().all(|&x| (x - 3.0).abs() < 1e-3));
    }

    #[test]
    fn untouched_parameters_stay_bit_exact() {
        let mut ps = ParamSet::<f32>::new();
        let a = ps.register("a", &[2, 2], Init::FanIn { fan_in: 2, gain: 1.0 }, 1);
        let b = ps.register("b", &[2, 2], Init::FanIn { fan_in: 2, gain: 1.0 }, 1);
        let before = ps.get(b).to_vec();
        let mut opt = AdamW::new(OptimizerConfig::default(), &ps);
        let mut g = ps.zero_grads();
        g.slot(a).iter_mut().for_each(|v| *v = 1.0);
        opt.step(&mut ps, &g, 1e-3);
        assert_eq!(ps.get(b), &before[..]);
        assert_eq!(opt.steps, vec![1, 0]);
    }
}
