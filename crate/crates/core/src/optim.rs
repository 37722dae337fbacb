//! AdamW with decoupled weight decay and cosine annealing with warm restarts.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::model::Module;
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerSpec {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl OptimizerSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.eps > 0.0 && self.weight_decay >= 0.0) {
            bail!(InvalidArgument, "lr and eps must be positive and weight decay non-negative");
        }
        for b in [self.beta1, self.beta2] {
            if !(b > 0.0 && b < 1.0) {
                bail!(InvalidArgument, "betas must lie in (0, 1), got {b}");
            }
        }
        Ok(())
    }
}

/// Unit of the scheduler clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedStep {
    #[default]
    Batch,
    Epoch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleSpec {
    pub eta_min: f64,
    /// First cycle length in scheduler steps. `None` means one epoch.
    pub t_0: Option<u64>,
    pub t_mult: u64,
    pub step: SchedStep,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            eta_min: 0.0,
            t_0: None,
            t_mult: 2,
            step: SchedStep::Batch,
        }
    }
}

impl ScheduleSpec {
    /// Fixes the first cycle length given the number of batches per epoch.
    pub fn resolve(&self, opt: &OptimizerSpec, batches_per_epoch: u64) -> Result<Schedule> {
        let t_0 = match (self.t_0, self.step) {
            (Some(t), _) => t,
            (None, SchedStep::Batch) => batches_per_epoch,
            (None, SchedStep::Epoch) => 1,
        };
        if t_0 == 0 || self.t_mult == 0 {
            bail!(InvalidArgument, "T_0 and T_mult must be >= 1");
        }
        if !(self.eta_min >= 0.0 && self.eta_min <= opt.lr) {
            bail!(InvalidArgument, "eta_min {} must lie in [0, lr]", self.eta_min);
        }
        Ok(Schedule {
            lr: opt.lr,
            eta_min: self.eta_min,
            t_0,
            t_mult: self.t_mult,
            step: self.step,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub lr: f64,
    pub eta_min: f64,
    pub t_0: u64,
    pub t_mult: u64,
    pub step: SchedStep,
}

impl Schedule {
    /// Learning rate at scheduler step `k`.
    pub fn lr_at(&self, k: u64) -> f64 {
        let (t_cur, t_i) = self.cycle_position(k);
        let phase = core::f64::consts::PI * t_cur as f64 / t_i as f64;
        self.eta_min + 0.5 * (self.lr - self.eta_min) * (1.0 + libm::cos(phase))
    }

    /// `(steps into the current cycle, current cycle length)`.
    pub fn cycle_position(&self, k: u64) -> (u64, u64) {
        let mut t_i = self.t_0;
        let mut t_cur = k;
        if self.t_mult == 1 {
            return (t_cur % t_i, t_i);
        }
        while t_cur >= t_i {
            t_cur -= t_i;
            t_i = t_i.saturating_mul(self.t_mult);
        }
        (t_cur, t_i)
    }

    /// Scheduler clock for a global batch index.
    pub fn clock(&self, global_batch: u64, batches_per_epoch: u64) -> u64 {
        match self.step {
            SchedStep::Batch => global_batch,
            SchedStep::Epoch => global_batch / batches_per_epoch.max(1),
        }
    }
}

/// Learning rate at scheduler step `step`.
pub fn lr_at(step: u64, opt: &OptimizerSpec, sched: &ScheduleSpec, batches_per_epoch: u64) -> Result<f64> {
    Ok(sched.resolve(opt, batches_per_epoch)?.lr_at(step))
}

/// AdamW over the concatenated parameters of several modules. Moment buffers
/// follow the modules' fixed parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub spec: OptimizerSpec,
    pub steps: u64,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Real> AdamW<T> {
    pub fn new(spec: OptimizerSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec, steps: 0, m: Vec::new(), v: Vec::new() })
    }

    pub fn step(&mut self, modules: &mut [&mut dyn Module<T>], lr: f64) {
        let total: usize = modules.iter_mut().map(|m| {
            let mut n = 0;
            m.for_each_param(&mut |p, _| n += p.len());
            n
        }).sum();
        if self.m.len() != total {
            self.m = alloc::vec![T::zero(); total];
            self.v = alloc::vec![T::zero(); total];
        }
        self.steps += 1;
        let s = &self.spec;
        let t = self.steps as i32;
        let bc1 = 1.0 - libm::pow(s.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(s.beta2, t as f64);
        let decay = T::lit(1.0 - lr * s.weight_decay);
        let (b1, b2) = (T::lit(s.beta1), T::lit(s.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - s.beta1), T::lit(1.0 - s.beta2));
        let step_size = T::lit(lr / bc1);
        let inv_sqrt_bc2 = T::lit(1.0 / libm::sqrt(bc2));
        let eps = T::lit(s.eps);
        let mut offset = 0;
        let (m, v) = (&mut self.m, &mut self.v);
        for module in modules.iter_mut() {
            module.for_each_param(&mut |params, grads| {
                for (i, (p, &g)) in params.iter_mut().zip(grads.iter()).enumerate() {
                    let j = offset + i;
                    *p *= decay;
                    m[j] = b1 * m[j] + one_b1 * g;
                    v[j] = b2 * v[j] + one_b2 * g * g;
                    let denom = v[j].sqrt() * inv_sqrt_bc2 + eps;
                    *p -= step_size * m[j] / denom;
                }
                offset += params.len();
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LayerKind, StateKind};
    use alloc::vec;

    struct Quadratic {
        x: Vec<f64>,
        g: Vec<f64>,
    }

    impl Module<f64> for Quadratic {
        fn for_each_param(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
            f(&mut self.x, &mut self.g);
        }
        fn for_each_state(&self, _: &str, f: &mut dyn FnMut(&str, StateKind, &[f64])) {
            f("x", StateKind::Param, &self.x);
        }
        fn for_each_state_mut(&mut self, _: &str, f: &mut dyn FnMut(&str, StateKind, &mut [f64])) {
            f("x", StateKind::Param, &mut self.x);
        }
        fn layers(&self) -> Vec<LayerKind> {
            Vec::new()
        }
    }

    fn schedule(t_0: u64) -> Schedule {
        ScheduleSpec::default().resolve(&OptimizerSpec::default(), t_0).unwrap()
    }

    #[test]
    fn restarts_and_cycle_lengths() {
        let s = schedule(10);
        assert!((s.lr_at(0) - 1e-3).abs() < 1e-12);
        assert!((s.lr_at(10) - 1e-3).abs() < 1e-12);
        assert!((s.lr_at(30) - 1e-3).abs() < 1e-12);
        assert!((s.lr_at(70) - 1e-3).abs() < 1e-12);
        for k in 0..9 {
            assert!(s.lr_at(k + 1) < s.lr_at(k));
        }
        assert!(s.lr_at(9) > 0.0);
        assert_eq!(s.cycle_position(10), (0, 20));
        assert_eq!(s.cycle_position(29), (19, 20));
        // Midpoint of the second cycle.
        assert!((s.lr_at(20) - 5e-4).abs() < 1e-12);
    }

    #[test]
    fn epoch_clock_and_explicit_t0() {
        let spec = ScheduleSpec { step: SchedStep::Epoch, ..ScheduleSpec::default() };
        let s = spec.resolve(&OptimizerSpec::default(), 50).unwrap();
        assert_eq!(s.t_0, 1);
        assert_eq!(s.clock(149, 50), 2);
        let spec = ScheduleSpec { t_0: Some(4), t_mult: 1, ..ScheduleSpec::default() };
        let s = spec.resolve(&OptimizerSpec::default(), 50).unwrap();
        assert_eq!(s.lr_at(8), s.lr_at(0));
        assert!(ScheduleSpec { t_0: Some(0), ..ScheduleSpec::default() }
            .resolve(&OptimizerSpec::default(), 1)
            .is_err());
        assert!(ScheduleSpec { eta_min: 1.0, ..ScheduleSpec::default() }
            .resolve(&OptimizerSpec::default(), 1)
            .is_err());
    }

    #[test]
    fn adamw_first_step_matches_hand_computation() {
        let spec = OptimizerSpec::default();
        let mut opt = AdamW::<f64>::new(spec).unwrap();
        let mut q = Quadratic { x: vec![1.0, -2.0], g: vec![0.5, -4.0] };
        opt.step(&mut [&mut q], 1e-3);
        // After one step m_hat = g and v_hat = g^2, so the update is lr * sign(g)
        // up to eps, applied after the decay.
        for (x0, g, x1) in [(1.0f64, 0.5f64, q.x[0]), (-2.0, -4.0, q.x[1])] {
            let decayed = x0 * (1.0 - 1e-3 * 0.01);
            let expected = decayed - 1e-3 * g / (g.abs() + 1e-8);
            assert!((x1 - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn adamw_minimizes_a_quadratic() {
        let mut opt = AdamW::<f64>::new(OptimizerSpec { weight_decay: 0.0, ..OptimizerSpec::default() }).unwrap();
        let mut q = Quadratic { x: vec![3.0, -1.0, 0.5], g: vec![0.0; 3] };
        for _ in 0..5000 {
            for i in 0..3 {
                q.g[i] = 2.0 * (q.x[i] - i as f64);
            }
            opt.step(&mut [&mut q], 1e-2);
        }
        for i in 0..3 {
            assert!((q.x[i] - i as f64).abs() < 1e-2);
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(AdamW::<f32>::new(OptimizerSpec { beta1: 1.0, ..OptimizerSpec::default() }).is_err());
        assert!(AdamW::<f32>::new(OptimizerSpec { lr: 0.0, ..OptimizerSpec::default() }).is_err());
    }
}
