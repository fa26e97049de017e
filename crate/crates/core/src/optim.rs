//! AdamW with global-norm clipping, the EMA teacher update and the learning
//! rate / momentum schedules.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{is_decay_exempt, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Warmup length as a fraction of the total steps.
    pub warmup_frac: f64,
    pub ema_start: f64,
    pub ema_end: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-4,
            clip: 3.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_frac: 0.05,
            ema_start: 0.996,
            ema_end: 1.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.weight_decay >= 0.0
            && self.clip > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && (0.0..=1.0).contains(&self.warmup_frac)
            && (0.0..=1.0).contains(&self.ema_start)
            && (0.0..=1.0).contains(&self.ema_end);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimiser settings {self:?}")))
        }
    }

    pub fn warmup_steps(&self, total: u64) -> u64 {
        (self.warmup_frac * total as f64).round() as u64
    }

    /// Linear warmup from 0 to `lr`, then cosine decay to 0 at `total`.
    pub fn lr_at(&self, step: u64, total: u64) -> f64 {
        let warm = self.warmup_steps(total);
        if step < warm {
            return self.lr * step as f64 / warm as f64;
        }
        let span = total.saturating_sub(warm);
        if span == 0 {
            return self.lr;
        }
        let t = (step.min(total) - warm) as f64 / span as f64;
        0.5 * self.lr * (1.0 + (PI * t).cos())
    }

    /// Teacher momentum rising from `ema_start` to `ema_end` on a cosine.
    pub fn ema_at(&self, step: u64, total: u64) -> f64 {
        if total == 0 {
            return self.ema_end;
        }
        let t = step.min(total) as f64 / total as f64;
        self.ema_end - (self.ema_end - self.ema_start) * 0.5 * (1.0 + (PI * t).cos())
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt()
}

/// Scales `grads` in place to norm `max` when their global norm exceeds it;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max {
        let s = max / norm;
        for g in grads {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// First and second moments, one pair per student parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Updates applied so far.
    pub t: u64,
}

impl AdamW {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { m: zeros(), v: zeros(), t: 0 }
    }

    /// One AdamW update with decoupled weight decay (skipped for exempt
    /// parameters). `grads` must be aligned with `params` and already
    /// clipped.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64, cfg: &OptimConfig) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} gradients and {} moment pairs for {} parameters",
                grads.len(),
                self.m.len(),
                params.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let names: Vec<String> = params.names().to_vec();
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let decay = if is_decay_exempt(&names[i]) { 0.0 } else { cfg.weight_decay };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (w, &g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
                *w -= lr * decay * *w;
                *w -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

/// `t ← λ·t + (1 − λ)·s` for every parameter.
pub fn ema_update(teacher: &mut ParamStore, student: &ParamStore, momentum: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::Parameter(format!("EMA momentum {momentum} outside [0, 1]")));
    }
    if !teacher.same_layout(student) {
        return Err(Error::Contract("teacher and student parameter layouts differ".into()));
    }
    for (t, s) in teacher.tensors_mut().iter_mut().zip(student.tensors()) {
        for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = momentum * *a + (1.0 - momentum) * b;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_vec(vec![v])).unwrap();
        s
    }

    #[test]
    fn clipping_to_three() {
        // norm sqrt(4·9) = 6
        let mut g = vec![Tensor::full(&[2], 3.0), Tensor::full(&[2], -3.0)];
        let before = clip_global_norm(&mut g, 3.0);
        assert!((before - 6.0).abs() < 1e-12);
        assert!((global_norm(&g) - 3.0).abs() <= 1e-9);
        let mut small = vec![Tensor::full(&[1], 0.5)];
        clip_global_norm(&mut small, 3.0);
        assert_eq!(small[0].data(), &[0.5]);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let cfg = OptimConfig { weight_decay: 0.0, ..OptimConfig::default() };
        let mut p = store(0.7);
        let mut opt = AdamW::new(&p);
        opt.step(&mut p, &[Tensor::zeros(&[1])], 1e-3, &cfg).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[0.7]);
    }

    #[test]
    fn one_step_matches_hand_formula() {
        let cfg = OptimConfig::default();
        let (w0, g, lr) = (0.5f64, 0.2f64, 1e-3);
        let mut p = store(w0);
        let mut opt = AdamW::new(&p);
        opt.step(&mut p, &[Tensor::from_vec(vec![g])], lr, &cfg).unwrap();
        let m = 0.1 * g;
        let v = 0.001 * g * g;
        let mhat = m / (1.0 - 0.9);
        let vhat = v / (1.0 - 0.999);
        let want = w0 * (1.0 - lr * 1e-4) - lr * mhat / (vhat.sqrt() + 1e-8);
        assert!((p.get("w").unwrap().data()[0] - want).abs() <= 1e-12);
    }

    #[test]
    fn decay_skips_exempt_parameters() {
        let cfg = OptimConfig { weight_decay: 0.5, ..OptimConfig::default() };
        let mut p = ParamStore::new();
        p.insert("fc.weight", Tensor::from_vec(vec![1.0])).unwrap();
        p.insert("fc.bias", Tensor::from_vec(vec![1.0])).unwrap();
        let mut opt = AdamW::new(&p);
        opt.step(&mut p, &[Tensor::zeros(&[1]), Tensor::zeros(&[1])], 0.1, &cfg).unwrap();
        assert!((p.get("fc.weight").unwrap().data()[0] - 0.95).abs() < 1e-15);
        assert_eq!(p.get("fc.bias").unwrap().data()[0], 1.0);
    }

    #[test]
    fn ema_examples() {
        let mut t = store(1.0);
        ema_update(&mut t, &store(0.0), 0.9).unwrap();
        assert_eq!(t.get("w").unwrap().data()[0], 0.9);
        ema_update(&mut t, &store(5.0), 1.0).unwrap();
        assert_eq!(t.get("w").unwrap().data()[0], 0.9);
        ema_update(&mut t, &store(5.0), 0.0).unwrap();
        assert_eq!(t.get("w").unwrap().data()[0], 5.0);
        assert!(matches!(ema_update(&mut t, &store(0.0), 1.5), Err(Error::Parameter(_))));
    }

    #[test]
    fn ema_matches_closed_form_over_ten_steps() {
        let history = [0.3, -1.2, 0.8, 2.5, 0.0, -0.7, 1.1, 0.4, -2.0, 0.9];
        let moms = [0.9, 0.95, 0.5, 0.99, 0.7, 0.8, 0.6, 0.999, 0.3, 0.85];
        let mut t = store(1.0);
        for (s, &lam) in history.iter().zip(&moms) {
            ema_update(&mut t, &store(*s), lam).unwrap();
        }
        let mut hand = 1.0f64;
        for (s, &lam) in history.iter().zip(&moms) {
            hand = lam * hand + (1.0 - lam) * s;
        }
        assert_eq!(t.get("w").unwrap().data()[0], hand);
        // closed form: t_K = Π λ_k · t_0 + Σ_k (1 − λ_k) s_k Π_{j>k} λ_j
        let mut want = moms.iter().product::<f64>();
        for k in 0..10 {
            let tail: f64 = moms[k + 1..].iter().product();
            want += (1.0 - moms[k]) * history[k] * tail;
        }
        assert!((t.get("w").unwrap().data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = OptimConfig::default();
        let total = 2000;
        let warm = cfg.warmup_steps(total);
        assert_eq!(warm, 100);
        assert_eq!(cfg.lr_at(0, total), 0.0);
        assert_eq!(cfg.lr_at(warm, total), cfg.lr);
        assert!(cfg.lr_at(total, total).abs() < 1e-18);
        assert_eq!(cfg.ema_at(0, total), 0.996);
        assert_eq!(cfg.ema_at(total, total), 1.0);
        for s in 0..total {
            assert!(cfg.ema_at(s + 1, total) >= cfg.ema_at(s, total));
        }
    }
}
