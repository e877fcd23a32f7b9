//! Adam with a noam warmup schedule and global-norm clipping.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// `lr(k) = factor * model_dim^-0.5 * min(k^-0.5, k * warmup^-1.5)`, peaking at `k = warmup`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoamConfig {
    pub warmup_steps: u64,
    pub factor: f64,
    pub model_dim: usize,
}

impl Default for NoamConfig {
    fn default() -> Self {
        Self {
            warmup_steps: 4000,
            factor: 2.0,
            model_dim: 128,
        }
    }
}

impl NoamConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.warmup_steps >= 1, "warmup_steps must be at least 1");
        ensure!(self.factor > 0.0 && self.model_dim >= 1, "noam scale must be positive");
        Ok(())
    }

    /// Learning rate at 1-based optimizer step `k`.
    pub fn rate(&self, k: u64) -> f64 {
        let k = k.max(1) as f64;
        let w = self.warmup_steps as f64;
        self.factor * (self.model_dim as f64).powf(-0.5) * k.powf(-0.5).min(k * w.powf(-1.5))
    }
}

/// First and second moments for a list of flat tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn for_shapes(lens: &[usize]) -> Self {
        Self {
            m: lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: lens.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    /// One bias-corrected update of the tensors selected by `active`.
    pub fn update(&mut self, cfg: &AdamConfig, lr: f64, params: &mut [&mut [f64]], grads: &[&[f64]], active: &[bool]) {
        debug_assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            if !active[i] {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for ((w, &g), (mi, vi)) in p.iter_mut().zip(grads[i]).zip(m.iter_mut().zip(v.iter_mut())) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + cfg.eps);
            }
        }
    }
}

/// Scales the selected gradients so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut [f64]], active: &[bool], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .zip(active)
        .filter(|(_, &a)| a)
        .map(|(g, _)| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for (g, _) in grads.iter_mut().zip(active).filter(|(_, &a)| a) {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noam_curve() {
        let n = NoamConfig {
            warmup_steps: 100,
            factor: 1.0,
            model_dim: 64,
        };
        let peak = n.rate(100);
        assert!((peak - 64f64.powf(-0.5) * 0.1).abs() < 1e-15);
        for k in 1..400 {
            let want = 0.125 * (k as f64).powf(-0.5).min(k as f64 * 1e-3);
            assert!((n.rate(k) - want).abs() < 1e-15);
            assert!(n.rate(k) <= peak + 1e-15);
        }
        assert!(n.rate(50) < peak && n.rate(200) < peak);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut x = vec![3.0, -2.0];
        let mut st = AdamState::for_shapes(&[2]);
        for _ in 0..2000 {
            let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            st.update(&AdamConfig::default(), 0.01, &mut [&mut x], &[&g], &[true]);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-3), "{x:?}");
    }

    #[test]
    fn inactive_tensors_untouched() {
        let mut a = vec![1.0];
        let mut b = vec![1.0];
        let mut st = AdamState::for_shapes(&[1, 1]);
        st.update(
            &AdamConfig::default(),
            0.1,
            &mut [&mut a, &mut b],
            &[&[1.0], &[1.0]],
            &[true, false],
        );
        assert!(a[0] < 1.0);
        assert_eq!(b[0].to_bits(), 1f64.to_bits());
    }

    #[test]
    fn clipping() {
        let mut a = vec![3.0];
        let mut b = vec![4.0];
        let norm = clip_global_norm(&mut [&mut a, &mut b], &[true, true], 1.0);
        assert_eq!(norm, 5.0);
        assert!((a[0] - 0.6).abs() < 1e-15 && (b[0] - 0.8).abs() < 1e-15);
        let mut c = vec![0.3];
        clip_global_norm(&mut [&mut c], &[true], 1.0);
        assert_eq!(c[0], 0.3);
    }
}
