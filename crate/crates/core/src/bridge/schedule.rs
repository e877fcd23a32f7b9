use std::f64::consts::FRAC_PI_2;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Offset `s` of the cosine curve `cos^2((u + s) / (1 + s) * pi / 2)`.
pub const COSINE_OFFSET: f64 = 0.008;

/// Per-step keep probabilities `beta_t` and their running products.
///
/// `beta[0] == 1.0` and `beta[T-1] == 0.0` hold exactly for every value of
/// this type; the first step is the identity and the last jumps every
/// position to the target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeSchedule {
    beta: Vec<f64>,
    beta_bar: Vec<f64>,
}

impl BridgeSchedule {
    /// Cosine schedule with `steps` transitions.
    ///
    /// The cosine cumulative curve is evaluated at `u = t / (T-1)`, per-step
    /// ratios are taken, then the endpoints are pinned to 1 and 0 and the
    /// running product is rebuilt from the pinned values.
    pub fn cosine(steps: usize) -> Result<Self> {
        ensure!(steps >= 2, "schedule needs at least 2 steps, got {steps}");
        let last = (steps - 1) as f64;
        let f = |t: usize| {
            let u = t as f64 / last;
            let c = ((u + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * FRAC_PI_2).cos();
            c * c
        };
        let f0 = f(0);
        let alpha_bar: Vec<f64> = (0..steps).map(|t| f(t) / f0).collect();
        let mut beta = Vec::with_capacity(steps);
        beta.push(1.0);
        for t in 1..steps - 1 {
            beta.push((alpha_bar[t] / alpha_bar[t - 1]).clamp(0.0, 1.0));
        }
        beta.push(0.0);
        Self::from_betas(beta)
    }

    /// Schedule from explicit per-step values; endpoints must already be pinned.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        ensure!(beta.len() >= 2, "schedule needs at least 2 steps, got {}", beta.len());
        ensure!(beta[0] == 1.0, "beta[0] must be exactly 1, got {}", beta[0]);
        let last = beta[beta.len() - 1];
        ensure!(last == 0.0, "beta[T-1] must be exactly 0, got {last}");
        for (t, &b) in beta.iter().enumerate() {
            ensure!((0.0..=1.0).contains(&b), "beta[{t}] = {b} outside [0, 1]");
        }
        let beta_bar = beta
            .iter()
            .scan(1.0, |acc, &b| {
                *acc *= b;
                Some(*acc)
            })
            .collect();
        Ok(Self { beta, beta_bar })
    }

    /// Number of transitions `T`.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn beta_bar(&self, t: usize) -> f64 {
        self.beta_bar[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn beta_bars(&self) -> &[f64] {
        &self.beta_bar
    }

    /// Probability that a position still holds its prior token at step `t`,
    /// i.e. `beta_bar[t-1]` with `beta_bar[-1] = 1`. Valid for `t` in `0..=T`.
    pub fn keep_probability(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.beta_bar[t - 1]
        }
    }

    /// Plain-text `step beta beta_bar` table.
    pub fn to_table(&self) -> String {
        let mut out = String::from("step\tbeta\tbeta_bar\n");
        for t in 0..self.steps() {
            let _ = writeln!(out, "{t}\t{:.12}\t{:.12}", self.beta[t], self.beta_bar[t]);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints_are_exact() {
        for steps in 2..=200 {
            let s = BridgeSchedule::cosine(steps).unwrap();
            assert_eq!(s.beta(0), 1.0);
            assert_eq!(s.beta(steps - 1), 0.0);
            assert_eq!(s.beta_bar(0), 1.0);
            assert_eq!(s.beta_bar(steps - 1), 0.0);
        }
    }

    #[test]
    fn two_step_schedule() {
        let s = BridgeSchedule::cosine(2).unwrap();
        assert_eq!(s.betas(), &[1.0, 0.0]);
        assert_eq!(s.beta_bars(), &[1.0, 0.0]);
    }

    #[test]
    fn cosine_interior_strictly_decreasing() {
        let s = BridgeSchedule::cosine(25).unwrap();
        for t in 1..25 {
            assert!(s.beta_bar(t) < s.beta_bar(t - 1), "t = {t}");
        }
        for t in 1..24 {
            assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
        }
    }

    #[test]
    fn cosine_matches_closed_curve_on_interior() {
        // With beta_0 = 1 the running product telescopes back to the raw curve.
        let steps = 25;
        let s = BridgeSchedule::cosine(steps).unwrap();
        let f = |t: usize| {
            let u = t as f64 / (steps - 1) as f64;
            ((u + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * FRAC_PI_2).cos().powi(2)
        };
        for t in 1..steps - 1 {
            assert!((s.beta_bar(t) - f(t) / f(0)).abs() < 1e-12);
        }
    }

    #[test]
    fn running_product_invariant() {
        let s = BridgeSchedule::cosine(50).unwrap();
        let mut acc = 1.0;
        for t in 0..50 {
            acc *= s.beta(t);
            assert!((s.beta_bar(t) - acc).abs() <= 1e-12);
        }
    }

    #[test]
    fn rejects_bad_schedules() {
        assert!(BridgeSchedule::cosine(1).is_err());
        assert!(BridgeSchedule::cosine(0).is_err());
        assert!(BridgeSchedule::from_betas(vec![0.9, 0.0]).is_err());
        assert!(BridgeSchedule::from_betas(vec![1.0, 0.1]).is_err());
        assert!(BridgeSchedule::from_betas(vec![1.0, 1.5, 0.0]).is_err());
    }

    #[test]
    fn explicit_products() {
        let s = BridgeSchedule::from_betas(vec![1.0, 0.5, 0.25, 0.0]).unwrap();
        assert_eq!(s.beta_bar(2), 0.125);
        assert_eq!(s.keep_probability(0), 1.0);
        assert_eq!(s.keep_probability(3), 0.125);
        assert_eq!(s.keep_probability(4), 0.0);
    }
}
