//! Training objectives: the per-step variational-bound KL and the
//! reparameterized simplified cross-entropy.
//!
//! Both reduce as a mean over real positions of one sequence; the trainer
//! then averages sequences in a batch.

use serde::{Deserialize, Serialize};

use crate::approximator::ProbTable;
use crate::bridge::{transition_mixture, BridgeSchedule, BridgeState};
use crate::error::{ensure, Result};
use crate::sequence::{one_hot_index, TokenSequence};

pub const DEFAULT_EPSILON: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    VariationalBound,
    SimplifiedCe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaMode {
    ConstantOne,
    OneMinusBeta,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub objective: Objective,
    pub lambda_mode: LambdaMode,
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            objective: Objective::SimplifiedCe,
            lambda_mode: LambdaMode::ConstantOne,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.epsilon > 0.0 && self.epsilon <= 1e-6,
            "loss epsilon must lie in (0, 1e-6], got {}",
            self.epsilon
        );
        Ok(())
    }

    /// Step weight `lambda_t`.
    pub fn lambda(&self, beta_t: f64) -> f64 {
        match self.lambda_mode {
            LambdaMode::ConstantOne => 1.0,
            LambdaMode::OneMinusBeta => 1.0 - beta_t,
        }
    }
}

/// `sum_k p_k ln((p_k + eps) / (q_k + eps))`, skipping `p_k = 0`.
///
/// With `eps = 0` this is the exact divergence (infinite when `q` misses
/// mass that `p` has).
pub fn categorical_kl(p: &[f64], q: &[f64], eps: f64) -> Result<f64> {
    ensure!(
        p.len() == q.len(),
        "distribution lengths differ: {} vs {}",
        p.len(),
        q.len()
    );
    ensure!(eps >= 0.0, "epsilon must be non-negative");
    for (name, d) in [("p", p), ("q", q)] {
        let sum: f64 = d.iter().sum();
        ensure!((sum - 1.0).abs() <= 1e-9, "{name} sums to {sum}");
        ensure!(d.iter().all(|&v| v >= 0.0), "{name} has negative entries");
    }
    Ok(kl_unchecked(p, q, eps))
}

pub(crate) fn kl_unchecked(p: &[f64], q: &[f64], eps: f64) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pk, _)| pk > 0.0)
        .map(|(&pk, &qk)| pk * ((pk + eps) / (qk + eps)).ln())
        .sum()
}

fn check_shapes(z: &TokenSequence, y: &TokenSequence, phi: &ProbTable) -> Result<()> {
    z.check_aligned(y)?;
    ensure!(
        phi.len() == y.len(),
        "table has {} rows for length {}",
        phi.len(),
        y.len()
    );
    ensure!(
        phi.vocab_size() == y.vocab_size(),
        "table width {} does not match vocabulary {}",
        phi.vocab_size(),
        y.vocab_size()
    );
    Ok(())
}

/// Mean over real positions of `KL(Q_t(y) z_t || Q_t(phi) z_t)`.
pub fn vlb_step_loss(
    z_t: &TokenSequence,
    y: &TokenSequence,
    phi: &ProbTable,
    t: usize,
    schedule: &BridgeSchedule,
    eps: f64,
) -> Result<f64> {
    check_shapes(z_t, y, phi)?;
    ensure!(
        t < schedule.steps(),
        "step {t} beyond schedule length {}",
        schedule.steps()
    );
    let beta = schedule.beta(t);
    let k = y.vocab_size();
    let mut total = 0.0;
    let mut count = 0usize;
    for i in y.real_positions() {
        let mut target = vec![0.0; k];
        target[y.get(i)] = 1.0;
        let reference = transition_mixture(z_t.get(i), &target, beta);
        let approx = transition_mixture(z_t.get(i), phi.row(i), beta);
        total += categorical_kl(&reference, &approx, eps)?;
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// `lambda_t` times the mean over real positions of `v_i * -ln(phi_i[y_i])`.
pub fn simplified_ce_loss(
    state: &BridgeState,
    y: &TokenSequence,
    phi: &ProbTable,
    schedule: &BridgeSchedule,
    cfg: &LossConfig,
) -> Result<f64> {
    check_shapes(&state.z, y, phi)?;
    let keep = state
        .keep
        .as_ref()
        .ok_or_else(|| crate::Error::state("simplified loss needs the keep latent of the state"))?;
    ensure!(
        state.t < schedule.steps(),
        "step {} beyond schedule length {}",
        state.t,
        schedule.steps()
    );
    let lambda = cfg.lambda(schedule.beta(state.t));
    let mut total = 0.0;
    let mut count = 0usize;
    for i in y.real_positions() {
        if keep[i] {
            total += -(phi.prob(i, y.get(i)) + cfg.epsilon).ln();
        }
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { lambda * total / count as f64 })
}

/// Per-position loss and its gradient with respect to the predicted row.
///
/// `keep` is the latent for the simplified objective and is ignored by the
/// variational bound, which only looks at the current token `z`.
pub(crate) fn row_loss_grad(
    cfg: &LossConfig,
    beta: f64,
    z: usize,
    y: usize,
    keep: bool,
    phi: &[f64],
    grad: &mut [f64],
) -> f64 {
    grad.fill(0.0);
    let eps = cfg.epsilon;
    match cfg.objective {
        Objective::SimplifiedCe => {
            if !keep {
                return 0.0;
            }
            let lambda = cfg.lambda(beta);
            let p = phi[y] + eps;
            grad[y] = -lambda / p;
            -lambda * p.ln()
        }
        Objective::VariationalBound => {
            // Reference mass sits on z (beta) and y (1 - beta); every other
            // category has p_k = 0 and contributes nothing.
            let mut loss = 0.0;
            let mut add = |k: usize, pk: f64, grad: &mut [f64]| {
                if pk > 0.0 {
                    let qk = (1.0 - beta) * phi[k] + if k == z { beta } else { 0.0 };
                    loss += pk * ((pk + eps) / (qk + eps)).ln();
                    grad[k] += -pk / (qk + eps) * (1.0 - beta);
                }
            };
            if z == y {
                add(z, 1.0, grad);
            } else {
                add(z, beta, grad);
                add(y, 1.0 - beta, grad);
            }
            loss
        }
    }
}

/// Joint divergence over (jump indicator, next token) against the
/// closed-form `(1 - beta) KL(y || phi)`.
///
/// The stay branch puts mass `beta` on the current token under both kernels
/// and contributes nothing; the jump branch lands on `y` under the reference
/// and on `phi` under the approximation.
pub fn joint_kl_identity_check(beta: f64, y: &[f64], phi_row: &[f64]) -> Result<(f64, f64)> {
    ensure!((0.0..=1.0).contains(&beta), "beta = {beta} outside [0, 1]");
    ensure!(y.len() == phi_row.len(), "length mismatch");
    let yi = one_hot_index(y)?;
    let k = y.len();
    // rows: [stay, jump]; the current token is immaterial, take y's slot
    let mut reference = vec![0.0; 2 * k];
    let mut approx = vec![0.0; 2 * k];
    reference[yi] = beta;
    approx[yi] = beta;
    reference[k + yi] = 1.0 - beta;
    for (j, &p) in phi_row.iter().enumerate() {
        approx[k + j] = (1.0 - beta) * p;
    }
    let lhs = categorical_kl(&reference, &approx, 0.0)?;
    let rhs = (1.0 - beta) * categorical_kl(y, phi_row, 0.0)?;
    Ok((lhs, rhs))
}
