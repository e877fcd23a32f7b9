//! The denoising approximator `phi(z_t, s, t)`: predicted per-position
//! distributions over the final bridge state.

mod gradcheck;
mod neural;
mod nn;
mod tabular;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::sequence::TokenSequence;

pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use neural::{Gradients, NeuralApproximator, NeuralConfig, NeuralParams, PackedBatch, ParamGroup};
pub use tabular::TabularApproximator;

/// Row-wise softmax of a logit matrix.
pub fn softmax(logits: &Array2<f64>) -> Array2<f64> {
    nn::softmax_rows(logits)
}

/// Row count of the sinusoidal time-step features.
pub const TIME_FEATURES: usize = 16;

/// Per-position categorical distributions, one simplex row per position.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbTable {
    probs: Array2<f64>,
}

impl ProbTable {
    pub fn new(probs: Array2<f64>) -> Result<Self> {
        for (i, row) in probs.rows().into_iter().enumerate() {
            check_simplex(row, 1e-6).map_err(|e| crate::Error::invalid(format!("row {i}: {e}")))?;
        }
        Ok(Self { probs })
    }

    /// Uniform rows.
    pub fn uniform(n: usize, k: usize) -> Self {
        Self {
            probs: Array2::from_elem((n, k), 1.0 / k as f64),
        }
    }

    /// One-hot rows at the given tokens (masked positions included).
    pub fn one_hot(seq: &TokenSequence) -> Self {
        let mut probs = Array2::zeros((seq.len(), seq.vocab_size()));
        for (i, &tok) in seq.tokens().iter().enumerate() {
            if tok < seq.vocab_size() {
                probs[[i, tok]] = 1.0;
            } else {
                probs.row_mut(i).fill(1.0 / seq.vocab_size() as f64);
            }
        }
        Self { probs }
    }

    pub(crate) fn from_raw(probs: Array2<f64>) -> Self {
        Self { probs }
    }

    pub fn len(&self) -> usize {
        self.probs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.nrows() == 0
    }

    pub fn vocab_size(&self) -> usize {
        self.probs.ncols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.probs.row(i).to_slice().expect("standard layout")
    }

    pub fn prob(&self, i: usize, k: usize) -> f64 {
        self.probs[[i, k]]
    }

    /// `ln(p + eps)` for one row.
    pub fn log_row(&self, i: usize, eps: f64) -> Vec<f64> {
        self.row(i).iter().map(|&p| (p + eps).ln()).collect()
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    /// Every row is a simplex within `tol`.
    pub fn check(&self, tol: f64) -> Result<()> {
        for (i, row) in self.probs.rows().into_iter().enumerate() {
            check_simplex(row, tol).map_err(|e| crate::Error::invalid(format!("row {i}: {e}")))?;
        }
        Ok(())
    }
}

pub(crate) fn check_simplex(row: ArrayView1<f64>, tol: f64) -> Result<()> {
    let mut sum = 0.0;
    for &p in row {
        ensure!(p >= 0.0 && p.is_finite(), "entry {p} is not a probability");
        sum += p;
    }
    ensure!((sum - 1.0).abs() <= tol, "row sums to {sum}");
    Ok(())
}

/// Conditioning inputs for one sequence at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningBundle {
    /// Sinusoidal features of `t / T`.
    pub t_embed: Vec<f64>,
    /// `n x d_s` per-position condition features.
    pub s_features: Array2<f64>,
    /// Mean of `s_features` over real positions.
    pub s_pooled: Vec<f64>,
    /// Real-position mask shared with the token sequence.
    pub mask: Vec<bool>,
}

impl ConditioningBundle {
    pub fn new(s_features: Array2<f64>, mask: Vec<bool>, t: usize, steps: usize) -> Result<Self> {
        ensure!(
            s_features.nrows() == mask.len(),
            "condition rows {} do not match sequence length {}",
            s_features.nrows(),
            mask.len()
        );
        ensure!(steps >= 1 && t <= steps, "step {t} outside 0..={steps}");
        let d = s_features.ncols();
        let mut s_pooled = vec![0.0; d];
        let mut count = 0usize;
        for (row, &real) in s_features.rows().into_iter().zip(&mask) {
            if real {
                count += 1;
                for (acc, &v) in s_pooled.iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        if count > 0 {
            for v in &mut s_pooled {
                *v /= count as f64;
            }
        }
        Ok(Self {
            t_embed: time_features(t, steps),
            s_features,
            s_pooled,
            mask,
        })
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }
}

/// `[sin(pi u 2^j), cos(pi u 2^j)]` for `u = t / T` and `j < TIME_FEATURES / 2`.
pub fn time_features(t: usize, steps: usize) -> Vec<f64> {
    let u = t as f64 / steps as f64;
    let half = TIME_FEATURES / 2;
    let mut out = Vec::with_capacity(TIME_FEATURES);
    for j in 0..half {
        let a = std::f64::consts::PI * u * f64::powi(2.0, j as i32);
        out.push(a.sin());
        out.push(a.cos());
    }
    out
}

/// A model of the final bridge state given an intermediate one.
pub trait Approximator: Send + Sync {
    fn vocab_size(&self) -> usize;

    /// Predicted distribution over `z_T` for every position of `z`.
    fn predict(&self, z: &TokenSequence, cond: &ConditioningBundle, t: usize) -> Result<ProbTable>;

    /// Predictions for several sequences at the same step.
    fn predict_many(&self, items: &[(&TokenSequence, &ConditioningBundle)], t: usize) -> Result<Vec<ProbTable>> {
        items.iter().map(|(z, c)| self.predict(z, c, t)).collect()
    }
}

/// Serializable choice between the two approximator families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ApproximatorKind {
    Tabular,
    Neural(NeuralConfig),
}
