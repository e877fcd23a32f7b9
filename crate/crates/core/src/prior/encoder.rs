use std::collections::HashMap;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::PairedExample;
use crate::error::{ensure, Result};
use crate::sequence::{argmax, TokenSequence};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderFitConfig {
    /// Full-batch gradient-descent iterations.
    pub iterations: usize,
    pub learning_rate: f64,
}

impl Default for EncoderFitConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            learning_rate: 1.0,
        }
    }
}

/// Position-wise softmax classifier `x_i = argmax(W^T s_i + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorEncoder {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    fitted: bool,
}

impl PriorEncoder {
    /// All-zero classifier; predicts token 0 everywhere until fitted.
    pub fn untrained(feature_dim: usize, vocab: usize) -> Self {
        Self {
            weights: Array2::zeros((feature_dim, vocab)),
            bias: Array1::zeros(vocab),
            fitted: false,
        }
    }

    pub fn from_parts(weights: Array2<f64>, bias: Array1<f64>, fitted: bool) -> Result<Self> {
        ensure!(weights.ncols() == bias.len(), "encoder weight/bias shapes disagree");
        Ok(Self { weights, bias, fitted })
    }

    pub fn vocab_size(&self) -> usize {
        self.bias.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn is_fitted(&self) -> bool {
        self.fitted
    }

    pub(crate) fn mark_fitted(&mut self) {
        self.fitted = true;
    }

    pub fn logits(&self, s_features: ArrayView2<f64>) -> Array2<f64> {
        s_features.dot(&self.weights) + &self.bias
    }

    /// Row-wise softmax of the classifier.
    pub fn probs(&self, s_features: ArrayView2<f64>) -> Array2<f64> {
        crate::approximator::softmax(&self.logits(s_features))
    }

    /// Prior sequence; ties go to the lowest token index, masked positions get 0.
    pub fn encode(&self, s_features: ArrayView2<f64>, mask: &[bool]) -> Result<TokenSequence> {
        ensure!(
            s_features.ncols() == self.feature_dim(),
            "feature width {} does not match encoder width {}",
            s_features.ncols(),
            self.feature_dim()
        );
        ensure!(s_features.nrows() == mask.len(), "feature rows do not match mask");
        let logits = self.logits(s_features);
        let tokens = logits
            .rows()
            .into_iter()
            .zip(mask)
            .map(|(row, &real)| if real { argmax(row.as_slice().unwrap()) } else { 0 })
            .collect();
        TokenSequence::with_mask(tokens, mask.to_vec(), self.vocab_size())
    }

    /// Like [`encode`](Self::encode) but refuses an unfitted encoder.
    pub fn encode_strict(&self, s_features: ArrayView2<f64>, mask: &[bool]) -> Result<TokenSequence> {
        if !self.fitted {
            return Err(crate::Error::state("prior encoder used before it was fitted"));
        }
        self.encode(s_features, mask)
    }

    pub fn encode_example(&self, ex: &PairedExample) -> Result<TokenSequence> {
        self.encode(ex.s_features.view(), ex.mask())
    }

    /// Mean cross-entropy over real rows and its gradient.
    pub(crate) fn loss_grad(
        &self,
        s_features: ArrayView2<f64>,
        targets: &[usize],
        weights: &[f64],
    ) -> (f64, Array2<f64>, Array1<f64>) {
        let probs = self.probs(s_features);
        let mut dlogits = probs.clone();
        let mut loss = 0.0;
        let total: f64 = weights.iter().sum();
        for (r, (&y, &w)) in targets.iter().zip(weights).enumerate() {
            loss -= w * probs[[r, y]].max(1e-300).ln();
            dlogits[[r, y]] -= 1.0;
            dlogits.row_mut(r).mapv_inplace(|v| v * w / total);
        }
        let dw = s_features.t().dot(&dlogits);
        let db = dlogits.sum_axis(ndarray::Axis(0));
        (loss / total, dw, db)
    }

    /// Fits the classifier by full-batch gradient descent on the pooled
    /// cross-entropy of every real position. Identical feature rows are
    /// merged first, which leaves the objective unchanged.
    ///
    /// Returns the encoder and the loss before each iteration.
    pub fn fit(examples: &[PairedExample], cfg: &EncoderFitConfig) -> Result<(Self, Vec<f64>)> {
        ensure!(!examples.is_empty(), "cannot fit the prior encoder on an empty split");
        let k = examples[0].y.vocab_size();
        let feat = examples[0].s_features.ncols();
        let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut counts: HashMap<(usize, usize), f64> = HashMap::new();
        for ex in examples {
            ensure!(
                ex.y.vocab_size() == k && ex.s_features.ncols() == feat,
                "mixed task shapes in split"
            );
            for i in ex.y.real_positions() {
                let row = ex.s_features.row(i);
                let key: Vec<u64> = row.iter().map(|v| v.to_bits()).collect();
                let next = rows.len();
                let u = *index.entry(key).or_insert_with(|| {
                    rows.push(row.to_vec());
                    next
                });
                *counts.entry((u, ex.y.get(i))).or_default() += 1.0;
            }
        }
        ensure!(!rows.is_empty(), "split has no real positions");
        let mut keys: Vec<_> = counts.into_iter().collect();
        keys.sort_by_key(|a| a.0);
        let mut feats = Array2::zeros((keys.len(), feat));
        let mut targets = Vec::with_capacity(keys.len());
        let mut weights = Vec::with_capacity(keys.len());
        for (r, ((u, y), c)) in keys.into_iter().enumerate() {
            feats.row_mut(r).assign(&Array1::from(rows[u].clone()));
            targets.push(y);
            weights.push(c);
        }

        let mut enc = Self::untrained(feat, k);
        let mut history = Vec::with_capacity(cfg.iterations);
        for _ in 0..cfg.iterations {
            let (loss, dw, db) = enc.loss_grad(feats.view(), &targets, &weights);
            history.push(loss);
            enc.weights.scaled_add(-cfg.learning_rate, &dw);
            enc.bias.scaled_add(-cfg.learning_rate, &db);
        }
        enc.fitted = true;
        Ok((enc, history))
    }

    /// Token accuracy over the real positions of `examples`.
    pub fn accuracy(&self, examples: &[PairedExample]) -> Result<f64> {
        let mut hit = 0usize;
        let mut total = 0usize;
        for ex in examples {
            let x = self.encode_example(ex)?;
            for i in ex.y.real_positions() {
                hit += usize::from(x.get(i) == ex.y.get(i));
                total += 1;
            }
        }
        Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
    }
}
