use ndarray::Array2;

use super::{Approximator, ConditioningBundle, ProbTable};
use crate::error::{ensure, Result};
use crate::sequence::TokenSequence;

/// Position-wise conditional table `P(y_i | z_i)`, ignoring conditioning
/// and step. Used as a baseline and as a cheap model inside oracles.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularApproximator {
    table: Array2<f64>,
}

impl TabularApproximator {
    /// Every row uniform.
    pub fn uniform(vocab: usize) -> Self {
        Self {
            table: Array2::from_elem((vocab, vocab), 1.0 / vocab as f64),
        }
    }

    pub fn from_table(table: Array2<f64>) -> Result<Self> {
        ensure!(table.nrows() == table.ncols(), "table must be square");
        ProbTable::new(table.clone())?;
        Ok(Self { table })
    }

    /// Additively smoothed frequencies of `y_i` given `z_i` over real positions.
    pub fn fit(pairs: &[(TokenSequence, TokenSequence)], smoothing: f64) -> Result<Self> {
        ensure!(!pairs.is_empty(), "cannot fit a table on an empty dataset");
        ensure!(smoothing > 0.0, "smoothing must be positive");
        let k = pairs[0].1.vocab_size();
        let mut counts = Array2::from_elem((k, k), smoothing);
        for (z, y) in pairs {
            z.check_aligned(y)?;
            ensure!(y.vocab_size() == k, "mixed vocabularies in dataset");
            for i in y.real_positions() {
                counts[[z.get(i), y.get(i)]] += 1.0;
            }
        }
        for mut row in counts.rows_mut() {
            let s = row.sum();
            row.mapv_inplace(|c| c / s);
        }
        Ok(Self { table: counts })
    }

    pub fn table(&self) -> &Array2<f64> {
        &self.table
    }
}

impl Approximator for TabularApproximator {
    fn vocab_size(&self) -> usize {
        self.table.nrows()
    }

    fn predict(&self, z: &TokenSequence, cond: &ConditioningBundle, _t: usize) -> Result<ProbTable> {
        ensure!(z.vocab_size() == self.vocab_size(), "vocabulary mismatch");
        ensure!(cond.len() == z.len(), "conditioning length mismatch");
        let k = self.vocab_size();
        let mut out = Array2::from_elem((z.len(), k), 1.0 / k as f64);
        for i in z.real_positions() {
            out.row_mut(i).assign(&self.table.row(z.get(i)));
        }
        Ok(ProbTable::from_raw(out))
    }
}
