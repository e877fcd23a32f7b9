//! Perplexity and recovery metrics, reported per length bucket and per task.
//!
//! Perplexity is taken from the approximator's prediction at the last
//! bridge step, where the kernel equals the prediction exactly. It is pooled
//! over all real tokens of a bucket rather than averaged per sequence.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::approximator::{Approximator, ProbTable};
use crate::checkpoint::Checkpoint;
use crate::error::{ensure, Error, Result};
use crate::prior::PairedExample;
use crate::sampler::{Bridge, SampleMode};
use crate::sequence::TokenSequence;

/// `exp` of the mean `-log phi[y]` over every real position of every pair.
/// `None` when there are no real positions.
pub fn perplexity(phis: &[&ProbTable], ys: &[&TokenSequence]) -> Result<Option<f64>> {
    ensure!(
        phis.len() == ys.len(),
        "{} predictions for {} targets",
        phis.len(),
        ys.len()
    );
    let mut nll = 0.0;
    let mut count = 0usize;
    for (phi, y) in phis.iter().zip(ys) {
        ensure!(
            phi.len() == y.len(),
            "prediction has {} rows for {} tokens",
            phi.len(),
            y.len()
        );
        ensure!(phi.vocab_size() == y.vocab_size(), "vocabulary mismatch");
        for i in y.real_positions() {
            nll -= phi.prob(i, y.get(i)).ln();
            count += 1;
        }
    }
    Ok((count > 0).then(|| (nll / count as f64).exp()))
}

/// Percentage of real positions where `designed` matches `y`.
pub fn recovery_rate(designed: &TokenSequence, y: &TokenSequence) -> Result<f64> {
    designed.check_aligned(y)?;
    let n = y.real_count();
    ensure!(n > 0, "sequence has no real positions");
    let hits = y.real_positions().filter(|&i| designed.get(i) == y.get(i)).count();
    Ok(100.0 * hits as f64 / n as f64)
}

/// Median, averaging the two middle values for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    })
}

/// Task tag of an example id of the form `<tag>-<index>`.
pub fn task_tag(id: &str) -> &str {
    match id.rsplit_once('-') {
        Some((tag, idx)) if !idx.is_empty() && idx.bytes().all(|b| b.is_ascii_digit()) => tag,
        _ => id,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Sequences of at most this length fall in the `short` bucket.
    pub short_max_len: usize,
    /// Add one bucket per task tag.
    pub task_buckets: bool,
    pub seed: u64,
    pub token_budget: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            short_max_len: 100,
            task_buckets: true,
            seed: 0,
            token_budget: 6000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketMetrics {
    pub bucket: String,
    pub n_examples: usize,
    /// Absent for an empty bucket.
    pub perplexity: Option<f64>,
    pub median_recovery_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// The bridge model: final-step prediction and greedy-final design.
    pub model: Vec<BucketMetrics>,
    /// The prior encoder alone: its softmax and its argmax design.
    pub prior: Vec<BucketMetrics>,
}

struct Scored<'a> {
    len: usize,
    tag: &'a str,
    phi: ProbTable,
    y: &'a TokenSequence,
    recovery: f64,
}

fn bucket_rows(scored: &[Scored], cfg: &EvalConfig) -> Result<Vec<BucketMetrics>> {
    let mut buckets: Vec<(String, Vec<usize>)> = vec![
        ("all".into(), (0..scored.len()).collect()),
        (
            format!("short (<= {})", cfg.short_max_len),
            (0..scored.len())
                .filter(|&i| scored[i].len <= cfg.short_max_len)
                .collect(),
        ),
        (
            format!("long (> {})", cfg.short_max_len),
            (0..scored.len())
                .filter(|&i| scored[i].len > cfg.short_max_len)
                .collect(),
        ),
    ];
    if cfg.task_buckets {
        let mut tags: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, s) in scored.iter().enumerate() {
            tags.entry(s.tag).or_default().push(i);
        }
        buckets.extend(tags.into_iter().map(|(t, v)| (format!("task:{t}"), v)));
    }
    buckets
        .into_iter()
        .map(|(bucket, idx)| {
            let phis: Vec<&ProbTable> = idx.iter().map(|&i| &scored[i].phi).collect();
            let ys: Vec<&TokenSequence> = idx.iter().map(|&i| scored[i].y).collect();
            let rec: Vec<f64> = idx.iter().map(|&i| scored[i].recovery).collect();
            Ok(BucketMetrics {
                bucket,
                n_examples: idx.len(),
                perplexity: perplexity(&phis, &ys)?,
                median_recovery_pct: median(&rec),
            })
        })
        .collect()
}

/// Scores a bridge on `examples`: greedy-final designs for recovery, the
/// final-step prediction for perplexity, plus the prior-only baseline.
pub fn evaluate_bridge<A: Approximator + ?Sized>(
    bridge: &Bridge<A>,
    examples: &[PairedExample],
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    ensure!(!examples.is_empty(), "evaluation split is empty");
    let samples = bridge.sample_examples(examples, SampleMode::GreedyFinal, cfg.seed, 0, cfg.token_budget)?;
    let mut model = Vec::with_capacity(examples.len());
    let mut prior = Vec::with_capacity(examples.len());
    for (ex, s) in examples.iter().zip(samples) {
        let tag = task_tag(&ex.id);
        let x = bridge.encoder.encode_example(ex)?;
        prior.push(Scored {
            len: ex.len(),
            tag,
            phi: ProbTable::from_raw(bridge.encoder.probs(ex.s_features.view())),
            y: &ex.y,
            recovery: recovery_rate(&x, &ex.y)?,
        });
        model.push(Scored {
            len: ex.len(),
            tag,
            recovery: recovery_rate(&s.tokens, &ex.y)?,
            phi: s.final_probs,
            y: &ex.y,
        });
    }
    Ok(MetricsReport {
        model: bucket_rows(&model, cfg)?,
        prior: bucket_rows(&prior, cfg)?,
    })
}

/// [`evaluate_bridge`] for a trained checkpoint.
pub fn evaluate(ck: &Checkpoint, examples: &[PairedExample], cfg: &EvalConfig) -> Result<MetricsReport> {
    let bridge = Bridge {
        approx: &ck.state.model,
        encoder: &ck.state.encoder,
        schedule: &ck.state.schedule,
    };
    evaluate_bridge(&bridge, examples, cfg)
}

impl MetricsReport {
    pub fn bucket(&self, name: &str) -> Option<&BucketMetrics> {
        self.model.iter().find(|b| b.bucket == name)
    }

    pub fn prior_bucket(&self, name: &str) -> Option<&BucketMetrics> {
        self.prior.iter().find(|b| b.bucket == name)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::invalid(format!("report serialization: {e}")))
    }

    /// Plain-text table with one row per system and bucket.
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
        let mut out = format!(
            "{:<8} {:<24} {:>6} {:>11} {:>9}\n",
            "system", "bucket", "n", "perplexity", "recovery"
        );
        for (system, rows) in [("bridge", &self.model), ("prior", &self.prior)] {
            for b in rows {
                let _ = writeln!(
                    out,
                    "{system:<8} {:<24} {:>6} {:>11} {:>9}",
                    b.bucket,
                    b.n_examples,
                    fmt(b.perplexity),
                    fmt(b.median_recovery_pct)
                );
            }
        }
        out
    }

    /// `system,bucket,metric,value` rows; absent metrics are omitted.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("system,bucket,metric,value\n");
        for (system, rows) in [("bridge", &self.model), ("prior", &self.prior)] {
            for b in rows {
                let _ = writeln!(out, "{system},{},n_examples,{}", b.bucket, b.n_examples);
                if let Some(p) = b.perplexity {
                    let _ = writeln!(out, "{system},{},perplexity,{p}", b.bucket);
                }
                if let Some(r) = b.median_recovery_pct {
                    let _ = writeln!(out, "{system},{},median_recovery_pct,{r}", b.bucket);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use ndarray::array;
    use proptest::prelude::*;

    use super::*;

    fn seq(t: Vec<usize>, k: usize) -> TokenSequence {
        TokenSequence::new(t, k).unwrap()
    }

    #[test]
    fn uniform_and_perfect_perplexity() {
        let y = seq(vec![3, 7, 19, 0], 20);
        let u = ProbTable::uniform(4, 20);
        assert!((perplexity(&[&u], &[&y]).unwrap().unwrap() - 20.0).abs() < 1e-9);
        let p = ProbTable::one_hot(&y);
        assert_eq!(perplexity(&[&p], &[&y]).unwrap(), Some(1.0));
        assert_eq!(perplexity(&[], &[]).unwrap(), None);
    }

    #[test]
    fn perplexity_pools_tokens() {
        let y1 = seq(vec![0], 2);
        let y2 = seq(vec![0], 8);
        let p1 = ProbTable::new(array![[0.5, 0.5]]).unwrap();
        let mut row = vec![0.0; 8];
        row[0] = 0.125;
        row[1] = 0.875;
        let p2 = ProbTable::new(ndarray::Array2::from_shape_vec((1, 8), row).unwrap()).unwrap();
        // pooling across vocabularies is allowed as long as each pair agrees
        let v = perplexity(&[&p1, &p2], &[&y1, &y2]).unwrap().unwrap();
        assert!((v - 4.0).abs() < 1e-12);
    }

    #[test]
    fn recovery_cases() {
        let y = seq(vec![0, 1, 2, 3], 4);
        assert_eq!(recovery_rate(&y, &y).unwrap(), 100.0);
        assert_eq!(recovery_rate(&seq(vec![1, 2, 3, 0], 4), &y).unwrap(), 0.0);
        assert_eq!(recovery_rate(&seq(vec![0, 1, 2, 0], 4), &y).unwrap(), 75.0);
        assert!(recovery_rate(&seq(vec![0, 1], 4), &y).is_err());
        let masked = TokenSequence::with_mask(vec![0, 3, 2, 3], vec![true, false, true, true], 4).unwrap();
        let ym = TokenSequence::with_mask(vec![0, 1, 2, 3], vec![true, false, true, true], 4).unwrap();
        assert_eq!(recovery_rate(&masked, &ym).unwrap(), 100.0);
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
    }

    #[test]
    fn tags() {
        assert_eq!(task_tag("local-context-000012"), "local-context");
        assert_eq!(task_tag("custom"), "custom");
        assert_eq!(task_tag("a-b"), "a-b");
    }

    proptest! {
        #[test]
        fn duplicating_an_example_moves_the_median_by_at_most_one_step(
            values in prop::collection::vec(0.0f64..100.0, 1..40),
            pick in any::<prop::sample::Index>(),
        ) {
            let mut sorted = values.clone();
            sorted.sort_by(f64::total_cmp);
            let before = median(&values).unwrap();
            let mut dup = values.clone();
            dup.push(values[pick.index(values.len())]);
            let after = median(&dup).unwrap();
            // the new median lies between adjacent order statistics of the old set
            let pos = sorted.partition_point(|&v| v < before.min(after));
            let lo = sorted[pos.saturating_sub(1)];
            let hi = sorted[(pos + 1).min(sorted.len() - 1)];
            prop_assert!(after >= lo - 1e-12 && after <= hi + 1e-12);
        }
    }
}
