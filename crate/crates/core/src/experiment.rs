//! Matched-seed comparisons of training variants.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::evaluation::{evaluate, EvalConfig, MetricsReport};
use crate::losses::{LossConfig, Objective};
use crate::prior::DatasetSplits;
use crate::trainer::{fit, FitOutcome, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Simplified cross-entropy against the variational bound.
    LossComparison,
    /// Pre-fitted frozen prior against a prior trained jointly.
    PriorFreeze,
    /// Zero-initialized conditioning outputs against random ones.
    ConditioningZeroInit,
    /// Bridge lengths 5, 10, 25 and 50.
    StepsSweep,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::LossComparison => "loss-comparison",
            Preset::PriorFreeze => "prior-freeze",
            Preset::ConditioningZeroInit => "conditioning-zeroinit",
            Preset::StepsSweep => "steps-sweep",
        }
    }

    /// The labelled configurations the preset compares. Everything not
    /// named by the preset, seeds included, is shared.
    pub fn variants(self, train: &TrainConfig, loss: &LossConfig) -> Vec<(String, TrainConfig, LossConfig)> {
        let with = |label: &str, t: TrainConfig, l: LossConfig| (label.to_string(), t, l);
        match self {
            Preset::LossComparison => vec![
                with(
                    "simplified-ce",
                    train.clone(),
                    LossConfig {
                        objective: Objective::SimplifiedCe,
                        ..*loss
                    },
                ),
                with(
                    "variational-bound",
                    train.clone(),
                    LossConfig {
                        objective: Objective::VariationalBound,
                        ..*loss
                    },
                ),
            ],
            Preset::PriorFreeze => vec![
                with(
                    "frozen-prior",
                    TrainConfig {
                        freeze_prior: true,
                        ..train.clone()
                    },
                    *loss,
                ),
                with(
                    "joint-prior",
                    TrainConfig {
                        freeze_prior: false,
                        ..train.clone()
                    },
                    *loss,
                ),
            ],
            Preset::ConditioningZeroInit => vec![
                with(
                    "zero-init",
                    TrainConfig {
                        zero_init_conditioning: true,
                        ..train.clone()
                    },
                    *loss,
                ),
                with(
                    "random-init",
                    TrainConfig {
                        zero_init_conditioning: false,
                        ..train.clone()
                    },
                    *loss,
                ),
            ],
            Preset::StepsSweep => [5, 10, 25, 50]
                .into_iter()
                .map(|steps| (format!("T={steps}"), TrainConfig { steps, ..train.clone() }, *loss))
                .collect(),
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Preset::LossComparison,
            Preset::PriorFreeze,
            Preset::ConditioningZeroInit,
            Preset::StepsSweep,
        ]
        .into_iter()
        .find(|p| p.name() == s)
        .ok_or_else(|| {
            Error::invalid(format!(
                "unknown preset {s:?} (loss-comparison, prior-freeze, conditioning-zeroinit, steps-sweep)"
            ))
        })
    }
}

/// Trains on `data.train`, validates on `data.valid` and evaluates the last
/// checkpoint on `data.test`.
pub fn train_and_evaluate(
    train: &TrainConfig,
    loss: &LossConfig,
    eval: &EvalConfig,
    data: &DatasetSplits,
    out_dir: Option<&Path>,
) -> Result<(FitOutcome, MetricsReport)> {
    ensure!(!data.test.is_empty(), "test split is empty");
    let outcome = fit(train, loss, &data.train, &data.valid, out_dir, None)?;
    let report = evaluate(&outcome.last, &data.test, eval)?;
    Ok((outcome, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub median_recovery_pct: f64,
    pub perplexity: f64,
    pub prior_recovery_pct: f64,
    pub final_valid_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub preset: Preset,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// Rows with recovery and perplexity deltas against the first row.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<20} {:>9} {:>9} {:>11} {:>9} {:>9}\n",
            "variant", "recovery", "delta", "perplexity", "delta", "prior"
        );
        let base = &self.rows[0];
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<20} {:>9.3} {:>+9.3} {:>11.4} {:>+9.4} {:>9.3}",
                r.label,
                r.median_recovery_pct,
                r.median_recovery_pct - base.median_recovery_pct,
                r.perplexity,
                r.perplexity - base.perplexity,
                r.prior_recovery_pct
            );
        }
        s
    }

    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }
}

/// Runs every variant of `preset`, each in its own subdirectory of
/// `out_dir` when one is given.
pub fn run_ablation(
    preset: Preset,
    train: &TrainConfig,
    loss: &LossConfig,
    eval: &EvalConfig,
    data: &DatasetSplits,
    out_dir: Option<&Path>,
) -> Result<AblationReport> {
    let mut rows = Vec::new();
    for (label, t, l) in preset.variants(train, loss) {
        log::info!("{}: training {label}", preset.name());
        let dir = out_dir.map(|d| d.join(label.replace('=', "")));
        let (outcome, report) = train_and_evaluate(&t, &l, eval, data, dir.as_deref())?;
        let all = report.bucket("all").expect("report has an all bucket");
        let prior = report.prior_bucket("all").expect("report has an all bucket");
        rows.push(AblationRow {
            label,
            median_recovery_pct: all.median_recovery_pct.unwrap_or(f64::NAN),
            perplexity: all.perplexity.unwrap_or(f64::NAN),
            prior_recovery_pct: prior.median_recovery_pct.unwrap_or(f64::NAN),
            final_valid_loss: outcome.valid.last().map_or(f64::NAN, |v| v.1),
        });
    }
    Ok(AblationReport { preset, rows })
}
