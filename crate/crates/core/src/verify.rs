//! Self-checks of the exact identities, runnable from a built binary.

use std::fmt::Write as _;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::approximator::{Approximator, NeuralApproximator, NeuralConfig, ProbTable};
use crate::bridge::{
    cumulative_kernel_check, marginal_distribution, reference_rollout, sample_marginal, BridgeSchedule,
};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::optim::NoamConfig;
use crate::oracle::{enumerate_trajectories, exact_nll, exact_vlb, verify_proposition1, FixedPredictor, OracleKernel};
use crate::prior::{DatasetSplits, SyntheticTaskSpec, TaskKind};
use crate::sampler::{run_chains, SampleMode};
use crate::sequence::{one_hot, TokenSequence};
use crate::trainer::{TrainConfig, TrainState, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Kernels,
    Prop1,
    Vlb,
    All,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kernels" => Ok(Self::Kernels),
            "prop1" => Ok(Self::Prop1),
            "vlb" => Ok(Self::Vlb),
            "all" => Ok(Self::All),
            _ => Err(Error::invalid(format!(
                "unknown suite {s:?} (kernels, prop1, vlb, all)"
            ))),
        }
    }
}

/// Outcome of one check: `value` is compared against `tolerance`, with the
/// direction given by `passed`.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub suite: &'static str,
    pub name: &'static str,
    pub passed: bool,
    pub value: f64,
    pub tolerance: f64,
    pub detail: String,
}

fn below(suite: &'static str, name: &'static str, value: f64, tolerance: f64, detail: String) -> CheckResult {
    CheckResult {
        suite,
        name,
        passed: value <= tolerance,
        value,
        tolerance,
        detail,
    }
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    if matches!(suite, Suite::Kernels | Suite::All) {
        out.extend(kernel_checks(seed)?);
    }
    if matches!(suite, Suite::Prop1 | Suite::All) {
        out.extend(prop1_checks(seed)?);
    }
    if matches!(suite, Suite::Vlb | Suite::All) {
        out.extend(vlb_checks(seed)?);
    }
    Ok(out)
}

pub fn format_table(results: &[CheckResult]) -> String {
    let mut s = format!(
        "{:<8} {:<28} {:<6} {:>12} {:>10}  detail\n",
        "suite", "check", "status", "value", "tolerance"
    );
    for r in results {
        let _ = writeln!(
            s,
            "{:<8} {:<28} {:<6} {:>12.3e} {:>10.1e}  {}",
            r.suite,
            r.name,
            if r.passed { "PASS" } else { "FAIL" },
            r.value,
            r.tolerance,
            r.detail
        );
    }
    s
}

fn random_seq<R: Rng>(n: usize, k: usize, rng: &mut R) -> TokenSequence {
    TokenSequence::new((0..n).map(|_| rng.gen_range(0..k)).collect(), k).expect("valid tokens")
}

fn random_simplex<R: Rng>(k: usize, rng: &mut R) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

fn tv(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

fn kernel_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let mut failures = 0;
    for _ in 0..1000 {
        let k = rng.gen_range(2..=20);
        let n = rng.gen_range(1..=16);
        let sched = BridgeSchedule::cosine(rng.gen_range(2..=30))?;
        let x = random_seq(n, k, &mut rng);
        let y = random_seq(n, k, &mut rng);
        failures += usize::from(reference_rollout(&x, &y, &sched, &mut rng)?.z != y);
    }
    out.push(below(
        "kernels",
        "pinning",
        failures as f64,
        0.0,
        "1000 reference rollouts".into(),
    ));

    let mut worst: f64 = 0.0;
    for k in [2, 7, 20, 64] {
        for _ in 0..5 {
            let sched = BridgeSchedule::cosine(rng.gen_range(2..=25))?;
            let y = one_hot(rng.gen_range(0..k), k);
            for t in 0..sched.steps() {
                worst = worst.max(cumulative_kernel_check(&sched, &y, t)?);
            }
        }
    }
    out.push(below(
        "kernels",
        "cumulative-kernel",
        worst,
        1e-12,
        "K in {2,7,20,64}, every t".into(),
    ));

    let draws = 100_000;
    let mut worst_tv: f64 = 0.0;
    for _ in 0..20 {
        let k = rng.gen_range(2..=8);
        let sched = BridgeSchedule::cosine(rng.gen_range(2..=25))?;
        let t = rng.gen_range(0..=sched.steps());
        let (xi, yi) = (rng.gen_range(0..k), rng.gen_range(0..k));
        let x = TokenSequence::new(vec![xi; draws], k)?;
        let y = TokenSequence::new(vec![yi; draws], k)?;
        let z = sample_marginal(&x, &y, t, &sched, &mut rng)?.z;
        let mut freq = vec![0.0; k];
        z.tokens().iter().for_each(|&v| freq[v] += 1.0 / draws as f64);
        let exact = marginal_distribution(&one_hot(xi, k), &one_hot(yi, k), sched.keep_probability(t))?;
        worst_tv = worst_tv.max(tv(&freq, &exact));
    }
    out.push(below(
        "kernels",
        "marginal-sampling",
        worst_tv,
        0.01,
        "20 triples x 1e5 draws, max TV".into(),
    ));

    let mut worst_tv: f64 = 0.0;
    for _ in 0..10 {
        let steps = rng.gen_range(2..=4);
        let sched = BridgeSchedule::cosine(steps)?;
        let phis: Vec<ProbTable> = (0..steps)
            .map(|_| ProbTable::new(Array2::from_shape_vec((1, 2), random_simplex(2, &mut rng)).unwrap()))
            .collect::<Result<_>>()?;
        let x = TokenSequence::new(vec![rng.gen_range(0..2)], 2)?;
        let law = enumerate_trajectories(&x, &x, &sched, &OracleKernel::Fixed(&phis))?;
        let exact = law.marginals[steps].clone();
        // one chain whose positions are independent copies of the instance
        let wide: Vec<ProbTable> = phis
            .iter()
            .map(|p| ProbTable::new(Array2::from_shape_fn((draws, 2), |(_, j)| p.prob(0, j))))
            .collect::<Result<_>>()?;
        let model = FixedPredictor(wide);
        let prior = TokenSequence::new(vec![x.get(0); draws], 2)?;
        let feats = Array2::zeros((draws, 1));
        let mut rngs = [ChaCha8Rng::seed_from_u64(rng.gen())];
        let s = run_chains(
            &model,
            &sched,
            vec![prior],
            &[&feats],
            SampleMode::Stochastic,
            &mut rngs,
        )?;
        let ones = s[0].tokens.tokens().iter().filter(|&&v| v == 1).count() as f64 / draws as f64;
        worst_tv = worst_tv.max(tv(&[1.0 - ones, ones], &exact));
    }
    out.push(below(
        "kernels",
        "sampler-chain-law",
        worst_tv,
        0.01,
        "10 fixed-prediction chains, 1e5 draws".into(),
    ));
    Ok(out)
}

fn prop1_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let mut worst: f64 = 0.0;
    let mut gap = f64::INFINITY;
    for _ in 0..1000 {
        let k = rng.gen_range(2..=20);
        let phi = random_simplex(k, &mut rng);
        let r = verify_proposition1(rng.gen(), rng.gen(), rng.gen_range(0..k), rng.gen_range(0..k), &phi)?;
        worst = worst.max(r.max_discrepancy());
        if let Some(g) = r.kept_branch_gap {
            gap = gap.min(g);
        }
    }
    Ok(vec![
        below(
            "prop1",
            "case-split=simplified=joint",
            worst,
            1e-10,
            "1000 random draws".into(),
        ),
        CheckResult {
            suite: "prop1",
            name: "joint>=marginal",
            passed: gap >= -1e-12,
            value: gap,
            tolerance: -1e-12,
            detail: "smallest joint-minus-marginal gap".into(),
        },
    ])
}

/// A tiny model trained briefly on an enumerable task.
fn tiny_trained(seed: u64) -> Result<(NeuralApproximator, DatasetSplits)> {
    let spec = SyntheticTaskSpec {
        kind: TaskKind::Cipher,
        vocab: 4,
        corruption_rate: 0.2,
        min_len: 1,
        max_len: 2,
        seed,
    };
    let data = DatasetSplits::generate(&spec, 200, 0, 50)?;
    let cfg = TrainConfig {
        steps: 4,
        batch_size_tokens: 64,
        seed,
        noam: NoamConfig {
            warmup_steps: 20,
            factor: 1.0,
            model_dim: 16,
        },
        model: tiny_model(),
        ..Default::default()
    };
    let mut trainer = Trainer::new(cfg.clone(), LossConfig::default(), TrainState::init(&cfg, &data.train)?)?;
    for step in 0..80 {
        let batch: Vec<_> = data.train.iter().skip((step * 20) % 180).take(20).collect();
        trainer.train_step(&batch)?;
    }
    Ok((trainer.state.model, data))
}

fn tiny_model() -> NeuralConfig {
    NeuralConfig {
        model_dim: 16,
        hidden_dim: 24,
        blocks: 1,
        cond_dim: 8,
        adapter_dim: 8,
        heads: 2,
        attn_radius: 1,
    }
}

fn vlb_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51ed);
    let mut slack = f64::INFINITY;
    let mut count = 0;
    let mut check = |approx: &dyn Approximator,
                     s: &Array2<f64>,
                     x: &TokenSequence,
                     y: &TokenSequence,
                     sched: &BridgeSchedule|
     -> Result<()> {
        let vlb = exact_vlb(approx, s, x, y, sched)?;
        let nll = exact_nll(approx, s, x, y, sched)?;
        if nll.is_finite() {
            slack = slack.min(vlb - nll);
        }
        count += 1;
        Ok(())
    };
    for _ in 0..100 {
        let (k, n, steps) = (rng.gen_range(2..=4), rng.gen_range(1..=2), rng.gen_range(2..=4));
        let sched = BridgeSchedule::cosine(steps)?;
        let phis = (0..steps)
            .map(|_| {
                let rows: Vec<f64> = (0..n).flat_map(|_| random_simplex(k, &mut rng)).collect();
                ProbTable::new(Array2::from_shape_vec((n, k), rows).unwrap())
            })
            .collect::<Result<Vec<_>>>()?;
        let (x, y) = (random_seq(n, k, &mut rng), random_seq(n, k, &mut rng));
        check(&FixedPredictor(phis), &Array2::zeros((n, 1)), &x, &y, &sched)?;
    }
    for _ in 0..50 {
        let k = rng.gen_range(2..=4);
        let n = rng.gen_range(1..=2);
        let sched = BridgeSchedule::cosine(rng.gen_range(2..=4))?;
        let mut model = NeuralApproximator::new(tiny_model(), k, 3, &mut rng)?;
        model.randomize_conditioning(0.5, &mut rng);
        let s = Array2::from_shape_fn((n, 3), |_| rng.gen_range(-1.0..1.0));
        let (x, y) = (random_seq(n, k, &mut rng), random_seq(n, k, &mut rng));
        check(&model, &s, &x, &y, &sched)?;
    }
    let (trained, data) = tiny_trained(seed)?;
    let sched = BridgeSchedule::cosine(4)?;
    for ex in data.test.iter() {
        let x = random_seq(ex.len(), 4, &mut rng);
        check(&trained, &ex.s_features, &x, &ex.y, &sched)?;
    }
    Ok(vec![CheckResult {
        suite: "vlb",
        name: "bound>=nll",
        passed: slack >= -1e-9,
        value: slack,
        tolerance: -1e-9,
        detail: format!("{count} instances (fixed, random and trained models), smallest slack"),
    }])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prop1_suite_passes() {
        let r = run_suite(Suite::Prop1, 1).unwrap();
        assert!(r.iter().all(|c| c.passed), "{}", format_table(&r));
    }

    #[test]
    fn suite_names() {
        assert_eq!("vlb".parse::<Suite>().unwrap(), Suite::Vlb);
        assert!("everything".parse::<Suite>().is_err());
    }
}
