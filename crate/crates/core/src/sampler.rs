//! Generation: start at the encoder prior and follow the approximated
//! kernel `beta_t z_t + (1 - beta_t) phi` for `T` steps.

use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::approximator::{Approximator, ConditioningBundle, ProbTable};
use crate::bridge::{sample_categorical, transition_mixture, BridgeSchedule};
use crate::checkpoint::Checkpoint;
use crate::error::{ensure, Error, Result};
use crate::prior::{PairedExample, PriorEncoder};
use crate::seeding::{stream_rng, streams};
use crate::sequence::{argmax, TokenSequence};
use crate::trainer::contiguous_chunks;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleMode {
    /// Draw every transition, the last one included.
    #[default]
    Stochastic,
    /// Draw every transition except the last, which takes the argmax of
    /// the final prediction.
    GreedyFinal,
}

impl FromStr for SampleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stochastic" => Ok(Self::Stochastic),
            "greedy-final" => Ok(Self::GreedyFinal),
            _ => Err(Error::invalid(format!(
                "unknown sample mode {s:?} (stochastic, greedy-final)"
            ))),
        }
    }
}

/// One generated sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub tokens: TokenSequence,
    /// The approximator's prediction at the last step.
    pub final_probs: ProbTable,
    /// `log phi[token]` under `final_probs`; zero at masked positions.
    pub log_probs: Vec<f64>,
    /// States `z_0 ..= z_T`.
    pub trajectory: Vec<TokenSequence>,
}

impl Sample {
    /// Mean of `log_probs` over real positions.
    pub fn mean_log_prob(&self) -> f64 {
        let n = self.tokens.real_count();
        if n == 0 {
            return 0.0;
        }
        self.tokens.real_positions().map(|i| self.log_probs[i]).sum::<f64>() / n as f64
    }
}

/// Runs one chain per prior in lockstep. Chain `i` draws only from
/// `rngs[i]`, so results do not depend on how chains are grouped.
pub fn run_chains<A: Approximator + ?Sized, R: Rng>(
    approx: &A,
    schedule: &BridgeSchedule,
    priors: Vec<TokenSequence>,
    features: &[&Array2<f64>],
    mode: SampleMode,
    rngs: &mut [R],
) -> Result<Vec<Sample>> {
    ensure!(
        priors.len() == features.len() && priors.len() == rngs.len(),
        "{} priors, {} feature sets, {} generators",
        priors.len(),
        features.len(),
        rngs.len()
    );
    let steps = schedule.steps();
    let k = approx.vocab_size();
    for x in &priors {
        ensure!(x.vocab_size() == k, "prior vocabulary {} vs model {k}", x.vocab_size());
    }
    let mut trajectories: Vec<Vec<TokenSequence>> = priors.into_iter().map(|x| vec![x]).collect();
    let mut finals = Vec::new();
    for t in 0..steps {
        let conds = trajectories
            .iter()
            .zip(features)
            .map(|(tr, s)| ConditioningBundle::new((*s).clone(), tr[t].mask().to_vec(), t, steps))
            .collect::<Result<Vec<_>>>()?;
        let items: Vec<_> = trajectories.iter().map(|tr| &tr[t]).zip(&conds).collect();
        let preds = approx.predict_many(&items, t)?;
        let beta = schedule.beta(t);
        let last = t + 1 == steps;
        for ((tr, phi), rng) in trajectories.iter_mut().zip(&preds).zip(rngs.iter_mut()) {
            let mut next = tr[t].clone();
            for i in tr[t].real_positions() {
                let tok = if last && mode == SampleMode::GreedyFinal {
                    argmax(phi.row(i))
                } else {
                    sample_categorical(&transition_mixture(tr[t].get(i), phi.row(i), beta), rng)
                };
                next.set(i, tok);
            }
            tr.push(next);
        }
        if last {
            finals = preds;
        }
    }
    Ok(trajectories
        .into_iter()
        .zip(finals)
        .map(|(trajectory, final_probs)| {
            let tokens = trajectory[steps].clone();
            let log_probs = (0..tokens.len())
                .map(|i| {
                    if tokens.is_real(i) {
                        final_probs.prob(i, tokens.get(i)).ln()
                    } else {
                        0.0
                    }
                })
                .collect();
            Sample {
                tokens,
                final_probs,
                log_probs,
                trajectory,
            }
        })
        .collect())
}

/// Generates one sequence from condition features with a trained checkpoint.
pub fn sample<R: Rng>(
    ck: &Checkpoint,
    s_features: &Array2<f64>,
    mask: &[bool],
    steps: usize,
    mode: SampleMode,
    rng: &mut R,
) -> Result<Sample> {
    ensure!(
        steps == ck.steps(),
        "requested {steps} bridge steps but the checkpoint was trained with {}",
        ck.steps()
    );
    let x = ck.state.encoder.encode(s_features.view(), mask)?;
    let mut one = [ChaCha8Rng::seed_from_u64(rng.gen())];
    let mut out = run_chains(
        &ck.state.model,
        &ck.state.schedule,
        vec![x],
        &[s_features],
        mode,
        &mut one,
    )?;
    Ok(out.remove(0))
}

/// `count` independent stochastic samples for one condition, in generation
/// order; rank them with [`Sample::mean_log_prob`].
pub fn sample_many<R: Rng>(
    ck: &Checkpoint,
    s_features: &Array2<f64>,
    mask: &[bool],
    count: usize,
    rng: &mut R,
) -> Result<Vec<Sample>> {
    ensure!(count >= 1, "count must be at least 1");
    let x = ck.state.encoder.encode(s_features.view(), mask)?;
    let mut rngs: Vec<ChaCha8Rng> = (0..count).map(|_| ChaCha8Rng::seed_from_u64(rng.gen())).collect();
    let feats = vec![s_features; count];
    run_chains(
        &ck.state.model,
        &ck.state.schedule,
        vec![x; count],
        &feats,
        SampleMode::Stochastic,
        &mut rngs,
    )
}

/// One sample per example, `repeat` selecting an independent draw. Example
/// `i` uses its own generator derived from `(seed, i, repeat)`, so results
/// do not depend on batching or thread count.
pub fn sample_examples(
    ck: &Checkpoint,
    examples: &[PairedExample],
    mode: SampleMode,
    seed: u64,
    repeat: u64,
    token_budget: usize,
) -> Result<Vec<Sample>> {
    let bridge = Bridge {
        approx: &ck.state.model,
        encoder: &ck.state.encoder,
        schedule: &ck.state.schedule,
    };
    bridge.sample_examples(examples, mode, seed, repeat, token_budget)
}

/// The pieces needed to generate: prior encoder, schedule and approximator.
#[derive(Clone, Copy)]
pub struct Bridge<'a, A: Approximator + ?Sized> {
    pub approx: &'a A,
    pub encoder: &'a PriorEncoder,
    pub schedule: &'a BridgeSchedule,
}

impl<A: Approximator + ?Sized> Bridge<'_, A> {
    /// See [`sample_examples`].
    pub fn sample_examples(
        &self,
        examples: &[PairedExample],
        mode: SampleMode,
        seed: u64,
        repeat: u64,
        token_budget: usize,
    ) -> Result<Vec<Sample>> {
        let lengths: Vec<usize> = examples.iter().map(|e| e.len()).collect();
        let chunks = contiguous_chunks(&lengths, token_budget.max(1));
        let parts: Vec<Result<Vec<Sample>>> = chunks
            .par_iter()
            .map(|range| {
                let exs = &examples[range.clone()];
                let priors = exs
                    .iter()
                    .map(|e| self.encoder.encode_example(e))
                    .collect::<Result<Vec<_>>>()?;
                let feats: Vec<&Array2<f64>> = exs.iter().map(|e| &e.s_features).collect();
                let mut rngs: Vec<ChaCha8Rng> = range
                    .clone()
                    .map(|i| stream_rng(seed, streams::SAMPLING, ((i as u64) << 16) ^ repeat))
                    .collect();
                run_chains(self.approx, self.schedule, priors, &feats, mode, &mut rngs)
            })
            .collect();
        let mut out = Vec::with_capacity(examples.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approximator::TabularApproximator;

    /// Returns a fixed table per step regardless of the input.
    struct Fixed(Vec<ProbTable>);

    impl Approximator for Fixed {
        fn vocab_size(&self) -> usize {
            self.0[0].vocab_size()
        }

        fn predict(&self, _z: &TokenSequence, _c: &ConditioningBundle, t: usize) -> Result<ProbTable> {
            Ok(self.0[t].clone())
        }
    }

    fn feats(n: usize) -> Array2<f64> {
        Array2::zeros((n, 2))
    }

    #[test]
    fn one_hot_predictor_lands_on_target() {
        let y = TokenSequence::new(vec![2, 0, 3, 1], 4).unwrap();
        let x = TokenSequence::new(vec![0, 0, 0, 0], 4).unwrap();
        let sched = BridgeSchedule::cosine(5).unwrap();
        let approx = Fixed(vec![ProbTable::one_hot(&y); 5]);
        for mode in [SampleMode::Stochastic, SampleMode::GreedyFinal] {
            let mut rngs = [ChaCha8Rng::seed_from_u64(1)];
            let s = run_chains(&approx, &sched, vec![x.clone()], &[&feats(4)], mode, &mut rngs).unwrap();
            assert_eq!(s[0].tokens, y);
            assert_eq!(s[0].trajectory[0], x);
            assert_eq!(s[0].mean_log_prob(), 0.0);
        }
    }

    #[test]
    fn identity_schedule_holds_the_prior_until_the_last_step() {
        let sched = BridgeSchedule::from_betas(vec![1.0, 1.0, 1.0, 0.0]).unwrap();
        let x = TokenSequence::new(vec![1, 1, 0], 3).unwrap();
        let target = TokenSequence::new(vec![2, 0, 2], 3).unwrap();
        let approx = Fixed(vec![ProbTable::one_hot(&target); 4]);
        let mut rngs = [ChaCha8Rng::seed_from_u64(5)];
        let s = run_chains(
            &approx,
            &sched,
            vec![x.clone()],
            &[&feats(3)],
            SampleMode::Stochastic,
            &mut rngs,
        )
        .unwrap();
        for t in 0..4 {
            assert_eq!(s[0].trajectory[t], x);
        }
        assert_eq!(s[0].trajectory[4], target);
    }

    #[test]
    fn final_kernel_equals_prediction() {
        let sched = BridgeSchedule::cosine(6).unwrap();
        let phi = [0.1, 0.6, 0.3];
        for z in 0..3 {
            let q = transition_mixture(z, &phi, sched.beta(5));
            for (a, b) in q.iter().zip(phi) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn masked_positions_are_left_alone() {
        let sched = BridgeSchedule::cosine(4).unwrap();
        let x = TokenSequence::with_mask(vec![1, 0, 1], vec![true, false, true], 3).unwrap();
        let approx = TabularApproximator::uniform(3);
        let mut rngs = [ChaCha8Rng::seed_from_u64(2)];
        let s = run_chains(
            &approx,
            &sched,
            vec![x],
            &[&feats(3)],
            SampleMode::Stochastic,
            &mut rngs,
        )
        .unwrap();
        assert_eq!(s[0].tokens.get(1), 0);
        assert_eq!(s[0].log_probs[1], 0.0);
    }

    #[test]
    fn grouping_does_not_change_chains() {
        let sched = BridgeSchedule::cosine(5).unwrap();
        let approx = TabularApproximator::uniform(4);
        let xs: Vec<TokenSequence> = (0..3).map(|i| TokenSequence::new(vec![i; 6], 4).unwrap()).collect();
        let f = feats(6);
        let mut rngs: Vec<ChaCha8Rng> = (0..3).map(ChaCha8Rng::seed_from_u64).collect();
        let all = run_chains(
            &approx,
            &sched,
            xs.clone(),
            &[&f, &f, &f],
            SampleMode::Stochastic,
            &mut rngs,
        )
        .unwrap();
        for i in 0..3 {
            let mut one = [ChaCha8Rng::seed_from_u64(i as u64)];
            let s = run_chains(
                &approx,
                &sched,
                vec![xs[i].clone()],
                &[&f],
                SampleMode::Stochastic,
                &mut one,
            )
            .unwrap();
            assert_eq!(s[0], all[i]);
        }
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("greedy-final".parse::<SampleMode>().unwrap(), SampleMode::GreedyFinal);
        assert!("argmax".parse::<SampleMode>().is_err());
    }
}
