//! Exact reference computations on tiny instances: every path of the chain
//! is enumerated, so the results carry no sampling noise.
//!
//! A chain over `n` positions, `K` tokens and `T` steps has `K^(n T)`
//! paths. The bounds `K <= 4`, `n <= 2`, `T <= 4` cap this at `4^8 = 65536`
//! paths, each costing `O(n T)` multiplications.

use std::cell::RefCell;
use std::collections::HashMap;

use ndarray::Array2;

use crate::approximator::{Approximator, ConditioningBundle, ProbTable};
use crate::bridge::{transition_mixture, BridgeSchedule};
use crate::error::{ensure, Error, Result};
use crate::losses::{categorical_kl, joint_kl_identity_check, simplified_ce_loss, LambdaMode, LossConfig};
use crate::sequence::{one_hot, TokenSequence};

pub const MAX_VOCAB: usize = 4;
pub const MAX_LEN: usize = 2;
pub const MAX_STEPS: usize = 4;

/// Refuses instances beyond the enumeration bounds.
pub fn check_bounds(vocab: usize, len: usize, steps: usize) -> Result<()> {
    if vocab > MAX_VOCAB || len > MAX_LEN || steps > MAX_STEPS {
        let paths = (vocab as f64).powf((len * steps) as f64);
        return Err(Error::TooLarge(format!(
            "K={vocab}, n={len}, T={steps} gives {paths:.3e} paths; limits are K<={MAX_VOCAB}, n<={MAX_LEN}, T<={MAX_STEPS}"
        )));
    }
    Ok(())
}

/// How the next state is drawn.
pub enum OracleKernel<'a> {
    /// The pinned reference kernel toward the true target.
    Reference,
    /// The approximated kernel with a fixed prediction per step.
    Fixed(&'a [ProbTable]),
    /// The approximated kernel with a prediction computed from the state.
    Model(&'a dyn Fn(usize, &TokenSequence) -> Result<ProbTable>),
}

/// Exact law of a chain started at `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLaw {
    pub vocab: usize,
    pub len: usize,
    /// `marginals[t][s]` = P(z_t = s) for `t = 0..=T`, with the joint
    /// state `s = sum_i z_i K^i`.
    pub marginals: Vec<Vec<f64>>,
    /// Sum of all path probabilities.
    pub total_mass: f64,
    pub paths: usize,
}

impl TrajectoryLaw {
    /// Probability that the final state equals `z`.
    pub fn final_prob(&self, z: &TokenSequence) -> f64 {
        self.marginals[self.marginals.len() - 1][state_index(z.tokens(), self.vocab)]
    }

    /// Per-position marginal of token `k` at step `t`.
    pub fn position_marginal(&self, t: usize, i: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.vocab];
        for (s, &p) in self.marginals[t].iter().enumerate() {
            out[state_tokens(s, self.vocab, self.len)[i]] += p;
        }
        out
    }
}

fn state_index(tokens: &[usize], k: usize) -> usize {
    tokens.iter().rev().fold(0, |acc, &t| acc * k + t)
}

fn state_tokens(mut s: usize, k: usize, n: usize) -> Vec<usize> {
    (0..n)
        .map(|_| {
            let t = s % k;
            s /= k;
            t
        })
        .collect()
}

/// Per-position transition rows keyed by `(step, joint state)`.
type RowCache = HashMap<(usize, usize), Vec<Vec<f64>>>;

/// Enumerates every path of the chain from `x`, multiplying the per-step
/// transition probabilities of all positions.
pub fn enumerate_trajectories(
    x: &TokenSequence,
    y: &TokenSequence,
    schedule: &BridgeSchedule,
    kernel: &OracleKernel,
) -> Result<TrajectoryLaw> {
    x.check_aligned(y)?;
    ensure!(x.real_count() == x.len(), "the oracle takes unmasked sequences");
    let (k, n, steps) = (x.vocab_size(), x.len(), schedule.steps());
    check_bounds(k, n, steps)?;
    if let OracleKernel::Fixed(phis) = kernel {
        ensure!(phis.len() == steps, "{} predictions for {steps} steps", phis.len());
        for p in phis.iter() {
            ensure!(
                p.len() == n && p.vocab_size() == k,
                "prediction shape does not match the instance"
            );
        }
    }
    let states = k.pow(n as u32);
    let mut law = TrajectoryLaw {
        vocab: k,
        len: n,
        marginals: vec![vec![0.0; states]; steps + 1],
        total_mass: 0.0,
        paths: 0,
    };
    let memo: RefCell<RowCache> = RefCell::new(HashMap::new());
    // per-position transition rows out of joint state `s` at step `t`
    let rows = |t: usize, s: usize| -> Result<Vec<Vec<f64>>> {
        if let Some(r) = memo.borrow().get(&(t, s)) {
            return Ok(r.clone());
        }
        let z = state_tokens(s, k, n);
        let beta = schedule.beta(t);
        let r: Vec<Vec<f64>> = match kernel {
            OracleKernel::Reference => (0..n)
                .map(|i| transition_mixture(z[i], &one_hot(y.get(i), k), beta))
                .collect(),
            OracleKernel::Fixed(phis) => (0..n).map(|i| transition_mixture(z[i], phis[t].row(i), beta)).collect(),
            OracleKernel::Model(f) => {
                let phi = f(t, &TokenSequence::new(z.clone(), k)?)?;
                ensure!(
                    phi.len() == n && phi.vocab_size() == k,
                    "model prediction has the wrong shape"
                );
                (0..n).map(|i| transition_mixture(z[i], phi.row(i), beta)).collect()
            }
        };
        memo.borrow_mut().insert((t, s), r.clone());
        Ok(r)
    };

    // depth-first over paths; stack holds (step, state, path probability)
    let mut stack = vec![(0usize, state_index(x.tokens(), k), 1.0f64)];
    while let Some((t, s, p)) = stack.pop() {
        law.marginals[t][s] += p;
        if t == steps {
            law.total_mass += p;
            law.paths += 1;
            continue;
        }
        let r = rows(t, s)?;
        for next in 0..states {
            let toks = state_tokens(next, k, n);
            let q: f64 = toks.iter().enumerate().map(|(i, &tok)| r[i][tok]).product();
            stack.push((t + 1, next, p * q));
        }
    }
    Ok(law)
}

/// A model that ignores its input and returns a fixed table per step.
#[derive(Debug, Clone)]
pub struct FixedPredictor(pub Vec<ProbTable>);

impl Approximator for FixedPredictor {
    fn vocab_size(&self) -> usize {
        self.0[0].vocab_size()
    }

    fn predict(&self, z: &TokenSequence, _cond: &ConditioningBundle, t: usize) -> Result<ProbTable> {
        ensure!(t < self.0.len(), "no prediction for step {t}");
        ensure!(
            self.0[t].len() == z.len(),
            "prediction length differs from the sequence"
        );
        Ok(self.0[t].clone())
    }
}

/// Wraps an approximator and its condition features as a state-dependent
/// kernel for [`enumerate_trajectories`].
pub fn model_kernel<'a, A: Approximator + ?Sized>(
    approx: &'a A,
    s_features: &'a Array2<f64>,
    steps: usize,
) -> impl Fn(usize, &TokenSequence) -> Result<ProbTable> + 'a {
    move |t, z| {
        let cond = ConditioningBundle::new(s_features.clone(), z.mask().to_vec(), t, steps)?;
        approx.predict(z, &cond, t)
    }
}

/// `-ln P(z_T = y)` for the approximated chain started at `x`.
pub fn exact_nll<A: Approximator + ?Sized>(
    approx: &A,
    s_features: &Array2<f64>,
    x: &TokenSequence,
    y: &TokenSequence,
    schedule: &BridgeSchedule,
) -> Result<f64> {
    let f = model_kernel(approx, s_features, schedule.steps());
    let law = enumerate_trajectories(x, y, schedule, &OracleKernel::Model(&f))?;
    Ok(-law.final_prob(y).ln())
}

/// The variational bound computed exactly: for each step, the expected
/// sequence-level divergence between the reference and approximated
/// kernels under the exact reference marginal of `z_t`, summed over steps.
pub fn exact_vlb<A: Approximator + ?Sized>(
    approx: &A,
    s_features: &Array2<f64>,
    x: &TokenSequence,
    y: &TokenSequence,
    schedule: &BridgeSchedule,
) -> Result<f64> {
    x.check_aligned(y)?;
    let (k, n, steps) = (x.vocab_size(), x.len(), schedule.steps());
    check_bounds(k, n, steps)?;
    let reference = enumerate_trajectories(x, y, schedule, &OracleKernel::Reference)?;
    let mut total = 0.0;
    for t in 0..steps {
        let beta = schedule.beta(t);
        for (s, &w) in reference.marginals[t].iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let z = TokenSequence::new(state_tokens(s, k, n), k)?;
            let cond = ConditioningBundle::new(s_features.clone(), z.mask().to_vec(), t, steps)?;
            let phi = approx.predict(&z, &cond, t)?;
            let mut kl = 0.0;
            for i in 0..n {
                let p = transition_mixture(z.get(i), &one_hot(y.get(i), k), beta);
                let q = transition_mixture(z.get(i), phi.row(i), beta);
                kl += categorical_kl(&p, &q, 0.0)?;
            }
            total += w * kl;
        }
    }
    Ok(total)
}

/// Three routes to the expected per-position simplified loss, plus the
/// kernel divergences they are compared against.
#[derive(Debug, Clone, PartialEq)]
pub struct Prop1Report {
    /// Expectation over the keep latent of the case-split divergence.
    pub case_split: f64,
    /// Expectation of the simplified loss with `lambda = 1 - beta`.
    pub simplified: f64,
    /// Expectation of the jump-augmented joint divergence.
    pub joint: f64,
    /// Expected divergence of the marginal kernels, as in the bound.
    pub marginal: f64,
    /// Joint minus marginal divergence on the kept branch (`z = x != y`);
    /// `None` when `x == y`.
    pub kept_branch_gap: Option<f64>,
}

impl Prop1Report {
    pub fn max_discrepancy(&self) -> f64 {
        let v = [self.case_split, self.simplified, self.joint];
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        hi - lo
    }

    pub fn holds(&self, tol: f64) -> bool {
        self.max_discrepancy() <= tol
    }
}

/// Evaluates the keep-latent identity for one position with prior token
/// `x`, target `y` and prediction `phi_row`.
pub fn verify_proposition1(
    beta_t: f64,
    beta_bar_prev: f64,
    x: usize,
    y: usize,
    phi_row: &[f64],
) -> Result<Prop1Report> {
    let k = phi_row.len();
    ensure!(x < k && y < k, "token out of range");
    ensure!(
        (0.0..=1.0).contains(&beta_t) && (0.0..=1.0).contains(&beta_bar_prev),
        "probabilities outside [0, 1]"
    );
    let y1 = one_hot(y, k);
    let ce = categorical_kl(&y1, phi_row, 0.0)?;

    let case_split = beta_bar_prev * (1.0 - beta_t) * ce;

    let sched = BridgeSchedule::from_betas(vec![1.0, beta_t, 0.0])?;
    let cfg = LossConfig {
        lambda_mode: LambdaMode::OneMinusBeta,
        epsilon: 0.0,
        ..LossConfig::default()
    };
    let yseq = TokenSequence::new(vec![y], k)?;
    let phi =
        ProbTable::new(Array2::from_shape_vec((1, k), phi_row.to_vec()).map_err(|e| Error::invalid(e.to_string()))?)?;
    let mut simplified = 0.0;
    for (v, w) in [(true, beta_bar_prev), (false, 1.0 - beta_bar_prev)] {
        if w == 0.0 {
            continue;
        }
        let state = crate::bridge::BridgeState {
            t: 1,
            z: TokenSequence::new(vec![if v { x } else { y }], k)?,
            keep: Some(vec![v]),
        };
        simplified += w * simplified_ce_loss(&state, &yseq, &phi, &sched, &cfg)?;
    }

    let (joint_kept, _) = joint_kl_identity_check(beta_t, &y1, phi_row)?;
    let joint = beta_bar_prev * joint_kept;

    let branch = |z: usize| -> Result<f64> {
        categorical_kl(
            &transition_mixture(z, &y1, beta_t),
            &transition_mixture(z, phi_row, beta_t),
            0.0,
        )
    };
    let kept = branch(x)?;
    let marginal = beta_bar_prev * kept + (1.0 - beta_bar_prev) * branch(y)?;
    Ok(Prop1Report {
        case_split,
        simplified,
        joint,
        marginal,
        kept_branch_gap: (x != y).then_some(joint_kept - kept),
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn seq(t: &[usize], k: usize) -> TokenSequence {
        TokenSequence::new(t.to_vec(), k).unwrap()
    }

    fn random_table<R: Rng>(n: usize, k: usize, rng: &mut R) -> ProbTable {
        let mut a = Array2::from_shape_fn((n, k), |_| rng.gen_range(0.05..1.0));
        for mut r in a.rows_mut() {
            let s = r.sum();
            r.mapv_inplace(|v| v / s);
        }
        ProbTable::new(a).unwrap()
    }

    #[test]
    fn reference_kernel_pins_and_matches_closed_form() {
        let sched = BridgeSchedule::cosine(4).unwrap();
        let x = seq(&[0, 3], 4);
        let y = seq(&[2, 3], 4);
        let law = enumerate_trajectories(&x, &y, &sched, &OracleKernel::Reference).unwrap();
        assert!((law.total_mass - 1.0).abs() < 1e-12);
        assert_eq!(law.paths, 4usize.pow(8));
        assert_eq!(law.final_prob(&y), 1.0);
        for t in 0..=4 {
            for i in 0..2 {
                let keep = sched.keep_probability(t);
                let m = law.position_marginal(t, i);
                let mut want = vec![0.0; 4];
                want[x.get(i)] += keep;
                want[y.get(i)] += 1.0 - keep;
                for (a, b) in m.iter().zip(&want) {
                    assert!((a - b).abs() < 1e-12, "t={t} i={i} {m:?} {want:?}");
                }
            }
        }
    }

    #[test]
    fn one_hot_predictions_pin_the_approximate_chain() {
        let sched = BridgeSchedule::cosine(3).unwrap();
        let x = seq(&[1, 0], 3);
        let target = seq(&[2, 2], 3);
        let phis = vec![ProbTable::one_hot(&target); 3];
        let law = enumerate_trajectories(&x, &target, &sched, &OracleKernel::Fixed(&phis)).unwrap();
        assert!((law.final_prob(&target) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bounds_are_enforced() {
        let sched = BridgeSchedule::cosine(5).unwrap();
        let x = seq(&[0], 2);
        assert!(matches!(
            enumerate_trajectories(&x, &x, &sched, &OracleKernel::Reference),
            Err(Error::TooLarge(_))
        ));
        let sched = BridgeSchedule::cosine(2).unwrap();
        let x = seq(&[0, 1, 2], 3);
        assert!(matches!(
            exact_vlb(&FixedPredictor(vec![]), &Array2::zeros((3, 1)), &x, &x, &sched),
            Err(Error::TooLarge(_))
        ));
    }

    #[test]
    fn uniform_two_step_nll_is_log_two() {
        let sched = BridgeSchedule::from_betas(vec![1.0, 0.0]).unwrap();
        let model = FixedPredictor(vec![ProbTable::uniform(1, 2); 2]);
        let s = Array2::zeros((1, 1));
        let nll = exact_nll(&model, &s, &seq(&[0], 2), &seq(&[1], 2), &sched).unwrap();
        assert!((nll - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictor_has_zero_nll_and_vlb() {
        let sched = BridgeSchedule::cosine(4).unwrap();
        let y = seq(&[3, 1], 4);
        let model = FixedPredictor(vec![ProbTable::one_hot(&y); 4]);
        let s = Array2::zeros((2, 1));
        let x = seq(&[0, 0], 4);
        assert!(exact_nll(&model, &s, &x, &y, &sched).unwrap().abs() < 1e-12);
        assert!(exact_vlb(&model, &s, &x, &y, &sched).unwrap().abs() < 1e-12);
    }

    #[test]
    fn bound_dominates_nll_for_random_predictors() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let k = rng.gen_range(2..=4);
            let n = rng.gen_range(1..=2);
            let steps = rng.gen_range(2..=4);
            let sched = BridgeSchedule::cosine(steps).unwrap();
            let x = TokenSequence::new((0..n).map(|_| rng.gen_range(0..k)).collect(), k).unwrap();
            let y = TokenSequence::new((0..n).map(|_| rng.gen_range(0..k)).collect(), k).unwrap();
            let model = FixedPredictor((0..steps).map(|_| random_table(n, k, &mut rng)).collect());
            let s = Array2::zeros((n, 1));
            let vlb = exact_vlb(&model, &s, &x, &y, &sched).unwrap();
            let nll = exact_nll(&model, &s, &x, &y, &sched).unwrap();
            assert!(vlb - nll >= -1e-9, "vlb {vlb} nll {nll}");
        }
    }

    #[test]
    fn keep_latent_examples() {
        let r = verify_proposition1(0.4, 0.5, 0, 1, &[0.25, 0.5, 0.25]).unwrap();
        let want = 0.5 * 0.6 * -(0.5f64.ln());
        assert!((r.case_split - want).abs() < 1e-12);
        assert!(r.holds(1e-12), "{r:?}");
        assert!((want - 0.20794).abs() < 1e-5);

        let r = verify_proposition1(0.3, 0.7, 2, 1, &[0.0, 1.0, 0.0]).unwrap();
        assert_eq!((r.case_split, r.simplified, r.joint), (0.0, 0.0, 0.0));

        let r = verify_proposition1(0.3, 0.0, 2, 1, &[0.6, 0.1, 0.3]).unwrap();
        assert_eq!((r.case_split, r.simplified, r.joint), (0.0, 0.0, 0.0));
    }

    proptest! {
        #[test]
        fn keep_latent_identity_holds(
            beta in 0.0f64..1.0,
            bar in 0.0f64..1.0,
            raw in prop::collection::vec(0.01f64..1.0, 2..6),
            x in 0usize..6,
            y in 0usize..6,
        ) {
            let k = raw.len();
            let s: f64 = raw.iter().sum();
            let phi: Vec<f64> = raw.iter().map(|v| v / s).collect();
            let r = verify_proposition1(beta, bar, x % k, y % k, &phi).unwrap();
            prop_assert!(r.holds(1e-10), "{:?}", r);
            if let Some(gap) = r.kept_branch_gap {
                prop_assert!(gap >= -1e-12);
            }
        }
    }
}
