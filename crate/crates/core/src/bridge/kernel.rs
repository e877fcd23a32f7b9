use rand::Rng;

use super::BridgeSchedule;
use crate::error::{ensure, Result};
use crate::sequence::{one_hot_index, TokenSequence};

/// A point on a bridge trajectory.
///
/// `keep[i] == true` records that position `i` still carries its prior token
/// (the reparameterization latent `v`); it is present only for states drawn
/// from the forward marginal or advanced from one.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgeState {
    pub t: usize,
    pub z: TokenSequence,
    pub keep: Option<Vec<bool>>,
}

impl BridgeState {
    /// Step-0 state: every position holds the prior, nothing has jumped yet.
    pub fn at_prior(x: TokenSequence) -> Self {
        let keep = vec![true; x.len()];
        Self {
            t: 0,
            z: x,
            keep: Some(keep),
        }
    }
}

/// `beta * z + (1 - beta) * y` for one-hot `z` and `y`.
pub fn transition_distribution(z: &[f64], y: &[f64], beta: f64) -> Result<Vec<f64>> {
    ensure!(z.len() == y.len(), "one-hot lengths differ: {} vs {}", z.len(), y.len());
    ensure!((0.0..=1.0).contains(&beta), "beta = {beta} outside [0, 1]");
    let zi = one_hot_index(z)?;
    let yi = one_hot_index(y)?;
    let mut out = vec![0.0; z.len()];
    out[zi] += beta;
    out[yi] += 1.0 - beta;
    Ok(out)
}

/// `beta * e_z + (1 - beta) * target` for an arbitrary simplex `target`.
///
/// This is the approximated kernel when `target` is a predicted row and the
/// reference kernel when it is one-hot.
pub fn transition_mixture(z: usize, target: &[f64], beta: f64) -> Vec<f64> {
    let mut out: Vec<f64> = target.iter().map(|&p| (1.0 - beta) * p).collect();
    out[z] += beta;
    out
}

/// Closed-form law of `z_t` given its endpoints: `keep * x + (1 - keep) * y`
/// where `keep = beta_bar[t-1]`.
pub fn marginal_distribution(x: &[f64], y: &[f64], keep: f64) -> Result<Vec<f64>> {
    ensure!(x.len() == y.len(), "one-hot lengths differ: {} vs {}", x.len(), y.len());
    ensure!((0.0..=1.0).contains(&keep), "beta_bar = {keep} outside [0, 1]");
    let xi = one_hot_index(x)?;
    let yi = one_hot_index(y)?;
    let mut out = vec![0.0; x.len()];
    out[xi] += keep;
    out[yi] += 1.0 - keep;
    Ok(out)
}

/// Draws `z_t` from the forward marginal by sampling the keep latent
/// `v_i ~ Bernoulli(beta_bar[t-1])` per real position.
pub fn sample_marginal<R: Rng + ?Sized>(
    x: &TokenSequence,
    y: &TokenSequence,
    t: usize,
    schedule: &BridgeSchedule,
    rng: &mut R,
) -> Result<BridgeState> {
    x.check_aligned(y)?;
    ensure!(
        t <= schedule.steps(),
        "step {t} beyond schedule length {}",
        schedule.steps()
    );
    let p_keep = schedule.keep_probability(t);
    let mut z = x.clone();
    let mut keep = vec![true; x.len()];
    for i in x.real_positions() {
        let v = rng.gen::<f64>() < p_keep;
        keep[i] = v;
        if !v {
            z.set(i, y.get(i));
        }
    }
    Ok(BridgeState { t, z, keep: Some(keep) })
}

/// Advances one step under the reference kernel `Q_t(y)`.
pub fn reference_step<R: Rng + ?Sized>(
    state: &BridgeState,
    y: &TokenSequence,
    schedule: &BridgeSchedule,
    rng: &mut R,
) -> Result<BridgeState> {
    state.z.check_aligned(y)?;
    if state.t >= schedule.steps() {
        return Err(crate::Error::state(format!(
            "cannot step past t = {} (T = {})",
            state.t,
            schedule.steps()
        )));
    }
    let beta = schedule.beta(state.t);
    let mut next = state.clone();
    next.t += 1;
    for i in y.real_positions() {
        let stay = rng.gen::<f64>() < beta;
        if !stay {
            next.z.set(i, y.get(i));
            if let Some(keep) = next.keep.as_mut() {
                keep[i] = false;
            }
        }
    }
    Ok(next)
}

/// Runs the reference chain from `x` at `t = 0` to `t = T`.
pub fn reference_rollout<R: Rng + ?Sized>(
    x: &TokenSequence,
    y: &TokenSequence,
    schedule: &BridgeSchedule,
    rng: &mut R,
) -> Result<BridgeState> {
    x.check_aligned(y)?;
    let mut state = BridgeState::at_prior(x.clone());
    while state.t < schedule.steps() {
        state = reference_step(&state, y, schedule, rng)?;
    }
    Ok(state)
}

/// Materializes `Q_t ... Q_0` as dense matrices and returns the largest
/// elementwise deviation from `beta_bar_t * I + (1 - beta_bar_t) * y 1^T`.
pub fn cumulative_kernel_check(schedule: &BridgeSchedule, y: &[f64], t: usize) -> Result<f64> {
    let k = y.len();
    ensure!(k <= 64, "dense kernel check limited to K <= 64, got {k}");
    ensure!(
        t < schedule.steps(),
        "step {t} beyond schedule length {}",
        schedule.steps()
    );
    let yi = one_hot_index(y)?;
    let q = |beta: f64| {
        let mut m = vec![0.0; k * k];
        for r in 0..k {
            m[r * k + r] += beta;
            m[yi * k + r] += 1.0 - beta;
        }
        m
    };
    let mut acc = q(schedule.beta(0));
    for s in 1..=t {
        let qs = q(schedule.beta(s));
        let mut next = vec![0.0; k * k];
        for r in 0..k {
            for m in 0..k {
                let a = qs[r * k + m];
                if a == 0.0 {
                    continue;
                }
                for c in 0..k {
                    next[r * k + c] += a * acc[m * k + c];
                }
            }
        }
        acc = next;
    }
    let bb = schedule.beta_bar(t);
    let mut worst: f64 = 0.0;
    for r in 0..k {
        for c in 0..k {
            let closed = if r == c { bb } else { 0.0 } + if r == yi { 1.0 - bb } else { 0.0 };
            worst = worst.max((acc[r * k + c] - closed).abs());
        }
    }
    Ok(worst)
}

/// Inverse-CDF draw from a probability vector. Falls back to the last index
/// with positive mass when rounding leaves the cumulative sum short of `u`.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::sequence::one_hot;

    fn seq(tokens: &[usize], k: usize) -> TokenSequence {
        TokenSequence::new(tokens.to_vec(), k).unwrap()
    }

    #[test]
    fn transition_examples() {
        let (z, y) = (one_hot(0, 3), one_hot(2, 3));
        assert_eq!(transition_distribution(&z, &y, 1.0).unwrap(), vec![1.0, 0.0, 0.0]);
        assert_eq!(transition_distribution(&z, &y, 0.0).unwrap(), vec![0.0, 0.0, 1.0]);
        assert_eq!(transition_distribution(&z, &y, 0.5).unwrap(), vec![0.5, 0.0, 0.5]);
        assert!(transition_distribution(&[0.5, 0.5, 0.0], &y, 0.5).is_err());
        assert!(transition_distribution(&z, &y, 1.5).is_err());
    }

    #[test]
    fn marginal_examples() {
        let (x, y) = (one_hot(0, 3), one_hot(2, 3));
        let m = marginal_distribution(&x, &y, 0.7).unwrap();
        assert!((m[0] - 0.7).abs() < 1e-15 && m[1] == 0.0 && (m[2] - 0.3).abs() < 1e-15);
        let e1 = one_hot(1, 3);
        for keep in [0.0, 0.3, 1.0] {
            assert_eq!(marginal_distribution(&e1, &e1, keep).unwrap(), e1);
        }
        assert_eq!(marginal_distribution(&x, &y, 0.0).unwrap(), y);
    }

    #[test]
    fn marginal_sampler_endpoints() {
        let s = BridgeSchedule::cosine(10).unwrap();
        let x = seq(&[0, 1, 2, 3], 5);
        let y = seq(&[4, 1, 0, 3], 5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let st = sample_marginal(&x, &y, 1, &s, &mut rng).unwrap();
        assert_eq!(st.z, x);
        assert!(st.keep.unwrap().iter().all(|&v| v));
        let st = sample_marginal(&x, &y, 10, &s, &mut rng).unwrap();
        assert_eq!(st.z, y);
        assert!(st.keep.unwrap().iter().all(|&v| !v));
        assert!(sample_marginal(&x, &seq(&[0], 5), 3, &s, &mut rng).is_err());
    }

    #[test]
    fn marginal_sampler_frequency() {
        let s = BridgeSchedule::from_betas(vec![1.0, 0.7, 0.5, 0.0]).unwrap();
        let x = seq(&[0], 3);
        let y = seq(&[2], 3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = 100_000;
        let kept = (0..draws)
            .filter(|_| sample_marginal(&x, &y, 2, &s, &mut rng).unwrap().z.get(0) == 0)
            .count();
        let frac = kept as f64 / draws as f64;
        assert!((frac - 0.7).abs() < 0.01, "{frac}");
    }

    #[test]
    fn keep_latent_consistent_with_tokens() {
        let s = BridgeSchedule::cosine(8).unwrap();
        let x = seq(&[0, 1, 2, 3, 4, 5], 6);
        let y = seq(&[5, 4, 3, 2, 1, 0], 6);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for t in 0..=8 {
            let st = sample_marginal(&x, &y, t, &s, &mut rng).unwrap();
            for (i, &v) in st.keep.as_ref().unwrap().iter().enumerate() {
                assert_eq!(st.z.get(i), if v { x.get(i) } else { y.get(i) });
            }
        }
    }

    #[test]
    fn last_step_pins_target() {
        let s = BridgeSchedule::cosine(6).unwrap();
        let y = seq(&[1, 2, 3], 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let state = BridgeState {
            t: 5,
            z: seq(&[0, 0, 0], 4),
            keep: None,
        };
        let next = reference_step(&state, &y, &s, &mut rng).unwrap();
        assert_eq!(next.z, y);
        assert_eq!(next.t, 6);
        assert!(matches!(
            reference_step(&next, &y, &s, &mut rng),
            Err(crate::Error::InvalidState(_))
        ));
    }

    #[test]
    fn identity_step_keeps_tokens() {
        let s = BridgeSchedule::from_betas(vec![1.0, 1.0, 0.0]).unwrap();
        let x = seq(&[0, 3], 4);
        let y = seq(&[1, 2], 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut st = BridgeState::at_prior(x.clone());
        st = reference_step(&st, &y, &s, &mut rng).unwrap();
        st = reference_step(&st, &y, &s, &mut rng).unwrap();
        assert_eq!(st.z, x);
    }

    #[test]
    fn half_step_frequency() {
        let s = BridgeSchedule::from_betas(vec![1.0, 0.5, 0.0]).unwrap();
        let y = seq(&[2], 3);
        let state = BridgeState {
            t: 1,
            z: seq(&[0], 3),
            keep: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let draws = 100_000;
        let stayed = (0..draws)
            .filter(|_| reference_step(&state, &y, &s, &mut rng).unwrap().z.get(0) == 0)
            .count();
        let frac = stayed as f64 / draws as f64;
        assert!((frac - 0.5).abs() < 0.01, "{frac}");
    }

    #[test]
    fn masked_positions_never_move() {
        let s = BridgeSchedule::cosine(5).unwrap();
        let x = TokenSequence::with_mask(vec![0, 1, 2], vec![true, false, true], 3).unwrap();
        let y = TokenSequence::with_mask(vec![2, 1, 0], vec![true, false, true], 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let end = reference_rollout(&x, &y, &s, &mut rng).unwrap();
        assert_eq!(end.z.tokens(), &[2, 1, 0]);
        let x2 = TokenSequence::with_mask(vec![0, 0, 2], vec![true, false, true], 3).unwrap();
        let y2 = TokenSequence::with_mask(vec![2, 1, 0], vec![true, false, true], 3).unwrap();
        let end = reference_rollout(&x2, &y2, &s, &mut rng).unwrap();
        assert_eq!(end.z.get(1), 0);
    }

    #[test]
    fn dense_product_examples() {
        let y = one_hot(1, 4);
        let s = BridgeSchedule::from_betas(vec![1.0, 0.5, 0.0]).unwrap();
        assert!(cumulative_kernel_check(&s, &y, 2).unwrap() <= 1e-12);
        assert_eq!(s.beta_bar(2), 0.0);
        let s = BridgeSchedule::from_betas(vec![1.0, 0.5, 0.25, 0.0]).unwrap();
        assert_eq!(s.beta_bar(2), 0.125);
        for t in 0..4 {
            assert!(cumulative_kernel_check(&s, &y, t).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn categorical_sampler_skips_zero_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let i = sample_categorical(&[0.0, 0.3, 0.0, 0.7, 0.0], &mut rng);
            assert!(i == 1 || i == 3);
        }
    }
}
