//! The pinned categorical Markov bridge: schedules, rank-one transition
//! kernels and exact samplers.
//!
//! Each position evolves independently under
//! `Q_t(y) = beta_t * I + (1 - beta_t) * y 1^T`, so the next-token law given
//! the current token `z` is the two-point mixture `beta_t * z + (1 - beta_t) * y`.
//! Kernels are always applied in that closed form; the `K x K` matrices are
//! only built by [`cumulative_kernel_check`].
//!
//! Step convention: the marginal of `z_t` uses `beta_bar[t - 1]` with
//! `beta_bar[-1] = 1`, so `z_0 = x` and `z_T = y`.

mod kernel;
mod schedule;

pub use kernel::{
    cumulative_kernel_check, marginal_distribution, reference_rollout, reference_step, sample_categorical,
    sample_marginal, transition_distribution, transition_mixture, BridgeState,
};
pub use schedule::{BridgeSchedule, COSINE_OFFSET};
