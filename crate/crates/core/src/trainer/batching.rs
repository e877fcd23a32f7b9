use rand::seq::SliceRandom;
use rand::Rng;

use crate::seeding::{stream_rng, streams};

/// Groups example indices into batches of at most `budget` tokens.
///
/// Examples are sorted by length with seeded tie-breaking so each batch holds
/// similar lengths, then the batch order is shuffled. The plan for an epoch
/// depends only on `(lengths, budget, seed, epoch)`.
pub fn plan_batches(lengths: &[usize], budget: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut rng = stream_rng(seed, streams::BATCH_ORDER, epoch);
    let mut keyed: Vec<(usize, u64, usize)> = lengths
        .iter()
        .enumerate()
        .map(|(i, &len)| (len, rng.gen::<u64>(), i))
        .collect();
    keyed.sort_unstable();
    let mut batches = Vec::new();
    let mut current = Vec::new();
    let mut tokens = 0;
    for (len, _, i) in keyed {
        if !current.is_empty() && tokens + len > budget {
            batches.push(std::mem::take(&mut current));
            tokens = 0;
        }
        current.push(i);
        tokens += len;
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches.shuffle(&mut rng);
    batches
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    proptest! {
        #[test]
        fn plan_partitions_and_respects_budget(
            lengths in prop::collection::vec(1usize..50, 1..200),
            extra in 0usize..200,
            seed in any::<u64>(),
        ) {
            let budget = 50 + extra;
            let plan = plan_batches(&lengths, budget, seed, 3);
            let mut seen: Vec<usize> = plan.iter().flatten().copied().collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..lengths.len()).collect::<Vec<_>>());
            for b in &plan {
                prop_assert!(b.iter().map(|&i| lengths[i]).sum::<usize>() <= budget);
            }
            let again = plan_batches(&lengths, budget, seed, 3);
            prop_assert_eq!(&plan, &again);
            // the batch count does not depend on the epoch
            prop_assert_eq!(plan.len(), plan_batches(&lengths, budget, seed, 4).len());
        }
    }

    #[test]
    fn batches_group_similar_lengths() {
        let lengths: Vec<usize> = (0..100).map(|i| if i % 2 == 0 { 10 } else { 40 }).collect();
        for b in plan_batches(&lengths, 100, 0, 0) {
            let first = lengths[b[0]];
            assert!(b.iter().filter(|&&i| lengths[i] != first).count() <= 1);
        }
    }
}
