use std::hint::black_box;

use bridgekit::approximator::{Approximator, ConditioningBundle, NeuralApproximator, NeuralConfig, PackedBatch};
use bridgekit::bridge::{reference_rollout, sample_marginal, transition_mixture, BridgeSchedule};
use bridgekit::prior::{generate_synthetic, SyntheticTaskSpec};
use bridgekit::sampler::{run_chains, SampleMode};
use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn kernels(c: &mut Criterion) {
    let schedule = BridgeSchedule::cosine(25).unwrap();
    let ex = &generate_synthetic(&SyntheticTaskSpec::default(), 1).unwrap()[0];
    let x = ex.x.clone().unwrap_or_else(|| ex.y.clone());
    let target = vec![1.0 / 20.0; 20];
    c.bench_function("transition_mixture_k20", |b| {
        b.iter(|| transition_mixture(black_box(3), black_box(&target), black_box(0.7)))
    });
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    c.bench_function("sample_marginal", |b| {
        b.iter(|| sample_marginal(&x, &ex.y, 12, &schedule, &mut rng).unwrap())
    });
    c.bench_function("reference_rollout_t25", |b| {
        b.iter(|| reference_rollout(&x, &ex.y, &schedule, &mut rng).unwrap())
    });
}

fn model_inputs(count: usize) -> (NeuralApproximator, Vec<bridgekit::prior::PairedExample>) {
    let examples = generate_synthetic(&SyntheticTaskSpec::default(), count).unwrap();
    let k = examples[0].y.vocab_size();
    let d = examples[0].s_features.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = NeuralApproximator::new(NeuralConfig::default(), k, d, &mut rng).unwrap();
    (model, examples)
}

fn forward_backward(c: &mut Criterion) {
    let (model, examples) = model_inputs(16);
    let conds: Vec<ConditioningBundle> = examples
        .iter()
        .map(|e| ConditioningBundle::new(e.s_features.clone(), e.mask().to_vec(), 5, 10).unwrap())
        .collect();
    let items: Vec<_> = examples.iter().zip(&conds).map(|(e, c)| (&e.y, c)).collect();
    let batch = PackedBatch::new(&items).unwrap();
    c.bench_function("forward_16_seqs", |b| b.iter(|| model.forward(&batch, true).unwrap()));
    let cache = model.forward(&batch, true).unwrap();
    let dprobs = Array2::from_elem((batch.rows(), model.vocab_size()), 1e-3);
    c.bench_function("backward_16_seqs", |b| {
        b.iter(|| model.backward(&batch, &cache, black_box(&dprobs)))
    });
}

fn sampler(c: &mut Criterion) {
    let (model, examples) = model_inputs(8);
    let schedule = BridgeSchedule::cosine(10).unwrap();
    let priors: Vec<_> = examples.iter().map(|e| e.y.clone()).collect();
    let feats: Vec<&Array2<f64>> = examples.iter().map(|e| &e.s_features).collect();
    c.bench_function("sample_8_chains_t10", |b| {
        b.iter_batched(
            || (0..8).map(ChaCha8Rng::seed_from_u64).collect::<Vec<_>>(),
            |mut rngs| {
                run_chains(
                    &model,
                    &schedule,
                    priors.clone(),
                    &feats,
                    SampleMode::Stochastic,
                    &mut rngs,
                )
                .unwrap()
            },
            BatchSize::SmallInput,
        )
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = kernels, forward_backward, sampler
}
criterion_main!(benches);
