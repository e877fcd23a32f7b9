//! Deterministic prior: a position-wise encoder from condition features to
//! tokens, and the synthetic paired datasets it is trained on.

mod dataset;
mod encoder;
mod synthetic;

pub use dataset::{read_examples, write_examples, DatasetSplits, Split};
pub use encoder::{EncoderFitConfig, PriorEncoder};
pub use synthetic::{generate_synthetic, PairedExample, SyntheticTaskSpec, TaskKind, TaskRules};
