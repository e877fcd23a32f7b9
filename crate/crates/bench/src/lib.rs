//! Criterion benchmarks for bridgekit; see `benches/`.
