//! Benchmarks for the reasoning head live under `benches/`.
