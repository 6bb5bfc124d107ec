//! Criterion benchmarks for the hot paths of `fac-core`; see `benches/`.
