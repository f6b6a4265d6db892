//! Criterion benchmarks for the hot paths of `refgen-core`; see `benches/`.
