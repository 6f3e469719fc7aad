//! Criterion benchmarks for the hot paths of warp2; see `benches/`.
