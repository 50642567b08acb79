//! Criterion benchmarks for the scan kernels live under `benches/`.
