//! Criterion benchmarks for the inverse-Hessian-vector product backends.
//!
//! Run with `cargo bench -p hypergrad-bench`; the benchmarks live under `benches/`.
