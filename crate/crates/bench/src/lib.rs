//! Criterion microbenchmarks for vkd-core live under `benches/`.
//! Run with `cargo bench -p vkd-bench`.
