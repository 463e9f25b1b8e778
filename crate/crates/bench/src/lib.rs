//! Criterion benchmarks for the forward and backward engines live in
//! `benches/engines.rs`; run them with `cargo bench -p cbrelab-bench`.
