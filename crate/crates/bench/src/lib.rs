//! Criterion benchmarks for the detector core. Run with `cargo bench -p spoofprobe-bench`.
