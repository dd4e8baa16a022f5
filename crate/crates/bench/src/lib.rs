//! Criterion benchmarks for `uniact-core`; see `benches/core.rs`.
