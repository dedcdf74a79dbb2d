//! Criterion benchmarks for the segmentation engine; see `benches/`.
