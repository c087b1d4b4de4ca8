//! Shared fixtures for the benchmarks.

use wnsf_core::{simulate_dataset, CascadeModel, DataRecord, InputSpec, OrderSpec};

/// Benchmark-network record of length `n` with the default inputs.
pub fn record(n: usize, seed: u64) -> DataRecord {
    simulate_dataset(&CascadeModel::benchmark(), &InputSpec::default(), n, 0, seed)
        .expect("benchmark network simulates")
}

pub fn orders() -> [OrderSpec; 3] {
    let m = CascadeModel::benchmark();
    [m.g1.order_spec(), m.g2.order_spec(), m.g3.order_spec()]
}
