//! Shared fixtures for the pipeline benchmarks.

use cascade_core::{LossSpec, SynthConfig, Topology, TraceDataset};

/// Reference-shaped synthetic workload at a benchmark-friendly size.
pub fn workload(n: usize) -> (Topology, TraceDataset, LossSpec) {
    let mut cfg = SynthConfig::reference();
    cfg.n = n;
    let (topo, data) = cascade_core::generate(&cfg).expect("reference config generates");
    let loss = LossSpec::topk(cfg.list_len).expect("valid k");
    (topo, data, loss)
}
