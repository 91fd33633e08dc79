//! Cost model for encrypted queries and the storage benchmark harness.

mod cost;
mod harness;
mod stress;
mod workload;

pub use cost::{
    estimate_client_time, estimate_pir, estimate_query, estimate_server_time, verify_cost_model, CostEstimate,
    CostLine, CostReport, CountMismatch, Side,
};
pub use harness::{
    percentiles, run_benchmarks, BenchReport, BenchRow, Engine, EnvInfo, Scenario, REFERENCE_MEDIANS_US,
};
pub use stress::{stress_run, StressConfig, StressReport};
pub use workload::{map_sample, sample_keys, sample_keys_in, SkewParams, WorkloadSpec, KIB};
