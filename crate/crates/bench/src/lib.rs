//! Inputs shared by the benchmarks.

use colosla_core::rulesdb::{example_rules, RuleSet};
use colosla_core::telemetry::{simulate, SimConfig, TelemetryPoint};

/// One rack, `hours` of telemetry with scheduled episodes.
pub fn telemetry(hours: i64) -> (RuleSet, Vec<TelemetryPoint>) {
    let rules = example_rules();
    let pts = simulate(&SimConfig::scheduled(1, 1, hours * 3600, 4 * 3600), &rules).expect("simulate");
    (rules, pts)
}
