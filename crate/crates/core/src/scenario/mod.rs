//! Scenario files, canned topologies and the full-stack simulation.

pub mod spec;
pub mod summary;
mod world;

use rayon::prelude::*;

use crate::simcore::{SimTime, Trace};

pub use spec::{canned, load_scenario, serialize, ScenarioError, TopologySpec, CANNED};
pub use summary::{BatchSummary, ProbeStats, RunSummary, Stats};
pub use world::{Fault, Simulation};

/// Run `spec` under its own seed for `until_s` simulated seconds (the scenario's value when `None`).
pub fn run(spec: &TopologySpec, until_s: Option<u64>) -> Result<(RunSummary, Trace), ScenarioError> {
    run_seed(spec, spec.seed, until_s)
}

pub fn run_seed(spec: &TopologySpec, seed: u64, until_s: Option<u64>) -> Result<(RunSummary, Trace), ScenarioError> {
    spec.validate()?;
    let mut sim = Simulation::from_spec(spec, seed)?;
    sim.run_until(SimTime::from_secs(until_s.unwrap_or(spec.until_s)));
    Ok((sim.summary(), sim.trace().clone()))
}

/// Run seeds `spec.seed .. spec.seed + n` in parallel.
pub fn run_batch(spec: &TopologySpec, n: u64, until_s: Option<u64>) -> Result<BatchSummary, ScenarioError> {
    spec.validate()?;
    let runs = (spec.seed..spec.seed + n)
        .into_par_iter()
        .map(|seed| run_seed(spec, seed, until_s).map(|(s, _)| s))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(BatchSummary::from_runs(&spec.name, runs))
}
