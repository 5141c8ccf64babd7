use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::netmodel::CounterRow;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeStats {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
}

/// Outcome of one seeded run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scenario: String,
    pub seed: u64,
    pub until_s: f64,
    /// First end-to-end data delivery, from the cold start at t = 0.
    pub setup_time_s: Option<f64>,
    /// Data tunnel down minus the first kill fault.
    pub disruption_time_s: Option<f64>,
    /// Last failure event of the key chain when setup never completed.
    pub failure: Option<String>,
    pub probes: ProbeStats,
    /// Trace record counts by kind.
    pub events: BTreeMap<String, u64>,
    pub traffic: Vec<CounterRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Option<Stats> {
        if values.is_empty() {
            return None;
        }
        let sum: f64 = values.iter().sum();
        Some(Stats {
            count: values.len(),
            mean: sum / values.len() as f64,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub scenario: String,
    pub seeds: Vec<u64>,
    pub setup_time_s: Option<Stats>,
    pub disruption_time_s: Option<Stats>,
    /// Runs that never delivered end-to-end data.
    pub setup_failures: usize,
    pub runs: Vec<RunSummary>,
}

impl BatchSummary {
    /// Aggregate per-seed summaries; the result does not depend on their order.
    pub fn from_runs(scenario: &str, mut runs: Vec<RunSummary>) -> Self {
        runs.sort_by_key(|r| r.seed);
        let setup: Vec<f64> = runs.iter().filter_map(|r| r.setup_time_s).collect();
        let disruption: Vec<f64> = runs.iter().filter_map(|r| r.disruption_time_s).collect();
        BatchSummary {
            scenario: scenario.to_owned(),
            seeds: runs.iter().map(|r| r.seed).collect(),
            setup_time_s: Stats::of(&setup),
            disruption_time_s: Stats::of(&disruption),
            setup_failures: runs.len() - setup.len(),
            runs,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_value_stats() {
        let s = Stats::of(&[3.5]).unwrap();
        assert_eq!((s.mean, s.min, s.max, s.count), (3.5, 3.5, 3.5, 1));
        assert!(Stats::of(&[]).is_none());
    }

    #[test]
    fn stats_bounds() {
        let s = Stats::of(&[1.0, 4.0, 2.5]).unwrap();
        assert_eq!((s.min, s.max), (1.0, 4.0));
        assert!((s.mean - 2.5).abs() < 1e-12);
    }
}
