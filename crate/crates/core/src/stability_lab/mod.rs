//! Executable stability theory: Hoffman bounds, solution-map Lipschitz
//! probes, vanishing-noise rates and Gibbs-prior coercivity.

mod coercivity;
mod polyhedral;
mod rates;
mod solution_map;

use std::fmt;

pub use coercivity::{
    gibbs_coercivity, max_channel_l1, prior_normalizability_check, sampled_coercivity, Coercivity, Normalizability,
    MAX_EXACT_VARIABLES,
};
pub use polyhedral::{
    feasible_subsets, hoffman_constant, hoffman_distance_check, hoffman_inner_minimum, project_onto_polyhedron,
    sampled_inner_minimum, HoffmanCheck, PolyhedralSystem, MAX_ROWS, MAX_VARIABLES, RANK_THRESHOLD,
};
pub use rates::{fit_slope, geometric_deltas, vanishing_noise_rates, RateExperiment, RateResult, LAMBDA_FLOOR};
pub use solution_map::{
    empirical_mask_lipschitz, empirical_solution_map_lipschitz, inverse_norm, mask_sensitivity_bound, LipschitzReport,
};

/// Ordered `key: value` lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    entries: Vec<(String, String)>,
}

impl Report {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl fmt::Display) -> &mut Self {
        self.entries.push((key.into(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k}: {v}")?;
        }
        Ok(())
    }
}

/// Renders a float list as comma-separated shortest round-trip decimals.
pub fn join_values(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(",")
}
