//! Run configuration: solver and engine knobs, shared by the CLI and the
//! library entry points. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config error in {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("config error: {0}")]
    Invalid(String),
}

/// Cut families added in the backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CutKind {
    /// Integer optimality cuts.
    I,
    /// Lagrangian cuts by subgradient.
    L,
    /// Strengthened Benders cuts.
    SB,
    /// Lagrangian cuts by multiplier reuse, every `reuse_every` iterations.
    #[serde(rename = "reuse")]
    Reuse,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Relative optimality gap terminating the solve.
    pub gap: f64,
    pub max_iters: usize,
    /// Scenario paths sampled per iteration.
    pub samples_per_iter: usize,
    pub cut_recipe: Vec<CutKind>,
    /// Multiplier reuse cadence in iterations.
    pub reuse_every: usize,
    /// Snap threshold of the multiplier-reuse walk.
    pub epsilon: f64,
    /// Iteration budget of the multiplier-reuse walk.
    pub imax: usize,
    /// Step toward the integer-optimality anchor in multiplier reuse.
    pub alpha: f64,
    /// Binary expansion precision of the continuous state.
    pub precision_s: f64,
    pub seed: u64,
    pub workers: usize,
    /// Stop after this many iterations without lower-bound improvement.
    pub stall_iters: usize,
    /// Start with Lagrangian cuts over continuous states, switching to the
    /// binary expansion once the lower bound stalls for three iterations.
    pub continuous_start: bool,
    /// Relative MIP gap for nodal subproblems.
    pub nodal_gap: f64,
    /// Absolute violation tolerance in row generation.
    pub violation_tol: f64,
    /// Cap on row-generation resolves.
    pub row_gen_cap: usize,
    /// Also generate cuts at every atom discovered by the dual pricing.
    pub cuts_at_atoms: bool,
    /// Refresh the upper-bound table over the whole tree each iteration.
    pub full_tree_ub: bool,
    /// Multiplier pool capacity per node.
    pub multiplier_capacity: usize,
    /// Node-count cap for the extensive two-stage model.
    pub extensive_cap: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            gap: 1e-6,
            max_iters: 200,
            samples_per_iter: 3,
            cut_recipe: vec![CutKind::I, CutKind::SB, CutKind::Reuse],
            reuse_every: 5,
            epsilon: 0.3,
            imax: 15,
            alpha: 0.5,
            precision_s: 1.0,
            seed: 0,
            workers: 1,
            stall_iters: 5,
            continuous_start: false,
            nodal_gap: 1e-6,
            violation_tol: 1e-7,
            row_gen_cap: 500,
            cuts_at_atoms: false,
            full_tree_ub: false,
            multiplier_capacity: 200,
            extensive_cap: 5000,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.display().to_string(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.gap < 0.0 {
            return Err(ConfigError::Invalid("gap must be nonnegative".into()));
        }
        if self.precision_s <= 0.0 {
            return Err(ConfigError::Invalid("precision_s must be positive".into()));
        }
        if self.samples_per_iter == 0 {
            return Err(ConfigError::Invalid("samples_per_iter must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(ConfigError::Invalid("alpha must lie in [0, 1]".into()));
        }
        if self.cut_recipe.is_empty() {
            return Err(ConfigError::Invalid("cut_recipe must not be empty".into()));
        }
        if self.workers == 0 {
            return Err(ConfigError::Invalid("workers must be at least 1".into()));
        }
        Ok(())
    }

    pub fn solver(&self) -> crate::milp::Solver {
        crate::milp::Solver {
            rel_gap: self.nodal_gap,
            row_gen_cap: self.row_gen_cap,
            dump_dir: None,
        }
    }

    pub fn lagrangian(&self) -> crate::cuts::LagrangianConfig {
        crate::cuts::LagrangianConfig {
            alpha: self.alpha,
            epsilon: self.epsilon,
            i_max: self.imax,
            row_tol: self.violation_tol,
            ..Default::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected_with_key_name() {
        let err = serde_json::from_str::<RunConfig>("{\"gaap\": 0.1}").unwrap_err();
        assert!(err.to_string().contains("gaap"));
    }

    #[test]
    fn recipe_tokens_parse() {
        let cfg: RunConfig =
            serde_json::from_str("{\"cut_recipe\": [\"I\", \"L\", \"SB\", \"reuse\"]}").unwrap();
        assert_eq!(
            cfg.cut_recipe,
            vec![CutKind::I, CutKind::L, CutKind::SB, CutKind::Reuse]
        );
    }
}
