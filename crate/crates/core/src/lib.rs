//! Multi-stage distributionally robust optimization engine for dynamic
//! transmission line switching during wildfires.
//!
//! The library is organized around a scenario tree of wildfire states
//! ([`tree`]), a DC-OPF switching model per tree node ([`grid`], [`nodal`]),
//! a moment ambiguity set over line-survival vectors whose worst case is
//! priced by dualization and polynomial separation ([`ambiguity`]), three
//! families of cutting planes on the cost-to-go functions ([`cuts`]), a
//! stochastic nested decomposition solver with deterministic upper bounds
//! ([`snd`]), and extraction/simulation of operating policies ([`policies`]).
//!
//! All mixed-integer and linear programs go through the solver-agnostic
//! adapter in [`milp`], currently backed by HiGHS.

pub mod ambiguity;
pub mod config;
pub mod cuts;
pub mod grid;
pub mod milp;
pub mod nodal;
pub mod policies;
pub mod rng;
pub mod snd;
pub mod state;
pub mod tree;

pub use config::RunConfig;
pub use grid::GridInstance;
pub use tree::ScenarioTree;
