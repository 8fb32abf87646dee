//! Stochastic nested decomposition engine (placeholder during bring-up).
