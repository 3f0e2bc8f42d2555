//! Game-theoretic interactive lane-change planning toolkit.
//!
//! The crate is organized around four pieces:
//!
//! - [`grid`]: a deterministic, fully enumerable two-lane grid-world driving
//!   environment (dynamics, rewards, collision semantics, world mapping).
//! - [`levelk`]: offline pre-computation of level-k action-value tables for
//!   human drivers via exact value iteration, plus their file format.
//! - [`quantal`]: runtime quantal (softmax) policies over those tables,
//!   categorical beliefs over hidden driver profiles, Bayesian belief
//!   updates, entropy, and information gain.
//! - [`planner`]: the online planner — opponent selection, anytime Monte
//!   Carlo tree search with UCT and an information-gain reward bonus, root
//!   reuse after each real observation, and the stepwise episode driver.
//!
//! Value-iteration sweeps run data-parallel with rayon when the `parallel`
//! feature (on by default) is enabled; a sequential fallback is always
//! available and produces bit-identical tables.

pub mod grid;
pub mod levelk;
pub mod planner;
pub mod quantal;

pub use grid::{
    AgentPhysState, EgoAction, GridParams, GridState, HumanAction, LaneId, RewardParams,
    StepOutcome, WorldSnapshot,
};
pub use levelk::{QTable, QTableSet, TrainConfig, ValueFunction};
pub use planner::{EpisodeStatus, Planner, PlannerConfig};
pub use quantal::{Belief, HiddenProfile, PolicyDist, ProfileSupport};
