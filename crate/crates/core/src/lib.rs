//! Incentive-mediated multi-agent policy-gradient learning in small social
//! dilemmas, with strategy-based manipulations and an adaptive
//! multi-objective adversary.
//!
//! * [`env`]: Escape Room, iterated Prisoner's Dilemma and Stag Hunt.
//! * [`nn`]: dense networks with hand-written score and incentive gradients.
//! * [`lio`]: bi-level learned-incentive training.
//! * [`manip`]: partial communication, fake incentives, bypass, reverse.
//! * [`admo`]: the adaptive multi-objective adversary.
//! * [`harness`]: seeded multi-trial runs, convergence and aggregation.

pub mod admo;
pub mod env;
pub mod harness;
pub mod lio;
pub mod manip;
pub mod nn;

pub use admo::{AdmoController, AdmoSettings, AuditRecord};
pub use env::{GameKind, GameSpec};
pub use harness::{aggregate, convergence_episode, run_trial, run_trials, ExperimentConfig, RunRecord, Summary};
pub use lio::{AgentConfig, Population, Trainer};
pub use manip::ManipulationMode;
pub use nn::ParamVector;
