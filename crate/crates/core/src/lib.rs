//! Optimistic confidence-set exploration (OPERA) for episodic reinforcement
//! learning over hypothesis classes with an admissible Bellman
//! characterization, together with the checkers and instance families used to
//! exercise it.
//!
//! The crate is organized bottom-up:
//!
//! * [`mdp`]: environments, trajectories and exact dynamic programming.
//! * [`hypothesis`]: hypothesis classes and greedy policies.
//! * [`estimation`]: decomposable estimation functions and their checkers.
//! * [`coupling`]: coupling functions and the dominance checks.
//! * [`fe_dimension`]: functional eluder dimension and related bounds.
//! * [`opera`]: confidence sets and the optimistic episode loop.
//! * [`instances`]: linear mixture, witness, Bellman-complete tabular and KNR
//!   families.
//! * [`harness`]: experiment configs, multi-seed runs and checker suites.

pub mod coupling;
pub mod error;
pub mod estimation;
pub mod fe_dimension;
pub mod harness;
pub mod hypothesis;
pub mod instances;
pub mod mdp;
pub mod opera;

pub use error::{OperaError, Result};
pub use harness::{
    run_checkers, run_experiment, AggregateReport, CheckReport, ExperimentConfig, Instance, InstanceSpec, Suite,
};
pub use mdp::{Environment, StateLike, TabularMdp, Transition};
pub use opera::{opera_run, BetaSchedule, OperaConfig, RunLog};
