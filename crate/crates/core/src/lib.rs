//! Federated linear SARSA over finite MDPs.
//!
//! The crate is `no_std` with `alloc`. Models, features, policies, the local SARSA update,
//! the federated averaging loop, and exact model-based oracles live here. File formats and
//! the command line live in the companion `fedsarsa` crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod error;
pub mod features;
pub mod federation;
pub mod linalg;
pub mod markov;
pub mod mdp;
pub mod oracle;
pub mod policy;
pub mod rng;
pub mod sarsa;

pub use error::{ErgodicityFailure, Error, Result};
pub use features::{q_value, FeatureMap, Parameter};
pub use federation::{
    aggregate, client_drift, project_to_ball, run_federation, run_federation_with, AgentExecutor, AgentSlot,
    FederationConfig, FederationOutcome, FederationSetup, IterationView, RoundTrace, Sequential,
};
pub use markov::{mixing_constants, stationary_distribution, MixingConstants, StationaryDistribution};
pub use mdp::{build_shifted_mdp, perturb_family, Mdp, MdpFamily, RewardTable, TransitionKernel};
pub use nalgebra;
pub use oracle::{
    convergence_constants, mean_path_ops, sarsa_fixed_point, td0_fixed_point, verify_perturbation_bound,
    FixedPoint, FixedPointOptions, MeanPathOps, PerturbationReport, ProblemConstants,
};
pub use policy::{improve_policy, PolicyImprovementOp, PolicyTable};
pub use sarsa::{local_step, run_single_agent, AgentState, Observation, StepSchedule};
