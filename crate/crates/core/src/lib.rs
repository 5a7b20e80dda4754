//! Learning-initialized distribution system state estimation.
//!
//! The pipeline: generate ground-truth states by multiphase power flow
//! ([`powerflow`]), synthesize noisy measurements expressed as quadratic
//! forms ([`measurement`]), learn a shallow network that maps measurements to
//! an approximate state ([`nn`]), then refine that state with weighted
//! least-squares Gauss-Newton ([`estimator`]).

pub mod bench;
pub mod dataset;
pub mod estimator;
pub mod feeder;
pub mod fixtures;
pub mod measurement;
pub mod nn;
pub mod oracle3bus;
pub mod powerflow;
pub mod sparse;

pub use feeder::{FeederError, FeederModel, Phase, PhaseId};
pub use powerflow::{InjectionScenario, PowerFlowError, StateVector};
