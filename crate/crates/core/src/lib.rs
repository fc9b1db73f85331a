//! Two-time-scale continuous-time Markov chains with generator `A(t)/eps + B(t)`.
//!
//! Modules cover the quasi-stationary analysis of the fast part, the
//! asymptotic expansion of transition matrices, the diffusion limit of
//! scaled occupation measures, a thinning simulator, birth-death queue
//! models and the experiment harness behind the `twoscale` binary.

pub mod chain;
pub mod diffusion;
pub mod error;
pub mod expansion;
pub mod generator;
pub mod harness;
pub mod linalg;
pub mod queue;
pub mod simulator;
pub mod stats;

pub use chain::{
    forward_solve, group_inverse, group_inverse_at, nu_derivative, quasi_stationary, transition_matrix,
    GroupInverseBundle, ProbabilityVector,
};
pub use error::{Error, Result};
pub use expansion::{BoundaryLayer, ExpansionSet, LayerDecay};
pub use generator::{GeneratorSpec, PolyTerm, TimeVaryingGenerator, TwoScaleModel, ValidationReport};
