//! Error type shared by the solver crate.

use alloc::string::String;
use core::fmt;

/// Errors produced while defining a problem or evolving a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A user-supplied callback returned a vector or matrix of the wrong
    /// shape. The message names the callback and both shapes.
    ShapeMismatch(String),
    /// A user-supplied callback returned a NaN or infinite entry.
    NonFiniteValue(String),
    /// A problem definition field is inconsistent (empty dimensions,
    /// bounds reversed, more than 64 inequality constraints, ...).
    InvalidDefinition(String),
    /// A configuration value is out of range (non-positive gain,
    /// tolerance, grid size below two, ...).
    InvalidConfig(String),
    /// A query point lies outside the domain it must belong to
    /// (interpolation time outside [t0, t_f], empty bisection bracket).
    OutOfDomain(String),
    /// A derived table was built from a different trajectory revision
    /// than the one it is being used with.
    StaleInput(String),
    /// An iteration budget was exhausted (integrator step limit).
    IterationLimit(String),
    /// The adaptive integrator could not take a step at the minimum
    /// step size. The message records tau, the step size and the reason
    /// the last attempt failed.
    StepSizeUnderflow(String),
    /// The working-set loop failed to settle on a consistent active set.
    ActiveSetCycle(String),
    /// A requested built-in problem name is unknown.
    UnknownProblem(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            Self::NonFiniteValue(msg) => write!(f, "non-finite value: {msg}"),
            Self::InvalidDefinition(msg) => write!(f, "invalid problem definition: {msg}"),
            Self::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            Self::OutOfDomain(msg) => write!(f, "out of domain: {msg}"),
            Self::StaleInput(msg) => write!(f, "stale input: {msg}"),
            Self::IterationLimit(msg) => write!(f, "iteration limit: {msg}"),
            Self::StepSizeUnderflow(msg) => write!(f, "step size underflow: {msg}"),
            Self::ActiveSetCycle(msg) => write!(f, "active set cycle: {msg}"),
            Self::UnknownProblem(name) => write!(f, "unknown problem: {name}"),
        }
    }
}

impl core::error::Error for Error {}
