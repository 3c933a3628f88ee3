//! Trajectory-evolution solver for optimal control problems with terminal
//! constraints.
//!
//! The solver treats the optimal trajectory of a continuous-time problem
//!
//! ```text
//!     minimize   J = phi(x(tf), tf) + integral of L(x, u, t) over [t0, tf]
//!     subject to dx/dt = f(x, u, t),   x(t0) = x0,
//!                gE(x(tf), tf)  = 0,
//!                gI(x(tf), tf) <= 0,
//! ```
//!
//! as the stable equilibrium of a flow in a virtual time variable `tau`.
//! Starting from any trajectory that satisfies the dynamics, the control
//! field, the state field and (optionally) the terminal time evolve along
//! the negative variation gradient of the cost while terminal constraints
//! are steered to feasibility. Integrating that flow with an adaptive
//! Runge-Kutta scheme drives the trajectory to a point where the
//! first-order optimality conditions hold, without ever introducing
//! costate variables as unknowns.
//!
//! Module map:
//!
//! | module       | contents                                                  |
//! |--------------|-----------------------------------------------------------|
//! | [`ocp`]      | problem definition, trajectory container, cost evaluation |
//! | [`problems`] | built-in benchmark problems                               |
//! | [`audit`]    | finite-difference audit of user-supplied derivatives      |
//! | [`grid`]     | uniform time grid, trapezoid quadrature, interpolation    |
//! | [`sweeps`]   | backward transition-matrix and adjoint sweeps             |
//! | [`evolution`]| multiplier system, working set, evolution right-hand side |
//! | [`rk45`]     | embedded Dormand-Prince 5(4) step                         |
//! | [`integrator`]| adaptive integration of the flow, history recording      |
//! | [`verify`]   | optimality residuals, costate reconstruction, oracles     |
//!
//! The crate is `no_std`-compatible (`alloc` is required); enable the
//! `libm` feature instead of the default `std` to build without the
//! standard library.

#![cfg_attr(not(feature = "std"), no_std)]
#![deny(unsafe_code)]

#[cfg(not(any(feature = "std", feature = "libm")))]
compile_error!("enable either the `std` or the `libm` feature");

extern crate alloc;

pub mod audit;
pub mod error;
pub mod evolution;
pub mod grid;
pub mod integrator;
pub mod ocp;
pub mod problems;
pub mod rk45;
pub mod sweeps;
pub mod verify;

pub use error::Error;
pub use ocp::{OcpDefinition, TrajectoryState};
