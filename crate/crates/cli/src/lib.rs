//! Configuration, artifact IO, and driver plumbing behind the `vemoc`
//! binary. Exposed as a library so integration tests can read artifacts
//! back with the same code that wrote them.

pub mod config;
pub mod io;
