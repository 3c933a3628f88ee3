//! Uniform time grid on a moving horizon, trapezoid quadrature, and
//! piecewise-linear interpolation.
//!
//! Node values live at fixed normalized abscissae `sigma_i = i/(N-1)`;
//! the physical node times `t_i = t0 + sigma_i (t_f - t0)` stretch with
//! the terminal time so that the last node always sits exactly at `t_f`,
//! where the terminal constraints are evaluated. When `t_f` moves, node
//! values pick up the convective correction of [`node_motion_term`].

use alloc::format;
use nalgebra::{DMatrix, DVector};

use crate::error::Error;
use crate::ocp::{OcpDefinition, TrajectoryState};

#[allow(unused_imports)]
use num_traits::Float;

/// Uniform grid of `n_nodes` points on `[t0, t_f]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub n_nodes: usize,
    pub t0: f64,
    pub t_f: f64,
}

impl TimeGrid {
    pub fn new(n_nodes: usize, t0: f64, t_f: f64) -> Result<Self, Error> {
        if n_nodes < 2 {
            return Err(Error::InvalidConfig(format!(
                "grid needs at least 2 nodes, got {n_nodes}"
            )));
        }
        if !(t_f > t0) || !t0.is_finite() || !t_f.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "grid requires finite t_f > t0, got t0={t0}, t_f={t_f}"
            )));
        }
        Ok(Self { n_nodes, t0, t_f })
    }

    /// Normalized abscissa of node `i`: `i/(N-1)`, 0 at `t0`, 1 at `t_f`.
    pub fn sigma(&self, i: usize) -> f64 {
        i as f64 / (self.n_nodes - 1) as f64
    }

    /// Physical time of node `i`.
    pub fn node_time(&self, i: usize) -> f64 {
        self.t0 + self.sigma(i) * (self.t_f - self.t0)
    }

    /// Physical spacing between adjacent nodes.
    pub fn spacing(&self) -> f64 {
        (self.t_f - self.t0) / (self.n_nodes - 1) as f64
    }

    /// All normalized abscissae as a vector.
    pub fn sigmas(&self) -> DVector<f64> {
        DVector::from_fn(self.n_nodes, |i, _| self.sigma(i))
    }

    /// Trapezoid weight of node `i`: `spacing/2` at the ends, `spacing`
    /// inside. These weights are shared by every integral the solver
    /// forms so that discrete identities cancel exactly.
    pub fn weight(&self, i: usize) -> f64 {
        let h = self.spacing();
        if i == 0 || i == self.n_nodes - 1 {
            0.5 * h
        } else {
            h
        }
    }
}

/// Composite trapezoid integral of each column of `values` over the grid.
///
/// Summation runs in ascending node order so results are reproducible
/// bit-for-bit across runs.
pub fn quadrature(values: &DMatrix<f64>, grid: &TimeGrid) -> Result<DVector<f64>, Error> {
    if values.nrows() != grid.n_nodes {
        return Err(Error::ShapeMismatch(format!(
            "quadrature: expected {} rows, got {}",
            grid.n_nodes,
            values.nrows()
        )));
    }
    let n = grid.n_nodes;
    let h = grid.spacing();
    let k = values.ncols();
    let mut out = DVector::zeros(k);
    for j in 0..k {
        let mut acc = 0.5 * values[(0, j)];
        for i in 1..n - 1 {
            acc += values[(i, j)];
        }
        acc += 0.5 * values[(n - 1, j)];
        let v = acc * h;
        if !v.is_finite() {
            return Err(Error::NonFiniteValue(format!(
                "quadrature: column {j} integrates to {v}"
            )));
        }
        out[j] = v;
    }
    Ok(out)
}

/// Trapezoid integral of a scalar sequence sampled on the grid.
pub fn quadrature_scalar(values: &[f64], grid: &TimeGrid) -> Result<f64, Error> {
    let m = DMatrix::from_iterator(values.len(), 1, values.iter().copied());
    Ok(quadrature(&m, grid)?[0])
}

/// Piecewise-linear interpolation of the trajectory at time `t`.
///
/// Returns the node values exactly (bitwise) when `t` equals a node time.
pub fn interpolate(traj: &TrajectoryState, t: f64) -> Result<(DVector<f64>, DVector<f64>), Error> {
    let grid = traj.grid();
    if !(t >= grid.t0 && t <= grid.t_f) {
        return Err(Error::OutOfDomain(format!(
            "interpolation time {t} outside [{}, {}]",
            grid.t0, grid.t_f
        )));
    }
    let n = grid.n_nodes;
    let s = (t - grid.t0) / (grid.t_f - grid.t0) * (n - 1) as f64;
    let nearest = (s.round() as usize).min(n - 1);
    if t == grid.node_time(nearest) {
        return Ok((traj.state_at(nearest), traj.control_at(nearest)));
    }
    let i = (s.floor() as usize).min(n - 2);
    let ti = grid.node_time(i);
    let alpha = (t - ti) / (grid.node_time(i + 1) - ti);
    let x = traj.state_at(i) * (1.0 - alpha) + traj.state_at(i + 1) * alpha;
    let u = traj.control_at(i) * (1.0 - alpha) + traj.control_at(i + 1) * alpha;
    Ok((x, u))
}

/// Convective corrections for node values when `t_f` evolves.
///
/// Node `i` sits at `t_i = t0 + sigma_i (t_f - t0)`, so a terminal-time
/// rate `dtf_dtau` drags it through physical time at `sigma_i * dtf_dtau`.
/// The state rows advect with the dynamics, `f(x_i, u_i, t_i)`, and the
/// control rows with the grid time-derivative of `u` (second-order finite
/// differences, one-sided at the ends). Columns `0..n` hold the state
/// correction, columns `n..n+m` the control correction. Row 0 is zero:
/// the initial node never moves.
pub fn node_motion_term(
    traj: &TrajectoryState,
    def: &OcpDefinition,
    dtf_dtau: f64,
) -> Result<DMatrix<f64>, Error> {
    let grid = traj.grid();
    let nn = grid.n_nodes;
    let n = def.n;
    let m = def.m;
    let mut out = DMatrix::zeros(nn, n + m);
    if dtf_dtau == 0.0 {
        return Ok(out);
    }
    let h = grid.spacing();
    for i in 0..nn {
        let scale = grid.sigma(i) * dtf_dtau;
        if scale == 0.0 {
            continue;
        }
        let x = traj.state_at(i);
        let u = traj.control_at(i);
        let fx = def.dynamics(&x, &u, grid.node_time(i))?;
        for j in 0..n {
            out[(i, j)] = fx[j] * scale;
        }
        let dudt = control_time_derivative(traj, i, h);
        for k in 0..m {
            out[(i, n + k)] = dudt[k] * scale;
        }
    }
    Ok(out)
}

/// Grid time-derivative of the control at node `i`: second-order central
/// differences inside, second-order one-sided at the ends (first-order
/// when only two nodes exist).
fn control_time_derivative(traj: &TrajectoryState, i: usize, h: f64) -> DVector<f64> {
    let nn = traj.n_nodes();
    let u = |k: usize| traj.control_at(k);
    if nn == 2 {
        return (u(1) - u(0)) / h;
    }
    if i == 0 {
        (u(0) * -3.0 + u(1) * 4.0 - u(2)) / (2.0 * h)
    } else if i == nn - 1 {
        (u(nn - 1) * 3.0 - u(nn - 2) * 4.0 + u(nn - 3)) / (2.0 * h)
    } else {
        (u(i + 1) - u(i - 1)) / (2.0 * h)
    }
}
