//! Independent verification of a solved trajectory: reconstruction of
//! the classical costate from sweep data, a report of first-order
//! optimality residuals, a stationary multiplier cross-check solved by
//! least squares, classification of constraint effects by multiplier
//! sign, and closed-form oracles for regression against known optima.
//!
//! Nothing here feeds back into the flow; every function is a pure
//! check over immutable inputs.

use alloc::format;

use nalgebra::{DMatrix, DVector};

use crate::error::Error;
use crate::evolution::{solve_multipliers, stationarity_field, ActiveSetState};
use crate::ocp::{lagrange_integrand, OcpDefinition, TerminalTimeMode, TrajectoryState};
use crate::sweeps::{compute_pu, TransitionTable};

#[allow(unused_imports)]
use num_traits::Float;

/// First-order optimality residuals of a trajectory with its
/// multipliers. All entries are norms or magnitudes, so they are
/// non-negative; small values across the board certify a stationary
/// point without ever integrating a costate equation backward.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualReport {
    /// Infinity norm over nodes of the control stationarity field.
    pub r_u: f64,
    /// Magnitude of the terminal-time stationarity expression. Only
    /// meaningful for free-horizon problems; reported raw otherwise.
    pub r_tf: f64,
    /// Infinity norm over interior nodes of the adjoint equation
    /// applied to the reconstructed costate, with the time derivative
    /// taken by second-order central differences.
    pub r_costate_ode: f64,
    /// Terminal boundary conditions on the reconstructed costate: the
    /// state part always, joined by the time part on free-horizon
    /// problems.
    pub r_transversality: f64,
    /// Gap between the flow's multipliers and the ones recovered from
    /// the stationary system solved with unit gains.
    pub r_stationary_pi: f64,
    /// Residual of that stationary least-squares solve; away from the
    /// optimum the stacked system is inconsistent, and this says by how
    /// much.
    pub stationary_lsq_residual: f64,
    /// Largest violation of multiplier/constraint complementarity over
    /// the inequality rows.
    pub complementary_slackness: f64,
}

/// First-order effect of a terminal constraint on the optimal cost,
/// judged by the sign of its multiplier. The cost sensitivity to
/// relaxing a constraint bound is the negated multiplier, so a positive
/// multiplier marks a constraint that genuinely holds the cost up (an
/// inequality version would bind), a negative one marks a constraint
/// pushing against the objective (an inequality version would detach),
/// and anything within tolerance has no first-order effect at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintEffect {
    Positive,
    Neutral,
    Negative,
}

/// Classifies one multiplier by sign against a non-negative tolerance.
pub fn classify_constraint(pi: f64, tol: f64) -> Result<ConstraintEffect, Error> {
    if !pi.is_finite() {
        return Err(Error::NonFiniteValue(format!("multiplier {pi}")));
    }
    if !(tol >= 0.0) || !tol.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "classification tolerance must be non-negative and finite, got {tol}"
        )));
    }
    Ok(if pi > tol {
        ConstraintEffect::Positive
    } else if pi < -tol {
        ConstraintEffect::Negative
    } else {
        ConstraintEffect::Neutral
    })
}

fn check_multiplier_shapes(def: &OcpDefinition, aset: &ActiveSetState) -> Result<(), Error> {
    if aset.pi_e.len() != def.q_e || aset.pi_i.len() != def.q_i {
        return Err(Error::ShapeMismatch(format!(
            "multiplier lengths {} and {} do not match {} equalities and {} inequalities",
            aset.pi_e.len(),
            aset.pi_i.len(),
            def.q_e,
            def.q_i
        )));
    }
    Ok(())
}

/// Reconstructs the costate trajectory implied by the sweep data and
/// the multipliers: at each node,
/// `gamma_i = phi_x(x_i, t_i) + Psi_i^T (G^T pi) + w_i`.
/// At the terminal node this reduces to the transversality value
/// `phi_x + G^T pi` exactly; along the horizon it satisfies the
/// classical adjoint differential equation, so at a converged point it
/// coincides with the costate of the standard necessary conditions.
pub fn reconstruct_costate(
    def: &OcpDefinition,
    traj: &TrajectoryState,
    table: &TransitionTable,
    aset: &ActiveSetState,
) -> Result<DMatrix<f64>, Error> {
    table.check_current(traj)?;
    check_multiplier_shapes(def, aset)?;
    let x_f = traj.terminal_state();
    let t_f = traj.t_f();
    let gpi = def.equality_jacobian_x(&x_f, t_f)?.transpose() * &aset.pi_e
        + def.inequality_jacobian_x(&x_f, t_f)?.transpose() * &aset.pi_i;
    let grid = traj.grid();
    let nn = grid.n_nodes;
    let mut gamma = DMatrix::zeros(nn, def.n);
    for i in 0..nn {
        let x = traj.state_at(i);
        let t = grid.node_time(i);
        let col = def.terminal_cost_grad_x(&x, t)? + table.psi[i].transpose() * &gpi
            + &table.w[i];
        for j in 0..def.n {
            gamma[(i, j)] = col[j];
        }
    }
    Ok(gamma)
}

/// Stacked terminal-constraint data over the equality rows followed by
/// the working inequality rows.
struct WorkingRows {
    g_x: DMatrix<f64>,
    g_t: DVector<f64>,
    /// Total time derivative of each row at the endpoint.
    c: DVector<f64>,
    /// The flow's multipliers for the same rows.
    pi: DVector<f64>,
}

fn working_rows(
    def: &OcpDefinition,
    traj: &TrajectoryState,
    aset: &ActiveSetState,
) -> Result<WorkingRows, Error> {
    let x_f = traj.terminal_state();
    let u_f = traj.control_at(traj.n_nodes() - 1);
    let t_f = traj.t_f();
    let f_f = def.dynamics(&x_f, &u_f, t_f)?;
    let ge_x = def.equality_jacobian_x(&x_f, t_f)?;
    let ge_t = def.equality_time_grad(&x_f, t_f)?;
    let gi_x = def.inequality_jacobian_x(&x_f, t_f)?;
    let gi_t = def.inequality_time_grad(&x_f, t_f)?;

    let q = def.q_e + aset.working.len();
    let mut g_x = DMatrix::zeros(q, def.n);
    let mut g_t = DVector::zeros(q);
    let mut pi = DVector::zeros(q);
    for row in 0..def.q_e {
        for j in 0..def.n {
            g_x[(row, j)] = ge_x[(row, j)];
        }
        g_t[row] = ge_t[row];
        pi[row] = aset.pi_e[row];
    }
    for (k, &idx) in aset.working.iter().enumerate() {
        let row = def.q_e + k;
        for j in 0..def.n {
            g_x[(row, j)] = gi_x[(idx, j)];
        }
        g_t[row] = gi_t[idx];
        pi[row] = aset.pi_i[idx];
    }
    let c = &g_x * f_f + &g_t;
    Ok(WorkingRows { g_x, g_t, c, pi })
}

/// Fills a [`ResidualReport`] for the trajectory with its working-set
/// state. The stationary cross-check rebuilds the multiplier system
/// with unit gains, stacks the terminal-time block under it on
/// free-horizon problems, solves by least squares, and compares with
/// the multipliers the flow actually used.
pub fn optimality_residuals(
    def: &OcpDefinition,
    traj: &TrajectoryState,
    table: &TransitionTable,
    aset: &ActiveSetState,
) -> Result<ResidualReport, Error> {
    table.check_current(traj)?;
    check_multiplier_shapes(def, aset)?;
    let grid = traj.grid();
    let nn = grid.n_nodes;
    let pu = compute_pu(def, traj, table)?;
    let rho = stationarity_field(def, traj, table, &pu, aset)?;
    let r_u = rho.amax();

    let x_f = traj.terminal_state();
    let u_f = traj.control_at(nn - 1);
    let t_f = traj.t_f();
    let theta_f = lagrange_integrand(def, &x_f, &u_f, t_f)?;
    let rows = working_rows(def, traj, aset)?;
    let r_tf = (theta_f + rows.pi.dot(&rows.c)).abs();

    let gamma = reconstruct_costate(def, traj, table, aset)?;
    let h = grid.spacing();
    let mut r_costate_ode = 0.0_f64;
    for i in 1..nn - 1 {
        let x = traj.state_at(i);
        let u = traj.control_at(i);
        let t = grid.node_time(i);
        let l_x = def.running_cost_grad_x(&x, &u, t)?;
        let f_x = def.dynamics_jacobian_x(&x, &u, t)?;
        let g_i = DVector::from_fn(def.n, |j, _| gamma[(i, j)]);
        let g_dot = DVector::from_fn(def.n, |j, _| {
            (gamma[(i + 1, j)] - gamma[(i - 1, j)]) / (2.0 * h)
        });
        let res = g_dot + l_x + f_x.transpose() * g_i;
        r_costate_ode = r_costate_ode.max(res.amax());
    }

    // terminal boundary conditions on the reconstructed costate
    let gamma_f = DVector::from_fn(def.n, |j, _| gamma[(nn - 1, j)]);
    let gpi = def.equality_jacobian_x(&x_f, t_f)?.transpose() * &aset.pi_e
        + def.inequality_jacobian_x(&x_f, t_f)?.transpose() * &aset.pi_i;
    let state_part = (&gamma_f - (def.terminal_cost_grad_x(&x_f, t_f)? + gpi)).amax();
    let r_transversality = match def.terminal_time_mode {
        TerminalTimeMode::Fixed => state_part,
        TerminalTimeMode::Free => {
            // the time condition evaluated through the costate: the
            // terminal Hamiltonian plus the explicit time sensitivities
            let f_f = def.dynamics(&x_f, &u_f, t_f)?;
            let l_f = def.running_cost(&x_f, &u_f, t_f)?;
            let phi_t = def.terminal_cost_time(&x_f, t_f)?;
            let time_part = (l_f + gamma_f.dot(&f_f) + phi_t + rows.pi.dot(&rows.g_t)).abs();
            state_part.max(time_part)
        }
    };

    // stationary multiplier cross-check with unit gains
    let q = rows.pi.len();
    let (r_stationary_pi, stationary_lsq_residual) = if q == 0 {
        (0.0, 0.0)
    } else {
        let mut b = DMatrix::zeros(def.n, def.n);
        let mut d = DVector::zeros(def.n);
        for i in 0..nn {
            let x = traj.state_at(i);
            let u = traj.control_at(i);
            let t = grid.node_time(i);
            let a_i = &table.psi[i] * def.dynamics_jacobian_u(&x, &u, t)?;
            let w_i = grid.weight(i);
            b += w_i * &a_i * a_i.transpose();
            let p_i = DVector::from_fn(def.m, |k, _| pu[(i, k)]);
            d += w_i * a_i * p_i;
        }
        let m_s1 = &rows.g_x * b * rows.g_x.transpose();
        let r_s1 = &rows.g_x * d;
        let (stacked, rhs) = match def.terminal_time_mode {
            TerminalTimeMode::Fixed => (m_s1, r_s1),
            TerminalTimeMode::Free => {
                let mut s = DMatrix::zeros(2 * q, q);
                let mut r = DVector::zeros(2 * q);
                for i in 0..q {
                    for j in 0..q {
                        s[(i, j)] = m_s1[(i, j)];
                        s[(q + i, j)] = rows.c[i] * rows.c[j];
                    }
                    r[i] = r_s1[i];
                    r[q + i] = theta_f * rows.c[i];
                }
                (s, r)
            }
        };
        // minimum-norm least squares through the normal equations
        let normal = stacked.transpose() * &stacked;
        let rhs_n = stacked.transpose() * &rhs;
        let solution = solve_multipliers(&normal, &rhs_n)?;
        let gap = (&solution.pi - &rows.pi).amax();
        let residual = (stacked * &solution.pi + rhs).amax();
        (gap, residual)
    };

    let gi = def.inequality_constraints(&x_f, t_f)?;
    let complementary_slackness = (0..def.q_i)
        .map(|i| (aset.pi_i[i] * gi[i]).abs())
        .fold(0.0_f64, f64::max);

    Ok(ResidualReport {
        r_u,
        r_tf,
        r_costate_ode,
        r_transversality,
        r_stationary_pi,
        stationary_lsq_residual,
        complementary_slackness,
    })
}

/// Closed-form optimum of the curve-of-fastest-descent geometry: the
/// optimal path is a cycloid arc `x = R(theta - sin theta)`,
/// `y = -R(1 - cos theta)` traversed in `t = theta * sqrt(R/gravity)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CycloidSolution {
    pub t_f: f64,
    pub theta_f: f64,
    pub radius: f64,
}

/// Solves the cycloid geometry for a path from the origin to
/// `(x_target, -drop)` under the given gravity: bisection on the
/// monotone arc-shape equation
/// `(theta - sin theta)/(1 - cos theta) = x_target/drop` over
/// `(0, 2*pi)`, then radius and descent time in closed form.
pub fn cycloid_oracle(x_target: f64, drop: f64, gravity: f64) -> Result<CycloidSolution, Error> {
    for (name, v) in [("x_target", x_target), ("drop", drop), ("gravity", gravity)] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "{name} must be positive and finite, got {v}"
            )));
        }
    }
    let ratio = x_target / drop;
    let shape = |theta: f64| (theta - theta.sin()) / (1.0 - theta.cos()) - ratio;
    // below 1e-6 both differences underflow to 0/0; the shape value
    // there is ~3e-7, so only a pathologically steep geometry misses
    // the bracket
    let mut lo = 1e-6;
    let mut hi = 2.0 * core::f64::consts::PI - 1e-12;
    if !(shape(lo) < 0.0) || !(shape(hi) > 0.0) {
        return Err(Error::OutOfDomain(format!(
            "no cycloid arc reaches x/drop = {ratio}"
        )));
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if shape(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let theta_f = 0.5 * (lo + hi);
    let radius = x_target / (theta_f - theta_f.sin());
    let t_f = theta_f * (radius / gravity).sqrt();
    Ok(CycloidSolution { t_f, theta_f, radius })
}

/// Closed-form optimum of the minimum-energy double integrator: for
/// `d2x/dt2 = u`, cost `integral of u^2/2`, start at rest at the
/// origin, the optimal control is affine in time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LqSolution {
    pub t_f: f64,
    /// Control intercept: `u*(t) = a + b t`.
    pub a: f64,
    /// Control slope.
    pub b: f64,
    pub j_star: f64,
}

impl LqSolution {
    pub fn control_at(&self, t: f64) -> f64 {
        self.a + self.b * t
    }

    /// Position and velocity at `t`.
    pub fn state_at(&self, t: f64) -> (f64, f64) {
        let velocity = self.a * t + self.b * t * t / 2.0;
        let position = self.a * t * t / 2.0 + self.b * t * t * t / 6.0;
        (position, velocity)
    }
}

/// Solves the minimum-energy double integrator with a terminal position
/// target and an optional terminal velocity target over a fixed
/// horizon. With the velocity free the optimal control ramps linearly
/// to zero at the endpoint; with it constrained the two coefficients
/// come from a 2x2 moment system.
pub fn lq_oracle(
    t_f: f64,
    position: f64,
    velocity: Option<f64>,
) -> Result<LqSolution, Error> {
    if !(t_f > 0.0) || !t_f.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "horizon must be positive and finite, got {t_f}"
        )));
    }
    if !position.is_finite() || velocity.is_some_and(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig("targets must be finite".into()));
    }
    let (a, b) = match velocity {
        None => {
            let c = 3.0 * position / (t_f * t_f);
            (c, -c / t_f)
        }
        Some(v) => {
            let det = -t_f.powi(4) / 12.0;
            let a = (v * t_f.powi(3) / 6.0 - position * t_f * t_f / 2.0) / det;
            let b = (position * t_f - v * t_f * t_f / 2.0) / det;
            (a, b)
        }
    };
    let j_star =
        a * a * t_f / 2.0 + a * b * t_f * t_f / 2.0 + b * b * t_f.powi(3) / 6.0;
    Ok(LqSolution { t_f, a, b, j_star })
}
