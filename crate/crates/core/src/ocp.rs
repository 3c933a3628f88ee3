//! Problem definition, trajectory container, and cost evaluation.
//!
//! An [`OcpDefinition`] describes
//!
//! ```text
//!     minimize   J = phi(x(tf), tf) + integral of L(x, u, t)
//!     subject to dx/dt = f(x, u, t),  x(t0) = x0,
//!                gE(x(tf), tf)  = 0,
//!                gI(x(tf), tf) <= 0,
//! ```
//!
//! through value callbacks plus every partial derivative the solver
//! consumes. Derivatives are supplied analytically, not differentiated
//! automatically; [`crate::audit`] checks them against finite differences.
//! All callbacks must be pure: the definition is shared read-only.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec::Vec;
use core::fmt;
use core::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{DMatrix, DVector};

use crate::error::Error;
use crate::grid::{self, TimeGrid};

/// `(x, u, t) -> vector` callback (dynamics, running-cost gradients).
pub type RunningVecFn = Box<dyn Fn(&DVector<f64>, &DVector<f64>, f64) -> DVector<f64> + Send + Sync>;
/// `(x, u, t) -> matrix` callback (dynamics Jacobians).
pub type RunningMatFn = Box<dyn Fn(&DVector<f64>, &DVector<f64>, f64) -> DMatrix<f64> + Send + Sync>;
/// `(x, u, t) -> scalar` callback (running cost).
pub type RunningScalarFn = Box<dyn Fn(&DVector<f64>, &DVector<f64>, f64) -> f64 + Send + Sync>;
/// `(x, t) -> scalar` callback (terminal cost and its time partial).
pub type PointScalarFn = Box<dyn Fn(&DVector<f64>, f64) -> f64 + Send + Sync>;
/// `(x, t) -> vector` callback (terminal-cost gradients, constraint values).
pub type PointVecFn = Box<dyn Fn(&DVector<f64>, f64) -> DVector<f64> + Send + Sync>;
/// `(x, t) -> matrix` callback (terminal-cost Hessian, constraint Jacobians).
pub type PointMatFn = Box<dyn Fn(&DVector<f64>, f64) -> DMatrix<f64> + Send + Sync>;

/// Whether the terminal time is an optimization variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminalTimeMode {
    Free,
    Fixed,
}

/// Sampling box for the finite-difference derivative audit.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditBounds {
    pub x_lo: DVector<f64>,
    pub x_hi: DVector<f64>,
    pub u_lo: DVector<f64>,
    pub u_hi: DVector<f64>,
    pub t_range: (f64, f64),
    pub tf_range: (f64, f64),
}

/// A complete optimal control problem.
///
/// Built with [`OcpDefinition::builder`]. The evaluation methods wrap the
/// raw callbacks with shape and finiteness checks that name the offending
/// callback, so a faulty user closure fails loudly instead of corrupting
/// the flow.
pub struct OcpDefinition {
    pub n: usize,
    pub m: usize,
    pub q_e: usize,
    pub q_i: usize,
    pub t0: f64,
    pub x0: DVector<f64>,
    pub terminal_time_mode: TerminalTimeMode,
    pub bounds: AuditBounds,
    f: RunningVecFn,
    f_x: RunningMatFn,
    f_u: RunningMatFn,
    l: RunningScalarFn,
    l_x: RunningVecFn,
    l_u: RunningVecFn,
    phi: PointScalarFn,
    phi_x: PointVecFn,
    phi_t: PointScalarFn,
    phi_tx: PointVecFn,
    phi_xx: PointMatFn,
    g_e: PointVecFn,
    g_e_xf: PointMatFn,
    g_e_tf: PointVecFn,
    g_i: PointVecFn,
    g_i_xf: PointMatFn,
    g_i_tf: PointVecFn,
}

impl fmt::Debug for OcpDefinition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OcpDefinition")
            .field("n", &self.n)
            .field("m", &self.m)
            .field("q_e", &self.q_e)
            .field("q_i", &self.q_i)
            .field("t0", &self.t0)
            .field("terminal_time_mode", &self.terminal_time_mode)
            .finish_non_exhaustive()
    }
}

fn check_vec(name: &str, v: DVector<f64>, len: usize) -> Result<DVector<f64>, Error> {
    if v.len() != len {
        return Err(Error::ShapeMismatch(format!(
            "{name}: expected length {len}, got {}",
            v.len()
        )));
    }
    if let Some(i) = v.iter().position(|e| !e.is_finite()) {
        return Err(Error::NonFiniteValue(format!(
            "{name}: entry {i} is {}",
            v[i]
        )));
    }
    Ok(v)
}

fn check_mat(name: &str, v: DMatrix<f64>, rows: usize, cols: usize) -> Result<DMatrix<f64>, Error> {
    if v.nrows() != rows || v.ncols() != cols {
        return Err(Error::ShapeMismatch(format!(
            "{name}: expected {rows}x{cols}, got {}x{}",
            v.nrows(),
            v.ncols()
        )));
    }
    if let Some(((i, j), e)) = v
        .row_iter()
        .enumerate()
        .flat_map(|(i, r)| {
            r.iter()
                .enumerate()
                .map(move |(j, e)| ((i, j), *e))
                .collect::<Vec<_>>()
        })
        .find(|(_, e)| !e.is_finite())
    {
        return Err(Error::NonFiniteValue(format!("{name}: entry ({i},{j}) is {e}")));
    }
    Ok(v)
}

fn check_scalar(name: &str, v: f64) -> Result<f64, Error> {
    if !v.is_finite() {
        return Err(Error::NonFiniteValue(format!("{name}: value is {v}")));
    }
    Ok(v)
}

impl OcpDefinition {
    pub fn builder(n: usize, m: usize) -> OcpBuilder {
        OcpBuilder::new(n, m)
    }

    /// Right-hand side of the dynamics, `f(x, u, t)`.
    pub fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>, t: f64) -> Result<DVector<f64>, Error> {
        self.check_point(x, u)?;
        check_vec("f", (self.f)(x, u, t), self.n)
    }

    /// State Jacobian of the dynamics, `df/dx`, n by n.
    pub fn dynamics_jacobian_x(&self, x: &DVector<f64>, u: &DVector<f64>, t: f64) -> Result<DMatrix<f64>, Error> {
        check_mat("f_x", (self.f_x)(x, u, t), self.n, self.n)
    }

    /// Control Jacobian of the dynamics, `df/du`, n by m.
    pub fn dynamics_jacobian_u(&self, x: &DVector<f64>, u: &DVector<f64>, t: f64) -> Result<DMatrix<f64>, Error> {
        check_mat("f_u", (self.f_u)(x, u, t), self.n, self.m)
    }

    pub fn running_cost(&self, x: &DVector<f64>, u: &DVector<f64>, t: f64) -> Result<f64, Error> {
        check_scalar("L", (self.l)(x, u, t))
    }

    pub fn running_cost_grad_x(&self, x: &DVector<f64>, u: &DVector<f64>, t: f64) -> Result<DVector<f64>, Error> {
        check_vec("L_x", (self.l_x)(x, u, t), self.n)
    }

    pub fn running_cost_grad_u(&self, x: &DVector<f64>, u: &DVector<f64>, t: f64) -> Result<DVector<f64>, Error> {
        check_vec("L_u", (self.l_u)(x, u, t), self.m)
    }

    /// Terminal cost `phi(x, t)`, also evaluated along the trajectory when
    /// the cost is rewritten in pure integral form.
    pub fn terminal_cost(&self, x: &DVector<f64>, t: f64) -> Result<f64, Error> {
        check_scalar("phi", (self.phi)(x, t))
    }

    pub fn terminal_cost_grad_x(&self, x: &DVector<f64>, t: f64) -> Result<DVector<f64>, Error> {
        check_vec("phi_x", (self.phi_x)(x, t), self.n)
    }

    pub fn terminal_cost_time(&self, x: &DVector<f64>, t: f64) -> Result<f64, Error> {
        check_scalar("phi_t", (self.phi_t)(x, t))
    }

    pub fn terminal_cost_cross(&self, x: &DVector<f64>, t: f64) -> Result<DVector<f64>, Error> {
        check_vec("phi_tx", (self.phi_tx)(x, t), self.n)
    }

    pub fn terminal_cost_hess_x(&self, x: &DVector<f64>, t: f64) -> Result<DMatrix<f64>, Error> {
        check_mat("phi_xx", (self.phi_xx)(x, t), self.n, self.n)
    }

    /// Terminal equality constraint values, length `q_e`.
    pub fn equality_constraints(&self, x_f: &DVector<f64>, t_f: f64) -> Result<DVector<f64>, Error> {
        check_vec("g_E", (self.g_e)(x_f, t_f), self.q_e)
    }

    pub fn equality_jacobian_x(&self, x_f: &DVector<f64>, t_f: f64) -> Result<DMatrix<f64>, Error> {
        check_mat("g_E_xf", (self.g_e_xf)(x_f, t_f), self.q_e, self.n)
    }

    pub fn equality_time_grad(&self, x_f: &DVector<f64>, t_f: f64) -> Result<DVector<f64>, Error> {
        check_vec("g_E_tf", (self.g_e_tf)(x_f, t_f), self.q_e)
    }

    /// Terminal inequality constraint values, length `q_i`; feasible
    /// means every entry is nonpositive.
    pub fn inequality_constraints(&self, x_f: &DVector<f64>, t_f: f64) -> Result<DVector<f64>, Error> {
        check_vec("g_I", (self.g_i)(x_f, t_f), self.q_i)
    }

    pub fn inequality_jacobian_x(&self, x_f: &DVector<f64>, t_f: f64) -> Result<DMatrix<f64>, Error> {
        check_mat("g_I_xf", (self.g_i_xf)(x_f, t_f), self.q_i, self.n)
    }

    pub fn inequality_time_grad(&self, x_f: &DVector<f64>, t_f: f64) -> Result<DVector<f64>, Error> {
        check_vec("g_I_tf", (self.g_i_tf)(x_f, t_f), self.q_i)
    }

    fn check_point(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<(), Error> {
        if x.len() != self.n || u.len() != self.m {
            return Err(Error::ShapeMismatch(format!(
                "evaluation point: expected x length {}, u length {}, got {} and {}",
                self.n,
                self.m,
                x.len(),
                u.len()
            )));
        }
        Ok(())
    }
}

/// Builder for [`OcpDefinition`]. Unset pieces default to zero (running
/// cost, terminal cost) or to empty constraint blocks.
pub struct OcpBuilder {
    n: usize,
    m: usize,
    q_e: usize,
    q_i: usize,
    t0: f64,
    x0: Option<DVector<f64>>,
    mode: TerminalTimeMode,
    bounds: Option<AuditBounds>,
    f: Option<RunningVecFn>,
    f_x: Option<RunningMatFn>,
    f_u: Option<RunningMatFn>,
    l: Option<RunningScalarFn>,
    l_x: Option<RunningVecFn>,
    l_u: Option<RunningVecFn>,
    phi: Option<PointScalarFn>,
    phi_x: Option<PointVecFn>,
    phi_t: Option<PointScalarFn>,
    phi_tx: Option<PointVecFn>,
    phi_xx: Option<PointMatFn>,
    g_e: Option<(PointVecFn, PointMatFn, PointVecFn)>,
    g_i: Option<(PointVecFn, PointMatFn, PointVecFn)>,
}

impl OcpBuilder {
    pub fn new(n: usize, m: usize) -> Self {
        Self {
            n,
            m,
            q_e: 0,
            q_i: 0,
            t0: 0.0,
            x0: None,
            mode: TerminalTimeMode::Free,
            bounds: None,
            f: None,
            f_x: None,
            f_u: None,
            l: None,
            l_x: None,
            l_u: None,
            phi: None,
            phi_x: None,
            phi_t: None,
            phi_tx: None,
            phi_xx: None,
            g_e: None,
            g_i: None,
        }
    }

    pub fn initial_state(mut self, t0: f64, x0: DVector<f64>) -> Self {
        self.t0 = t0;
        self.x0 = Some(x0);
        self
    }

    pub fn dynamics(mut self, f: RunningVecFn, f_x: RunningMatFn, f_u: RunningMatFn) -> Self {
        self.f = Some(f);
        self.f_x = Some(f_x);
        self.f_u = Some(f_u);
        self
    }

    pub fn running_cost(mut self, l: RunningScalarFn, l_x: RunningVecFn, l_u: RunningVecFn) -> Self {
        self.l = Some(l);
        self.l_x = Some(l_x);
        self.l_u = Some(l_u);
        self
    }

    pub fn terminal_cost(
        mut self,
        phi: PointScalarFn,
        phi_x: PointVecFn,
        phi_t: PointScalarFn,
        phi_tx: PointVecFn,
        phi_xx: PointMatFn,
    ) -> Self {
        self.phi = Some(phi);
        self.phi_x = Some(phi_x);
        self.phi_t = Some(phi_t);
        self.phi_tx = Some(phi_tx);
        self.phi_xx = Some(phi_xx);
        self
    }

    pub fn equality_constraints(mut self, q_e: usize, g: PointVecFn, g_xf: PointMatFn, g_tf: PointVecFn) -> Self {
        self.q_e = q_e;
        self.g_e = Some((g, g_xf, g_tf));
        self
    }

    pub fn inequality_constraints(mut self, q_i: usize, g: PointVecFn, g_xf: PointMatFn, g_tf: PointVecFn) -> Self {
        self.q_i = q_i;
        self.g_i = Some((g, g_xf, g_tf));
        self
    }

    pub fn terminal_time(mut self, mode: TerminalTimeMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn audit_bounds(mut self, bounds: AuditBounds) -> Self {
        self.bounds = Some(bounds);
        self
    }

    pub fn build(self) -> Result<OcpDefinition, Error> {
        let n = self.n;
        let m = self.m;
        if n == 0 || m == 0 {
            return Err(Error::InvalidDefinition(format!(
                "state and control dimensions must be positive, got n={n}, m={m}"
            )));
        }
        if self.q_i > 64 {
            return Err(Error::InvalidDefinition(format!(
                "at most 64 terminal inequality constraints supported, got {}",
                self.q_i
            )));
        }
        let x0 = self
            .x0
            .ok_or_else(|| Error::InvalidDefinition("initial state not set".into()))?;
        if x0.len() != n {
            return Err(Error::InvalidDefinition(format!(
                "initial state length {} does not match n={n}",
                x0.len()
            )));
        }
        if !self.t0.is_finite() || x0.iter().any(|e| !e.is_finite()) {
            return Err(Error::InvalidDefinition("initial condition not finite".into()));
        }
        let f = self
            .f
            .ok_or_else(|| Error::InvalidDefinition("dynamics not set".into()))?;
        let f_x = self.f_x.unwrap();
        let f_u = self.f_u.unwrap();
        let l = self.l.unwrap_or_else(|| Box::new(|_, _, _| 0.0));
        let l_x = self
            .l_x
            .unwrap_or_else(|| Box::new(move |_: &DVector<f64>, _: &DVector<f64>, _| DVector::zeros(n)));
        let l_u = self
            .l_u
            .unwrap_or_else(|| Box::new(move |_: &DVector<f64>, _: &DVector<f64>, _| DVector::zeros(m)));
        let phi = self.phi.unwrap_or_else(|| Box::new(|_, _| 0.0));
        let phi_x = self
            .phi_x
            .unwrap_or_else(|| Box::new(move |_: &DVector<f64>, _| DVector::zeros(n)));
        let phi_t = self.phi_t.unwrap_or_else(|| Box::new(|_, _| 0.0));
        let phi_tx = self
            .phi_tx
            .unwrap_or_else(|| Box::new(move |_: &DVector<f64>, _| DVector::zeros(n)));
        let phi_xx = self
            .phi_xx
            .unwrap_or_else(|| Box::new(move |_: &DVector<f64>, _| DMatrix::zeros(n, n)));
        let q_e = self.q_e;
        let (g_e, g_e_xf, g_e_tf) = self.g_e.unwrap_or_else(|| {
            (
                Box::new(move |_: &DVector<f64>, _| DVector::zeros(q_e)),
                Box::new(move |_: &DVector<f64>, _| DMatrix::zeros(q_e, n)),
                Box::new(move |_: &DVector<f64>, _| DVector::zeros(q_e)),
            )
        });
        let q_i = self.q_i;
        let (g_i, g_i_xf, g_i_tf) = self.g_i.unwrap_or_else(|| {
            (
                Box::new(move |_: &DVector<f64>, _| DVector::zeros(q_i)),
                Box::new(move |_: &DVector<f64>, _| DMatrix::zeros(q_i, n)),
                Box::new(move |_: &DVector<f64>, _| DVector::zeros(q_i)),
            )
        });
        let bounds = match self.bounds {
            Some(b) => {
                if b.x_lo.len() != n
                    || b.x_hi.len() != n
                    || b.u_lo.len() != m
                    || b.u_hi.len() != m
                {
                    return Err(Error::InvalidDefinition(
                        "audit bound lengths do not match problem dimensions".into(),
                    ));
                }
                let reversed = b
                    .x_lo
                    .iter()
                    .zip(b.x_hi.iter())
                    .chain(b.u_lo.iter().zip(b.u_hi.iter()))
                    .any(|(lo, hi)| lo > hi)
                    || b.t_range.0 > b.t_range.1
                    || b.tf_range.0 > b.tf_range.1;
                if reversed {
                    return Err(Error::InvalidDefinition("audit bounds reversed".into()));
                }
                b
            }
            None => AuditBounds {
                x_lo: DVector::from_element(n, -1.0),
                x_hi: DVector::from_element(n, 1.0),
                u_lo: DVector::from_element(m, -1.0),
                u_hi: DVector::from_element(m, 1.0),
                t_range: (0.0, 1.0),
                tf_range: (0.5, 1.5),
            },
        };
        Ok(OcpDefinition {
            n,
            m,
            q_e,
            q_i,
            t0: self.t0,
            x0,
            terminal_time_mode: self.mode,
            bounds,
            f,
            f_x,
            f_u,
            l,
            l_x,
            l_u,
            phi,
            phi_x,
            phi_t,
            phi_tx,
            phi_xx,
            g_e,
            g_e_xf,
            g_e_tf,
            g_i,
            g_i_xf,
            g_i_tf,
        })
    }
}

static NEXT_REVISION: AtomicUsize = AtomicUsize::new(1);

fn next_revision() -> u64 {
    NEXT_REVISION.fetch_add(1, Ordering::Relaxed) as u64
}

/// State and control fields sampled on the grid, plus the terminal time.
///
/// Row `i` of each matrix holds the value at node `i`, which sits at the
/// physical time `t0 + i/(N-1) * (t_f - t0)`. Row 0 of the state equals
/// the initial condition and never evolves. Every instance carries a
/// unique revision stamp so tables derived from one trajectory cannot
/// silently be used with another.
#[derive(Debug, Clone)]
pub struct TrajectoryState {
    x_nodes: DMatrix<f64>,
    u_nodes: DMatrix<f64>,
    t0: f64,
    t_f: f64,
    revision: u64,
}

impl TrajectoryState {
    pub fn new(
        x_nodes: DMatrix<f64>,
        u_nodes: DMatrix<f64>,
        t0: f64,
        t_f: f64,
    ) -> Result<Self, Error> {
        let nn = x_nodes.nrows();
        if nn < 2 || u_nodes.nrows() != nn {
            return Err(Error::ShapeMismatch(format!(
                "trajectory needs matching node counts of at least 2, got {} and {}",
                nn,
                u_nodes.nrows()
            )));
        }
        TimeGrid::new(nn, t0, t_f)?;
        if x_nodes.iter().chain(u_nodes.iter()).any(|e| !e.is_finite()) {
            return Err(Error::NonFiniteValue("trajectory nodes".into()));
        }
        Ok(Self {
            x_nodes,
            u_nodes,
            t0,
            t_f,
            revision: next_revision(),
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.x_nodes.nrows()
    }

    pub fn state_dim(&self) -> usize {
        self.x_nodes.ncols()
    }

    pub fn control_dim(&self) -> usize {
        self.u_nodes.ncols()
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t_f(&self) -> f64 {
        self.t_f
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn grid(&self) -> TimeGrid {
        TimeGrid {
            n_nodes: self.n_nodes(),
            t0: self.t0,
            t_f: self.t_f,
        }
    }

    pub fn x_nodes(&self) -> &DMatrix<f64> {
        &self.x_nodes
    }

    pub fn u_nodes(&self) -> &DMatrix<f64> {
        &self.u_nodes
    }

    /// State at node `i` as a column vector.
    pub fn state_at(&self, i: usize) -> DVector<f64> {
        self.x_nodes.row(i).transpose()
    }

    /// Control at node `i` as a column vector.
    pub fn control_at(&self, i: usize) -> DVector<f64> {
        self.u_nodes.row(i).transpose()
    }

    pub fn terminal_state(&self) -> DVector<f64> {
        self.state_at(self.n_nodes() - 1)
    }

    /// Checks that the trajectory fits the problem: dimensions match and
    /// node 0 equals the initial condition.
    pub fn validate_against(&self, def: &OcpDefinition) -> Result<(), Error> {
        if self.state_dim() != def.n || self.control_dim() != def.m {
            return Err(Error::ShapeMismatch(format!(
                "trajectory dimensions ({}, {}) do not match problem ({}, {})",
                self.state_dim(),
                self.control_dim(),
                def.n,
                def.m
            )));
        }
        if self.t0 != def.t0 {
            return Err(Error::InvalidDefinition(format!(
                "trajectory starts at t0={}, problem declares {}",
                self.t0, def.t0
            )));
        }
        for j in 0..def.n {
            if self.x_nodes[(0, j)] != def.x0[j] {
                return Err(Error::InvalidDefinition(format!(
                    "trajectory node 0 component {j} is {}, initial condition requires {}",
                    self.x_nodes[(0, j)],
                    def.x0[j]
                )));
            }
        }
        Ok(())
    }

    /// Length of the stacked vector for given dimensions.
    pub fn stacked_len(n: usize, m: usize, n_nodes: usize) -> usize {
        n_nodes * (n + m) + 1
    }

    /// Flattens to `[x rows node-major | u rows node-major | t_f]`.
    pub fn to_stacked(&self) -> DVector<f64> {
        let nn = self.n_nodes();
        let n = self.state_dim();
        let m = self.control_dim();
        let mut v = DVector::zeros(Self::stacked_len(n, m, nn));
        for i in 0..nn {
            for j in 0..n {
                v[i * n + j] = self.x_nodes[(i, j)];
            }
            for k in 0..m {
                v[nn * n + i * m + k] = self.u_nodes[(i, k)];
            }
        }
        v[nn * (n + m)] = self.t_f;
        v
    }

    /// Rebuilds a trajectory from a stacked vector produced by
    /// [`TrajectoryState::to_stacked`]. Fails on non-finite entries or a
    /// collapsed horizon, which the flow integrator treats as a rejected
    /// step.
    pub fn from_stacked(
        n: usize,
        m: usize,
        n_nodes: usize,
        t0: f64,
        stacked: &DVector<f64>,
    ) -> Result<Self, Error> {
        let expect = Self::stacked_len(n, m, n_nodes);
        if stacked.len() != expect {
            return Err(Error::ShapeMismatch(format!(
                "stacked vector length {} does not match expected {expect}",
                stacked.len()
            )));
        }
        let x_nodes = DMatrix::from_fn(n_nodes, n, |i, j| stacked[i * n + j]);
        let u_nodes = DMatrix::from_fn(n_nodes, m, |i, k| stacked[n_nodes * n + i * m + k]);
        let t_f = stacked[n_nodes * (n + m)];
        if t_f.is_finite() && t_f <= t0 {
            // a flight-path state, not a configuration: the stepper
            // treats a collapsed horizon as an unreachable point
            return Err(Error::OutOfDomain(format!(
                "stacked terminal time {t_f} collapsed below t0={t0}"
            )));
        }
        Self::new(x_nodes, u_nodes, t0, t_f)
    }
}

/// Bolza cost of the trajectory: terminal cost at the last node plus the
/// trapezoid integral of the running cost.
pub fn performance_index(def: &OcpDefinition, traj: &TrajectoryState) -> Result<f64, Error> {
    let grid = traj.grid();
    let nn = grid.n_nodes;
    let mut l_vals = DMatrix::zeros(nn, 1);
    for i in 0..nn {
        l_vals[(i, 0)] = def.running_cost(&traj.state_at(i), &traj.control_at(i), grid.node_time(i))?;
    }
    let integral = grid::quadrature(&l_vals, &grid)?[0];
    let phi = def.terminal_cost(&traj.terminal_state(), traj.t_f())?;
    check_scalar("performance index", phi + integral)
}

/// Integrand of the cost in pure integral form,
/// `phi_t + phi_x . f + L`, evaluated at an arbitrary point. At the
/// terminal node this is the quantity the terminal-time evolution law
/// drives to balance against the constraint multipliers.
pub fn lagrange_integrand(
    def: &OcpDefinition,
    x: &DVector<f64>,
    u: &DVector<f64>,
    t: f64,
) -> Result<f64, Error> {
    let f = def.dynamics(x, u, t)?;
    let phi_t = def.terminal_cost_time(x, t)?;
    let phi_x = def.terminal_cost_grad_x(x, t)?;
    let l = def.running_cost(x, u, t)?;
    check_scalar("lagrange integrand", phi_t + phi_x.dot(&f) + l)
}

/// Convenience description of a problem used by front ends.
pub struct ProblemSummary {
    pub id: &'static str,
    pub description: &'static str,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::builtin_problem;
    use approx::assert_relative_eq;

    #[test]
    fn brach_dynamics_at_rest_point() {
        let (def, _) = builtin_problem("brachA", 5).unwrap();
        let x = DVector::from_vec(vec![0.0, 0.0, 0.0]);
        let u = DVector::from_vec(vec![core::f64::consts::FRAC_PI_6]);
        let f = def.dynamics(&x, &u, 0.0).unwrap();
        assert_relative_eq!(f[0], 0.0, epsilon = 1e-15);
        assert_relative_eq!(f[1], 0.0, epsilon = 1e-15);
        assert_relative_eq!(f[2], 10.0 * (core::f64::consts::FRAC_PI_6).cos(), epsilon = 1e-12);
        assert!((f[2] - 8.660).abs() < 1e-3);
    }

    #[test]
    fn brach_dynamics_velocity_scales_position_rates() {
        let (def, _) = builtin_problem("brachA", 5).unwrap();
        let u = DVector::from_vec(vec![1.234]);
        let x = DVector::from_vec(vec![0.3, -0.2, 0.0]);
        let f = def.dynamics(&x, &u, 0.1).unwrap();
        assert_eq!(f[0], 0.0);
        assert_eq!(f[1], -0.0);
    }

    #[test]
    fn scalar_toy_dynamics_identity() {
        let def = OcpDefinition::builder(1, 1)
            .initial_state(0.0, DVector::from_vec(vec![0.0]))
            .dynamics(
                Box::new(|_, u: &DVector<f64>, _| u.clone()),
                Box::new(|_, _, _| DMatrix::zeros(1, 1)),
                Box::new(|_, _, _| DMatrix::identity(1, 1)),
            )
            .terminal_time(TerminalTimeMode::Fixed)
            .build()
            .unwrap();
        let f = def
            .dynamics(&DVector::from_vec(vec![0.5]), &DVector::from_vec(vec![3.0]), 0.0)
            .unwrap();
        assert_eq!(f[0], 3.0);
    }

    #[test]
    fn shape_mismatch_names_the_callback() {
        let def = OcpDefinition::builder(2, 1)
            .initial_state(0.0, DVector::zeros(2))
            .dynamics(
                Box::new(|_, _, _| DVector::zeros(3)),
                Box::new(|_, _, _| DMatrix::zeros(2, 2)),
                Box::new(|_, _, _| DMatrix::zeros(2, 1)),
            )
            .terminal_time(TerminalTimeMode::Fixed)
            .build()
            .unwrap();
        let err = def
            .dynamics(&DVector::zeros(2), &DVector::zeros(1), 0.0)
            .unwrap_err();
        match err {
            Error::ShapeMismatch(msg) => assert!(msg.contains("f:"), "{msg}"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn non_finite_output_names_the_component() {
        let def = OcpDefinition::builder(1, 1)
            .initial_state(0.0, DVector::zeros(1))
            .dynamics(
                Box::new(|_, _, _| DVector::from_vec(vec![f64::NAN])),
                Box::new(|_, _, _| DMatrix::zeros(1, 1)),
                Box::new(|_, _, _| DMatrix::zeros(1, 1)),
            )
            .terminal_time(TerminalTimeMode::Fixed)
            .build()
            .unwrap();
        assert!(matches!(
            def.dynamics(&DVector::zeros(1), &DVector::zeros(1), 0.0),
            Err(Error::NonFiniteValue(_))
        ));
    }

    #[test]
    fn performance_index_of_brach_a_seed_is_its_horizon() {
        let (def, traj) = builtin_problem("brachA", 101).unwrap();
        let j = performance_index(&def, &traj).unwrap();
        let expected = (8.0 * 3.0_f64.sqrt() / 15.0).sqrt();
        assert_relative_eq!(j, expected, epsilon = 1e-12);
        assert!((j - 0.9611).abs() < 1e-4);
    }

    #[test]
    fn performance_index_pure_terminal_cost() {
        let def = OcpDefinition::builder(1, 1)
            .initial_state(0.0, DVector::zeros(1))
            .dynamics(
                Box::new(|_, u: &DVector<f64>, _| u.clone()),
                Box::new(|_, _, _| DMatrix::zeros(1, 1)),
                Box::new(|_, _, _| DMatrix::identity(1, 1)),
            )
            .terminal_cost(
                Box::new(|_, t| t),
                Box::new(|_, _| DVector::zeros(1)),
                Box::new(|_, _| 1.0),
                Box::new(|_, _| DVector::zeros(1)),
                Box::new(|_, _| DMatrix::zeros(1, 1)),
            )
            .build()
            .unwrap();
        let traj = TrajectoryState::new(DMatrix::zeros(5, 1), DMatrix::zeros(5, 1), 0.0, 2.0).unwrap();
        assert_eq!(performance_index(&def, &traj).unwrap(), 2.0);
    }

    #[test]
    fn performance_index_constant_running_cost() {
        // x' = u with u = 1 on [0, 1] and L = u^2/2 integrates to 0.5
        let (def, _) = builtin_problem("lq", 5).unwrap();
        let x = DMatrix::from_fn(5, 2, |i, j| {
            let t = i as f64 / 4.0;
            if j == 0 {
                0.5 * t * t
            } else {
                t
            }
        });
        let u = DMatrix::from_element(5, 1, 1.0);
        let traj = TrajectoryState::new(x, u, 0.0, 1.0).unwrap();
        assert_relative_eq!(
            performance_index(&def, &traj).unwrap(),
            0.5,
            epsilon = 1e-14
        );
    }

    #[test]
    fn lagrange_integrand_reproduces_time_cost() {
        let (def, traj) = builtin_problem("brachA", 5).unwrap();
        // phi = t makes the integral form's integrand identically one
        let theta = lagrange_integrand(
            &def,
            &traj.state_at(3),
            &traj.control_at(3),
            traj.grid().node_time(3),
        )
        .unwrap();
        assert_relative_eq!(theta, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn stacked_round_trip_is_exact() {
        let (_, traj) = builtin_problem("brachB", 17).unwrap();
        let v = traj.to_stacked();
        assert_eq!(v.len(), 17 * 4 + 1);
        let back = TrajectoryState::from_stacked(3, 1, 17, traj.t0(), &v).unwrap();
        assert_eq!(back.x_nodes(), traj.x_nodes());
        assert_eq!(back.u_nodes(), traj.u_nodes());
        assert_eq!(back.t_f(), traj.t_f());
    }

    #[test]
    fn from_stacked_rejects_collapsed_horizon() {
        let (_, traj) = builtin_problem("brachA", 5).unwrap();
        let mut v = traj.to_stacked();
        let last = v.len() - 1;
        v[last] = -1.0;
        assert!(TrajectoryState::from_stacked(3, 1, 5, traj.t0(), &v).is_err());
    }

    #[test]
    fn revisions_are_unique() {
        let (_, a) = builtin_problem("brachA", 5).unwrap();
        let (_, b) = builtin_problem("brachA", 5).unwrap();
        assert_ne!(a.revision(), b.revision());
    }

    #[test]
    fn validate_against_catches_perturbed_initial_node() {
        let (def, traj) = builtin_problem("brachA", 5).unwrap();
        traj.validate_against(&def).unwrap();
        let mut x = traj.x_nodes().clone();
        x[(0, 1)] += 1e-9;
        let bad = TrajectoryState::new(x, traj.u_nodes().clone(), traj.t0(), traj.t_f()).unwrap();
        assert!(bad.validate_against(&def).is_err());
    }
}
