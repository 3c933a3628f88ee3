//! Backward sweeps for the transition matrices and the adjoint
//! accumulator, plus forward propagation of control variations.
//!
//! Writing `Psi_i` for the transition matrix of the linearized dynamics
//! from node time `t_i` to `t_f`, the table holds
//!
//! ```text
//!     psi[i] = Psi(t_f, t_i),            d Psi(t_f, t)/dt = -Psi f_x(t)
//!     w[i]   = integral over [t_i, t_f] of Psi(s, t_i)^T q(s) ds,
//!     q      = L_x + phi_tx + phi_xx f + f_x^T phi_x
//! ```
//!
//! `w` is obtained from its equivalent backward differential form
//! `dw/dt = -f_x^T w - q`, `w(t_f) = 0`, so the whole table costs one
//! O(N) backward pass instead of O(N^2) pairwise quadratures. Both sweeps
//! step node to node with the classical fourth-order scheme, linearly
//! interpolating the coefficients at half steps to match the
//! piecewise-linear data model.

use alloc::format;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::Error;
use crate::ocp::{OcpDefinition, TrajectoryState};

/// Transition matrices to the terminal time and the adjoint accumulator,
/// both sampled at the grid nodes. Tied to the trajectory revision it was
/// built from; consumers must not mix tables across trajectories.
#[derive(Debug, Clone)]
pub struct TransitionTable {
    pub psi: Vec<DMatrix<f64>>,
    pub w: Vec<DVector<f64>>,
    revision: u64,
}

impl TransitionTable {
    /// Runs the fused backward sweep for `psi` and `w`.
    pub fn build(def: &OcpDefinition, traj: &TrajectoryState) -> Result<Self, Error> {
        let (psi, w) = backward_sweep(def, traj)?;
        Ok(Self {
            psi,
            w,
            revision: traj.revision(),
        })
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    /// Fails when the table was built from a different trajectory.
    pub fn check_current(&self, traj: &TrajectoryState) -> Result<(), Error> {
        if self.revision != traj.revision() {
            return Err(Error::StaleInput(format!(
                "transition table revision {} does not match trajectory revision {}",
                self.revision,
                traj.revision()
            )));
        }
        Ok(())
    }
}

/// Node samples of the coefficients entering the sweeps.
struct NodeData {
    fx: Vec<DMatrix<f64>>,
    q: Vec<DVector<f64>>,
}

fn node_data(def: &OcpDefinition, traj: &TrajectoryState) -> Result<NodeData, Error> {
    let grid = traj.grid();
    let nn = grid.n_nodes;
    let mut fx = Vec::with_capacity(nn);
    let mut q = Vec::with_capacity(nn);
    for i in 0..nn {
        let x = traj.state_at(i);
        let u = traj.control_at(i);
        let t = grid.node_time(i);
        let jx = def.dynamics_jacobian_x(&x, &u, t)?;
        let f = def.dynamics(&x, &u, t)?;
        let lx = def.running_cost_grad_x(&x, &u, t)?;
        let ptx = def.terminal_cost_cross(&x, t)?;
        let pxx = def.terminal_cost_hess_x(&x, t)?;
        let px = def.terminal_cost_grad_x(&x, t)?;
        let qi = lx + ptx + &pxx * f + jx.transpose() * px;
        fx.push(jx);
        q.push(qi);
    }
    Ok(NodeData { fx, q })
}

fn backward_sweep(
    def: &OcpDefinition,
    traj: &TrajectoryState,
) -> Result<(Vec<DMatrix<f64>>, Vec<DVector<f64>>), Error> {
    let grid = traj.grid();
    let nn = grid.n_nodes;
    let n = def.n;
    let data = node_data(def, traj)?;
    let mut psi: Vec<DMatrix<f64>> = Vec::with_capacity(nn);
    let mut w: Vec<DVector<f64>> = Vec::with_capacity(nn);
    psi.resize(nn, DMatrix::zeros(0, 0));
    w.resize(nn, DVector::zeros(0));
    psi[nn - 1] = DMatrix::identity(n, n);
    w[nn - 1] = DVector::zeros(n);
    let h = -grid.spacing();
    for i in (1..nn).rev() {
        // one fourth-order step from t_i down to t_{i-1}; coefficients
        // interpolate linearly, so the midpoint uses the node average
        let a0 = &data.fx[i];
        let a1 = &data.fx[i - 1];
        let am = (a0 + a1) * 0.5;
        let q0 = &data.q[i];
        let q1 = &data.q[i - 1];
        let qm = (q0 + q1) * 0.5;
        let p = &psi[i];
        let v = &w[i];

        let k1p = -(p * a0);
        let k1w = -(a0.transpose() * v) - q0;
        let p2 = p + &k1p * (h / 2.0);
        let v2 = v + &k1w * (h / 2.0);
        let k2p = -(&p2 * &am);
        let k2w = -(am.transpose() * &v2) - &qm;
        let p3 = p + &k2p * (h / 2.0);
        let v3 = v + &k2w * (h / 2.0);
        let k3p = -(&p3 * &am);
        let k3w = -(am.transpose() * &v3) - &qm;
        let p4 = p + &k3p * h;
        let v4 = v + &k3w * h;
        let k4p = -(&p4 * a1);
        let k4w = -(a1.transpose() * &v4) - q1;

        psi[i - 1] = p + (k1p + k2p * 2.0 + k3p * 2.0 + k4p) * (h / 6.0);
        w[i - 1] = v + (k1w + k2w * 2.0 + k3w * 2.0 + k4w) * (h / 6.0);
    }
    Ok((psi, w))
}

/// Transition matrices `Psi(t_f, t_i)` for every node (the `psi` half of
/// the table).
pub fn backward_transition_sweep(
    def: &OcpDefinition,
    traj: &TrajectoryState,
) -> Result<Vec<DMatrix<f64>>, Error> {
    Ok(backward_sweep(def, traj)?.0)
}

/// Adjoint accumulator `w` for every node (the `w` half of the table).
pub fn adjoint_sweep(def: &OcpDefinition, traj: &TrajectoryState) -> Result<Vec<DVector<f64>>, Error> {
    Ok(backward_sweep(def, traj)?.1)
}

/// Cost gradient with respect to the control under the dynamics
/// constraint: `p_u(t_i) = L_u + f_u^T (phi_x + w(t_i))`, one row per
/// node.
pub fn compute_pu(
    def: &OcpDefinition,
    traj: &TrajectoryState,
    table: &TransitionTable,
) -> Result<DMatrix<f64>, Error> {
    table.check_current(traj)?;
    let grid = traj.grid();
    let nn = grid.n_nodes;
    let mut out = DMatrix::zeros(nn, def.m);
    for i in 0..nn {
        let x = traj.state_at(i);
        let u = traj.control_at(i);
        let t = grid.node_time(i);
        let lu = def.running_cost_grad_u(&x, &u, t)?;
        let fu = def.dynamics_jacobian_u(&x, &u, t)?;
        let px = def.terminal_cost_grad_x(&x, t)?;
        let pi = lu + fu.transpose() * (px + &table.w[i]);
        for k in 0..def.m {
            out[(i, k)] = pi[k];
        }
    }
    Ok(out)
}

/// Propagates a control variation field through the linearized dynamics:
/// integrates `d(dx)/dt = f_x dx + f_u du` forward from zero with
/// fourth-order node-to-node steps, `du` interpolated linearly at half
/// steps. Returns the state-variation field, one row per node; row 0 is
/// exactly zero.
pub fn propagate_variation(
    def: &OcpDefinition,
    traj: &TrajectoryState,
    du_dtau: &DMatrix<f64>,
) -> Result<DMatrix<f64>, Error> {
    let grid = traj.grid();
    let nn = grid.n_nodes;
    let n = def.n;
    if du_dtau.nrows() != nn || du_dtau.ncols() != def.m {
        return Err(Error::ShapeMismatch(format!(
            "control variation: expected {}x{}, got {}x{}",
            nn,
            def.m,
            du_dtau.nrows(),
            du_dtau.ncols()
        )));
    }
    let mut fx = Vec::with_capacity(nn);
    let mut fu = Vec::with_capacity(nn);
    for i in 0..nn {
        let x = traj.state_at(i);
        let u = traj.control_at(i);
        let t = grid.node_time(i);
        fx.push(def.dynamics_jacobian_x(&x, &u, t)?);
        fu.push(def.dynamics_jacobian_u(&x, &u, t)?);
    }
    let h = grid.spacing();
    let mut out = DMatrix::zeros(nn, n);
    let mut dx = DVector::zeros(n);
    for i in 0..nn - 1 {
        let a0 = &fx[i];
        let a1 = &fx[i + 1];
        let am = (a0 + a1) * 0.5;
        let b0 = &fu[i];
        let b1 = &fu[i + 1];
        let bm = (b0 + b1) * 0.5;
        let du0 = du_dtau.row(i).transpose();
        let du1 = du_dtau.row(i + 1).transpose();
        let dum = (&du0 + &du1) * 0.5;

        let k1 = a0 * &dx + b0 * &du0;
        let k2 = &am * (&dx + &k1 * (h / 2.0)) + &bm * &dum;
        let k3 = &am * (&dx + &k2 * (h / 2.0)) + &bm * &dum;
        let k4 = a1 * (&dx + &k3 * h) + b1 * &du1;
        dx += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        for j in 0..n {
            out[(i + 1, j)] = dx[j];
        }
    }
    Ok(out)
}
