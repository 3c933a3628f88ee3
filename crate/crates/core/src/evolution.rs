//! The flow right-hand side: active-set detection, the multiplier
//! system, the working-set selection loop, and the evolution laws for
//! the control field and the terminal time.
//!
//! One evaluation runs the pipeline
//!
//! ```text
//!     sweeps -> p_u -> working set + multipliers -> du/dtau, dt_f/dtau
//!            -> state variation -> optional node-motion correction
//! ```
//!
//! and returns the stacked derivative `[x rows | u rows | t_f]` together
//! with the resolved active set and per-evaluation diagnostics.
//!
//! The multiplier system `M pi = -r` is assembled over the stacked
//! constraint rows `g = [g_E; g_I(working)]` so that the implied drift of
//! every held row vanishes (equalities) or decays at the barrier rate
//! (working inequalities). A misheld row whose multiplier comes out
//! negative is released, most negative first, and released rows are not
//! reconsidered within the same evaluation.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::Error;
use crate::grid::node_motion_term;
use crate::ocp::{lagrange_integrand, performance_index, OcpDefinition, TerminalTimeMode, TrajectoryState};
use crate::sweeps::{compute_pu, propagate_variation, TransitionTable};

/// Flow gains. `control_gain` is the positive-definite matrix weighting
/// the control descent, `tf_gain` the terminal-time rate (zero exactly
/// when the horizon is fixed), `barrier_gains` the per-constraint decay
/// rates of the numerical soft barrier, and `activation_tolerance` the
/// slack below zero at which an inequality row counts as active.
#[derive(Debug, Clone)]
pub struct GainConfig {
    pub control_gain: DMatrix<f64>,
    pub tf_gain: f64,
    pub barrier_gains: DVector<f64>,
    pub activation_tolerance: f64,
}

/// Default activation tolerance in constraint units.
pub const DEFAULT_ACTIVATION_TOLERANCE: f64 = 1e-9;

impl GainConfig {
    /// Benchmark defaults: control gain 0.1 on the identity, time gain
    /// 0.05 (zeroed for fixed-horizon problems), barrier rate 0.1.
    pub fn defaults(def: &OcpDefinition) -> Self {
        let tf_gain = match def.terminal_time_mode {
            TerminalTimeMode::Free => 0.05,
            TerminalTimeMode::Fixed => 0.0,
        };
        Self {
            control_gain: DMatrix::identity(def.m, def.m) * 0.1,
            tf_gain,
            barrier_gains: DVector::from_element(def.q_i, 0.1),
            activation_tolerance: DEFAULT_ACTIVATION_TOLERANCE,
        }
    }

    /// Scalar gains broadcast to the required shapes, validated.
    pub fn uniform(
        def: &OcpDefinition,
        control: f64,
        tf: f64,
        barrier: f64,
    ) -> Result<Self, Error> {
        let cfg = Self {
            control_gain: DMatrix::identity(def.m, def.m) * control,
            tf_gain: tf,
            barrier_gains: DVector::from_element(def.q_i, barrier),
            activation_tolerance: DEFAULT_ACTIVATION_TOLERANCE,
        };
        cfg.validate(def)?;
        Ok(cfg)
    }

    pub fn validate(&self, def: &OcpDefinition) -> Result<(), Error> {
        let k = &self.control_gain;
        if k.nrows() != def.m || k.ncols() != def.m {
            return Err(Error::InvalidConfig(format!(
                "control gain must be {}x{}, got {}x{}",
                def.m,
                def.m,
                k.nrows(),
                k.ncols()
            )));
        }
        if k.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("control gain has non-finite entries".into()));
        }
        let scale = k.amax().max(1.0);
        let asym = (k - k.transpose()).amax();
        if asym > 1e-10 * scale {
            return Err(Error::InvalidConfig(format!(
                "control gain asymmetric: max deviation {asym:.3e}"
            )));
        }
        if k.clone().cholesky().is_none() {
            return Err(Error::InvalidConfig(
                "control gain is not positive-definite".into(),
            ));
        }
        if !self.tf_gain.is_finite() || self.tf_gain < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "terminal-time gain must be finite and non-negative, got {}",
                self.tf_gain
            )));
        }
        match def.terminal_time_mode {
            TerminalTimeMode::Fixed if self.tf_gain != 0.0 => {
                return Err(Error::InvalidConfig(
                    "terminal-time gain must be zero for a fixed horizon".into(),
                ));
            }
            TerminalTimeMode::Free if self.tf_gain == 0.0 => {
                return Err(Error::InvalidConfig(
                    "terminal-time gain must be positive for a free horizon".into(),
                ));
            }
            _ => {}
        }
        if self.barrier_gains.len() != def.q_i {
            return Err(Error::InvalidConfig(format!(
                "barrier gains: expected {} entries, got {}",
                def.q_i,
                self.barrier_gains.len()
            )));
        }
        if self.barrier_gains.iter().any(|&g| !(g > 0.0) || !g.is_finite()) {
            return Err(Error::InvalidConfig(
                "barrier gains must be positive and finite".into(),
            ));
        }
        if !self.activation_tolerance.is_finite() || self.activation_tolerance < 0.0 {
            return Err(Error::InvalidConfig(
                "activation tolerance must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Toggles for the optional parts of the flow law.
#[derive(Debug, Clone, Copy)]
pub struct EvolutionOptions {
    /// Add the convective corrections that account for node times moving
    /// with the terminal time.
    pub node_motion: bool,
    /// Append the soft-barrier decay term to the multiplier system.
    pub barrier: bool,
}

impl Default for EvolutionOptions {
    fn default() -> Self {
        Self {
            node_motion: true,
            barrier: true,
        }
    }
}

/// One pass of the working-set loop, for diagnostics.
#[derive(Debug, Clone)]
pub struct WorkingSetPass {
    pub working: Vec<usize>,
    pub pi: DVector<f64>,
    pub dropped: Option<usize>,
}

/// Resolved constraint activity and multipliers for one evaluation.
#[derive(Debug, Clone)]
pub struct ActiveSetState {
    /// Inequality rows at or beyond their bound.
    pub active: Vec<usize>,
    /// The subset held as equalities in the flow law.
    pub working: Vec<usize>,
    pub pi_e: DVector<f64>,
    /// Full-length vector; exactly zero off the working set,
    /// non-negative on it.
    pub pi_i: DVector<f64>,
    pub passes: Vec<WorkingSetPass>,
    pub m_cond: f64,
    pub degenerate: bool,
}

impl ActiveSetState {
    /// Working-set membership as a bitmask (inequality index = bit).
    pub fn working_mask(&self) -> u64 {
        let mut mask = 0u64;
        for &i in &self.working {
            mask |= 1 << i;
        }
        mask
    }
}

/// Inequality rows counted as active: `(g_I)_i >= -activation_tolerance`.
/// Violated rows are deliberately included so the barrier can pull them
/// back.
pub fn detect_active(
    def: &OcpDefinition,
    traj: &TrajectoryState,
    gains: &GainConfig,
) -> Result<Vec<usize>, Error> {
    let x_f = traj.terminal_state();
    let gi = def.inequality_constraints(&x_f, traj.t_f())?;
    Ok((0..def.q_i)
        .filter(|&i| gi[i] >= -gains.activation_tolerance)
        .collect())
}

/// Trajectory-level quantities the multiplier system is composed from.
/// Everything here is independent of the working-set choice, so the
/// selection loop builds this once and re-stacks rows per candidate set.
struct SystemCache {
    /// Transition-weighted control maps `Psi_i f_u(t_i)` per node.
    a: Vec<DMatrix<f64>>,
    /// Quadrature weights of the shared grid rule.
    weights: Vec<f64>,
    /// `sum_i w_i A_i K A_i^T`.
    b: DMatrix<f64>,
    /// `sum_i w_i A_i K p_u(t_i)`.
    d: DVector<f64>,
    /// Lagrange-form integrand at the terminal node.
    theta_f: f64,
    ge: DVector<f64>,
    gi: DVector<f64>,
    ge_x: DMatrix<f64>,
    gi_x: DMatrix<f64>,
    /// Total time rates `g_x f + g_t` at the terminal point.
    ge_c: DVector<f64>,
    gi_c: DVector<f64>,
}

fn build_cache(
    def: &OcpDefinition,
    traj: &TrajectoryState,
    table: &TransitionTable,
    pu: &DMatrix<f64>,
    gains: &GainConfig,
) -> Result<SystemCache, Error> {
    table.check_current(traj)?;
    let grid = traj.grid();
    let nn = grid.n_nodes;
    let n = def.n;
    let k = &gains.control_gain;
    if pu.nrows() != nn || pu.ncols() != def.m {
        return Err(Error::ShapeMismatch(format!(
            "control gradient: expected {}x{}, got {}x{}",
            nn,
            def.m,
            pu.nrows(),
            pu.ncols()
        )));
    }

    let mut a = Vec::with_capacity(nn);
    let mut weights = Vec::with_capacity(nn);
    let mut b = DMatrix::zeros(n, n);
    let mut d = DVector::zeros(n);
    for i in 0..nn {
        let x = traj.state_at(i);
        let u = traj.control_at(i);
        let t = grid.node_time(i);
        let fu = def.dynamics_jacobian_u(&x, &u, t)?;
        let ai = &table.psi[i] * fu;
        let w = grid.weight(i);
        let aik = &ai * k;
        b += &aik * ai.transpose() * w;
        d += &aik * pu.row(i).transpose() * w;
        a.push(ai);
        weights.push(w);
    }
    // b is symmetric in exact arithmetic; keep it that way in floating point
    b = (&b + b.transpose()) * 0.5;

    let x_f = traj.terminal_state();
    let u_f = traj.control_at(nn - 1);
    let t_f = traj.t_f();
    let f_f = def.dynamics(&x_f, &u_f, t_f)?;
    let theta_f = lagrange_integrand(def, &x_f, &u_f, t_f)?;
    let ge = def.equality_constraints(&x_f, t_f)?;
    let ge_x = def.equality_jacobian_x(&x_f, t_f)?;
    let ge_c = &ge_x * &f_f + def.equality_time_grad(&x_f, t_f)?;
    let gi = def.inequality_constraints(&x_f, t_f)?;
    let gi_x = def.inequality_jacobian_x(&x_f, t_f)?;
    let gi_c = &gi_x * &f_f + def.inequality_time_grad(&x_f, t_f)?;

    Ok(SystemCache {
        a,
        weights,
        b,
        d,
        theta_f,
        ge,
        gi,
        ge_x,
        gi_x,
        ge_c,
        gi_c,
    })
}

/// Constraint rows stacked for one working-set candidate.
struct StackedRows {
    g_x: DMatrix<f64>,
    c: DVector<f64>,
}

fn stack_rows(def: &OcpDefinition, cache: &SystemCache, working: &[usize]) -> StackedRows {
    let dim = def.q_e + working.len();
    let mut g_x = DMatrix::zeros(dim, def.n);
    let mut c = DVector::zeros(dim);
    for row in 0..def.q_e {
        g_x.row_mut(row).copy_from(&cache.ge_x.row(row));
        c[row] = cache.ge_c[row];
    }
    for (j, &idx) in working.iter().enumerate() {
        g_x.row_mut(def.q_e + j).copy_from(&cache.gi_x.row(idx));
        c[def.q_e + j] = cache.gi_c[idx];
    }
    StackedRows { g_x, c }
}

fn compose_system(
    def: &OcpDefinition,
    cache: &SystemCache,
    rows: &StackedRows,
    working: &[usize],
    gains: &GainConfig,
    barrier_on: bool,
) -> Result<(DMatrix<f64>, DVector<f64>), Error> {
    let mut m = &rows.g_x * &cache.b * rows.g_x.transpose()
        + &rows.c * rows.c.transpose() * gains.tf_gain;
    let scale = m.amax().max(1.0);
    let asym = (&m - m.transpose()).amax();
    if asym > 1e-10 * scale {
        return Err(Error::InvalidDefinition(format!(
            "multiplier matrix asymmetric beyond tolerance ({asym:.3e} vs scale {scale:.3e}); \
             constraint derivatives are inconsistent"
        )));
    }
    m = (&m + m.transpose()) * 0.5;
    let mut r = &rows.g_x * &cache.d + &rows.c * (gains.tf_gain * cache.theta_f);
    if barrier_on {
        // the barrier row makes the implied drift of a held inequality
        // equal -k_g g_I instead of 0, damping accumulated violations
        for (j, &idx) in working.iter().enumerate() {
            r[def.q_e + j] -= gains.barrier_gains[idx] * cache.gi[idx];
        }
    }
    Ok((m, r))
}

/// Multiplier system for a given working set. Integrals use the shared
/// grid quadrature; the matrix is symmetrized after an asymmetry check.
/// An empty constraint stack yields a valid zero-dimensional system.
pub fn assemble_system(
    def: &OcpDefinition,
    traj: &TrajectoryState,
    table: &TransitionTable,
    pu: &DMatrix<f64>,
    working: &[usize],
    gains: &GainConfig,
    barrier_on: bool,
) -> Result<(DMatrix<f64>, DVector<f64>), Error> {
    check_working_indices(def, working)?;
    let cache = build_cache(def, traj, table, pu, gains)?;
    let rows = stack_rows(def, &cache, working);
    compose_system(def, &cache, &rows, working, gains, barrier_on)
}

fn check_working_indices(def: &OcpDefinition, working: &[usize]) -> Result<(), Error> {
    for &i in working {
        if i >= def.q_i {
            return Err(Error::ShapeMismatch(format!(
                "working-set index {i} out of range for {} inequality constraints",
                def.q_i
            )));
        }
    }
    Ok(())
}

/// Solution of the multiplier system with conditioning diagnostics.
#[derive(Debug, Clone)]
pub struct MultiplierSolution {
    pub pi: DVector<f64>,
    /// Spectral condition estimate; clamped at the rank-decision
    /// threshold so it stays finite even for singular systems.
    pub cond: f64,
    /// Set when the system was rank-deficient and the minimum-norm
    /// least-squares solution was returned instead.
    pub degenerate: bool,
}

/// Solves `M pi = -r` by spectral decomposition of the symmetric matrix.
/// Eigenvalues below `1e-10` of the largest magnitude are treated as
/// zero, giving the minimum-norm least-squares solution plus a
/// degeneracy flag.
pub fn solve_multipliers(m: &DMatrix<f64>, r: &DVector<f64>) -> Result<MultiplierSolution, Error> {
    let dim = m.nrows();
    if m.ncols() != dim || r.len() != dim {
        return Err(Error::ShapeMismatch(format!(
            "multiplier system: matrix {}x{} with vector of length {}",
            m.nrows(),
            m.ncols(),
            r.len()
        )));
    }
    if dim == 0 {
        return Ok(MultiplierSolution {
            pi: DVector::zeros(0),
            cond: 1.0,
            degenerate: false,
        });
    }
    if m.iter().any(|v| !v.is_finite()) || r.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue(
            "multiplier system has non-finite entries".into(),
        ));
    }
    let eig = m.clone().symmetric_eigen();
    let max_abs = eig.eigenvalues.iter().fold(0.0_f64, |acc, &v| acc.max(v.abs()));
    if max_abs == 0.0 {
        return Ok(MultiplierSolution {
            pi: DVector::zeros(dim),
            cond: 1.0,
            degenerate: true,
        });
    }
    let threshold = 1e-10 * max_abs;
    let mut degenerate = false;
    let mut min_kept = max_abs;
    // minimum-norm solve: project -r on the kept eigenspace
    let proj = eig.eigenvectors.transpose() * (-r);
    let mut scaled = DVector::zeros(dim);
    for k in 0..dim {
        let lambda = eig.eigenvalues[k];
        if lambda.abs() <= threshold {
            degenerate = true;
        } else {
            scaled[k] = proj[k] / lambda;
            min_kept = min_kept.min(lambda.abs());
        }
    }
    let pi = &eig.eigenvectors * scaled;
    Ok(MultiplierSolution {
        pi,
        cond: max_abs / min_kept.max(threshold),
        degenerate,
    })
}

fn split_pi(def: &OcpDefinition, working: &[usize], pi: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let pi_e = DVector::from_fn(def.q_e, |i, _| pi[i]);
    let mut pi_i = DVector::zeros(def.q_i);
    for (j, &idx) in working.iter().enumerate() {
        pi_i[idx] = pi[def.q_e + j];
    }
    (pi_e, pi_i)
}

fn working_set_from_cache(
    def: &OcpDefinition,
    cache: &SystemCache,
    gains: &GainConfig,
    barrier_on: bool,
    active: Vec<usize>,
) -> Result<ActiveSetState, Error> {
    let mut working = active.clone();
    let mut passes: Vec<WorkingSetPass> = Vec::new();
    // every inequality either stays held or is released exactly once, so
    // q_I + 1 passes always suffice; running out means a logic bug
    for _ in 0..=def.q_i {
        let rows = stack_rows(def, cache, &working);
        let (m, r) = compose_system(def, cache, &rows, &working, gains, barrier_on)?;
        let sol = solve_multipliers(&m, &r)?;
        let tol_sign = 1e-12 * sol.pi.amax() + 1e-14;
        let mut drop: Option<(usize, f64)> = None;
        for (j, &idx) in working.iter().enumerate() {
            let value = sol.pi[def.q_e + j];
            if value < -tol_sign && drop.is_none_or(|(_, worst)| value < worst) {
                drop = Some((idx, value));
            }
        }
        passes.push(WorkingSetPass {
            working: working.clone(),
            pi: sol.pi.clone(),
            dropped: drop.map(|(idx, _)| idx),
        });
        match drop {
            Some((idx, _)) => {
                // released rows are not reconsidered within this
                // evaluation; the flow re-activates them on later steps
                // if their drift turns inward
                working.retain(|&i| i != idx);
            }
            None => {
                let (pi_e, mut pi_i) = split_pi(def, &working, &sol.pi);
                for &idx in &working {
                    // within -tol_sign of zero counts as zero
                    if pi_i[idx] < 0.0 {
                        pi_i[idx] = 0.0;
                    }
                }
                return Ok(ActiveSetState {
                    active,
                    working,
                    pi_e,
                    pi_i,
                    passes,
                    m_cond: sol.cond,
                    degenerate: sol.degenerate,
                });
            }
        }
    }
    let log: Vec<String> = passes
        .iter()
        .map(|p| format!("held {:?} dropped {:?}", p.working, p.dropped))
        .collect();
    Err(Error::ActiveSetCycle(format!(
        "working-set selection did not settle in {} passes: {}",
        def.q_i + 1,
        log.join("; ")
    )))
}

/// Resolves the working set and multipliers for the current trajectory:
/// starts from all detected-active rows held as equalities, then
/// releases rows with negative multipliers one at a time, most negative
/// first.
pub fn working_set_loop(
    def: &OcpDefinition,
    traj: &TrajectoryState,
    table: &TransitionTable,
    pu: &DMatrix<f64>,
    gains: &GainConfig,
    barrier_on: bool,
) -> Result<ActiveSetState, Error> {
    let cache = build_cache(def, traj, table, pu, gains)?;
    let active = detect_active(def, traj, gains)?;
    working_set_from_cache(def, &cache, gains, barrier_on, active)
}

/// Left side of the control stationarity condition at every node:
/// `rho_i = p_u(t_i) + f_u^T Psi_i^T (g_E_x^T pi_E + g_I_x^T pi_I)`.
/// The flow moves the control along `-K rho`; its infinity norm is the
/// control optimality residual.
pub fn stationarity_field(
    def: &OcpDefinition,
    traj: &TrajectoryState,
    table: &TransitionTable,
    pu: &DMatrix<f64>,
    aset: &ActiveSetState,
) -> Result<DMatrix<f64>, Error> {
    table.check_current(traj)?;
    let x_f = traj.terminal_state();
    let t_f = traj.t_f();
    let ge_x = def.equality_jacobian_x(&x_f, t_f)?;
    let gi_x = def.inequality_jacobian_x(&x_f, t_f)?;
    let v = ge_x.transpose() * &aset.pi_e + gi_x.transpose() * &aset.pi_i;
    let grid = traj.grid();
    let nn = grid.n_nodes;
    let mut rho = DMatrix::zeros(nn, def.m);
    for i in 0..nn {
        let x = traj.state_at(i);
        let u = traj.control_at(i);
        let t = grid.node_time(i);
        let fu = def.dynamics_jacobian_u(&x, &u, t)?;
        let row = pu.row(i).transpose() + fu.transpose() * (table.psi[i].transpose() * &v);
        for k in 0..def.m {
            rho[(i, k)] = row[k];
        }
    }
    Ok(rho)
}

/// Control half of the flow law: `du/dtau(t_i) = -K rho_i`.
pub fn control_variation(
    def: &OcpDefinition,
    traj: &TrajectoryState,
    table: &TransitionTable,
    pu: &DMatrix<f64>,
    aset: &ActiveSetState,
    gains: &GainConfig,
) -> Result<DMatrix<f64>, Error> {
    let rho = stationarity_field(def, traj, table, pu, aset)?;
    // rho rows hold transposed node vectors, so K acts from the right
    Ok(-(rho * gains.control_gain.transpose()))
}

/// Terminal-time half of the flow law. Zero exactly when the time gain
/// is zero (fixed horizon).
pub fn terminal_time_variation(
    def: &OcpDefinition,
    traj: &TrajectoryState,
    aset: &ActiveSetState,
    gains: &GainConfig,
) -> Result<f64, Error> {
    if gains.tf_gain == 0.0 {
        return Ok(0.0);
    }
    let x_f = traj.terminal_state();
    let u_f = traj.control_at(traj.n_nodes() - 1);
    let t_f = traj.t_f();
    let f_f = def.dynamics(&x_f, &u_f, t_f)?;
    let theta_f = lagrange_integrand(def, &x_f, &u_f, t_f)?;
    let ge_c = def.equality_jacobian_x(&x_f, t_f)? * &f_f + def.equality_time_grad(&x_f, t_f)?;
    let gi_c = def.inequality_jacobian_x(&x_f, t_f)? * &f_f + def.inequality_time_grad(&x_f, t_f)?;
    Ok(-gains.tf_gain * (theta_f + aset.pi_e.dot(&ge_c) + aset.pi_i.dot(&gi_c)))
}

/// Per-evaluation diagnostics surfaced into the flow history.
#[derive(Debug, Clone)]
pub struct RhsDiagnostics {
    /// Performance index of the current trajectory.
    pub j: f64,
    /// First variation of the index along the returned field; never
    /// positive.
    pub dj_dtau: f64,
    /// Infinity norm of the control stationarity residual.
    pub r_u: f64,
    /// Magnitude of the terminal-time stationarity residual.
    pub r_tf: f64,
    /// Lagrange-form integrand at the terminal node.
    pub theta_f: f64,
    pub g_e: DVector<f64>,
    pub g_i: DVector<f64>,
    /// Infinity norm of the implied equality drift; zero to linear-solve
    /// precision by construction.
    pub ge_drift: f64,
    /// Implied drift of each working inequality row, in working order;
    /// equals `-k_g g_I` with the barrier on.
    pub working_drift: DVector<f64>,
    pub m_cond: f64,
    pub degenerate: bool,
}

/// One full evaluation of the flow right-hand side. Returns the stacked
/// derivative `[x rows node-major | u rows node-major | t_f]`, the
/// resolved active set, and diagnostics.
pub fn evolution_rhs(
    def: &OcpDefinition,
    traj: &TrajectoryState,
    gains: &GainConfig,
    options: &EvolutionOptions,
) -> Result<(DVector<f64>, ActiveSetState, RhsDiagnostics), Error> {
    traj.validate_against(def)?;
    let grid = traj.grid();
    let nn = grid.n_nodes;
    let (n, m) = (def.n, def.m);

    let table = TransitionTable::build(def, traj)?;
    let pu = compute_pu(def, traj, &table)?;
    let cache = build_cache(def, traj, &table, &pu, gains)?;
    let active = detect_active(def, traj, gains)?;
    let aset = working_set_from_cache(def, &cache, gains, options.barrier, active)?;

    // flow fields at fixed node times
    let rho = stationarity_field(def, traj, &table, &pu, &aset)?;
    let mut du = -(&rho * gains.control_gain.transpose());
    let dtf = if gains.tf_gain == 0.0 {
        0.0
    } else {
        let pi_c = aset.pi_e.dot(&cache.ge_c) + aset.pi_i.dot(&cache.gi_c);
        -gains.tf_gain * (cache.theta_f + pi_c)
    };
    let mut dx = propagate_variation(def, traj, &du)?;

    // diagnostics use the fixed-time field and the assembly quadrature,
    // so held-row drifts cancel algebraically rather than to step error
    let rows = stack_rows(def, &cache, &aset.working);
    let mut moved = DVector::zeros(n);
    for i in 0..nn {
        moved += &cache.a[i] * du.row(i).transpose() * cache.weights[i];
    }
    let drift = &rows.g_x * moved + &rows.c * dtf;
    let ge_drift = (0..def.q_e).fold(0.0_f64, |acc, i| acc.max(drift[i].abs()));
    let working_drift = DVector::from_fn(aset.working.len(), |j, _| drift[def.q_e + j]);

    let pi_c = aset.pi_e.dot(&cache.ge_c) + aset.pi_i.dot(&cache.gi_c);
    let r_tf = (cache.theta_f + pi_c).abs();
    let r_u = rho.amax();
    let mut dj = (cache.theta_f + pi_c) * dtf;
    for i in 0..nn {
        dj += cache.weights[i] * rho.row(i).dot(&du.row(i));
    }
    let j = performance_index(def, traj)?;

    if options.node_motion && dtf != 0.0 {
        // nodes ride on the stretching grid; report the total derivative
        // of the node values, not just the fixed-time part
        let correction = node_motion_term(traj, def, dtf)?;
        for i in 0..nn {
            for c in 0..n {
                dx[(i, c)] += correction[(i, c)];
            }
            for c in 0..m {
                du[(i, c)] += correction[(i, n + c)];
            }
        }
    }

    let mut stacked = DVector::zeros(nn * (n + m) + 1);
    for i in 0..nn {
        for c in 0..n {
            stacked[i * n + c] = dx[(i, c)];
        }
        for c in 0..m {
            stacked[nn * n + i * m + c] = du[(i, c)];
        }
    }
    stacked[nn * (n + m)] = dtf;

    let diagnostics = RhsDiagnostics {
        j,
        dj_dtau: dj,
        r_u,
        r_tf,
        theta_f: cache.theta_f,
        g_e: cache.ge,
        g_i: cache.gi,
        ge_drift,
        working_drift,
        m_cond: aset.m_cond,
        degenerate: aset.degenerate,
    };
    Ok((stacked, aset, diagnostics))
}
