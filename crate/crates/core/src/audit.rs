//! Finite-difference audit of user-supplied derivative callbacks.
//!
//! Every analytic partial in an [`OcpDefinition`] is compared against a
//! central difference of its value callback at points sampled uniformly
//! from the definition's audit bounds. The audit passes when every
//! relative error stays at or below [`AUDIT_TOLERANCE`].

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Error;
use crate::ocp::OcpDefinition;

/// Relative tolerance every audited partial must meet.
pub const AUDIT_TOLERANCE: f64 = 1e-5;

/// Worst observed disagreement for one derivative callback.
#[derive(Debug, Clone)]
pub struct AuditEntry {
    pub name: &'static str,
    pub max_rel_err: f64,
    /// Evaluation point of the worst disagreement, human readable.
    pub worst_point: String,
}

impl AuditEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err <= AUDIT_TOLERANCE
    }
}

/// Full audit outcome, one entry per derivative callback.
#[derive(Debug, Clone)]
pub struct AuditReport {
    pub entries: Vec<AuditEntry>,
    pub samples: usize,
    pub fd_step: f64,
    pub seed: u64,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(AuditEntry::passed)
    }
}

impl fmt::Display for AuditReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "derivative audit: {} samples, step {:e}, seed {}, tolerance {:e}",
            self.samples, self.fd_step, self.seed, AUDIT_TOLERANCE
        )?;
        for e in &self.entries {
            writeln!(
                f,
                "  {:>8}  max rel err {:>12.5e}  {}  {}",
                e.name,
                e.max_rel_err,
                if e.passed() { "ok" } else { "FAIL" },
                if e.passed() { "" } else { e.worst_point.as_str() }
            )?;
        }
        write!(
            f,
            "result: {}",
            if self.passed() { "pass" } else { "FAIL" }
        )
    }
}

struct Tracker {
    name: &'static str,
    max_rel_err: f64,
    worst_point: String,
}

impl Tracker {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            max_rel_err: 0.0,
            worst_point: String::new(),
        }
    }

    fn record(&mut self, analytic: f64, estimate: f64, point: &dyn Fn() -> String) {
        let err = if analytic.is_finite() && estimate.is_finite() {
            (analytic - estimate).abs() / analytic.abs().max(estimate.abs()).max(1.0)
        } else {
            f64::INFINITY
        };
        if err > self.max_rel_err {
            self.max_rel_err = err;
            self.worst_point = point();
        }
    }

    fn fail(&mut self, point: &dyn Fn() -> String) {
        self.max_rel_err = f64::INFINITY;
        self.worst_point = point();
    }

    fn into_entry(self) -> AuditEntry {
        AuditEntry {
            name: self.name,
            max_rel_err: self.max_rel_err,
            worst_point: self.worst_point,
        }
    }
}

fn fmt_vec(v: &DVector<f64>) -> String {
    let mut s = String::from("[");
    for (i, e) in v.iter().enumerate() {
        if i > 0 {
            s.push_str(", ");
        }
        s.push_str(&format!("{e:.6}"));
    }
    s.push(']');
    s
}

/// Compares every analytic partial against a central finite difference at
/// `samples` randomly drawn points. `h` is the difference step; `seed`
/// makes the sampling reproducible.
pub fn audit_derivatives(
    def: &OcpDefinition,
    samples: usize,
    h: f64,
    seed: u64,
) -> Result<AuditReport, Error> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    if samples == 0 {
        return Err(Error::InvalidConfig("audit needs at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = &def.bounds;
    let n = def.n;
    let m = def.m;

    let mut t_fx = Tracker::new("f_x");
    let mut t_fu = Tracker::new("f_u");
    let mut t_lx = Tracker::new("L_x");
    let mut t_lu = Tracker::new("L_u");
    let mut t_px = Tracker::new("phi_x");
    let mut t_pt = Tracker::new("phi_t");
    let mut t_ptx = Tracker::new("phi_tx");
    let mut t_pxx = Tracker::new("phi_xx");
    let mut t_gex = Tracker::new("g_E_xf");
    let mut t_get = Tracker::new("g_E_tf");
    let mut t_gix = Tracker::new("g_I_xf");
    let mut t_git = Tracker::new("g_I_tf");

    let draw = |lo: f64, hi: f64, rng: &mut ChaCha8Rng| lo + (hi - lo) * rng.gen::<f64>();

    for _ in 0..samples {
        let x = DVector::from_fn(n, |j, _| draw(b.x_lo[j], b.x_hi[j], &mut rng));
        let u = DVector::from_fn(m, |k, _| draw(b.u_lo[k], b.u_hi[k], &mut rng));
        let t = draw(b.t_range.0, b.t_range.1, &mut rng);
        let tf = draw(b.tf_range.0, b.tf_range.1, &mut rng);
        let running_point = {
            let (x, u) = (x.clone(), u.clone());
            move || format!("x={} u={} t={t:.6}", fmt_vec(&x), fmt_vec(&u))
        };
        let terminal_point = {
            let x = x.clone();
            move || format!("x_f={} t_f={tf:.6}", fmt_vec(&x))
        };

        // dynamics and running-cost partials at (x, u, t)
        let fx = def.dynamics_jacobian_x(&x, &u, t);
        let fu = def.dynamics_jacobian_u(&x, &u, t);
        let lx = def.running_cost_grad_x(&x, &u, t);
        let lu = def.running_cost_grad_u(&x, &u, t);
        match (fx, lx) {
            (Ok(fx), Ok(lx)) => {
                for j in 0..n {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[j] += h;
                    xm[j] -= h;
                    match (
                        def.dynamics(&xp, &u, t),
                        def.dynamics(&xm, &u, t),
                        def.running_cost(&xp, &u, t),
                        def.running_cost(&xm, &u, t),
                    ) {
                        (Ok(fp), Ok(fm), Ok(lp), Ok(lm)) => {
                            for i in 0..n {
                                t_fx.record(fx[(i, j)], (fp[i] - fm[i]) / (2.0 * h), &running_point);
                            }
                            t_lx.record(lx[j], (lp - lm) / (2.0 * h), &running_point);
                        }
                        _ => {
                            t_fx.fail(&running_point);
                            t_lx.fail(&running_point);
                        }
                    }
                }
            }
            _ => {
                t_fx.fail(&running_point);
                t_lx.fail(&running_point);
            }
        }
        match (fu, lu) {
            (Ok(fu), Ok(lu)) => {
                for k in 0..m {
                    let mut up = u.clone();
                    let mut um = u.clone();
                    up[k] += h;
                    um[k] -= h;
                    match (
                        def.dynamics(&x, &up, t),
                        def.dynamics(&x, &um, t),
                        def.running_cost(&x, &up, t),
                        def.running_cost(&x, &um, t),
                    ) {
                        (Ok(fp), Ok(fm), Ok(lp), Ok(lm)) => {
                            for i in 0..n {
                                t_fu.record(fu[(i, k)], (fp[i] - fm[i]) / (2.0 * h), &running_point);
                            }
                            t_lu.record(lu[k], (lp - lm) / (2.0 * h), &running_point);
                        }
                        _ => {
                            t_fu.fail(&running_point);
                            t_lu.fail(&running_point);
                        }
                    }
                }
            }
            _ => {
                t_fu.fail(&running_point);
                t_lu.fail(&running_point);
            }
        }

        // terminal-cost partials at (x, t): gradient, time slope, cross
        // derivative (time difference of the gradient), Hessian
        match def.terminal_cost_grad_x(&x, t) {
            Ok(px) => {
                for j in 0..n {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[j] += h;
                    xm[j] -= h;
                    match (def.terminal_cost(&xp, t), def.terminal_cost(&xm, t)) {
                        (Ok(pp), Ok(pm)) => {
                            t_px.record(px[j], (pp - pm) / (2.0 * h), &running_point)
                        }
                        _ => t_px.fail(&running_point),
                    }
                }
            }
            _ => t_px.fail(&running_point),
        }
        match (
            def.terminal_cost_time(&x, t),
            def.terminal_cost(&x, t + h),
            def.terminal_cost(&x, t - h),
        ) {
            (Ok(pt), Ok(pp), Ok(pm)) => t_pt.record(pt, (pp - pm) / (2.0 * h), &running_point),
            _ => t_pt.fail(&running_point),
        }
        match (
            def.terminal_cost_cross(&x, t),
            def.terminal_cost_grad_x(&x, t + h),
            def.terminal_cost_grad_x(&x, t - h),
        ) {
            (Ok(ptx), Ok(gp), Ok(gm)) => {
                for j in 0..n {
                    t_ptx.record(ptx[j], (gp[j] - gm[j]) / (2.0 * h), &running_point);
                }
            }
            _ => t_ptx.fail(&running_point),
        }
        match def.terminal_cost_hess_x(&x, t) {
            Ok(pxx) => {
                for j in 0..n {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[j] += h;
                    xm[j] -= h;
                    match (
                        def.terminal_cost_grad_x(&xp, t),
                        def.terminal_cost_grad_x(&xm, t),
                    ) {
                        (Ok(gp), Ok(gm)) => {
                            for i in 0..n {
                                t_pxx.record(pxx[(i, j)], (gp[i] - gm[i]) / (2.0 * h), &running_point);
                            }
                        }
                        _ => t_pxx.fail(&running_point),
                    }
                }
            }
            _ => t_pxx.fail(&running_point),
        }

        // constraint partials at (x_f, t_f)
        audit_constraint_block(
            def.q_e,
            &x,
            tf,
            h,
            &mut t_gex,
            &mut t_get,
            &terminal_point,
            &|xq, tq| def.equality_constraints(xq, tq),
            &|xq, tq| def.equality_jacobian_x(xq, tq),
            &|xq, tq| def.equality_time_grad(xq, tq),
        );
        audit_constraint_block(
            def.q_i,
            &x,
            tf,
            h,
            &mut t_gix,
            &mut t_git,
            &terminal_point,
            &|xq, tq| def.inequality_constraints(xq, tq),
            &|xq, tq| def.inequality_jacobian_x(xq, tq),
            &|xq, tq| def.inequality_time_grad(xq, tq),
        );
    }

    Ok(AuditReport {
        entries: alloc::vec![
            t_fx.into_entry(),
            t_fu.into_entry(),
            t_lx.into_entry(),
            t_lu.into_entry(),
            t_px.into_entry(),
            t_pt.into_entry(),
            t_ptx.into_entry(),
            t_pxx.into_entry(),
            t_gex.into_entry(),
            t_get.into_entry(),
            t_gix.into_entry(),
            t_git.into_entry(),
        ],
        samples,
        fd_step: h,
        seed,
    })
}

#[allow(clippy::too_many_arguments)]
fn audit_constraint_block(
    rows: usize,
    x: &DVector<f64>,
    tf: f64,
    h: f64,
    t_jac: &mut Tracker,
    t_time: &mut Tracker,
    point: &dyn Fn() -> String,
    value: &dyn Fn(&DVector<f64>, f64) -> Result<DVector<f64>, Error>,
    jac: &dyn Fn(&DVector<f64>, f64) -> Result<nalgebra::DMatrix<f64>, Error>,
    time_grad: &dyn Fn(&DVector<f64>, f64) -> Result<DVector<f64>, Error>,
) {
    if rows == 0 {
        return;
    }
    let n = x.len();
    match jac(x, tf) {
        Ok(gx) => {
            for j in 0..n {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += h;
                xm[j] -= h;
                match (value(&xp, tf), value(&xm, tf)) {
                    (Ok(gp), Ok(gm)) => {
                        for r in 0..rows {
                            t_jac.record(gx[(r, j)], (gp[r] - gm[r]) / (2.0 * h), point);
                        }
                    }
                    _ => t_jac.fail(point),
                }
            }
        }
        _ => t_jac.fail(point),
    }
    match (time_grad(x, tf), value(x, tf + h), value(x, tf - h)) {
        (Ok(gt), Ok(gp), Ok(gm)) => {
            for r in 0..rows {
                t_time.record(gt[r], (gp[r] - gm[r]) / (2.0 * h), point);
            }
        }
        _ => t_time.fail(point),
    }
}
