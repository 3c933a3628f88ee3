//! Embedded Runge-Kutta 4(5) stepping (Dormand-Prince coefficients)
//! over stacked state vectors, with a PI step-size controller.
//!
//! The pair has the first-same-as-last property: the seventh stage is
//! the derivative at the accepted state, so one evaluation per accepted
//! step is reused as the next step's first stage. The caller owns that
//! handoff by passing the current derivative in and taking the new one
//! out of the outcome.

use alloc::format;
use alloc::vec::Vec;

use nalgebra::DVector;

use crate::error::Error;

#[allow(unused_imports)]
use num_traits::Float;

const A2: [f64; 1] = [0.2];
const A3: [f64; 2] = [3.0 / 40.0, 9.0 / 40.0];
const A4: [f64; 3] = [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0];
const A5: [f64; 4] = [
    19372.0 / 6561.0,
    -25360.0 / 2187.0,
    64448.0 / 6561.0,
    -212.0 / 729.0,
];
const A6: [f64; 5] = [
    9017.0 / 3168.0,
    -355.0 / 33.0,
    46732.0 / 5247.0,
    49.0 / 176.0,
    -5103.0 / 18656.0,
];
/// Fifth-order solution weights (also row seven of the tableau).
const B: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
/// Difference between the fifth- and fourth-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

const SAFETY: f64 = 0.9;
/// PI controller exponents: `err^(1/5 - 0.75 beta)` with memory `beta`.
const BETA: f64 = 0.04;
const EXPO1: f64 = 0.2 - 0.75 * BETA;
const MIN_SCALE: f64 = 0.2;
const MAX_SCALE: f64 = 5.0;

/// Step-size controller state carried between steps.
#[derive(Debug, Clone)]
pub struct StepController {
    facold: f64,
    after_rejection: bool,
}

impl Default for StepController {
    fn default() -> Self {
        Self::new()
    }
}

impl StepController {
    pub fn new() -> Self {
        Self {
            facold: 1e-4,
            after_rejection: false,
        }
    }
}

/// Result of one attempted step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub accepted: bool,
    /// New state when accepted, the input state otherwise.
    pub y: DVector<f64>,
    /// Derivative at the accepted state (the reusable last stage);
    /// absent on rejection.
    pub derivative: Option<DVector<f64>>,
    /// Mixed-norm error estimate; accepted iff at most 1. Infinite when
    /// the attempt left the oracle's domain.
    pub error: f64,
    pub h_used: f64,
    /// Controller's proposal for the next attempt, before the caller's
    /// own bounds.
    pub h_next: f64,
}

fn recoverable(e: &Error) -> bool {
    // the attempted state is unreachable (overflow, collapsed horizon);
    // shrinking the step is the correct response, anything else is a
    // real failure
    matches!(e, Error::NonFiniteValue(_) | Error::OutOfDomain(_))
}

/// One embedded-pair attempt from `y` with derivative `k1 = rhs(y)`.
///
/// Computes the remaining six stages, the fifth-order update, and the
/// mixed error norm `sqrt(mean((delta_i / (atol + rtol max(|y_i|, |y5_i|)))^2))`.
/// Accepts iff the norm is at most 1 and proposes the next step size by
/// a PI rule clipped to `[0.2, 5]` per step (growth capped at 1 right
/// after a rejection). Oracle failures of the recoverable kind reject
/// the attempt with half the step instead of erroring.
pub fn rk45_step<F>(
    y: &DVector<f64>,
    k1: &DVector<f64>,
    h: f64,
    rtol: f64,
    atol: f64,
    ctrl: &mut StepController,
    rhs: &mut F,
) -> Result<StepOutcome, Error>
where
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>, Error>,
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::InvalidConfig(format!("step size must be positive and finite, got {h}")));
    }
    if !(rtol > 0.0) || !(atol > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "tolerances must be positive, got rtol={rtol}, atol={atol}"
        )));
    }
    if k1.len() != y.len() {
        return Err(Error::ShapeMismatch(format!(
            "derivative length {} does not match state length {}",
            k1.len(),
            y.len()
        )));
    }

    let dim = y.len();
    let mut stages: Vec<DVector<f64>> = Vec::with_capacity(7);
    stages.push(k1.clone());

    let reject_unreachable = |ctrl: &mut StepController| StepOutcome {
        accepted: false,
        y: y.clone(),
        derivative: None,
        error: f64::INFINITY,
        h_used: h,
        h_next: {
            ctrl.after_rejection = true;
            0.5 * h
        },
    };

    let rows: [&[f64]; 5] = [&A2, &A3, &A4, &A5, &A6];
    for row in rows {
        let mut point = y.clone();
        for (j, &a) in row.iter().enumerate() {
            if a != 0.0 {
                point.axpy(h * a, &stages[j], 1.0);
            }
        }
        match rhs(&point) {
            Ok(k) => {
                if k.len() != dim {
                    return Err(Error::ShapeMismatch(format!(
                        "derivative length {} does not match state length {dim}",
                        k.len()
                    )));
                }
                stages.push(k);
            }
            Err(e) if recoverable(&e) => return Ok(reject_unreachable(ctrl)),
            Err(e) => return Err(e),
        }
    }

    let mut y5 = y.clone();
    for (j, &b) in B.iter().enumerate() {
        if b != 0.0 {
            y5.axpy(h * b, &stages[j], 1.0);
        }
    }
    if y5.iter().any(|v| !v.is_finite()) {
        return Ok(reject_unreachable(ctrl));
    }
    let k7 = match rhs(&y5) {
        Ok(k) => {
            if k.len() != dim {
                return Err(Error::ShapeMismatch(format!(
                    "derivative length {} does not match state length {dim}",
                    k.len()
                )));
            }
            k
        }
        Err(e) if recoverable(&e) => return Ok(reject_unreachable(ctrl)),
        Err(e) => return Err(e),
    };
    stages.push(k7);

    let mut err_sq = 0.0;
    for i in 0..dim {
        let mut delta = 0.0;
        for (j, &e) in E.iter().enumerate() {
            if e != 0.0 {
                delta += e * stages[j][i];
            }
        }
        delta *= h;
        let sc = atol + rtol * y[i].abs().max(y5[i].abs());
        let ratio = delta / sc;
        err_sq += ratio * ratio;
    }
    let err = (err_sq / dim as f64).sqrt();
    if !err.is_finite() {
        return Ok(reject_unreachable(ctrl));
    }

    if err <= 1.0 {
        // PI growth: gain from the current error, damped by the memory
        // of the previous accepted error
        let fac = err.powf(EXPO1) / ctrl.facold.powf(BETA);
        let mut scale = (SAFETY / fac).min(MAX_SCALE).max(MIN_SCALE);
        if ctrl.after_rejection {
            scale = scale.min(1.0);
        }
        ctrl.facold = err.max(1e-4);
        ctrl.after_rejection = false;
        Ok(StepOutcome {
            accepted: true,
            y: y5,
            derivative: Some(stages.pop().expect("seven stages were pushed")),
            error: err,
            h_used: h,
            h_next: h * scale,
        })
    } else {
        ctrl.after_rejection = true;
        let scale = (SAFETY * err.powf(-0.2)).max(MIN_SCALE).min(1.0);
        Ok(StepOutcome {
            accepted: false,
            y: y.clone(),
            derivative: None,
            error: err,
            h_used: h,
            h_next: h * scale,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use approx::assert_relative_eq;

    fn scalar(v: f64) -> DVector<f64> {
        DVector::from_vec(vec![v])
    }

    #[test]
    fn zero_field_keeps_the_state_and_grows_the_step() {
        let mut ctrl = StepController::new();
        let mut rhs = |_: &DVector<f64>| Ok(DVector::zeros(1));
        let y = scalar(1.25);
        let out = rk45_step(&y, &DVector::zeros(1), 0.1, 1e-3, 1e-6, &mut ctrl, &mut rhs).unwrap();
        assert!(out.accepted);
        assert_eq!(out.y[0], 1.25);
        assert_eq!(out.error, 0.0);
        assert_relative_eq!(out.h_next, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn decay_to_closed_form_within_tolerance() {
        // y' = -y from 1: drive the stepper to tau = 5 and compare
        let mut rhs = |y: &DVector<f64>| Ok(-y.clone());
        let mut ctrl = StepController::new();
        let mut y = scalar(1.0);
        let mut k = rhs(&y).unwrap();
        let mut tau = 0.0;
        let mut h = 0.01_f64;
        let target = 5.0;
        let mut steps = 0;
        while tau < target {
            let h_try = h.min(target - tau);
            let out = rk45_step(&y, &k, h_try, 1e-3, 1e-6, &mut ctrl, &mut rhs).unwrap();
            if out.accepted {
                tau += out.h_used;
                y = out.y;
                k = out.derivative.unwrap();
            }
            h = out.h_next;
            steps += 1;
            assert!(steps < 10_000);
        }
        assert_relative_eq!(y[0], (-5.0_f64).exp(), epsilon = 1e-4);
    }

    #[test]
    fn oversized_step_is_rejected_then_reduced() {
        // y' = 30 y over one unit step: the pair cannot hold tolerance
        let mut rhs = |y: &DVector<f64>| Ok(y * 30.0);
        let mut ctrl = StepController::new();
        let y = scalar(1.0);
        let k = rhs(&y).unwrap();
        let out = rk45_step(&y, &k, 1.0, 1e-3, 1e-6, &mut ctrl, &mut rhs).unwrap();
        assert!(!out.accepted);
        assert!(out.error > 1.0);
        assert!(out.h_next < 1.0);
        assert_eq!(out.y[0], 1.0, "rejected step must not move the state");
    }

    #[test]
    fn growth_is_capped_right_after_a_rejection() {
        let mut rhs = |y: &DVector<f64>| Ok(y * 30.0);
        let mut ctrl = StepController::new();
        let y = scalar(1.0);
        let k = rhs(&y).unwrap();
        let rejected = rk45_step(&y, &k, 1.0, 1e-3, 1e-6, &mut ctrl, &mut rhs).unwrap();
        assert!(!rejected.accepted);
        let retry = rk45_step(&y, &k, rejected.h_next, 1e-3, 1e-6, &mut ctrl, &mut rhs).unwrap();
        if retry.accepted {
            assert!(retry.h_next <= retry.h_used * (1.0 + 1e-12));
        }
    }

    #[test]
    fn returned_derivative_matches_the_new_state() {
        let mut rhs = |y: &DVector<f64>| Ok(-y.clone());
        let mut ctrl = StepController::new();
        let y = scalar(2.0);
        let k = rhs(&y).unwrap();
        let out = rk45_step(&y, &k, 0.05, 1e-6, 1e-9, &mut ctrl, &mut rhs).unwrap();
        assert!(out.accepted);
        let expect = rhs(&out.y).unwrap();
        assert_eq!(out.derivative.unwrap(), expect);
    }

    #[test]
    fn unreachable_states_halve_the_step() {
        let mut calls = 0;
        let mut rhs = |_: &DVector<f64>| {
            calls += 1;
            if calls > 1 {
                Err(Error::NonFiniteValue("overflow".into()))
            } else {
                Ok(DVector::zeros(1))
            }
        };
        let mut ctrl = StepController::new();
        let y = scalar(1.0);
        let k = scalar(0.0);
        let out = rk45_step(&y, &k, 0.4, 1e-3, 1e-6, &mut ctrl, &mut rhs).unwrap();
        assert!(!out.accepted);
        assert_eq!(out.error, f64::INFINITY);
        assert_relative_eq!(out.h_next, 0.2, epsilon = 1e-15);
    }

    #[test]
    fn real_failures_propagate() {
        let mut rhs = |_: &DVector<f64>| -> Result<DVector<f64>, Error> {
            Err(Error::ActiveSetCycle("stuck".into()))
        };
        let mut ctrl = StepController::new();
        let y = scalar(1.0);
        let k = scalar(0.0);
        assert!(matches!(
            rk45_step(&y, &k, 0.4, 1e-3, 1e-6, &mut ctrl, &mut rhs),
            Err(Error::ActiveSetCycle(_))
        ));
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let mut rhs = |_: &DVector<f64>| Ok(DVector::zeros(1));
        let mut ctrl = StepController::new();
        let y = scalar(1.0);
        let k = scalar(0.0);
        assert!(rk45_step(&y, &k, 0.0, 1e-3, 1e-6, &mut ctrl, &mut rhs).is_err());
        assert!(rk45_step(&y, &k, 0.1, 0.0, 1e-6, &mut ctrl, &mut rhs).is_err());
        assert!(rk45_step(&y, &DVector::zeros(2), 0.1, 1e-3, 1e-6, &mut ctrl, &mut rhs).is_err());
    }
}
