//! Built-in benchmark problems with feasible seed trajectories.
//!
//! | id       | description                                                        |
//! |----------|--------------------------------------------------------------------|
//! | `brachA` | minimum-time gravity descent to x=2 with floor y <= -2             |
//! | `brachB` | minimum-time gravity descent to x=2 inside the band -1.3 <= y <= -1 |
//! | `lq`     | double-integrator minimum-energy transfer, fixed horizon            |
//!
//! Each seed trajectory satisfies the dynamics exactly (it is an analytic
//! solution for a constant or simply varying control), so the flow starts
//! from a feasible point as the method requires.

use alloc::boxed::Box;
use alloc::vec;
use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::Error;
use crate::ocp::{AuditBounds, OcpDefinition, ProblemSummary, TerminalTimeMode, TrajectoryState};

/// Gravity constant shared by the descent benchmarks.
const GRAVITY: f64 = 10.0;

/// The available problem ids with one-line descriptions.
pub fn available_problems() -> [ProblemSummary; 3] {
    [
        ProblemSummary {
            id: "brachA",
            description: "minimum-time gravity descent to x=2, floor y <= -2, free horizon",
        },
        ProblemSummary {
            id: "brachB",
            description: "minimum-time gravity descent to x=2 inside -1.3 <= y <= -1, free horizon",
        },
        ProblemSummary {
            id: "lq",
            description: "double-integrator minimum-energy transfer to position 1, fixed horizon 1",
        },
    ]
}

/// Returns a built-in problem and its feasible seed trajectory sampled on
/// `n_nodes` grid points.
pub fn builtin_problem(id: &str, n_nodes: usize) -> Result<(OcpDefinition, TrajectoryState), Error> {
    if n_nodes < 3 {
        return Err(Error::InvalidConfig(alloc::format!(
            "built-in problems need at least 3 grid points, got {n_nodes}"
        )));
    }
    match id {
        "brachA" => brach_a(n_nodes),
        "brachB" => brach_b(n_nodes),
        "lq" => lq(n_nodes),
        other => Err(Error::UnknownProblem(alloc::string::String::from(other))),
    }
}

/// Gravity-descent dynamics: state (x, y, V), control is the slope angle
/// measured from the vertical. x' = V sin u, y' = -V cos u, V' = g cos u.
fn descent_dynamics() -> (
    crate::ocp::RunningVecFn,
    crate::ocp::RunningMatFn,
    crate::ocp::RunningMatFn,
) {
    let f: crate::ocp::RunningVecFn = Box::new(|x: &DVector<f64>, u: &DVector<f64>, _| {
        let v = x[2];
        let (s, c) = (u[0].sin(), u[0].cos());
        DVector::from_vec(vec![v * s, -v * c, GRAVITY * c])
    });
    let f_x: crate::ocp::RunningMatFn = Box::new(|_x: &DVector<f64>, u: &DVector<f64>, _| {
        let (s, c) = (u[0].sin(), u[0].cos());
        DMatrix::from_row_slice(3, 3, &[0.0, 0.0, s, 0.0, 0.0, -c, 0.0, 0.0, 0.0])
    });
    let f_u: crate::ocp::RunningMatFn = Box::new(|x: &DVector<f64>, u: &DVector<f64>, _| {
        let v = x[2];
        let (s, c) = (u[0].sin(), u[0].cos());
        DMatrix::from_row_slice(3, 1, &[v * c, v * s, -GRAVITY * s])
    });
    (f, f_x, f_u)
}

/// Terminal cost phi = t: minimizes the arrival time.
fn time_cost(
    b: crate::ocp::OcpBuilder,
) -> crate::ocp::OcpBuilder {
    b.terminal_cost(
        Box::new(|_, t| t),
        Box::new(|_, _| DVector::zeros(3)),
        Box::new(|_, _| 1.0),
        Box::new(|_, _| DVector::zeros(3)),
        Box::new(|_, _| DMatrix::zeros(3, 3)),
    )
}

fn brach_a(n_nodes: usize) -> Result<(OcpDefinition, TrajectoryState), Error> {
    let (f, f_x, f_u) = descent_dynamics();
    let def = time_cost(OcpDefinition::builder(3, 1))
        .initial_state(0.0, DVector::zeros(3))
        .dynamics(f, f_x, f_u)
        .equality_constraints(
            1,
            Box::new(|x: &DVector<f64>, _| DVector::from_vec(vec![x[0] - 2.0])),
            Box::new(|_, _| DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0])),
            Box::new(|_, _| DVector::zeros(1)),
        )
        .inequality_constraints(
            1,
            Box::new(|x: &DVector<f64>, _| DVector::from_vec(vec![x[1] + 2.0])),
            Box::new(|_, _| DMatrix::from_row_slice(1, 3, &[0.0, 1.0, 0.0])),
            Box::new(|_, _| DVector::zeros(1)),
        )
        .terminal_time(TerminalTimeMode::Free)
        .audit_bounds(AuditBounds {
            x_lo: DVector::from_vec(vec![-1.0, -4.0, 0.0]),
            x_hi: DVector::from_vec(vec![3.0, 1.0, 9.0]),
            u_lo: DVector::from_vec(vec![-1.4]),
            u_hi: DVector::from_vec(vec![1.4]),
            t_range: (0.0, 1.0),
            tf_range: (0.6, 1.1),
        })
        .build()?;

    // straight ramp at constant slope pi/6: an exact solution of the
    // dynamics reaching (2, -2*sqrt(3)) at t_f = sqrt(8*sqrt(3)/15)
    let sqrt3 = 3.0_f64.sqrt();
    let t_f = (8.0 * sqrt3 / 15.0).sqrt();
    let angle = core::f64::consts::FRAC_PI_6;
    let traj = sampled_trajectory(n_nodes, 0.0, t_f, |t| {
        (
            vec![
                5.0 * sqrt3 / 4.0 * t * t,
                -15.0 / 4.0 * t * t,
                5.0 * sqrt3 * t,
            ],
            vec![angle],
        )
    })?;
    Ok((def, traj))
}

fn brach_b(n_nodes: usize) -> Result<(OcpDefinition, TrajectoryState), Error> {
    let (f, f_x, f_u) = descent_dynamics();
    let def = time_cost(OcpDefinition::builder(3, 1))
        .initial_state(0.0, DVector::zeros(3))
        .dynamics(f, f_x, f_u)
        .equality_constraints(
            1,
            Box::new(|x: &DVector<f64>, _| DVector::from_vec(vec![x[0] - 2.0])),
            Box::new(|_, _| DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0])),
            Box::new(|_, _| DVector::zeros(1)),
        )
        .inequality_constraints(
            2,
            Box::new(|x: &DVector<f64>, _| {
                DVector::from_vec(vec![x[1] + 1.0, -x[1] - 1.3])
            }),
            Box::new(|_, _| DMatrix::from_row_slice(2, 3, &[0.0, 1.0, 0.0, 0.0, -1.0, 0.0])),
            Box::new(|_, _| DVector::zeros(2)),
        )
        .terminal_time(TerminalTimeMode::Free)
        .audit_bounds(AuditBounds {
            x_lo: DVector::from_vec(vec![-1.0, -3.0, 0.0]),
            x_hi: DVector::from_vec(vec![3.0, 1.0, 9.0]),
            u_lo: DVector::from_vec(vec![-1.5]),
            u_hi: DVector::from_vec(vec![1.6]),
            t_range: (0.0, 1.0),
            tf_range: (0.6, 1.2),
        })
        .build()?;

    // parabolic descent under the constant slope atan(2), an exact
    // solution reaching (2, -1) at t_f = 1 with the first band edge active
    let sqrt5 = 5.0_f64.sqrt();
    let angle = 2.0_f64.atan();
    let traj = sampled_trajectory(n_nodes, 0.0, 1.0, |t| {
        (
            vec![2.0 * t * t, -t * t, 2.0 * sqrt5 * t],
            vec![angle],
        )
    })?;
    Ok((def, traj))
}

fn lq(n_nodes: usize) -> Result<(OcpDefinition, TrajectoryState), Error> {
    let def = OcpDefinition::builder(2, 1)
        .initial_state(0.0, DVector::zeros(2))
        .dynamics(
            Box::new(|x: &DVector<f64>, u: &DVector<f64>, _| {
                DVector::from_vec(vec![x[1], u[0]])
            }),
            Box::new(|_, _, _| DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0])),
            Box::new(|_, _, _| DMatrix::from_row_slice(2, 1, &[0.0, 1.0])),
        )
        .running_cost(
            Box::new(|_, u: &DVector<f64>, _| 0.5 * u[0] * u[0]),
            Box::new(|_, _, _| DVector::zeros(2)),
            Box::new(|_, u: &DVector<f64>, _| DVector::from_vec(vec![u[0]])),
        )
        .equality_constraints(
            1,
            Box::new(|x: &DVector<f64>, _| DVector::from_vec(vec![x[0] - 1.0])),
            Box::new(|_, _| DMatrix::from_row_slice(1, 2, &[1.0, 0.0])),
            Box::new(|_, _| DVector::zeros(1)),
        )
        .terminal_time(TerminalTimeMode::Fixed)
        .audit_bounds(AuditBounds {
            x_lo: DVector::from_vec(vec![-2.0, -2.0]),
            x_hi: DVector::from_vec(vec![2.0, 2.0]),
            u_lo: DVector::from_vec(vec![-4.0]),
            u_hi: DVector::from_vec(vec![4.0]),
            t_range: (0.0, 1.0),
            tf_range: (0.8, 1.2),
        })
        .build()?;

    // constant thrust u = 2 reaches position 1 at the fixed horizon t_f = 1
    let traj = sampled_trajectory(n_nodes, 0.0, 1.0, |t| {
        (vec![t * t, 2.0 * t], vec![2.0])
    })?;
    Ok((def, traj))
}

fn sampled_trajectory(
    n_nodes: usize,
    t0: f64,
    t_f: f64,
    sample: impl Fn(f64) -> (alloc::vec::Vec<f64>, alloc::vec::Vec<f64>),
) -> Result<TrajectoryState, Error> {
    let (x_probe, u_probe) = sample(t0);
    let n = x_probe.len();
    let m = u_probe.len();
    let mut x_nodes = DMatrix::zeros(n_nodes, n);
    let mut u_nodes = DMatrix::zeros(n_nodes, m);
    for i in 0..n_nodes {
        let sigma = i as f64 / (n_nodes - 1) as f64;
        let t = t0 + sigma * (t_f - t0);
        let (x, u) = sample(t);
        for j in 0..n {
            x_nodes[(i, j)] = x[j];
        }
        for k in 0..m {
            u_nodes[(i, k)] = u[k];
        }
    }
    TrajectoryState::new(x_nodes, u_nodes, t0, t_f)
}
