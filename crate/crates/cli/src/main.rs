//! Command line driver for the trajectory-evolution optimal control
//! solver: integrate the flow on a benchmark problem, re-verify stored
//! snapshots, audit problem derivatives, list problems.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use vemoc::config::{
    self, BarrierGain, ControlGain, Overlay, OutputFormat, RunConfig,
};
use vemoc::io::{self, EventRecord, Manifest, ResidualSummary, RunPaths};
use vemoc_core::audit::{audit_derivatives, AUDIT_TOLERANCE};
use vemoc_core::evolution::{working_set_loop, EvolutionOptions};
use vemoc_core::integrator::{evolve, StopReason};
use vemoc_core::problems::{available_problems, builtin_problem};
use vemoc_core::sweeps::{compute_pu, TransitionTable};
use vemoc_core::verify::optimality_residuals;

#[derive(Parser)]
#[command(name = "vemoc", version, about = "Evolution-flow optimal control solver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

// parsed once at startup; variant size imbalance is irrelevant
#[allow(clippy::large_enum_variant)]
#[derive(Subcommand)]
enum Command {
    /// Integrate the evolution flow on a benchmark problem and write
    /// history, snapshots, and a manifest
    Run(RunArgs),
    /// Recompute optimality residuals from a stored snapshot
    Verify(VerifyArgs),
    /// Check analytic derivatives against finite differences
    Audit(AuditArgs),
    /// List the built-in benchmark problems
    ListProblems,
}

/// `--reproject` takes a step count or the word `off`.
#[derive(Clone)]
struct ReprojectFlag(Option<usize>);

fn parse_reproject_flag(value: &str) -> Result<ReprojectFlag, config::ConfigError> {
    config::parse_reproject(value).map(ReprojectFlag)
}

#[derive(Args)]
struct RunArgs {
    /// Flat `key = value` config file; command line flags override it
    config: Option<PathBuf>,
    /// Problem id (see list-problems)
    #[arg(long)]
    problem: Option<String>,
    #[arg(long = "grid-points")]
    grid_points: Option<usize>,
    /// Control gain: scalar, or matrix rows `a,b;c,d`
    #[arg(long = "K", value_parser = config::parse_control_gain)]
    control_gain: Option<ControlGain>,
    /// Terminal-time gain (free-horizon problems only)
    #[arg(long)]
    ktf: Option<f64>,
    /// Bound decay rate: scalar, or one entry per bound `a,b`
    #[arg(long, value_parser = config::parse_barrier_gain)]
    kg: Option<BarrierGain>,
    /// Activation threshold for detecting a touched bound
    #[arg(long = "tol-act")]
    tol_act: Option<f64>,
    #[arg(long)]
    rtol: Option<f64>,
    #[arg(long)]
    atol: Option<f64>,
    /// Virtual-time horizon
    #[arg(long = "tau-final")]
    tau_final: Option<f64>,
    /// Stop early once both stationarity residuals fall below this
    #[arg(long = "stop-residual")]
    stop_residual: Option<f64>,
    #[arg(long = "node-motion", value_name = "on|off", value_parser = config::parse_bool)]
    node_motion: Option<bool>,
    #[arg(long, value_name = "on|off", value_parser = config::parse_bool)]
    barrier: Option<bool>,
    /// Re-integrate the dynamics every N accepted steps, or `off`
    #[arg(long, value_parser = parse_reproject_flag)]
    reproject: Option<ReprojectFlag>,
    /// Store a full trajectory snapshot every D units of virtual time
    #[arg(long = "snapshot-every")]
    snapshot_every: Option<f64>,
    /// Output directory (default $VEMOC_OUT/<problem>, else runs/<problem>)
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = config::parse_format)]
    format: Option<OutputFormat>,
    /// Recorded in the manifest; audits reuse it for sampling
    #[arg(long)]
    seed: Option<u64>,
}

impl RunArgs {
    fn overlay(&self) -> Overlay {
        Overlay {
            problem: self.problem.clone(),
            grid_points: self.grid_points,
            control_gain: self.control_gain.clone(),
            ktf: self.ktf,
            kg: self.kg.clone(),
            tol_act: self.tol_act,
            rtol: self.rtol,
            atol: self.atol,
            tau_final: self.tau_final,
            stop_residual: self.stop_residual,
            snapshot_every: self.snapshot_every,
            node_motion: self.node_motion,
            barrier: self.barrier,
            reproject: self.reproject.clone().map(|r| r.0),
            out: self.out.clone(),
            format: self.format,
            seed: self.seed,
        }
    }
}

#[derive(Args)]
struct VerifyArgs {
    /// Run directory holding a manifest, or a bare snapshot file
    path: PathBuf,
    /// Problem id; required when PATH is a bare snapshot file
    #[arg(long)]
    problem: Option<String>,
}

#[derive(Args)]
struct AuditArgs {
    /// Problem id; audits every built-in problem when omitted
    #[arg(long)]
    problem: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    samples: usize,
}

type CmdResult = Result<ExitCode, Box<dyn std::error::Error>>;

fn stop_name(reason: StopReason) -> &'static str {
    match reason {
        StopReason::Horizon => "horizon",
        StopReason::Converged => "converged",
    }
}

fn file_name(path: &std::path::Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn cmd_run(args: RunArgs) -> CmdResult {
    let mut cfg = RunConfig::default();
    if let Some(path) = &args.config {
        config::parse_config_file(path)?.apply(&mut cfg);
    }
    args.overlay().apply(&mut cfg);

    let (def, traj0) = builtin_problem(&cfg.problem, cfg.grid_points)?;
    let gains = cfg.gains(&def)?;
    let integrator = cfg.integrator()?;
    let options = EvolutionOptions {
        node_motion: cfg.node_motion,
        barrier: cfg.barrier,
    };

    let start = Instant::now();
    let (mut history, result) = evolve(&def, &traj0, &gains, &integrator, &options);
    let wall = start.elapsed().as_secs_f64();

    // a converged stop can land between snapshot marks; store the final
    // trajectory so the run directory always verifies
    if let Ok(outcome) = &result {
        let final_tau = history.rows.last().map_or(0.0, |r| r.tau);
        if history.snapshots.last().map(|(t, _)| *t) != Some(final_tau) {
            history.snapshots.push((final_tau, outcome.trajectory.clone()));
        }
    }

    let paths = RunPaths::new(cfg.output_dir(), cfg.format);
    std::fs::create_dir_all(&paths.dir).map_err(|e| format!("{}: {e}", paths.dir.display()))?;
    io::write_history(&paths.history, &history, def.q_e, def.q_i, cfg.format)?;
    io::write_snapshots(&paths.snapshots, &history.snapshots, cfg.format)?;

    let residual_report = match &result {
        Ok(outcome) => {
            let table = TransitionTable::build(&def, &outcome.trajectory)?;
            let report =
                optimality_residuals(&def, &outcome.trajectory, &table, &outcome.active_set)?;
            Some(ResidualSummary::from(&report))
        }
        Err(_) => None,
    };

    let last = history.rows.last();
    let manifest = Manifest {
        schema_version: io::SCHEMA_VERSION,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        wall_time_seconds: wall,
        stop: result.as_ref().ok().map(|o| stop_name(o.reason).to_string()),
        error: result.as_ref().err().map(|e| e.to_string()),
        final_tau: last.map(|r| r.tau),
        final_t_f: last.map(|r| r.t_f),
        final_j: last.map(|r| r.j),
        final_pi_e: last.map_or_else(Vec::new, |r| r.pi_e.iter().copied().collect()),
        final_pi_i: last.map_or_else(Vec::new, |r| r.pi_i.iter().copied().collect()),
        residual_u: last.map(|r| r.r_u),
        residual_tf: last.map(|r| r.r_tf),
        events: history.events.iter().map(EventRecord::from).collect(),
        rejected_steps: history.rejected_steps,
        rhs_evaluations: history.rhs_evaluations,
        max_ge_drift: history.max_ge_drift,
        feasibility_warning: history.feasibility_warning.clone(),
        residual_report,
        history_file: file_name(&paths.history),
        history_columns: io::history_columns(def.q_e, def.q_i),
        history_rows: history.rows.len(),
        snapshot_file: file_name(&paths.snapshots),
        snapshot_taus: history.snapshots.iter().map(|(t, _)| *t).collect(),
    };
    io::write_manifest(&paths.manifest, &manifest)?;

    match &result {
        Ok(outcome) => {
            println!(
                "{}: stop={} tau={:.3} t_f={:.9} J={:.9e} r_u={:.3e} r_tf={:.3e}",
                cfg.problem,
                stop_name(outcome.reason),
                manifest.final_tau.unwrap_or(0.0),
                outcome.trajectory.t_f(),
                outcome.diagnostics.j,
                outcome.diagnostics.r_u,
                outcome.diagnostics.r_tf,
            );
            if let Some(warning) = &history.feasibility_warning {
                eprintln!("warning: {warning}");
            }
            println!("artifacts: {}", paths.dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Err(e) => {
            eprintln!("{}: solver error: {e}", cfg.problem);
            eprintln!("partial artifacts: {}", paths.dir.display());
            Ok(ExitCode::FAILURE)
        }
    }
}

fn cmd_verify(args: VerifyArgs) -> CmdResult {
    let (snapshot_path, report_path, format, run_cfg) = if args.path.is_dir() {
        let manifest = io::read_manifest(&args.path.join("manifest.json"))?;
        (
            args.path.join(&manifest.snapshot_file),
            args.path.join("verify.json"),
            manifest.config.format,
            manifest.config,
        )
    } else {
        let problem = args
            .problem
            .clone()
            .ok_or("--problem is required when verifying a bare snapshot file")?;
        let format = match args.path.extension().and_then(|e| e.to_str()) {
            Some("json") => OutputFormat::Json,
            _ => OutputFormat::Csv,
        };
        let report_path = args.path.with_extension("verify.json");
        let cfg = RunConfig {
            problem,
            ..RunConfig::default()
        };
        (args.path.clone(), report_path, format, cfg)
    };
    let problem = run_cfg.problem.clone();

    let snapshots = io::read_snapshots(&snapshot_path, format)?;
    let (tau, traj) = snapshots.last().expect("reader rejects empty files");

    let (def, _) = builtin_problem(&problem, traj.n_nodes())?;
    if traj.state_dim() != def.n || traj.control_dim() != def.m {
        return Err(format!(
            "validation error: snapshot is {}x{} but {problem} needs {} states and {} controls",
            traj.state_dim(),
            traj.control_dim(),
            def.n,
            def.m
        )
        .into());
    }
    let x0_matches = (0..def.n).all(|c| traj.x_nodes()[(0, c)] == def.x0[c]);
    if !x0_matches || traj.t0() != def.t0 {
        return Err(format!(
            "validation error: snapshot does not start at the pinned initial state of {problem}"
        )
        .into());
    }
    traj.validate_against(&def)
        .map_err(|e| format!("validation error: {e}"))?;

    let gains = run_cfg.gains(&def)?;
    let table = TransitionTable::build(&def, traj)?;
    let pu = compute_pu(&def, traj, &table)?;
    let aset = working_set_loop(&def, traj, &table, &pu, &gains, run_cfg.barrier)?;
    let report = optimality_residuals(&def, traj, &table, &aset)?;
    let summary = ResidualSummary::from(&report);

    let doc = serde_json::json!({
        "schema_version": io::SCHEMA_VERSION,
        "problem": problem,
        "snapshot_file": file_name(&snapshot_path),
        "snapshot_tau": tau,
        "n_nodes": traj.n_nodes(),
        "t_f": traj.t_f(),
        "working_set": aset.working,
        "residuals": summary,
    });
    std::fs::write(&report_path, serde_json::to_string_pretty(&doc)?)
        .map_err(|e| format!("{}: {e}", report_path.display()))?;

    println!(
        "{problem} tau={tau}: r_u={:.6e} r_tf={:.6e} costate_ode={:.6e} transversality={:.6e} stationary_pi={:.6e} slackness={:.6e}",
        report.r_u,
        report.r_tf,
        report.r_costate_ode,
        report.r_transversality,
        report.r_stationary_pi,
        report.complementary_slackness,
    );
    println!("report: {}", report_path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_audit(args: AuditArgs) -> CmdResult {
    let ids: Vec<String> = match &args.problem {
        Some(p) => vec![p.clone()],
        None => available_problems().iter().map(|p| p.id.to_string()).collect(),
    };
    let mut all_passed = true;
    for id in &ids {
        let (def, _) = builtin_problem(id, 11)?;
        let report = audit_derivatives(&def, args.samples, 1e-6, args.seed)?;
        for entry in &report.entries {
            println!(
                "{id} {}: max_rel_err={:.3e} {}",
                entry.name,
                entry.max_rel_err,
                if entry.max_rel_err <= AUDIT_TOLERANCE { "ok" } else { "FAIL" },
            );
        }
        all_passed &= report.passed();
    }
    Ok(if all_passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn cmd_list() -> CmdResult {
    for p in available_problems() {
        println!("{:8} {}", p.id, p.description);
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    // die quietly when a pipe reader closes early, like standard tools
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Verify(args) => cmd_verify(args),
        Command::Audit(args) => cmd_audit(args),
        Command::ListProblems => cmd_list(),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
