//! Artifact writers and readers: history table, trajectory snapshots,
//! run manifest, residual report.
//!
//! Column order is frozen and recorded in the manifest. All floating
//! point text is written with 17 significant digits so a read-back
//! reproduces every double bitwise.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use vemoc_core::integrator::{ActiveSetEvent, EvolutionHistory};
use vemoc_core::ocp::TrajectoryState;
use vemoc_core::verify::ResidualReport;

use crate::config::{OutputFormat, RunConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug)]
pub struct IoError(pub String);

impl std::fmt::Display for IoError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for IoError {}

fn fail<T>(path: &Path, detail: impl std::fmt::Display) -> Result<T, IoError> {
    Err(IoError(format!("{}: {detail}", path.display())))
}

/// Exact double-to-text: 17 significant digits in scientific notation.
fn fmt_f64(value: f64) -> String {
    format!("{value:.16e}")
}

pub fn history_columns(q_e: usize, q_i: usize) -> Vec<String> {
    let mut cols = vec!["tau".into(), "J".into(), "t_f".into()];
    cols.extend((0..q_e).map(|k| format!("pi_E_{k}")));
    cols.extend((0..q_i).map(|k| format!("pi_I_{k}")));
    cols.extend((0..q_e).map(|k| format!("g_E_{k}")));
    cols.extend((0..q_i).map(|k| format!("g_I_{k}")));
    cols.extend(
        ["r_u", "r_tf", "working_mask", "step_size", "m_cond", "dj_dtau"]
            .map(String::from),
    );
    cols
}

fn history_cells(history: &EvolutionHistory) -> Vec<Vec<serde_json::Value>> {
    history
        .rows
        .iter()
        .map(|row| {
            let mut cells: Vec<serde_json::Value> = Vec::new();
            let num = |v: f64| serde_json::Value::from(v);
            cells.push(num(row.tau));
            cells.push(num(row.j));
            cells.push(num(row.t_f));
            cells.extend(row.pi_e.iter().map(|v| num(*v)));
            cells.extend(row.pi_i.iter().map(|v| num(*v)));
            cells.extend(row.g_e.iter().map(|v| num(*v)));
            cells.extend(row.g_i.iter().map(|v| num(*v)));
            cells.push(num(row.r_u));
            cells.push(num(row.r_tf));
            cells.push(serde_json::Value::from(row.working_mask));
            cells.push(num(row.step_size));
            cells.push(num(row.m_cond));
            cells.push(num(row.dj_dtau));
            cells
        })
        .collect()
}

pub fn write_history(
    path: &Path,
    history: &EvolutionHistory,
    q_e: usize,
    q_i: usize,
    format: OutputFormat,
) -> Result<(), IoError> {
    let columns = history_columns(q_e, q_i);
    let text = match format {
        OutputFormat::Csv => {
            let mut text = columns.join(",");
            text.push('\n');
            for row in &history.rows {
                let mut cells = vec![fmt_f64(row.tau), fmt_f64(row.j), fmt_f64(row.t_f)];
                cells.extend(row.pi_e.iter().map(|v| fmt_f64(*v)));
                cells.extend(row.pi_i.iter().map(|v| fmt_f64(*v)));
                cells.extend(row.g_e.iter().map(|v| fmt_f64(*v)));
                cells.extend(row.g_i.iter().map(|v| fmt_f64(*v)));
                cells.push(fmt_f64(row.r_u));
                cells.push(fmt_f64(row.r_tf));
                cells.push(row.working_mask.to_string());
                cells.push(fmt_f64(row.step_size));
                cells.push(fmt_f64(row.m_cond));
                cells.push(fmt_f64(row.dj_dtau));
                let _ = writeln!(text, "{}", cells.join(","));
            }
            text
        }
        OutputFormat::Json => {
            let doc = serde_json::json!({
                "schema_version": SCHEMA_VERSION,
                "columns": columns,
                "rows": history_cells(history),
            });
            serde_json::to_string_pretty(&doc).expect("history serializes")
        }
    };
    std::fs::write(path, text).or_else(|e| fail(path, e))
}

pub fn snapshot_columns(n: usize, m: usize) -> Vec<String> {
    let mut cols = vec!["tau".into(), "node".into(), "t".into()];
    cols.extend((0..n).map(|k| format!("x_{k}")));
    cols.extend((0..m).map(|k| format!("u_{k}")));
    cols
}

pub fn write_snapshots(
    path: &Path,
    snapshots: &[(f64, TrajectoryState)],
    format: OutputFormat,
) -> Result<(), IoError> {
    let (n, m) = snapshots
        .first()
        .map(|(_, t)| (t.state_dim(), t.control_dim()))
        .unwrap_or((0, 0));
    for (tau, t) in snapshots {
        if t.state_dim() != n || t.control_dim() != m {
            return fail(path, format!("snapshot at tau={tau} has mismatched dimensions"));
        }
    }
    let columns = snapshot_columns(n, m);
    match format {
        OutputFormat::Csv => {
            let mut text = columns.join(",");
            text.push('\n');
            for (tau, traj) in snapshots {
                let grid = traj.grid();
                for i in 0..grid.n_nodes {
                    let mut cells = vec![fmt_f64(*tau), i.to_string(), fmt_f64(grid.node_time(i))];
                    cells.extend((0..n).map(|c| fmt_f64(traj.x_nodes()[(i, c)])));
                    cells.extend((0..m).map(|c| fmt_f64(traj.u_nodes()[(i, c)])));
                    let _ = writeln!(text, "{}", cells.join(","));
                }
            }
            std::fs::write(path, text).or_else(|e| fail(path, e))
        }
        OutputFormat::Json => {
            let mut rows: Vec<Vec<serde_json::Value>> = Vec::new();
            for (tau, traj) in snapshots {
                let grid = traj.grid();
                for i in 0..grid.n_nodes {
                    let mut cells = vec![
                        serde_json::Value::from(*tau),
                        serde_json::Value::from(i),
                        serde_json::Value::from(grid.node_time(i)),
                    ];
                    cells.extend((0..n).map(|c| serde_json::Value::from(traj.x_nodes()[(i, c)])));
                    cells.extend((0..m).map(|c| serde_json::Value::from(traj.u_nodes()[(i, c)])));
                    rows.push(cells);
                }
            }
            let doc = serde_json::json!({
                "schema_version": SCHEMA_VERSION,
                "columns": columns,
                "rows": rows,
            });
            std::fs::write(path, serde_json::to_string_pretty(&doc).expect("snapshots serialize"))
                .or_else(|e| fail(path, e))
        }
    }
}

/// Numeric table plus its header, the common shape of both read paths.
fn read_table(path: &Path, format: OutputFormat) -> Result<(Vec<String>, Vec<Vec<f64>>), IoError> {
    let text = std::fs::read_to_string(path).or_else(|e| fail(path, e))?;
    match format {
        OutputFormat::Csv => {
            let mut lines = text.lines();
            let header = match lines.next() {
                Some(h) => h.split(',').map(String::from).collect::<Vec<_>>(),
                None => return fail(path, "empty file"),
            };
            let mut rows = Vec::new();
            for (lineno, line) in lines.enumerate() {
                if line.is_empty() {
                    continue;
                }
                let row = line
                    .split(',')
                    .map(|cell| cell.parse::<f64>())
                    .collect::<Result<Vec<f64>, _>>()
                    .or_else(|e| fail(path, format!("line {}: {e}", lineno + 2)))?;
                if row.len() != header.len() {
                    return fail(path, format!("line {}: wrong cell count", lineno + 2));
                }
                rows.push(row);
            }
            Ok((header, rows))
        }
        OutputFormat::Json => {
            #[derive(Deserialize)]
            struct Doc {
                schema_version: u32,
                columns: Vec<String>,
                rows: Vec<Vec<f64>>,
            }
            let doc: Doc = serde_json::from_str(&text).or_else(|e| fail(path, e))?;
            if doc.schema_version != SCHEMA_VERSION {
                return fail(path, format!("unsupported schema version {}", doc.schema_version));
            }
            if doc.rows.iter().any(|r| r.len() != doc.columns.len()) {
                return fail(path, "row length does not match the column list");
            }
            Ok((doc.columns, doc.rows))
        }
    }
}

/// Reads a snapshot table back into trajectories, one per distinct tau,
/// in file order. Checks the schema: expected columns, contiguous node
/// indices from zero, at least two nodes per snapshot.
pub fn read_snapshots(
    path: &Path,
    format: OutputFormat,
) -> Result<Vec<(f64, TrajectoryState)>, IoError> {
    let (header, rows) = read_table(path, format)?;
    if header.len() < 4 || header[0] != "tau" || header[1] != "node" || header[2] != "t" {
        return fail(path, "not a snapshot table");
    }
    let n = header[3..].iter().take_while(|c| c.starts_with("x_")).count();
    let m = header.len() - 3 - n;
    if n == 0 || m == 0 || snapshot_columns(n, m) != header {
        return fail(path, "unexpected snapshot columns");
    }
    let mut out: Vec<(f64, TrajectoryState)> = Vec::new();
    let mut block: Vec<&[f64]> = Vec::new();
    let mut block_tau = f64::NAN;
    let mut flush = |tau: f64, block: &mut Vec<&[f64]>| -> Result<(), IoError> {
        if block.is_empty() {
            return Ok(());
        }
        if block.len() < 2 {
            return fail(path, format!("snapshot at tau={tau} has fewer than two nodes"));
        }
        for (i, row) in block.iter().enumerate() {
            if row[1] != i as f64 {
                return fail(path, format!("snapshot at tau={tau}: node column must count from 0"));
            }
        }
        let x = DMatrix::from_fn(block.len(), n, |i, c| block[i][3 + c]);
        let u = DMatrix::from_fn(block.len(), m, |i, c| block[i][3 + n + c]);
        let t0 = block[0][2];
        let t_f = block[block.len() - 1][2];
        let traj = TrajectoryState::new(x, u, t0, t_f)
            .map_err(|e| IoError(format!("{}: snapshot at tau={tau}: {e}", path.display())))?;
        out.push((tau, traj));
        block.clear();
        Ok(())
    };
    for row in &rows {
        if row[0] != block_tau && !block.is_empty() {
            flush(block_tau, &mut block)?;
        }
        block_tau = row[0];
        block.push(row);
    }
    flush(block_tau, &mut block)?;
    if out.is_empty() {
        return fail(path, "no snapshots in file");
    }
    Ok(out)
}

/// Flat mirror of the optimality residual report for serialization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResidualSummary {
    pub r_u: f64,
    pub r_tf: f64,
    pub r_costate_ode: f64,
    pub r_transversality: f64,
    pub r_stationary_pi: f64,
    pub stationary_lsq_residual: f64,
    pub complementary_slackness: f64,
}

impl From<&ResidualReport> for ResidualSummary {
    fn from(r: &ResidualReport) -> Self {
        Self {
            r_u: r.r_u,
            r_tf: r.r_tf,
            r_costate_ode: r.r_costate_ode,
            r_transversality: r.r_transversality,
            r_stationary_pi: r.r_stationary_pi,
            stationary_lsq_residual: r.stationary_lsq_residual,
            complementary_slackness: r.complementary_slackness,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EventRecord {
    pub tau: f64,
    pub entered: Vec<usize>,
    pub left: Vec<usize>,
    pub working_mask: u64,
}

impl From<&ActiveSetEvent> for EventRecord {
    fn from(e: &ActiveSetEvent) -> Self {
        Self {
            tau: e.tau,
            entered: e.entered.clone(),
            left: e.left.clone(),
            working_mask: e.mask,
        }
    }
}

/// Run manifest: resolved configuration, outcome, counters, event log,
/// residual report, and the artifact schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub code_version: String,
    pub config: RunConfig,
    pub wall_time_seconds: f64,
    /// Stop reason on success; absent when the run errored.
    pub stop: Option<String>,
    pub error: Option<String>,
    pub final_tau: Option<f64>,
    pub final_t_f: Option<f64>,
    pub final_j: Option<f64>,
    pub final_pi_e: Vec<f64>,
    pub final_pi_i: Vec<f64>,
    pub residual_u: Option<f64>,
    pub residual_tf: Option<f64>,
    pub events: Vec<EventRecord>,
    pub rejected_steps: usize,
    pub rhs_evaluations: usize,
    pub max_ge_drift: f64,
    pub feasibility_warning: Option<String>,
    pub residual_report: Option<ResidualSummary>,
    pub history_file: String,
    pub history_columns: Vec<String>,
    pub history_rows: usize,
    pub snapshot_file: String,
    pub snapshot_taus: Vec<f64>,
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<(), IoError> {
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    std::fs::write(path, text).or_else(|e| fail(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Manifest, IoError> {
    let text = std::fs::read_to_string(path).or_else(|e| fail(path, e))?;
    serde_json::from_str(&text).or_else(|e| fail(path, e))
}

/// Artifact paths inside one run directory.
pub struct RunPaths {
    pub dir: PathBuf,
    pub history: PathBuf,
    pub snapshots: PathBuf,
    pub manifest: PathBuf,
}

impl RunPaths {
    pub fn new(dir: PathBuf, format: OutputFormat) -> Self {
        let ext = format.extension();
        Self {
            history: dir.join(format!("history.{ext}")),
            snapshots: dir.join(format!("snapshots.{ext}")),
            manifest: dir.join("manifest.json"),
            dir,
        }
    }
}
