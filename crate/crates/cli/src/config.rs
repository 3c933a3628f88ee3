//! Run configuration: defaults, config-file parsing, and flag overlay.
//!
//! A config file is a flat `key = value` document using exactly the CLI
//! flag names; values given on the command line override the file. The
//! defaults reproduce the benchmark settings: 101 grid points, control
//! gain 0.1 on the identity, terminal-time gain 0.05 on free-horizon
//! problems, barrier rate 0.1, tolerances 1e-3/1e-6, horizon 300.

use std::fmt;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use vemoc_core::evolution::{GainConfig, DEFAULT_ACTIVATION_TOLERANCE};
use vemoc_core::integrator::IntegratorConfig;
use vemoc_core::ocp::{OcpDefinition, TerminalTimeMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
}

impl OutputFormat {
    pub fn extension(self) -> &'static str {
        match self {
            OutputFormat::Csv => "csv",
            OutputFormat::Json => "json",
        }
    }
}

/// Control gain given either as a scalar times the identity or as a full
/// matrix (rows separated by `;`, entries by `,`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ControlGain {
    Scalar(f64),
    Matrix(Vec<Vec<f64>>),
}

impl ControlGain {
    pub fn materialize(&self, m: usize) -> Result<DMatrix<f64>, ConfigError> {
        match self {
            ControlGain::Scalar(k) => Ok(DMatrix::identity(m, m) * *k),
            ControlGain::Matrix(rows) => {
                if rows.len() != m || rows.iter().any(|r| r.len() != m) {
                    return Err(ConfigError(format!(
                        "control gain matrix must be {m}x{m} for this problem"
                    )));
                }
                Ok(DMatrix::from_fn(m, m, |i, j| rows[i][j]))
            }
        }
    }
}

/// Barrier rates given as one scalar broadcast to every bound or as a
/// comma-separated list, one entry per bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BarrierGain {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl BarrierGain {
    pub fn materialize(&self, q_i: usize) -> Result<DVector<f64>, ConfigError> {
        match self {
            BarrierGain::Scalar(k) => Ok(DVector::from_element(q_i, *k)),
            BarrierGain::Vector(v) => {
                if v.len() != q_i {
                    return Err(ConfigError(format!(
                        "barrier gain list needs {q_i} entries for this problem, got {}",
                        v.len()
                    )));
                }
                Ok(DVector::from_iterator(q_i, v.iter().copied()))
            }
        }
    }
}

/// Fully resolved run configuration, recorded verbatim in the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub problem: String,
    pub grid_points: usize,
    pub control_gain: ControlGain,
    /// Terminal-time gain; `None` resolves to 0.05 on free-horizon
    /// problems and 0 on fixed-horizon ones.
    pub ktf: Option<f64>,
    pub kg: BarrierGain,
    pub tol_act: f64,
    pub rtol: f64,
    pub atol: f64,
    pub tau_final: f64,
    pub stop_residual: Option<f64>,
    pub snapshot_every: Option<f64>,
    pub node_motion: bool,
    pub barrier: bool,
    pub reproject: Option<usize>,
    pub out: Option<PathBuf>,
    pub format: OutputFormat,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            problem: "brachA".into(),
            grid_points: 101,
            control_gain: ControlGain::Scalar(0.1),
            ktf: None,
            kg: BarrierGain::Scalar(0.1),
            tol_act: DEFAULT_ACTIVATION_TOLERANCE,
            rtol: 1e-3,
            atol: 1e-6,
            tau_final: 300.0,
            stop_residual: None,
            snapshot_every: None,
            node_motion: true,
            barrier: true,
            reproject: None,
            out: None,
            format: OutputFormat::Csv,
            seed: 0,
        }
    }
}

impl RunConfig {
    /// Builds the solver gain block for a concrete problem.
    pub fn gains(&self, def: &OcpDefinition) -> Result<GainConfig, ConfigError> {
        let tf_gain = match (def.terminal_time_mode, self.ktf) {
            (TerminalTimeMode::Free, Some(k)) => k,
            (TerminalTimeMode::Free, None) => 0.05,
            (TerminalTimeMode::Fixed, Some(k)) if k != 0.0 => {
                return Err(ConfigError(format!(
                    "problem {} has a fixed horizon; --ktf must be 0",
                    self.problem
                )))
            }
            (TerminalTimeMode::Fixed, _) => 0.0,
        };
        let gains = GainConfig {
            control_gain: self.control_gain.materialize(def.m)?,
            tf_gain,
            barrier_gains: self.kg.materialize(def.q_i)?,
            activation_tolerance: self.tol_act,
        };
        gains
            .validate(def)
            .map_err(|e| ConfigError(format!("invalid gains: {e}")))?;
        Ok(gains)
    }

    pub fn integrator(&self) -> Result<IntegratorConfig, ConfigError> {
        let config = IntegratorConfig {
            rtol: self.rtol,
            atol: self.atol,
            tau_final: self.tau_final,
            stop_residual: self.stop_residual,
            snapshot_every: self.snapshot_every,
            reproject: self.reproject,
            ..IntegratorConfig::default()
        };
        config
            .validate()
            .map_err(|e| ConfigError(format!("invalid integrator settings: {e}")))?;
        Ok(config)
    }

    /// Output directory: explicit setting, else `$VEMOC_OUT/<problem>`,
    /// else `runs/<problem>`.
    pub fn output_dir(&self) -> PathBuf {
        if let Some(dir) = &self.out {
            return dir.clone();
        }
        let root = std::env::var_os("VEMOC_OUT")
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"));
        root.join(&self.problem)
    }
}

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Unresolved settings from one source (file or flags); `None` means the
/// source does not speak about the key.
#[derive(Debug, Clone, Default)]
pub struct Overlay {
    pub problem: Option<String>,
    pub grid_points: Option<usize>,
    pub control_gain: Option<ControlGain>,
    pub ktf: Option<f64>,
    pub kg: Option<BarrierGain>,
    pub tol_act: Option<f64>,
    pub rtol: Option<f64>,
    pub atol: Option<f64>,
    pub tau_final: Option<f64>,
    pub stop_residual: Option<f64>,
    pub snapshot_every: Option<f64>,
    pub node_motion: Option<bool>,
    pub barrier: Option<bool>,
    pub reproject: Option<Option<usize>>,
    pub out: Option<PathBuf>,
    pub format: Option<OutputFormat>,
    pub seed: Option<u64>,
}

impl Overlay {
    pub fn apply(self, base: &mut RunConfig) {
        macro_rules! set {
            ($field:ident) => {
                if let Some(v) = self.$field {
                    base.$field = v;
                }
            };
        }
        set!(problem);
        set!(grid_points);
        set!(control_gain);
        set!(tol_act);
        set!(rtol);
        set!(atol);
        set!(tau_final);
        set!(node_motion);
        set!(barrier);
        set!(format);
        set!(seed);
        if let Some(v) = self.ktf {
            base.ktf = Some(v);
        }
        if let Some(v) = self.kg {
            base.kg = v;
        }
        if let Some(v) = self.stop_residual {
            base.stop_residual = Some(v);
        }
        if let Some(v) = self.snapshot_every {
            base.snapshot_every = Some(v);
        }
        if let Some(v) = self.reproject {
            base.reproject = v;
        }
        if let Some(v) = self.out {
            base.out = Some(v);
        }
    }
}

pub fn parse_bool(value: &str) -> Result<bool, ConfigError> {
    match value {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        other => Err(ConfigError(format!("expected on/off, got {other:?}"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value
        .parse()
        .map_err(|_| ConfigError(format!("{key}: cannot parse {value:?}")))
}

pub fn parse_control_gain(value: &str) -> Result<ControlGain, ConfigError> {
    if value.contains(';') || value.contains(',') {
        let rows = value
            .split(';')
            .map(|row| {
                row.split(',')
                    .map(|e| parse_num::<f64>("K", e.trim()))
                    .collect::<Result<Vec<f64>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ControlGain::Matrix(rows))
    } else {
        Ok(ControlGain::Scalar(parse_num("K", value.trim())?))
    }
}

pub fn parse_barrier_gain(value: &str) -> Result<BarrierGain, ConfigError> {
    if value.contains(',') {
        let entries = value
            .split(',')
            .map(|e| parse_num::<f64>("kg", e.trim()))
            .collect::<Result<Vec<f64>, _>>()?;
        Ok(BarrierGain::Vector(entries))
    } else {
        Ok(BarrierGain::Scalar(parse_num("kg", value.trim())?))
    }
}

pub fn parse_reproject(value: &str) -> Result<Option<usize>, ConfigError> {
    if value == "off" {
        Ok(None)
    } else {
        Ok(Some(parse_num("reproject", value)?))
    }
}

pub fn parse_format(value: &str) -> Result<OutputFormat, ConfigError> {
    match value {
        "csv" => Ok(OutputFormat::Csv),
        "json" => Ok(OutputFormat::Json),
        other => Err(ConfigError(format!("format must be csv or json, got {other:?}"))),
    }
}

/// Parses a flat `key = value` config file; keys are the CLI flag names.
pub fn parse_config_file(path: &Path) -> Result<Overlay, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
    let mut overlay = Overlay::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            ConfigError(format!("{}:{}: expected key = value", path.display(), lineno + 1))
        })?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "problem" => overlay.problem = Some(value.to_string()),
            "grid-points" => overlay.grid_points = Some(parse_num(key, value)?),
            "K" => overlay.control_gain = Some(parse_control_gain(value)?),
            "ktf" => overlay.ktf = Some(parse_num(key, value)?),
            "kg" => overlay.kg = Some(parse_barrier_gain(value)?),
            "tol-act" => overlay.tol_act = Some(parse_num(key, value)?),
            "rtol" => overlay.rtol = Some(parse_num(key, value)?),
            "atol" => overlay.atol = Some(parse_num(key, value)?),
            "tau-final" => overlay.tau_final = Some(parse_num(key, value)?),
            "stop-residual" => overlay.stop_residual = Some(parse_num(key, value)?),
            "snapshot-every" => overlay.snapshot_every = Some(parse_num(key, value)?),
            "node-motion" => overlay.node_motion = Some(parse_bool(value)?),
            "barrier" => overlay.barrier = Some(parse_bool(value)?),
            "reproject" => overlay.reproject = Some(parse_reproject(value)?),
            "out" => overlay.out = Some(PathBuf::from(value)),
            "format" => overlay.format = Some(parse_format(value)?),
            "seed" => overlay.seed = Some(parse_num(key, value)?),
            other => {
                return Err(ConfigError(format!(
                    "{}:{}: unknown key {other:?}",
                    path.display(),
                    lineno + 1
                )))
            }
        }
    }
    Ok(overlay)
}
