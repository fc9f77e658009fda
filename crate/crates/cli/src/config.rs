//! Config file parsing and resolution against command-line flags.

use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::Args;
use cq_core::Mode;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct AxisConfig {
    pub min: f64,
    pub max: f64,
    pub cells: usize,
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub axes: Vec<AxisConfig>,
}

/// Contents of a `--config` file. Every field is optional; flags win.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub model: Option<String>,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    pub mode: Option<Mode>,
    #[serde(rename = "T")]
    pub t_final: Option<f64>,
    pub dt: Option<f64>,
    pub seed: Option<u64>,
    #[serde(rename = "N")]
    pub trajectories: Option<usize>,
    pub t: Option<f64>,
    pub every: Option<usize>,
    pub workers: Option<usize>,
    pub grid: Option<GridConfig>,
    #[serde(default)]
    pub outputs: Vec<String>,
    pub p: Option<f64>,
    pub resamples: Option<usize>,
    pub checkpoints: Option<usize>,
}

/// Flags shared by every subcommand.
#[derive(Args, Clone, Debug, Default)]
pub struct CommonArgs {
    /// JSON config file; flags given on the command line override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Builtin model name.
    #[arg(long)]
    pub model: Option<String>,
    /// Model parameter override, repeatable.
    #[arg(long = "param", value_name = "KEY=VALUE", value_parser = parse_param)]
    pub params: Vec<(String, f64)>,
    /// density, pure, standard or joint.
    #[arg(long)]
    pub mode: Option<Mode>,
    /// Final time of trajectories.
    #[arg(long = "T", value_name = "T")]
    pub t_final: Option<f64>,
    /// Integration step
    #[arg(long)]
    pub dt: Option<f64>,
    /// Master seed for the counter-based noise
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of trajectories (or samples for measure-check).
    #[arg(long = "N", value_name = "N")]
    pub trajectories: Option<usize>,
    /// Comparison time for `compare`.
    #[arg(long)]
    pub t: Option<f64>,
    /// Keep every k-th step in trajectory and ensemble output.
    #[arg(long)]
    pub every: Option<usize>,
    /// Worker threads (default: available parallelism).
    #[arg(long)]
    pub workers: Option<usize>,
    /// Grid axis `MIN:MAX:CELLS`, once per classical coordinate.
    #[arg(long = "grid", value_name = "MIN:MAX:CELLS", allow_hyphen_values = true, value_parser = parse_axis)]
    pub grid: Vec<AxisConfig>,
    /// Extra observable column: `sigma_x`, `sigma_y`, `sigma_z` (optionally
    /// `:SITE` on a qubit register) or `proj:K`.
    #[arg(long = "output", value_name = "OBSERVABLE")]
    pub outputs: Vec<String>,
    /// Mixing probability for `linearity`.
    #[arg(long)]
    pub p: Option<f64>,
    /// Bootstrap resamples.
    #[arg(long)]
    pub resamples: Option<usize>,
    /// Comparison times for `purify`.
    #[arg(long)]
    pub checkpoints: Option<usize>,
    /// Output directory (default: $CQSIM_OUT_DIR, then the working directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_param(s: &str) -> Result<(String, f64), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected KEY=VALUE, got '{s}'"))?;
    let v: f64 = v.trim().parse().map_err(|e| format!("parameter '{k}': {e}"))?;
    Ok((k.trim().to_string(), v))
}

fn parse_axis(s: &str) -> Result<AxisConfig, String> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        return Err(format!("expected MIN:MAX:CELLS, got '{s}'"));
    }
    let num = |x: &str| x.trim().parse::<f64>().map_err(|e| format!("'{x}': {e}"));
    let cells = parts[2].trim().parse::<usize>().map_err(|e| format!("'{}': {e}", parts[2]))?;
    Ok(AxisConfig { min: num(parts[0])?, max: num(parts[1])?, cells })
}

/// Everything a run depends on, after defaults; embedded in every artifact.
#[derive(Clone, Debug, Serialize)]
pub struct Resolved {
    pub command: String,
    pub model: String,
    /// Model parameters with defaults filled in.
    pub params: BTreeMap<String, f64>,
    pub mode: Option<Mode>,
    #[serde(rename = "T")]
    pub t_final: f64,
    pub dt: f64,
    pub seed: u64,
    #[serde(rename = "N")]
    pub trajectories: usize,
    pub t: f64,
    pub every: Option<usize>,
    pub workers: Option<usize>,
    pub grid: Option<GridConfig>,
    pub outputs: Vec<String>,
    pub p: f64,
    pub resamples: usize,
    pub checkpoints: usize,
}

struct Defaults {
    t_final: f64,
    dt: f64,
    trajectories: usize,
}

fn defaults(command: &str) -> Defaults {
    match command {
        "compare" => Defaults { t_final: 1.0, dt: 1e-3, trajectories: 10_000 },
        "purify" => Defaults { t_final: 0.5, dt: 1e-3, trajectories: 4_000 },
        "measure-check" => Defaults { t_final: 1.0, dt: 1e-4, trajectories: 20_000 },
        "linearity" => Defaults { t_final: 0.5, dt: 1e-3, trajectories: 10_000 },
        _ => Defaults { t_final: 1.0, dt: 1e-3, trajectories: 1_000 },
    }
}

/// Merges the config file (if any) with the flags. Model parameters are
/// returned as overrides; the caller fills in defaults from the model.
pub fn resolve(command: &str, args: &CommonArgs) -> Result<(Resolved, BTreeMap<String, f64>), CliError> {
    let file = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            serde_json::from_str::<FileConfig>(&text)
                .map_err(|e| CliError::Usage(format!("malformed config {}: {e}", path.display())))?
        }
        None => FileConfig::default(),
    };
    let def = defaults(command);
    let model = args
        .model
        .clone()
        .or(file.model)
        .ok_or_else(|| CliError::Usage("no model given (use --model or the config's \"model\" field)".into()))?;
    let mut overrides = file.params;
    for (k, v) in &args.params {
        overrides.insert(k.clone(), *v);
    }
    let grid = if !args.grid.is_empty() { Some(GridConfig { axes: args.grid.clone() }) } else { file.grid };
    let outputs = if !args.outputs.is_empty() { args.outputs.clone() } else { file.outputs };
    let resolved = Resolved {
        command: command.to_string(),
        model,
        params: BTreeMap::new(),
        mode: args.mode.or(file.mode),
        t_final: args.t_final.or(file.t_final).unwrap_or(def.t_final),
        dt: args.dt.or(file.dt).unwrap_or(def.dt),
        seed: args.seed.or(file.seed).unwrap_or(1),
        trajectories: args.trajectories.or(file.trajectories).unwrap_or(def.trajectories),
        t: args.t.or(file.t).unwrap_or(0.2),
        every: args.every.or(file.every),
        workers: args.workers.or(file.workers),
        grid,
        outputs,
        p: args.p.or(file.p).unwrap_or(0.5),
        resamples: args.resamples.or(file.resamples).unwrap_or(cq_core::ensemble::BOOTSTRAP_RESAMPLES),
        checkpoints: args.checkpoints.or(file.checkpoints).unwrap_or(10),
    };
    if !(resolved.dt > 0.0 && resolved.dt.is_finite()) {
        return Err(CliError::Usage(format!("dt must be positive, got {}", resolved.dt)));
    }
    if !(resolved.t_final >= 0.0 && resolved.t_final.is_finite()) {
        return Err(CliError::Usage(format!("T must be non-negative, got {}", resolved.t_final)));
    }
    if resolved.trajectories == 0 {
        return Err(CliError::Usage("N must be positive".into()));
    }
    if resolved.every == Some(0) {
        return Err(CliError::Usage("every must be positive".into()));
    }
    Ok((resolved, overrides))
}
