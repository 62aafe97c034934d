//! Config file loading and command-line overrides.
//!
//! Everything is funnelled through one TOML table: the file (if any) is
//! parsed, every override is written into the table at its dotted key, and
//! the result is deserialised once, so unknown keys and type errors are
//! reported the same way wherever they came from.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use fedmask::orchestrator::ExperimentConfig;
use toml::{Table, Value};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// TOML config file; omitted keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Percentage of smallest-loss samples kept by the entropy mask.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Step size of the label-belief update.
    #[arg(long)]
    pub eta: Option<f64>,
    /// Share of the local model kept when blending with the global model.
    #[arg(long)]
    pub zeta: Option<f64>,
    #[arg(long)]
    pub warmup_rounds: Option<usize>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub clients: Option<usize>,
    /// symmetric | asymmetric | mixed
    #[arg(long)]
    pub noise_kind: Option<String>,
    #[arg(long)]
    pub max_noise_rate: Option<f64>,
    /// Dirichlet concentration of the label-skewed split.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// average | coord_median | geometric_median
    #[arg(long)]
    pub aggregation: Option<String>,
    #[arg(long, value_enum)]
    pub mask: Option<Switch>,
    /// Any config key, e.g. `--set train.local_epochs=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

/// Short names accepted by `--param` and `--set` besides full dotted keys.
pub fn canonical_key(name: &str) -> String {
    let name = name.trim().replace('-', "_");
    let key = match name.as_str() {
        "alpha" => "correction.alpha",
        "beta" => "correction.beta",
        "tau" => "correction.tau",
        "eta" => "correction.eta",
        "zeta" => "correction.zeta",
        "k" => "correction.k",
        "mask" => "correction.mask",
        "warmup_rounds" | "tw" => "train.warmup_rounds",
        "rounds" => "train.rounds",
        "clients" => "partition.clients",
        "gamma" => "partition.gamma",
        "noise_kind" => "noise.kind",
        "max_noise_rate" => "noise.max_rate",
        "aggregation" => "aggregation.method",
        other => other,
    };
    key.to_string()
}

/// Parse a value as a TOML literal, falling back to a bare string so that
/// `noise.kind=mixed` works without quotes. `on`/`off` mean booleans.
pub fn parse_value(raw: &str) -> Value {
    let raw = raw.trim();
    match raw {
        "on" => return Value::Boolean(true),
        "off" => return Value::Boolean(false),
        _ => {}
    }
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Write `value` at dotted `key`, creating intermediate tables.
pub fn set_key(table: &mut Table, key: &str, value: Value) -> CliResult<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| {
        CliError::Config(format!("invalid key `{key}`"))
    })?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => return Err(CliError::Config(format!("`{p}` in `{key}` is not a section"))),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

pub fn read_table(path: &Path) -> CliResult<Table> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    text.parse::<Table>()
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Deserialise and validate; errors name the offending field.
pub fn table_to_config(table: Table) -> CliResult<ExperimentConfig> {
    let cfg: ExperimentConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.to_string().trim().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

impl ConfigArgs {
    fn overrides(&self) -> CliResult<Vec<(String, Value)>> {
        let mut out: Vec<(String, Value)> = Vec::new();
        let mut push = |k: &str, v: Value| out.push((k.to_string(), v));
        if let Some(v) = self.seed {
            let v = i64::try_from(v)
                .map_err(|_| CliError::Config(format!("seed: {v} exceeds the supported range")))?;
            push("seed", Value::Integer(v));
        }
        for (k, v) in [
            ("correction.alpha", self.alpha),
            ("correction.beta", self.beta),
            ("correction.tau", self.tau),
            ("correction.eta", self.eta),
            ("correction.zeta", self.zeta),
            ("noise.max_rate", self.max_noise_rate),
            ("partition.gamma", self.gamma),
        ] {
            if let Some(v) = v {
                push(k, Value::Float(v));
            }
        }
        for (k, v) in [
            ("train.warmup_rounds", self.warmup_rounds),
            ("train.rounds", self.rounds),
            ("partition.clients", self.clients),
        ] {
            if let Some(v) = v {
                push(k, Value::Integer(v as i64));
            }
        }
        if let Some(v) = &self.noise_kind {
            push("noise.kind", Value::String(v.clone()));
        }
        if let Some(v) = &self.aggregation {
            push("aggregation.method", Value::String(v.clone()));
        }
        if let Some(m) = self.mask {
            push("correction.mask", Value::Boolean(m == Switch::On));
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            out.push((canonical_key(k), parse_value(v)));
        }
        Ok(out)
    }

    /// Base table: file contents with every override applied.
    pub fn table(&self) -> CliResult<Table> {
        let mut table = match &self.config {
            Some(p) => read_table(p)?,
            None => Table::new(),
        };
        for (k, v) in self.overrides()? {
            set_key(&mut table, &k, v)?;
        }
        Ok(table)
    }

    pub fn resolve(&self) -> CliResult<ExperimentConfig> {
        table_to_config(self.table()?)
    }
}

/// Fully materialised config as TOML.
pub fn to_toml(cfg: &ExperimentConfig) -> CliResult<String> {
    toml::to_string(cfg).map_err(|e| CliError::Runtime(format!("cannot serialise config: {e}")))
}
