//! Command-line flags, the optional key=value config file, and their merge.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "augcal", version, about = "Augmented calibration estimators of a population mean under nonresponse")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Monte Carlo study of a simulation scenario.
    Simulate(SimulateArgs),
    /// Point estimates and intervals from a CSV file.
    Estimate(EstimateArgs),
    /// Cross-validated choice of gamma for the robust estimator.
    CvGamma(CvArgs),
}

/// Flags shared by every command.
#[derive(Debug, Args, Clone, Default)]
pub struct CommonArgs {
    /// key=value file; keys are long flag names without dashes, flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Comma-separated basis terms: column names, fn(col) with fn in
    /// sq/cube/log/log1p/sqrt/exp/abs, or colA*colB. The intercept is implicit.
    #[arg(long)]
    pub basis: Option<String>,
    /// Comma-separated estimators: cc, glm, hm, tan, aps, aps-gamma=<g>, aps-gamma=cv, or all.
    #[arg(long)]
    pub estimators: Option<String>,
    /// Comma-separated gamma grid for cross-validation.
    #[arg(long)]
    pub gamma_grid: Option<String>,
    /// Number of cross-validation folds.
    #[arg(long)]
    pub folds: Option<usize>,
}

/// Flags naming an input table.
#[derive(Debug, Args, Clone, Default)]
pub struct InputArgs {
    /// Input CSV with a header row.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Outcome column; empty cells and NA mark nonresponse.
    #[arg(long)]
    pub outcome: Option<String>,
    /// Comma-separated covariate columns (default: every other column).
    #[arg(long)]
    pub covariates: Option<String>,
    /// Comma-separated covariates of the working propensity model (default: all covariates).
    #[arg(long)]
    pub propensity: Option<String>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub table: InputArgs,
    /// OM1PM1, OM1PM2, OM2PM1, OM2PM2, or PM3/PM4 with --input.
    #[arg(long)]
    pub scenario: Option<String>,
    /// Sample size per replication.
    #[arg(long)]
    pub n: Option<usize>,
    /// Number of replications.
    #[arg(long)]
    pub reps: Option<usize>,
    /// Fraction of observed outcomes to contaminate.
    #[arg(long)]
    pub contamination: Option<f64>,
    /// Lower end of the uniform noise added to contaminated outcomes.
    #[arg(long, allow_hyphen_values = true)]
    pub noise_lo: Option<f64>,
    /// Upper end of the uniform noise added to contaminated outcomes.
    #[arg(long, allow_hyphen_values = true)]
    pub noise_hi: Option<f64>,
    /// Target response rate used to tune the response model intercept.
    #[arg(long)]
    pub target_rate: Option<f64>,
    /// Output directory for replications.csv, summary.csv and simulate.meta.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub input: InputArgs,
    /// Output CSV; a `.meta` sidecar is written next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CvArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub input: InputArgs,
    /// Output CSV; a `.meta` sidecar is written next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Settings from flags layered over the config file, recorded for the metadata sidecar.
#[derive(Debug, Default)]
pub struct Settings {
    file: BTreeMap<String, String>,
    pub resolved: BTreeMap<String, String>,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let mut file = BTreeMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("reading config {}: {e}", path.display())))?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| CliError::Config(format!("{}:{}: expected key=value", path.display(), lineno + 1)))?;
                file.insert(k.trim().replace('-', "_"), v.trim().to_string());
            }
        }
        Ok(Self {
            file,
            resolved: BTreeMap::new(),
        })
    }

    /// Flag value if given, else the config file entry, else `default`.
    pub fn get<T>(&mut self, key: &str, flag: Option<T>, default: Option<T>) -> Result<Option<T>, CliError>
    where
        T: FromStr + fmt::Display + Clone,
        T::Err: fmt::Display,
    {
        let value = match flag {
            Some(v) => Some(v),
            None => match self.file.get(key) {
                Some(raw) => Some(
                    raw.parse::<T>()
                        .map_err(|e| CliError::Config(format!("config key `{key}`: {e}")))?,
                ),
                None => default,
            },
        };
        if let Some(v) = &value {
            self.resolved.insert(key.to_string(), v.to_string());
        }
        Ok(value)
    }

    pub fn require<T>(&mut self, key: &str, flag: Option<T>) -> Result<T, CliError>
    where
        T: FromStr + fmt::Display + Clone,
        T::Err: fmt::Display,
    {
        self.get(key, flag, None)?
            .ok_or_else(|| CliError::Config(format!("missing required setting `{}`", key.replace('_', "-"))))
    }

    pub fn path(&mut self, key: &str, flag: Option<PathBuf>) -> Result<Option<PathBuf>, CliError> {
        let value = flag.or_else(|| self.file.get(key).map(PathBuf::from));
        if let Some(p) = &value {
            self.resolved.insert(key.to_string(), p.display().to_string());
        }
        Ok(value)
    }

    pub fn require_path(&mut self, key: &str, flag: Option<PathBuf>) -> Result<PathBuf, CliError> {
        self.path(key, flag)?
            .ok_or_else(|| CliError::Config(format!("missing required setting `{}`", key.replace('_', "-"))))
    }

    /// `key=value` lines in key order.
    pub fn metadata(&self) -> String {
        self.resolved.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Rejects config-file keys this command does not know.
    pub fn check_unused(&self, known: &[&str]) -> Result<(), CliError> {
        for k in self.file.keys() {
            if !known.contains(&k.as_str()) {
                return Err(CliError::Config(format!("unknown config key `{k}`")));
            }
        }
        Ok(())
    }
}

pub fn split_list(s: &str) -> Vec<String> {
    s.split(',').map(|t| t.trim().to_string()).filter(|t| !t.is_empty()).collect()
}

pub fn parse_grid(s: &str) -> Result<Vec<f64>, CliError> {
    let grid: Vec<f64> = split_list(s)
        .iter()
        .map(|t| t.parse::<f64>().map_err(|_| CliError::Config(format!("bad gamma grid value `{t}`"))))
        .collect::<Result<_, _>>()?;
    if grid.is_empty() {
        return Err(CliError::Config("gamma grid is empty".into()));
    }
    if grid.iter().any(|g| !g.is_finite() || *g < 0.0) {
        return Err(CliError::Config("gamma grid values must be finite and nonnegative".into()));
    }
    Ok(grid)
}
