//! Monte Carlo harness around the AO driver.
//!
//! Every (sweep value, scheme, trial) cell runs one independent trial. Trial
//! `t` draws its channels from the same RNG streams whatever the scheme or
//! swept value, so scheme comparisons are paired.

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use meris_core::ao::{self, TrialReport};
use meris_core::config::{dbm_to_watt, SchemeFlags, SystemConfig};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("nothing to write: result table is empty")]
    EmptyTable,
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("invalid sweep spec `{0}`")]
    SweepSpec(String),
    #[error("invalid config after applying {variable} = {value}: {message}")]
    Config {
        variable: SweepVariable,
        value: f64,
        message: String,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> BenchError + '_ {
    move |source| BenchError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Scenario presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Profile {
    /// N = 16, M = 4, K = 3, 20 trials.
    Desk,
    /// N = 49, M = 8, K = 4, 100 trials.
    Full,
}

impl Profile {
    pub fn apply(self, config: &mut SystemConfig) {
        let (n, m, k) = match self {
            Profile::Desk => (16, 4, 3),
            Profile::Full => (49, 8, 4),
        };
        config.num_ris_elements = n;
        config.num_bs_antennas = m;
        config.num_users = k;
    }

    pub fn trials(self) -> usize {
        match self {
            Profile::Desk => 20,
            Profile::Full => 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SweepVariable {
    PmaxDbm,
    RisElements,
    BsAntennas,
    Users,
    RateThreshold,
}

impl SweepVariable {
    pub fn name(self) -> &'static str {
        match self {
            SweepVariable::PmaxDbm => "pmax_dbm",
            SweepVariable::RisElements => "ris_elements",
            SweepVariable::BsAntennas => "bs_antennas",
            SweepVariable::Users => "users",
            SweepVariable::RateThreshold => "rate_threshold",
        }
    }

    /// Copy of `base` with this variable set to `value`.
    pub fn apply(self, base: &SystemConfig, value: f64) -> Result<SystemConfig, BenchError> {
        let mut c = base.clone();
        let count = || {
            if value >= 1.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(BenchError::Config {
                    variable: self,
                    value,
                    message: "expected a positive integer".into(),
                })
            }
        };
        match self {
            SweepVariable::PmaxDbm => {
                c.pmax_watt = dbm_to_watt(value);
                c.pmax_per_user_watt = None;
            }
            SweepVariable::RisElements => c.num_ris_elements = count()?,
            SweepVariable::BsAntennas => c.num_bs_antennas = count()?,
            SweepVariable::Users => {
                c.num_users = count()?;
                c.pmax_per_user_watt = None;
            }
            SweepVariable::RateThreshold => c.rate_threshold_bpshz = value,
        }
        c.validate().map_err(|e| BenchError::Config {
            variable: self,
            value,
            message: e.to_string(),
        })?;
        Ok(c)
    }
}

impl fmt::Display for SweepVariable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepVariable {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "pmax_dbm" | "pmax" => SweepVariable::PmaxDbm,
            "ris_elements" | "n" => SweepVariable::RisElements,
            "bs_antennas" | "m" => SweepVariable::BsAntennas,
            "users" | "k" => SweepVariable::Users,
            "rate_threshold" | "r_th" => SweepVariable::RateThreshold,
            _ => return Err(BenchError::SweepSpec(s.to_string())),
        })
    }
}

/// A swept variable and its values, written `name=v1,v2,...`.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub variable: SweepVariable,
    pub values: Vec<f64>,
}

impl FromStr for SweepSpec {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || BenchError::SweepSpec(s.to_string());
        let (name, list) = s.split_once('=').ok_or_else(bad)?;
        let variable = name.trim().parse()?;
        let values = list
            .split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<Vec<_>, _>>()?;
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(bad());
        }
        Ok(SweepSpec { variable, values })
    }
}

impl fmt::Display for SweepSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}=", self.variable)?;
        for (i, v) in self.values.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Result of one trial in one cell. `report` is `None` for an outage.
#[derive(Debug, Clone)]
pub struct TrialRecord {
    pub sweep_value: f64,
    pub scheme: SchemeFlags,
    pub trial: u64,
    pub report: Option<TrialReport>,
}

impl TrialRecord {
    pub fn final_ee(&self) -> Option<f64> {
        self.report.as_ref().map(TrialReport::final_ee)
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct CellSummary {
    pub sweep_value: f64,
    pub scheme: String,
    pub mean_ee: f64,
    pub stderr: f64,
    pub outages: usize,
    pub trials: usize,
}

/// All trial records of a sweep, sorted by (sweep value, scheme, trial).
#[derive(Debug, Clone)]
pub struct ResultTable {
    pub variable: Option<SweepVariable>,
    pub records: Vec<TrialRecord>,
}

fn scheme_rank(s: SchemeFlags) -> usize {
    SchemeFlags::ALL.iter().position(|&x| x == s).unwrap_or(usize::MAX)
}

impl ResultTable {
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Mean and standard error of the final EE per (sweep value, scheme).
    /// Outages are counted and excluded from the statistics.
    pub fn summarize(&self) -> Vec<CellSummary> {
        let mut out: Vec<CellSummary> = Vec::new();
        for chunk in self
            .records
            .chunk_by(|a, b| a.sweep_value == b.sweep_value && a.scheme == b.scheme)
        {
            let ees: Vec<f64> = chunk.iter().filter_map(TrialRecord::final_ee).collect();
            let n = ees.len() as f64;
            let mean = if ees.is_empty() { f64::NAN } else { ees.iter().sum::<f64>() / n };
            let stderr = if ees.len() < 2 {
                0.0
            } else {
                let var = ees.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0);
                (var / n).sqrt()
            };
            out.push(CellSummary {
                sweep_value: chunk[0].sweep_value,
                scheme: chunk[0].scheme.name().to_string(),
                mean_ee: mean,
                stderr,
                outages: chunk.len() - ees.len(),
                trials: chunk.len(),
            });
        }
        out
    }

    /// Summary cell for one scheme at one sweep value.
    pub fn cell(&self, sweep_value: f64, scheme: SchemeFlags) -> Option<CellSummary> {
        self.summarize()
            .into_iter()
            .find(|c| c.sweep_value == sweep_value && c.scheme == scheme.name())
    }
}

/// Runs `trials` trials for every scheme and sweep value. Without a sweep,
/// the template is run as is and rows carry sweep value 0.
pub fn run_sweep(
    template: &SystemConfig,
    sweep: Option<&SweepSpec>,
    schemes: &[SchemeFlags],
    trials: usize,
) -> Result<ResultTable, BenchError> {
    let mut configs = Vec::new();
    match sweep {
        Some(spec) => {
            for &v in &spec.values {
                configs.push((v, spec.variable.apply(template, v)?));
            }
        }
        None => configs.push((0.0, template.clone())),
    }
    let mut jobs = Vec::new();
    for (v, c) in &configs {
        for &scheme in schemes {
            let mut c = c.clone();
            c.scheme = scheme;
            for t in 0..trials as u64 {
                jobs.push((*v, c.clone(), t));
            }
        }
    }
    let mut records: Vec<TrialRecord> = jobs
        .into_par_iter()
        .map(|(v, c, t)| {
            let report = match ao::run(&c, t) {
                Ok((_, report)) => Some(report),
                Err(e) => {
                    log::info!("{} {v} trial {t}: outage ({e})", c.scheme.name());
                    None
                }
            };
            TrialRecord {
                sweep_value: v,
                scheme: c.scheme,
                trial: t,
                report,
            }
        })
        .collect();
    records.sort_by(|a, b| {
        a.sweep_value
            .total_cmp(&b.sweep_value)
            .then(scheme_rank(a.scheme).cmp(&scheme_rank(b.scheme)))
            .then(a.trial.cmp(&b.trial))
    });
    Ok(ResultTable {
        variable: sweep.map(|s| s.variable),
        records,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    /// `convergence_<scheme>.csv`: iteration, ee, trial, n.
    Convergence,
    /// `sweep_<variable>.csv`: sweep_value, scheme, mean_ee, stderr, outages.
    Sweep,
}

/// First line of every emitted CSV. It is the only line that differs
/// between two runs with the same inputs.
pub fn timestamp_header() -> String {
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("# generated_unix={secs}")
}

fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<(), BenchError> {
    let mut file = fs::File::create(path).map_err(io_err(path))?;
    writeln!(file, "{}", timestamp_header()).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r).map_err(|e| BenchError::Io {
            path: path.to_path_buf(),
            source: e.into(),
        })?;
    }
    w.flush().map_err(io_err(path))
}

#[derive(Serialize)]
struct ConvergenceRow {
    iteration: usize,
    ee: f64,
    trial: u64,
    n: usize,
}

#[derive(Serialize)]
struct TrialRow<'a> {
    sweep_value: f64,
    scheme: &'a str,
    trial: u64,
    final_ee: Option<f64>,
    iterations: Option<usize>,
    redraws: Option<usize>,
    outage: bool,
}

/// Writes plot-ready CSV files into `out_dir` and returns their paths.
/// `ris_elements` fills the `n` column of convergence files.
pub fn emit_plot_data(
    table: &ResultTable,
    kind: PlotKind,
    ris_elements: usize,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, BenchError> {
    if table.is_empty() {
        return Err(BenchError::EmptyTable);
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut written = Vec::new();
    match kind {
        PlotKind::Convergence => {
            for scheme in SchemeFlags::ALL {
                let rows: Vec<ConvergenceRow> = table
                    .records
                    .iter()
                    .filter(|r| r.scheme == scheme)
                    .filter_map(|r| r.report.as_ref().map(|rep| (r.trial, rep)))
                    .flat_map(|(trial, rep)| {
                        rep.ee_per_iteration.iter().enumerate().map(move |(i, &ee)| ConvergenceRow {
                            iteration: i,
                            ee,
                            trial,
                            n: ris_elements,
                        })
                    })
                    .collect();
                if rows.is_empty() {
                    continue;
                }
                let path = out_dir.join(format!("convergence_{}.csv", scheme.name().to_lowercase()));
                write_csv(&path, &rows)?;
                written.push(path);
            }
        }
        PlotKind::Sweep => {
            let name = table.variable.map_or("single", SweepVariable::name);
            let path = out_dir.join(format!("sweep_{name}.csv"));
            write_csv(&path, &table.summarize())?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Per-trial CSV with final EE, iterations and outage flag.
pub fn write_trials_csv(table: &ResultTable, path: &Path) -> Result<(), BenchError> {
    if table.is_empty() {
        return Err(BenchError::EmptyTable);
    }
    let rows: Vec<TrialRow> = table
        .records
        .iter()
        .map(|r| TrialRow {
            sweep_value: r.sweep_value,
            scheme: r.scheme.name(),
            trial: r.trial,
            final_ee: r.final_ee(),
            iterations: r.report.as_ref().map(|x| x.iterations_used),
            redraws: r.report.as_ref().map(|x| x.redraws),
            outage: r.report.is_none(),
        })
        .collect();
    write_csv(path, &rows)
}

/// SHA-256 of the config's canonical TOML form.
pub fn config_hash(config: &SystemConfig) -> String {
    let text = config.to_toml_string().unwrap_or_default();
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
    pub trials: usize,
    pub schemes: Vec<String>,
    pub sweep: Option<String>,
    pub files: Vec<String>,
    pub crate_version: String,
    pub generated_unix: u64,
}

impl RunManifest {
    pub fn new(command: &str, config: &SystemConfig, trials: usize, schemes: &[SchemeFlags]) -> Self {
        Self {
            command: command.to_string(),
            config_sha256: config_hash(config),
            seed: config.seed,
            trials,
            schemes: schemes.iter().map(|s| s.name().to_string()).collect(),
            sweep: None,
            files: Vec::new(),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            generated_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }

    pub fn write(&self, path: &Path) -> Result<(), BenchError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(io_err(path))
    }
}

/// Drops the timestamp header so two outputs can be compared.
pub fn strip_timestamp(csv_text: &str) -> &str {
    match csv_text.split_once('\n') {
        Some((first, rest)) if first.starts_with("# generated") => rest,
        _ => csv_text,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_spec_round_trip() {
        let s: SweepSpec = "pmax_dbm=0,4,8".parse().unwrap();
        assert_eq!(s.variable, SweepVariable::PmaxDbm);
        assert_eq!(s.values, vec![0.0, 4.0, 8.0]);
        assert_eq!(s.to_string().parse::<SweepSpec>().unwrap(), s);
        assert!("foo=1".parse::<SweepSpec>().is_err());
        assert!("n=".parse::<SweepSpec>().is_err());
        assert!("n=1,x".parse::<SweepSpec>().is_err());
    }

    #[test]
    fn integer_variables_reject_fractions() {
        let c = meris_core::config::load_config("").unwrap();
        assert!(SweepVariable::RisElements.apply(&c, 16.5).is_err());
        assert_eq!(SweepVariable::RisElements.apply(&c, 16.0).unwrap().num_ris_elements, 16);
        let p = SweepVariable::PmaxDbm.apply(&c, 0.0).unwrap();
        assert!((p.pmax_watt - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn header_is_stripped() {
        assert_eq!(strip_timestamp("# generated_unix=5\na,b\n1,2\n"), "a,b\n1,2\n");
        assert_eq!(strip_timestamp("a,b\n"), "a,b\n");
    }
}
