//! Batch front end for the `ehmac` engine: parameter sweeps, simulation runs,
//! analysis/simulation comparison and trade-off envelopes, all written as CSV
//! with a JSON run manifest.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use ehmac::metrics::{analyze, tradeoff_curve, AnalysisError, TRADEOFF_BIN};
use ehmac::model::{BacklogMode, CheckedConfig, ConfigError, HarvestSpec, Protocol, SirThreshold, SystemConfig};
use ehmac::sim::{pool_replicas, run_simulation_traced, IrTrace, SimError, SimOptions};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid sweep: {0}")]
    Sweep(String),
    #[error("at {point}: {source}")]
    Config { point: String, source: ConfigError },
    #[error("at {point}: {source}")]
    Analysis { point: String, source: AnalysisError },
    #[error("at {point}: {source}")]
    Simulation { point: String, source: SimError },
    #[error("simulation rows without a matching analysis row: {0}")]
    MissingKeys(String),
    #[error("could not build worker pool: {0}")]
    Pool(String),
}

/// Axes swept over a base configuration. An empty axis keeps the base value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Axes {
    pub rho: Vec<f64>,
    pub mu_h: Vec<f64>,
    pub gamma_th_db: Vec<Option<f64>>,
    pub protocol: Vec<Protocol>,
    pub backlog_mode: Vec<BacklogMode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub base: SystemConfig,
    #[serde(default)]
    pub axes: Axes,
    #[serde(default = "one")]
    pub replicas: u32,
    #[serde(default = "default_irs")]
    pub irs: usize,
    #[serde(default = "default_warmup")]
    pub warmup: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn one() -> u32 {
    1
}
fn default_irs() -> usize {
    10_000
}
fn default_warmup() -> usize {
    2_000
}
fn default_seed() -> u64 {
    1
}

/// One fully specified grid point.
#[derive(Debug, Clone)]
pub struct Point {
    pub config: CheckedConfig,
}

impl Point {
    /// Mean harvest per round in transmissions.
    pub fn mu_h(&self) -> f64 {
        self.config.harvest.rate().unwrap_or_else(|| {
            self.config.harvest().mean() / f64::from(self.config.energy.tx_cost_units)
        })
    }

    pub fn label(&self) -> String {
        format!(
            "protocol={} rho={} mu_H={} gamma_th_db={} backlog={}",
            self.config.protocol.as_str(),
            self.config.rho,
            fmt_f64(self.mu_h()),
            self.config.gamma_th,
            self.config.backlog_mode.as_str()
        )
    }
}

impl SweepSpec {
    pub fn single(base: SystemConfig) -> Self {
        SweepSpec {
            base,
            axes: Axes::default(),
            replicas: 1,
            irs: default_irs(),
            warmup: default_warmup(),
            seed: default_seed(),
        }
    }

    /// Parse either a sweep (`{"base": …, "axes": …}`) or a bare configuration.
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        if value.get("base").is_some() {
            Ok(serde_json::from_value(value)?)
        } else {
            Ok(SweepSpec::single(serde_json::from_value(value)?))
        }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let mut text = String::new();
        std::fs::File::open(path)?.read_to_string(&mut text)?;
        Self::from_json(&text)
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("serializable");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Grid points in deterministic order: protocol, `μ_H`, threshold,
    /// backlog mode, then `ρ`. With `with_modes` false the backlog axis is
    /// collapsed to the base value.
    pub fn points(&self, with_modes: bool) -> Result<Vec<Point>, CliError> {
        let a = &self.axes;
        let or = |v: &Vec<f64>, d: f64| if v.is_empty() { vec![d] } else { v.clone() };
        let protocols = if a.protocol.is_empty() { vec![self.base.protocol] } else { a.protocol.clone() };
        let mus: Vec<Option<f64>> = if a.mu_h.is_empty() { vec![None] } else { a.mu_h.iter().map(|m| Some(*m)).collect() };
        let gammas: Vec<SirThreshold> = if a.gamma_th_db.is_empty() {
            vec![self.base.gamma_th]
        } else {
            a.gamma_th_db.iter().map(|g| SirThreshold(*g)).collect()
        };
        let modes = if a.backlog_mode.is_empty() || !with_modes {
            vec![self.base.backlog_mode]
        } else {
            a.backlog_mode.clone()
        };
        let rhos = or(&a.rho, self.base.rho);

        let mut out = Vec::new();
        for &protocol in &protocols {
            for mu in &mus {
                for &gamma_th in &gammas {
                    for &backlog_mode in &modes {
                        for &rho in &rhos {
                            let mut c = self.base.clone();
                            c.protocol = protocol;
                            c.gamma_th = gamma_th;
                            c.backlog_mode = backlog_mode;
                            c.rho = rho;
                            if let Some(rate) = mu {
                                c.harvest = HarvestSpec::Geometric { rate: *rate };
                            }
                            let label = format!(
                                "protocol={} rho={rho} mu_H={} gamma_th_db={gamma_th}",
                                protocol.as_str(),
                                mu.map_or("base".into(), fmt_f64)
                            );
                            let config = c
                                .validate()
                                .map_err(|source| CliError::Config { point: label, source })?;
                            out.push(Point { config });
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn sim_options(&self) -> SimOptions {
        SimOptions {
            rounds: self.warmup + self.irs,
            warmup: self.warmup,
            seed: self.seed,
            ..Default::default()
        }
    }
}

/// Shortest round-trip decimal form.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        format!("{x}")
    }
}

/// One CSV row. Column order is the file's stable schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub protocol: String,
    pub rho: f64,
    #[serde(rename = "mu_H")]
    pub mu_h: f64,
    pub gamma_th_db: Option<f64>,
    pub alpha: f64,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "F_eps")]
    pub f_eps: u32,
    pub source: String,
    pub p_d: Option<f64>,
    pub p_t: f64,
    pub se_p_d: Option<f64>,
    pub se_p_t: Option<f64>,
    pub seed: u64,
}

pub const CSV_COLUMNS: [&str; 13] = [
    "protocol", "rho", "mu_H", "gamma_th_db", "alpha", "M", "F_eps", "source", "p_d", "p_t", "se_p_d",
    "se_p_t", "seed",
];

impl Row {
    fn base(point: &Point, source: &str, seed: u64) -> Row {
        let c = &point.config;
        Row {
            protocol: c.protocol.as_str().into(),
            rho: c.rho,
            mu_h: point.mu_h(),
            gamma_th_db: c.gamma_th.db(),
            alpha: c.alpha,
            m: c.sensors,
            f_eps: c.energy.capacity(),
            source: source.into(),
            p_d: None,
            p_t: f64::NAN,
            se_p_d: None,
            se_p_t: None,
            seed,
        }
    }

    /// Grid coordinates that identify the point across files.
    pub fn key(&self) -> String {
        format!(
            "protocol={} rho={} mu_H={} gamma_th_db={} alpha={} M={} F_eps={}",
            self.protocol,
            self.rho,
            self.mu_h,
            self.gamma_th_db.map_or("off".into(), |g| g.to_string()),
            self.alpha,
            self.m,
            self.f_eps
        )
    }
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

/// Worker pool capped by `EHMAC_THREADS` when set.
pub fn worker_pool() -> Result<rayon::ThreadPool, CliError> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = std::env::var("EHMAC_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        b = b.num_threads(n.max(1));
    }
    b.build().map_err(|e| CliError::Pool(e.to_string()))
}

/// Analytical metrics, one row per point with the backlog axis collapsed.
pub fn cmd_analyze(spec: &SweepSpec) -> Result<Vec<Row>, CliError> {
    let points = spec.points(false)?;
    points
        .par_iter()
        .map(|p| {
            let a = analyze(&p.config).map_err(|source| CliError::Analysis { point: p.label(), source })?;
            let mut row = Row::base(p, "analysis", p.config.tolerances.rng_seed);
            row.p_d = finite(a.report.p_d);
            row.p_t = a.report.p_t;
            Ok(row)
        })
        .collect()
}

/// Simulation results, one row per point and backlog mode. Per-round traces
/// go to `trace` when given, as CSV prefixed by the point coordinates.
pub fn cmd_simulate(spec: &SweepSpec, trace: Option<&mut dyn Write>) -> Result<Vec<Row>, CliError> {
    let points = spec.points(true)?;
    let opts = spec.sim_options();
    let tracing = trace.is_some();
    let results: Vec<Result<(Row, Vec<String>), CliError>> = points
        .par_iter()
        .map(|p| {
            let c = &p.config;
            let wrap = |source| CliError::Simulation { point: p.label(), source };
            let analysis = match (c.backlog_mode, c.protocol) {
                (BacklogMode::Estimated, Protocol::Fa | Protocol::Dfa) => Some(
                    analyze(c).map_err(|source| CliError::Analysis { point: p.label(), source })?,
                ),
                _ => None,
            };
            let mut lines = Vec::new();
            let mut reports = Vec::new();
            for r in 0..spec.replicas.max(1) {
                let prefix = format!(
                    "{},{},{},{},{},{r}",
                    c.protocol.as_str(),
                    c.rho,
                    fmt_f64(p.mu_h()),
                    c.gamma_th.db().map_or(String::new(), |g| g.to_string()),
                    c.backlog_mode.as_str()
                );
                let mut sink = |t: &IrTrace| {
                    if tracing {
                        lines.push(format!("{prefix},{}", t.csv_row()));
                    }
                };
                reports.push(run_simulation_traced(c, &opts, analysis.as_ref(), r, &mut sink).map_err(wrap)?);
            }
            let rep = pool_replicas(reports);
            let source = match c.backlog_mode {
                BacklogMode::Known => "sim-known",
                BacklogMode::Estimated => "sim-estimated",
            };
            let mut row = Row::base(p, source, spec.seed);
            row.p_d = finite(rep.p_d);
            row.p_t = rep.p_t;
            row.se_p_d = finite(rep.se_p_d);
            row.se_p_t = finite(rep.se_p_t);
            Ok((row, lines))
        })
        .collect();
    let mut rows = Vec::with_capacity(results.len());
    let mut trace = trace;
    if let Some(w) = trace.as_mut() {
        writeln!(w, "protocol,rho,mu_H,gamma_th_db,backlog_mode,replica,{}", IrTrace::CSV_HEADER)?;
    }
    for r in results {
        let (row, lines) = r?;
        if let Some(w) = trace.as_mut() {
            for l in lines {
                writeln!(w, "{l}")?;
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Trade-off envelope per protocol, `μ_H` and threshold over the `ρ` axis.
pub fn cmd_tradeoff(spec: &SweepSpec) -> Result<Vec<Row>, CliError> {
    if spec.axes.rho.is_empty() {
        return Err(CliError::Sweep("tradeoff needs a non-empty rho axis".into()));
    }
    let rhos = spec.axes.rho.clone();
    let single_rho = SweepSpec {
        axes: Axes { rho: vec![rhos[0]], ..spec.axes.clone() },
        ..spec.clone()
    };
    let curves: Vec<Result<Vec<Row>, CliError>> = single_rho
        .points(false)?
        .par_iter()
        .map(|p| {
            let env = tradeoff_curve(&p.config, &rhos, TRADEOFF_BIN)
                .map_err(|source| CliError::Analysis { point: p.label(), source })?;
            Ok(env
                .into_iter()
                .map(|e| {
                    let mut row = Row::base(p, "envelope", p.config.tolerances.rng_seed);
                    row.rho = e.rho;
                    row.p_d = finite(e.p_d);
                    row.p_t = e.p_t;
                    row
                })
                .collect())
        })
        .collect();
    let mut rows = Vec::new();
    for c in curves {
        rows.extend(c?);
    }
    Ok(rows)
}

pub fn write_rows<W: Write>(w: W, rows: &[Row]) -> Result<(), CliError> {
    let mut out = csv::Writer::from_writer(w);
    if rows.is_empty() {
        out.write_record(CSV_COLUMNS)?;
    }
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_rows<R: Read>(r: R) -> Result<Vec<Row>, CliError> {
    let mut rdr = csv::Reader::from_reader(r);
    Ok(rdr.deserialize().collect::<Result<Vec<Row>, _>>()?)
}

/// Allowed absolute gap for a row of the given source.
pub fn tolerance_for(source: &str) -> f64 {
    match source {
        "sim-estimated" => 0.03,
        _ => 0.02,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointGap {
    pub key: String,
    pub source: String,
    pub gap_p_d: Option<f64>,
    pub gap_p_t: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub points: Vec<PointGap>,
    pub max_gap_p_d: f64,
    pub max_gap_p_t: f64,
    pub mean_gap_p_d: f64,
    pub mean_gap_p_t: f64,
    pub pass: bool,
}

impl fmt::Display for CompareReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.points {
            writeln!(
                f,
                "{} {} [{}] |dp_d| {} |dp_t| {:.4} (tol {})",
                if p.pass { "ok  " } else { "FAIL" },
                p.key,
                p.source,
                p.gap_p_d.map_or("n/a".into(), |g| format!("{g:.4}")),
                p.gap_p_t,
                p.tolerance
            )?;
        }
        write!(
            f,
            "{} points; max |dp_d| {:.4}, max |dp_t| {:.4}; mean |dp_d| {:.4}, mean |dp_t| {:.4}; {}",
            self.points.len(),
            self.max_gap_p_d,
            self.max_gap_p_t,
            self.mean_gap_p_d,
            self.mean_gap_p_t,
            if self.pass { "PASS" } else { "FAIL" }
        )
    }
}

/// Gaps between every row of `other` and the reference row with the same
/// grid coordinates.
pub fn cmd_compare(reference: &[Row], other: &[Row]) -> Result<CompareReport, CliError> {
    let index: HashMap<String, &Row> = reference.iter().map(|r| (r.key(), r)).collect();
    let missing: Vec<String> = other
        .iter()
        .map(Row::key)
        .filter(|k| !index.contains_key(k))
        .collect();
    if !missing.is_empty() {
        return Err(CliError::MissingKeys(missing.join("; ")));
    }
    let mut points = Vec::with_capacity(other.len());
    for r in other {
        let a = index[&r.key()];
        let gap_p_d = match (r.p_d, a.p_d) {
            (Some(x), Some(y)) => Some((x - y).abs()),
            _ => None,
        };
        let gap_p_t = (r.p_t - a.p_t).abs();
        let tolerance = tolerance_for(&r.source);
        let pass = gap_p_d.is_none_or(|g| g <= tolerance) && gap_p_t <= tolerance;
        points.push(PointGap { key: r.key(), source: r.source.clone(), gap_p_d, gap_p_t, tolerance, pass });
    }
    let d: Vec<f64> = points.iter().filter_map(|p| p.gap_p_d).collect();
    let t: Vec<f64> = points.iter().map(|p| p.gap_p_t).collect();
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    Ok(CompareReport {
        max_gap_p_d: d.iter().copied().fold(0.0, f64::max),
        max_gap_p_t: t.iter().copied().fold(0.0, f64::max),
        mean_gap_p_d: mean(&d),
        mean_gap_p_t: mean(&t),
        pass: points.iter().all(|p| p.pass),
        points,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub replicas: u32,
    pub irs: usize,
    pub warmup: usize,
    pub rows: usize,
    pub columns: Vec<String>,
    pub output: String,
    pub spec: SweepSpec,
}

impl Manifest {
    pub fn new(command: &str, spec: &SweepSpec, rows: usize, output: &Path) -> Self {
        Manifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_hash: spec.hash(),
            seed: spec.seed,
            replicas: spec.replicas,
            irs: spec.irs,
            warmup: spec.warmup,
            rows,
            columns: CSV_COLUMNS.iter().map(|c| c.to_string()).collect(),
            output: output.display().to_string(),
            spec: spec.clone(),
        }
    }

    /// `<out>.manifest.json` next to the CSV.
    pub fn path_for(out: &Path) -> std::path::PathBuf {
        let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".manifest.json");
        out.with_file_name(name)
    }

    pub fn write(&self, out: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(Self::path_for(out), text + "\n")?;
        Ok(())
    }
}
