//! Config-driven experiment runner behind the `nmp` binary.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::equilibrium::{pk_rate, pk_rate_in_system, stationary_state, StationaryOptions};
use crate::error::{Error, Result};
use crate::flow::{fixed_point_solve, gfp_run, nmp_run, EngineConfig, RateTrace, RunOptions, SnapshotSchedule};
use crate::initial::{build_nu_delta, validate_geometry, DeltaWeights, InitSpec};
use crate::meanfield::{
    chaos_distance, empirical_projection, inflow_tests, init_network_with, network_step, restricted_tv,
    FlowStats, InitMode,
};
use crate::measure::{core_rectangle, read_snapshot, write_snapshot, StateMeasure};
use crate::service::{ServiceDistribution, TypeBSpec};
use crate::transience::{construct, verify_certificate, TransienceCertificate, TransienceConfig};

pub const SCHEMA: &str = "nmp-experiment/1";
pub const TOOL: &str = concat!("nmp ", env!("CARGO_PKG_VERSION"));
pub const OUTPUT_ROOT_ENV: &str = "NMP_OUTPUT_ROOT";

pub mod exit {
    pub const OK: i32 = 0;
    pub const OTHER: i32 = 1;
    pub const SCHEMA: i32 = 2;
    pub const BUDGET: i32 = 3;
    pub const EXHAUSTED: i32 = 4;
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidSpec(_)
        | Error::EmptyBlock { .. }
        | Error::AtomOutOfRange { .. }
        | Error::NonIncreasing { .. }
        | Error::Geometry(_)
        | Error::Weights(_)
        | Error::Config(_)
        | Error::Json(_)
        | Error::Parse(_) => exit::SCHEMA,
        Error::ConservationBudget { .. } | Error::NegativeRate { .. } => exit::BUDGET,
        Error::SearchExhausted { .. } | Error::NotConverged { .. } => exit::EXHAUSTED,
        _ => exit::OTHER,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitSection {
    #[serde(flatten)]
    pub spec: InitSpec,
    pub delta_weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixedPointSection {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FixedPointSection {
    fn default() -> Self {
        FixedPointSection {
            tol: 1e-12,
            max_iter: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeanfieldSection {
    #[serde(rename = "M")]
    pub m: Vec<usize>,
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub snapshot_every: usize,
    pub exact_n: bool,
    pub designated: Vec<usize>,
    /// Steps dropped before the inflow window.
    pub warmup: usize,
    pub budget: f64,
}

impl Default for MeanfieldSection {
    fn default() -> Self {
        MeanfieldSection {
            m: vec![1000],
            seeds: vec![0],
            steps: 100,
            snapshot_every: 10,
            exact_n: false,
            designated: vec![0, 1],
            warmup: 0,
            budget: 0.01,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub root: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: String,
    pub dist: TypeBSpec,
    /// Layered start; ignored when `start` is given.
    #[serde(default)]
    pub init: Option<InitSection>,
    /// Explicit start atoms `(n, tau, mass)`, `n = 0` meaning idle.
    #[serde(default)]
    pub start: Option<Vec<(u64, u64, f64)>>,
    /// Mean queue for the simple start when neither `init` nor `start` is set.
    #[serde(default)]
    pub rho: Option<f64>,
    #[serde(default)]
    pub engine: EngineConfig,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "SnapshotSchedule::none")]
    pub snapshots: SnapshotSchedule,
    #[serde(default)]
    pub band: Option<(u64, Option<u64>)>,
    #[serde(default)]
    pub stationary: StationaryOptions,
    #[serde(default)]
    pub fixed_point: FixedPointSection,
    /// Exogenous rates: a CSV path (`t,lambda`) or omitted for the constant.
    #[serde(default)]
    pub lambda_in: Option<PathBuf>,
    #[serde(default)]
    pub lambda_const: Option<f64>,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub transience: TransienceConfig,
    #[serde(default)]
    pub meanfield: MeanfieldSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub workers: Option<usize>,
}

fn default_horizon() -> usize {
    500
}

fn default_eps() -> f64 {
    0.05
}

impl ExperimentConfig {
    pub fn minimal(dist: TypeBSpec) -> Self {
        ExperimentConfig {
            schema: SCHEMA.into(),
            dist,
            init: None,
            start: None,
            rho: Some(1.0),
            engine: EngineConfig::default(),
            horizon: default_horizon(),
            snapshots: SnapshotSchedule::none(),
            band: None,
            stationary: StationaryOptions::default(),
            fixed_point: FixedPointSection::default(),
            lambda_in: None,
            lambda_const: None,
            eps: default_eps(),
            transience: TransienceConfig::default(),
            meanfield: MeanfieldSection::default(),
            output: OutputSection::default(),
            workers: None,
        }
    }

    pub fn distribution(&self) -> Result<ServiceDistribution> {
        self.dist.build()
    }

    /// The start state `nu`.
    pub fn initial_state(&self) -> Result<StateMeasure> {
        if let Some(atoms) = &self.start {
            let mut nu = StateMeasure::empty();
            for &(n, tau, w) in atoms {
                nu.add(n, tau, w)?;
            }
            return Ok(nu);
        }
        if let Some(init) = &self.init {
            let d = DeltaWeights::new(init.delta_weights.clone())?;
            return build_nu_delta(&init.spec, &self.dist, &d);
        }
        match self.rho {
            Some(r) => crate::equilibrium::simple_start(r),
            None => Err(Error::Config("one of start, init, rho is required".into())),
        }
    }
}

/// One problem found by [`validate_config`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub path: String,
    pub message: String,
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

fn diag(path: &str, message: impl Into<String>) -> Diagnostic {
    Diagnostic {
        path: path.into(),
        message: message.into(),
    }
}

/// Empty iff the config can be run. `base` resolves relative file references.
pub fn validate_config(raw: &Value, base: &Path) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    match raw.get("schema").and_then(Value::as_str) {
        Some(SCHEMA) => {}
        Some(other) => out.push(diag("schema", format!("unknown schema {other:?}, expected {SCHEMA:?}"))),
        None => out.push(diag("schema", format!("missing schema tag {SCHEMA:?}"))),
    }
    match raw.get("dist") {
        None => out.push(diag("dist", "missing")),
        Some(d) => {
            if let Err(e) = serde_json::from_value::<TypeBSpec>(d.clone()) {
                out.push(diag("dist", e.to_string()));
            }
        }
    }
    if !out.is_empty() {
        return out;
    }
    let cfg: ExperimentConfig = match serde_json::from_value(raw.clone()) {
        Ok(c) => c,
        Err(e) => {
            out.push(diag("", e.to_string()));
            return out;
        }
    };
    if let Some(init) = &cfg.init {
        for v in validate_geometry(&init.spec, &cfg.dist) {
            out.push(diag("init", v.to_string()));
        }
        if let Err(e) = DeltaWeights::new(init.delta_weights.clone()) {
            out.push(diag("init.delta_weights", e.to_string()));
        } else if init.delta_weights.len() > cfg.dist.block_count() {
            out.push(diag(
                "init.delta_weights",
                format!("{} weights for {} layers", init.delta_weights.len(), cfg.dist.block_count()),
            ));
        }
    }
    if cfg.start.is_none() && cfg.init.is_none() && cfg.rho.is_none() {
        out.push(diag("", "one of start, init, rho is required"));
    }
    if let Some(r) = cfg.rho {
        if !(r > 0.0 && r.is_finite()) {
            out.push(diag("rho", format!("must be positive, got {r}")));
        }
    }
    if let Some(atoms) = &cfg.start {
        let total: f64 = atoms.iter().map(|a| a.2).sum();
        if atoms.iter().any(|a| !(a.2 >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            out.push(diag("start", format!("masses must be non-negative and sum to 1, got {total}")));
        }
    }
    if cfg.dist.build().is_err() {
        out.push(diag("dist", "open spec (last = false) cannot be built into a distribution"));
    }
    let positive = [
        ("engine.prune", cfg.engine.trunc.prune),
        ("engine.poisson_tail", cfg.engine.trunc.poisson_tail),
        ("engine.conservation_budget", cfg.engine.conservation_budget),
        ("stationary.tol", cfg.stationary.tol),
        ("stationary.budget", cfg.stationary.budget),
        ("fixed_point.tol", cfg.fixed_point.tol),
        ("eps", cfg.eps),
        ("transience.eps", cfg.transience.eps),
        ("transience.budget", cfg.transience.budget),
        ("meanfield.budget", cfg.meanfield.budget),
    ];
    for (path, v) in positive {
        if !(v > 0.0 && v.is_finite()) {
            out.push(diag(path, format!("tolerance must be positive, got {v}")));
        }
    }
    if cfg.horizon == 0 {
        out.push(diag("horizon", "must be positive"));
    }
    if cfg.meanfield.m.iter().any(|&m| m == 0) {
        out.push(diag("meanfield.M", "server counts must be positive"));
    }
    if let Some(&m) = cfg.meanfield.m.iter().min() {
        if let Some(&j) = cfg.meanfield.designated.iter().find(|&&j| j >= m) {
            out.push(diag("meanfield.designated", format!("server {j} outside M = {m}")));
        }
    }
    if let Some(p) = &cfg.lambda_in {
        let p = if p.is_absolute() { p.clone() } else { base.join(p) };
        if !p.exists() {
            out.push(diag("lambda_in", format!("{} does not exist", p.display())));
        }
    }
    if cfg.workers == Some(0) {
        out.push(diag("workers", "must be positive"));
    }
    out
}

/// SHA-256 of the config in canonical form (sorted keys, no whitespace).
pub fn config_hash(raw: &Value) -> String {
    hex::encode(Sha256::digest(canonical_json(raw).as_bytes()))
}

fn canonical_json(v: &Value) -> String {
    // serde_json's default map is ordered by key
    serde_json::to_string(v).expect("json value serializes")
}

pub struct Loaded {
    pub raw: Value,
    pub config: ExperimentConfig,
    pub hash: String,
    pub base: PathBuf,
}

pub fn load_config(path: &Path) -> Result<Loaded> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: Value = serde_json::from_str(&text)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let diags = validate_config(&raw, &base);
    if !diags.is_empty() {
        return Err(Error::Config(
            diags.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; "),
        ));
    }
    let config = serde_json::from_value(raw.clone())?;
    Ok(Loaded {
        hash: config_hash(&raw),
        raw,
        config,
        base,
    })
}

/// Output location: absolute paths are kept, relative ones go under the
/// root from the environment, else the config, else the working directory.
pub fn output_root(cfg: Option<&ExperimentConfig>) -> PathBuf {
    if let Some(r) = std::env::var_os(OUTPUT_ROOT_ENV) {
        return PathBuf::from(r);
    }
    cfg.and_then(|c| c.output.root.clone()).unwrap_or_default()
}

fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

fn create_parent(p: &Path) -> Result<()> {
    if let Some(dir) = p.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    Ok(())
}

fn header(hash: &str) -> Vec<String> {
    vec![format!("config_hash={hash}"), format!("tool={TOOL}")]
}

/// Writes `# key=value` lines, then the CSV body.
fn write_csv(path: &Path, hash: &str, columns: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    create_parent(path)?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for h in header(hash) {
        writeln!(out, "# {h}").map_err(|e| Error::io(path, e))?;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(columns)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    config_hash: &'a str,
    tool: &'a str,
    #[serde(flatten)]
    body: &'a T,
}

fn write_json<T: Serialize>(path: &Path, hash: &str, body: &T) -> Result<()> {
    create_parent(path)?;
    let text = serde_json::to_string_pretty(&Stamped {
        config_hash: hash,
        tool: TOOL,
        body,
    })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_measure(path: &Path, hash: &str, mu: &StateMeasure) -> Result<()> {
    create_parent(path)?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_snapshot(mu, &header(hash), std::io::BufWriter::new(file))
}

fn strip_comments(path: &Path) -> Result<String> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut body = String::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.starts_with('#') {
            body.push_str(&line);
            body.push('\n');
        }
    }
    Ok(body)
}

/// Reads the `lambda` column of a `t,lambda,...` CSV.
pub fn read_rate_csv(path: &Path) -> Result<RateTrace> {
    let body = strip_comments(path)?;
    let mut r = csv::Reader::from_reader(body.as_bytes());
    let col = r
        .headers()?
        .iter()
        .position(|h| h == "lambda")
        .ok_or_else(|| Error::Parse(format!("{}: no lambda column", path.display())))?;
    let mut lambda = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let v: f64 = rec[col]
            .parse()
            .map_err(|_| Error::Parse(format!("{}: bad rate {:?}", path.display(), &rec[col])))?;
        lambda.push(v);
    }
    Ok(RateTrace {
        lambda,
        events: Vec::new(),
    })
}

fn read_json_file<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn fmt_f(x: f64) -> String {
    // shortest round-trip form
    format!("{x:?}")
}

#[derive(Parser, Debug)]
#[command(name = "nmp", version, about = "Mean-field queueing dynamics with sparse service times")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Iterate the non-linear dynamics and write the rate trace.
    NmpRun {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Directory for state snapshots at the configured times.
        #[arg(long)]
        snapshots: Option<PathBuf>,
    },
    /// Drive the server with exogenous rates.
    GfpRun {
        #[arg(long)]
        config: PathBuf,
        /// CSV with a `lambda` column, or a constant rate. Defaults to the
        /// config's `lambda_in` file, then `lambda_const`.
        #[arg(long)]
        lambda_in: Option<String>,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve lambda = A(nu, lambda) by iteration.
    FixedPoint {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Long-run state at mean queue `rho`.
    Stationary {
        /// Service spec JSON.
        #[arg(long)]
        dist: PathBuf,
        #[arg(long)]
        rho: f64,
        #[arg(long)]
        out: PathBuf,
        /// Optional experiment config for tolerances.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Closed-form stationary rates.
    Pk {
        #[arg(long)]
        rho: f64,
        #[arg(long)]
        m1: Option<f64>,
        #[arg(long)]
        m2: Option<f64>,
        /// Take the moments from a service spec JSON.
        #[arg(long)]
        dist: Option<PathBuf>,
    },
    /// Build a transience certificate.
    TransienceBuild {
        #[arg(long)]
        levels: Option<usize>,
        #[arg(long)]
        eps: Option<f64>,
        /// Service spec whose first block is the base.
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Transience settings JSON (the `transience` section alone).
        #[arg(long)]
        settings: Option<PathBuf>,
    },
    /// Re-run a certificate and check every claim.
    Verify {
        cert: PathBuf,
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Simulate the finite network.
    Meanfield {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "M")]
        m: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distance of simulated snapshots from the non-linear dynamics.
    Compare {
        #[arg(long)]
        meanfield: PathBuf,
        #[arg(long)]
        nmp: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a config and list problems.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn pool(workers: Option<usize>) -> Result<rayon::ThreadPool> {
    let n = workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::Config(e.to_string()))
}

/// Runs one subcommand; messages for the user go to `stdout`.
pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<i32> {
    let say = |stdout: &mut dyn Write, s: String| -> Result<()> {
        writeln!(stdout, "{s}").map_err(|e| Error::io("<stdout>", e))
    };
    match cli.command {
        Command::NmpRun {
            config,
            horizon,
            out,
            snapshots,
        } => {
            let l = load_config(&config)?;
            let cfg = &l.config;
            let root = output_root(Some(cfg));
            let dist = cfg.distribution()?;
            let nu = cfg.initial_state()?;
            let horizon = horizon.unwrap_or(cfg.horizon);
            let opts = RunOptions {
                snapshots: if snapshots.is_some() { cfg.snapshots.clone() } else { SnapshotSchedule::none() },
                band: cfg.band,
            };
            let run = pool(cfg.workers)?.install(|| nmp_run(&nu, &dist, horizon, &opts, &cfg.engine))?;
            let path = resolve(&root, &out);
            write_csv(
                &path,
                &l.hash,
                &["t", "lambda", "mean_queue", "idle_mass", "lost_mass", "banded_mean"],
                run.rows.iter().map(|r| {
                    vec![
                        r.t.to_string(),
                        fmt_f(r.lambda),
                        fmt_f(r.mean_queue),
                        fmt_f(r.idle_mass),
                        fmt_f(r.lost_mass),
                        fmt_f(r.banded_mean),
                    ]
                }),
            )?;
            if let Some(dir) = snapshots {
                let dir = resolve(&root, &dir);
                for (t, mu) in &run.snapshots {
                    write_measure(&dir.join(format!("state_{t}.csv")), &l.hash, mu)?;
                }
            }
            let tail = tail_mean(&run.trace.lambda);
            say(stdout, format!("wrote {} ({} steps, tail rate {tail:.7})", path.display(), horizon))?;
            Ok(exit::OK)
        }
        Command::GfpRun {
            config,
            lambda_in,
            horizon,
            out,
        } => {
            let l = load_config(&config)?;
            let cfg = &l.config;
            let dist = cfg.distribution()?;
            let nu = cfg.initial_state()?;
            let source = match (lambda_in, &cfg.lambda_in, cfg.lambda_const) {
                (Some(s), _, _) => s,
                (None, Some(p), _) => l.base.join(p).to_string_lossy().into_owned(),
                (None, None, Some(c)) => c.to_string(),
                (None, None, None) => return Err(Error::Config("no exogenous rates given".into())),
            };
            let input = match source.parse::<f64>() {
                Ok(c) => RateTrace {
                    lambda: vec![c; horizon.unwrap_or(cfg.horizon)],
                    events: Vec::new(),
                },
                Err(_) => {
                    let mut t = read_rate_csv(Path::new(&source))?;
                    if let Some(h) = horizon {
                        t.lambda.truncate(h);
                    }
                    t
                }
            };
            let b = gfp_run(&nu, &dist, &input, &cfg.engine)?;
            let path = resolve(&output_root(Some(cfg)), &out);
            write_csv(
                &path,
                &l.hash,
                &["t", "lambda_in", "lambda"],
                b.lambda
                    .iter()
                    .zip(&input.lambda)
                    .enumerate()
                    .map(|(i, (o, a))| vec![(i + 1).to_string(), fmt_f(*a), fmt_f(*o)]),
            )?;
            say(stdout, format!("wrote {}", path.display()))?;
            Ok(exit::OK)
        }
        Command::FixedPoint { config, horizon, out } => {
            let l = load_config(&config)?;
            let cfg = &l.config;
            let dist = cfg.distribution()?;
            let nu = cfg.initial_state()?;
            let horizon = horizon.unwrap_or(cfg.horizon);
            let fp = fixed_point_solve(
                &nu,
                &dist,
                horizon,
                cfg.fixed_point.tol,
                cfg.fixed_point.max_iter,
                &cfg.engine,
            )?;
            let path = resolve(&output_root(Some(cfg)), &out);
            write_csv(
                &path,
                &l.hash,
                &["t", "lambda"],
                fp.trace.lambda.iter().enumerate().map(|(i, x)| vec![(i + 1).to_string(), fmt_f(*x)]),
            )?;
            say(
                stdout,
                format!(
                    "wrote {} (iterations {}, residual {:e})",
                    path.display(),
                    fp.iterations,
                    fp.residual
                ),
            )?;
            Ok(exit::OK)
        }
        Command::Stationary { dist, rho, out, config } => {
            let spec: TypeBSpec = read_json_file(&dist)?;
            let d = spec.build()?;
            let (opts, engine, hash, root) = match config {
                Some(c) => {
                    let l = load_config(&c)?;
                    let root = output_root(Some(&l.config));
                    (l.config.stationary, l.config.engine, l.hash, root)
                }
                None => {
                    let raw = serde_json::json!({ "dist": serde_json::to_value(&spec)?, "rho": rho });
                    (StationaryOptions::default(), EngineConfig::default(), config_hash(&raw), output_root(None))
                }
            };
            let res = stationary_state(&d, rho, &opts, &engine)?;
            let path = resolve(&root, &out);
            #[derive(Serialize)]
            struct Body<'a> {
                #[serde(flatten)]
                result: &'a crate::equilibrium::StationaryResult,
                pk_rate: f64,
                pk_rate_in_system: f64,
                state: Vec<(u64, u64, f64)>,
            }
            let mut state = vec![(0, 0, res.state.idle_mass())];
            state.extend(res.state.atoms());
            write_json(
                &path,
                &hash,
                &Body {
                    result: &res,
                    pk_rate: pk_rate(rho, d.mean(), d.second_moment())?,
                    pk_rate_in_system: pk_rate_in_system(rho, d.mean(), d.second_moment())?,
                    state,
                },
            )?;
            say(stdout, format!("rate {:.9} after {} steps", res.rate, res.iterations))?;
            Ok(exit::OK)
        }
        Command::Pk { rho, m1, m2, dist } => {
            let (m1, m2) = match (dist, m1, m2) {
                (Some(p), _, _) => {
                    let d = read_json_file::<TypeBSpec>(&p)?.build()?;
                    (d.mean(), d.second_moment())
                }
                (None, Some(a), Some(b)) => (a, b),
                _ => return Err(Error::Config("give --dist or both --m1 and --m2".into())),
            };
            let v = serde_json::json!({
                "rho": rho,
                "m1": m1,
                "m2": m2,
                "pk_rate": pk_rate(rho, m1, m2)?,
                "pk_rate_in_system": pk_rate_in_system(rho, m1, m2)?,
            });
            say(stdout, serde_json::to_string_pretty(&v)?)?;
            Ok(exit::OK)
        }
        Command::TransienceBuild {
            levels,
            eps,
            base,
            out,
            settings,
        } => {
            let mut tc: TransienceConfig = match &settings {
                Some(p) => read_json_file(p)?,
                None => TransienceConfig::default(),
            };
            if let Some(k) = levels {
                tc.levels = k;
            }
            if let Some(e) = eps {
                tc.eps = e;
            }
            if let Some(b) = &base {
                tc.base = read_json_file(b)?;
            }
            let hash = config_hash(&serde_json::to_value(&tc)?);
            let cert = construct(&tc)?;
            let path = resolve(&output_root(None), &out);
            write_json(&path, &hash, &cert)?;
            say(
                stdout,
                format!(
                    "wrote {} ({} levels, {} windows, horizon {})",
                    path.display(),
                    cert.levels.len(),
                    cert.low_windows.len(),
                    cert.horizon
                ),
            )?;
            Ok(exit::OK)
        }
        Command::Verify { cert, horizon } => {
            let c: TransienceCertificate = read_json_file(&cert)?;
            let v = verify_certificate(&c, horizon)?;
            say(stdout, serde_json::to_string_pretty(&v)?)?;
            Ok(if v.ok { exit::OK } else { exit::BUDGET })
        }
        Command::Meanfield {
            config,
            m,
            steps,
            seed,
            out,
        } => {
            let l = load_config(&config)?;
            let cfg = &l.config;
            let dir = resolve(&output_root(Some(cfg)), &out);
            let ms = m.map_or_else(|| cfg.meanfield.m.clone(), |m| vec![m]);
            let seeds = seed.map_or_else(|| cfg.meanfield.seeds.clone(), |s| vec![s]);
            let steps = steps.unwrap_or(cfg.meanfield.steps);
            let jobs: Vec<(usize, u64)> = ms.iter().flat_map(|&m| seeds.iter().map(move |&s| (m, s))).collect();
            let single = jobs.len() == 1;
            let results: Vec<Result<()>> = pool(cfg.workers)?.install(|| {
                use rayon::prelude::*;
                jobs.par_iter()
                    .map(|&(m, s)| {
                        let sub = if single { dir.clone() } else { dir.join(format!("M{m}_seed{s}")) };
                        meanfield_replica(&l, m, s, steps, &sub)
                    })
                    .collect()
            });
            for r in results {
                r?;
            }
            say(stdout, format!("wrote {} replica(s) under {}", jobs.len(), dir.display()))?;
            Ok(exit::OK)
        }
        Command::Compare { meanfield, nmp, out } => {
            let raw: Value = read_json_file(&meanfield.join("config.json"))?;
            let cfg: ExperimentConfig = serde_json::from_value(raw.clone())?;
            let hash = config_hash(&raw);
            let nmp_trace = read_rate_csv(&nmp)?;
            let sigma = read_sigma(&meanfield.join("sigma.csv"))?;
            let m = sigma.0 as f64;
            let mut snaps: Vec<(usize, PathBuf)> = Vec::new();
            for entry in fs::read_dir(&meanfield).map_err(|e| Error::io(&meanfield, e))? {
                let p = entry.map_err(|e| Error::io(&meanfield, e))?.path();
                let name = p.file_name().and_then(|s| s.to_str()).unwrap_or("");
                if let Some(t) = name.strip_prefix("state_").and_then(|s| s.strip_suffix(".csv")) {
                    if let Ok(t) = t.parse() {
                        snaps.push((t, p));
                    }
                }
            }
            snaps.sort();
            let dist = cfg.distribution()?;
            let nu = cfg.initial_state()?;
            let t_max = snaps.last().map_or(0, |s| s.0);
            let pinned = snaps.iter().map(|s| s.0).collect();
            let reference = if t_max > 0 {
                nmp_run(
                    &nu,
                    &dist,
                    t_max,
                    &RunOptions {
                        snapshots: SnapshotSchedule { geometric: false, pinned },
                        band: None,
                    },
                    &cfg.engine,
                )?
                .snapshots
            } else {
                Vec::new()
            };
            let mut rows = Vec::new();
            for (t, p) in &snaps {
                let f = fs::File::open(p).map_err(|e| Error::io(p, e))?;
                let emp = read_snapshot(BufReader::new(f))?;
                let refm = if *t == 0 {
                    &nu
                } else {
                    &reference
                        .iter()
                        .find(|(s, _)| s == t)
                        .ok_or_else(|| Error::NotFound(format!("reference at t={t}")))?
                        .1
                };
                let rect = core_rectangle(refm, cfg.meanfield.budget)?;
                let d = restricted_tv(&emp, refm, &rect)?;
                let s = if *t >= 1 { sigma.1.get(t - 1).map(|&x| x as f64 / m) } else { None };
                let lam = if *t >= 1 && *t <= nmp_trace.len() { Some(nmp_trace.at(*t)) } else { None };
                rows.push(vec![
                    t.to_string(),
                    fmt_f(d),
                    s.map_or(String::new(), fmt_f),
                    lam.map_or(String::new(), fmt_f),
                ]);
            }
            let path = out.unwrap_or_else(|| meanfield.join("compare.csv"));
            write_csv(&path, &hash, &["t", "marginal_tv", "sigma_over_m", "lambda_nmp"], rows.into_iter())?;
            say(stdout, format!("wrote {}", path.display()))?;
            Ok(exit::OK)
        }
        Command::Validate { config } => {
            let text = fs::read_to_string(&config).map_err(|e| Error::io(&config, e))?;
            let raw: Value = serde_json::from_str(&text)?;
            let base = config.parent().map(Path::to_path_buf).unwrap_or_default();
            let diags = validate_config(&raw, &base);
            if diags.is_empty() {
                say(stdout, "ok".into())?;
                Ok(exit::OK)
            } else {
                for d in &diags {
                    say(stdout, d.to_string())?;
                }
                Ok(exit::SCHEMA)
            }
        }
    }
}

fn tail_mean(x: &[f64]) -> f64 {
    let k = (x.len() / 10).max(1).min(x.len());
    x[x.len() - k..].iter().sum::<f64>() / k as f64
}

/// `(M, sigma per step)` from a replica's `sigma.csv`.
fn read_sigma(path: &Path) -> Result<(usize, Vec<u64>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m = text
        .lines()
        .find_map(|l| l.strip_prefix("# M="))
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| Error::Parse(format!("{}: missing # M= line", path.display())))?;
    let body = strip_comments(path)?;
    let mut r = csv::Reader::from_reader(body.as_bytes());
    let mut sigma = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        sigma.push(rec[1].parse().map_err(|_| Error::Parse("bad sigma".into()))?);
    }
    Ok((m, sigma))
}

fn meanfield_replica(l: &Loaded, m: usize, seed: u64, steps: usize, dir: &Path) -> Result<()> {
    let cfg = &l.config;
    let mf = &cfg.meanfield;
    let dist = cfg.distribution()?;
    let nu = cfg.initial_state()?;
    let mode = if mf.exact_n { InitMode::ExactN } else { InitMode::Iid };
    let mut state = init_network_with(&nu, m, seed, mode)?;
    let designated: Vec<usize> = mf.designated.iter().copied().filter(|&j| j < m).collect();
    let every = mf.snapshot_every;
    let snap_at = |t: usize| every > 0 && t % every == 0;

    let pinned = (1..=steps).filter(|&t| snap_at(t)).collect();
    let reference = if steps > 0 {
        nmp_run(
            &nu,
            &dist,
            steps,
            &RunOptions {
                snapshots: SnapshotSchedule { geometric: false, pinned },
                band: None,
            },
            &cfg.engine,
        )?
        .snapshots
    } else {
        Vec::new()
    };

    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(&l.raw)? + "\n")
        .map_err(|e| Error::io(dir, e))?;

    #[derive(Serialize)]
    struct ChaosRow {
        t: usize,
        marginal: Option<f64>,
        pair: Option<f64>,
        error: Option<String>,
    }
    let mut chaos = Vec::new();
    let mut check = |t: usize, state: &crate::meanfield::NetworkState, refm: &StateMeasure| -> Result<()> {
        write_measure(&dir.join(format!("state_{t}.csv")), &l.hash, &empirical_projection(state))?;
        let row = match core_rectangle(refm, mf.budget).and_then(|r| chaos_distance(state, refm, &r)) {
            Ok(c) => ChaosRow {
                t,
                marginal: Some(c.marginal),
                pair: Some(c.pair),
                error: None,
            },
            Err(e) => ChaosRow {
                t,
                marginal: None,
                pair: None,
                error: Some(e.to_string()),
            },
        };
        chaos.push(row);
        Ok(())
    };
    if every > 0 {
        check(0, &state, &nu)?;
    }
    let mut stats = FlowStats::new(&designated);
    let mut expected = Vec::with_capacity(steps);
    for t in 1..=steps {
        expected.push(state.expected_departures(&dist));
        stats.push(&network_step(&mut state, &dist, &designated));
        if snap_at(t) {
            let refm = &reference
                .iter()
                .find(|(s, _)| *s == t)
                .ok_or_else(|| Error::NotFound(format!("reference at t={t}")))?
                .1;
            check(t, &state, refm)?;
        }
    }

    let mut cols = vec!["t".to_string(), "sigma".into(), "expected".into()];
    cols.extend(designated.iter().map(|j| format!("arrivals_{j}")));
    let colrefs: Vec<&str> = cols.iter().map(String::as_str).collect();
    let sigma_path = dir.join("sigma.csv");
    {
        let mut h = header(&l.hash);
        h.push(format!("M={m}"));
        h.push(format!("N={}", state.customers()));
        h.push(format!("seed={seed}"));
        create_parent(&sigma_path)?;
        let file = fs::File::create(&sigma_path).map_err(|e| Error::io(&sigma_path, e))?;
        let mut out = std::io::BufWriter::new(file);
        for line in h {
            writeln!(out, "# {line}").map_err(|e| Error::io(&sigma_path, e))?;
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&colrefs)?;
        for t in 0..steps {
            let mut r = vec![(t + 1).to_string(), stats.sigma[t].to_string(), fmt_f(expected[t])];
            r.extend(stats.per_server.iter().map(|v| v[t].to_string()));
            w.write_record(&r)?;
        }
        w.flush().map_err(|e| Error::io(&sigma_path, e))?;
    }

    let window = stats.window(mf.warmup);
    let inflow = match inflow_tests(&window) {
        Ok(r) => serde_json::to_value(r)?,
        Err(e) => serde_json::json!({ "error": e.to_string() }),
    };
    let report = serde_json::json!({
        "M": m,
        "N": state.customers(),
        "seed": seed,
        "steps": steps,
        "warmup": mf.warmup,
        "mean_sigma_over_m": if steps > 0 { stats.sigma.iter().sum::<u64>() as f64 / steps as f64 / m as f64 } else { 0.0 },
        "inflow": inflow,
        "chaos": chaos,
    });
    write_json(&dir.join("stats.json"), &l.hash, &report)
}
