//! One-server dynamics. Each step runs three stages in order:
//! vertical shift (every busy server ages by one), exit (the customer at
//! age `tau` leaves with probability `p_tau`, the queue moves down), and
//! inflow (Poisson arrivals). In the non-linear process the inflow rate of a
//! step is its own exit mass; in the general flow process it is exogenous.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::{convolve_in_place, PoissonKernel, Row, StateMeasure, Truncation};
use crate::service::ServiceDistribution;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    #[serde(flatten)]
    pub trunc: Truncation,
    /// A run aborts once the summed per-step mean drift exceeds this.
    pub conservation_budget: f64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            trunc: Truncation::default(),
            conservation_budget: 1e-6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    #[serde(rename = "T_in")]
    In,
    #[serde(rename = "T_out")]
    Out,
    #[serde(rename = "T_bn")]
    Bn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub kind: EventKind,
    pub level: usize,
    pub t: usize,
}

/// Rates `lambda(1), lambda(2), ...`; `lambda[t - 1]` is the rate of step `t`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RateTrace {
    pub lambda: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub events: Vec<Event>,
}

impl RateTrace {
    pub fn at(&self, t: usize) -> f64 {
        self.lambda[t - 1]
    }

    pub fn len(&self) -> usize {
        self.lambda.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambda.is_empty()
    }

    pub fn sup_distance(&self, other: &RateTrace) -> f64 {
        self.lambda
            .iter()
            .zip(&other.lambda)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub lambda_out: f64,
    /// Exit mass that re-entered the `tau = 0` row.
    pub to_row0: f64,
    /// Exit mass that emptied a server.
    pub to_idle: f64,
    pub mass_check: f64,
    pub mean_check: f64,
}

/// Stage A: every atom `(n, tau)` moves to `(n, tau + 1)`.
pub fn stage_vertical(mu: &StateMeasure) -> StateMeasure {
    let mut out = mu.clone();
    out.shift_up();
    out
}

struct ExitFlow {
    lambda: f64,
    to_row0: f64,
    to_idle: f64,
}

fn exit_in_place(phi: &mut StateMeasure, dist: &ServiceDistribution) -> Result<ExitFlow> {
    let max_tau = dist.max_service();
    let rows = phi.take_rows();
    let mut hazards = Vec::with_capacity(rows.len());
    for (tau, _) in &rows {
        if *tau == 0 {
            return Err(Error::OutOfRange {
                what: "exit-stage input row",
                value: "tau = 0 (expected a vertically shifted measure)".into(),
            });
        }
        if *tau > max_tau {
            return Err(Error::HazardTable { tau: *tau, max_tau });
        }
        hazards.push(dist.hazard_unchecked(*tau));
    }

    // The new tau = 0 row spans n - 1 over all exiting rows.
    let mut lo = u64::MAX;
    let mut hi = 0;
    for ((_, row), &h) in rows.iter().zip(&hazards) {
        if h > 0.0 {
            lo = lo.min(row.first().max(2) - 1);
            hi = hi.max(row.first() + row.masses().len() as u64 - 1);
        }
    }
    let mut dense = if lo <= hi {
        vec![0.0; (hi - lo + 1) as usize]
    } else {
        Vec::new()
    };

    let mut flow = ExitFlow {
        lambda: 0.0,
        to_row0: 0.0,
        to_idle: 0.0,
    };
    for ((tau, row), h) in rows.into_iter().zip(hazards) {
        if h == 0.0 {
            phi.put_row(tau, row);
            continue;
        }
        let mut stay = if h < 1.0 {
            Vec::with_capacity(row.masses().len())
        } else {
            Vec::new()
        };
        for (i, &m) in row.masses().iter().enumerate() {
            let n = row.first() + i as u64;
            let e = m * h;
            if n == 1 {
                flow.to_idle += e;
            } else {
                dense[(n - 1 - lo) as usize] += e;
                flow.to_row0 += e;
            }
            if h < 1.0 {
                stay.push(m - e);
            }
        }
        if h < 1.0 {
            phi.put_row(tau, Row::from_parts(row.first(), stay));
        }
    }
    flow.lambda = flow.to_row0 + flow.to_idle;
    if !dense.is_empty() {
        phi.put_row(0, Row::from_parts(lo, dense).trimmed());
    }
    phi.set_idle(phi.idle_mass() + flow.to_idle);
    Ok(flow)
}

/// Stage B: exits from a vertically shifted measure. Returns the new measure
/// and the exit mass `lambda`.
pub fn stage_exit(phi: &StateMeasure, dist: &ServiceDistribution) -> Result<(StateMeasure, f64)> {
    let mut psi = phi.clone();
    let flow = exit_in_place(&mut psi, dist)?;
    Ok((psi, flow.lambda))
}

/// A server state advanced in place, one step at a time.
#[derive(Clone, Debug)]
pub struct Server<'a> {
    state: StateMeasure,
    dist: &'a ServiceDistribution,
    cfg: EngineConfig,
    t: usize,
    drift: f64,
}

impl<'a> Server<'a> {
    pub fn new(nu: StateMeasure, dist: &'a ServiceDistribution, cfg: EngineConfig) -> Self {
        Server {
            state: nu,
            dist,
            cfg,
            t: 0,
            drift: 0.0,
        }
    }

    pub fn state(&self) -> &StateMeasure {
        &self.state
    }

    pub fn into_state(self) -> StateMeasure {
        self.state
    }

    /// Steps taken so far; the state is `mu^t`.
    pub fn t(&self) -> usize {
        self.t
    }

    pub fn cumulative_drift(&self) -> f64 {
        self.drift
    }

    /// One non-linear step: the inflow rate is this step's exit mass.
    pub fn step(&mut self) -> Result<StepReport> {
        self.advance(None)
    }

    /// One general-flow step with exogenous inflow rate `rate`.
    pub fn step_with_inflow(&mut self, rate: f64) -> Result<StepReport> {
        if !(rate >= 0.0) || !rate.is_finite() {
            return Err(Error::NegativeRate {
                rate,
                t: self.t + 1,
            });
        }
        self.advance(Some(rate))
    }

    fn advance(&mut self, inflow: Option<f64>) -> Result<StepReport> {
        // lost mass receives no arrivals
        let (receiving, mean) = self.state.moments();
        let mass_before = receiving + self.state.lost_mass();
        let mean_before = mean + self.state.lost_weighted();

        self.state.shift_up();
        let flow = exit_in_place(&mut self.state, self.dist)?;
        let rate = inflow.unwrap_or(flow.lambda);
        if rate > 0.0 {
            let kernel = PoissonKernel::new(rate, self.cfg.trunc.poisson_tail)?;
            convolve_in_place(&mut self.state, &kernel, self.cfg.trunc.prune);
        } else {
            self.prune_only();
        }
        self.t += 1;

        let (stored, mean) = self.state.moments();
        let mass_check = (stored + self.state.lost_mass() - mass_before).abs();
        let mean_after = mean + self.state.lost_weighted();
        let expected = rate * receiving - flow.lambda;
        let mean_check = (mean_after - mean_before - expected).abs();
        if inflow.is_none() {
            self.drift += mean_check;
            if self.drift > self.cfg.conservation_budget {
                return Err(Error::ConservationBudget {
                    t: self.t,
                    drift: self.drift,
                    budget: self.cfg.conservation_budget,
                });
            }
        }
        Ok(StepReport {
            lambda_out: flow.lambda,
            to_row0: flow.to_row0,
            to_idle: flow.to_idle,
            mass_check,
            mean_check,
        })
    }

    fn prune_only(&mut self) {
        // a zero-rate convolution is the identity plus pruning
        let kernel = PoissonKernel {
            weights: vec![1.0],
            tail: 0.0,
        };
        convolve_in_place(&mut self.state, &kernel, self.cfg.trunc.prune);
    }
}

/// Full step `mu^T -> mu^{T+1}` with its report.
pub fn nmp_step(
    mu: &StateMeasure,
    dist: &ServiceDistribution,
    cfg: &EngineConfig,
) -> Result<(StateMeasure, StepReport)> {
    let mut s = Server::new(mu.clone(), dist, *cfg);
    let report = s.step()?;
    Ok((s.into_state(), report))
}

/// Which states `nmp_run` keeps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotSchedule {
    /// `t in {1, 2, 4, 8, ...}`.
    #[serde(default = "yes")]
    pub geometric: bool,
    #[serde(default)]
    pub pinned: BTreeSet<usize>,
}

fn yes() -> bool {
    true
}

impl Default for SnapshotSchedule {
    fn default() -> Self {
        SnapshotSchedule::geometric()
    }
}

impl SnapshotSchedule {
    pub fn none() -> Self {
        SnapshotSchedule {
            geometric: false,
            pinned: BTreeSet::new(),
        }
    }

    pub fn geometric() -> Self {
        SnapshotSchedule {
            geometric: true,
            pinned: BTreeSet::new(),
        }
    }

    pub fn every(horizon: usize) -> Self {
        SnapshotSchedule {
            geometric: false,
            pinned: (0..=horizon).collect(),
        }
    }

    pub fn contains(&self, t: usize) -> bool {
        self.pinned.contains(&t) || (self.geometric && t >= 1 && t.is_power_of_two())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: usize,
    pub lambda: f64,
    pub mean_queue: f64,
    pub idle_mass: f64,
    pub lost_mass: f64,
    pub banded_mean: f64,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub snapshots: SnapshotSchedule,
    /// Band `[a, b]` for the `banded_mean` column; `None` means `[0, inf)`.
    pub band: Option<(u64, Option<u64>)>,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub trace: RateTrace,
    pub rows: Vec<TraceRow>,
    pub reports: Vec<StepReport>,
    pub final_state: StateMeasure,
    pub snapshots: Vec<(usize, StateMeasure)>,
}

/// Iterates the non-linear dynamics for `horizon` steps from `nu`.
pub fn nmp_run(
    nu: &StateMeasure,
    dist: &ServiceDistribution,
    horizon: usize,
    opts: &RunOptions,
    cfg: &EngineConfig,
) -> Result<RunOutput> {
    if horizon == 0 {
        return Err(Error::OutOfRange {
            what: "horizon",
            value: "0".into(),
        });
    }
    let (a, b) = opts.band.unwrap_or((0, None));
    let mut server = Server::new(nu.clone(), dist, *cfg);
    let mut snapshots = Vec::new();
    if opts.snapshots.contains(0) {
        snapshots.push((0, nu.clone()));
    }
    let mut lambda = Vec::with_capacity(horizon);
    let mut rows = Vec::with_capacity(horizon);
    let mut reports = Vec::with_capacity(horizon);
    for t in 1..=horizon {
        let rep = server.step()?;
        let s = server.state();
        lambda.push(rep.lambda_out);
        rows.push(TraceRow {
            t,
            lambda: rep.lambda_out,
            mean_queue: s.mean_queue(),
            idle_mass: s.idle_mass(),
            lost_mass: s.lost_mass(),
            banded_mean: s.banded_mean_queue(a, b),
        });
        reports.push(rep);
        if opts.snapshots.contains(t) {
            snapshots.push((t, s.clone()));
        }
    }
    Ok(RunOutput {
        trace: RateTrace {
            lambda,
            events: Vec::new(),
        },
        rows,
        reports,
        final_state: server.into_state(),
        snapshots,
    })
}

/// Rates only, no per-step diagnostics.
pub fn nmp_trace(
    nu: &StateMeasure,
    dist: &ServiceDistribution,
    horizon: usize,
    cfg: &EngineConfig,
) -> Result<(RateTrace, StateMeasure)> {
    let mut server = Server::new(nu.clone(), dist, *cfg);
    let mut lambda = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        lambda.push(server.step()?.lambda_out);
    }
    Ok((
        RateTrace {
            lambda,
            events: Vec::new(),
        },
        server.into_state(),
    ))
}

/// The operator `b = A(nu, lambda_in)`: exit rates of the server driven by
/// the exogenous arrival rates `lambda_in`.
pub fn gfp_run(
    nu: &StateMeasure,
    dist: &ServiceDistribution,
    lambda_in: &RateTrace,
    cfg: &EngineConfig,
) -> Result<RateTrace> {
    if let Some((i, &r)) = lambda_in
        .lambda
        .iter()
        .enumerate()
        .find(|(_, r)| !(**r >= 0.0))
    {
        return Err(Error::NegativeRate { rate: r, t: i + 1 });
    }
    let mut server = Server::new(nu.clone(), dist, *cfg);
    let mut out = Vec::with_capacity(lambda_in.len());
    for &r in &lambda_in.lambda {
        out.push(server.step_with_inflow(r)?.lambda_out);
    }
    Ok(RateTrace {
        lambda: out,
        events: Vec::new(),
    })
}

#[derive(Clone, Debug)]
pub struct FixedPoint {
    pub trace: RateTrace,
    pub iterations: usize,
    /// `sup_t |A(nu, lambda)(t) - lambda(t)|`, certified by one extra run.
    pub residual: f64,
}

/// Solves `lambda = A(nu, lambda)` on `[1, horizon]` by iteration from zero.
pub fn fixed_point_solve(
    nu: &StateMeasure,
    dist: &ServiceDistribution,
    horizon: usize,
    tol: f64,
    max_iter: usize,
    cfg: &EngineConfig,
) -> Result<FixedPoint> {
    if !(tol > 0.0) {
        return Err(Error::OutOfRange {
            what: "tolerance",
            value: tol.to_string(),
        });
    }
    let mut current = RateTrace {
        lambda: vec![0.0; horizon],
        events: Vec::new(),
    };
    let mut last_change = f64::INFINITY;
    for it in 1..=max_iter {
        let next = gfp_run(nu, dist, &current, cfg)?;
        last_change = next.sup_distance(&current);
        current = next;
        if last_change < tol {
            let check = gfp_run(nu, dist, &current, cfg)?;
            return Ok(FixedPoint {
                residual: check.sup_distance(&current),
                trace: current,
                iterations: it,
            });
        }
    }
    Err(Error::NotConverged {
        iterations: max_iter,
        residual: last_change,
    })
}
