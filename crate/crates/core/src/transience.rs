//! Multi-level construction of a server whose input rate keeps dropping
//! below `eps` and recovering to the stationary level.
//!
//! Level `k` is the cutoff server: blocks `1..=k` with the last one absorbing
//! the tail, weights `d_1..d_{k-1}` and the remainder in layer `k`. Going from
//! `k` to `k + 1` fixes `d_k` (the assembled server must still be `2 eps`-close
//! to the level-`k` stationary state at `T_k^bn`) and `B_{k+1}` (the rate must
//! fall below `eps` before the blocked layer is released).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::equilibrium::{detect_t_bn_stepwise, stationary_state, StationaryOptions, StationaryResult};
use crate::error::{Error, Result};
use crate::flow::{EngineConfig, Event, EventKind, RateTrace, Server};
use crate::initial::{build_nu_delta, validate_geometry, DeltaWeights, InitSpec, Kappas};
use crate::measure::{closeness_ratio, convolve_poisson, core_rectangle, Rectangle, StateMeasure, Truncation};
use crate::service::{ServiceDistribution, TypeBSpec};

/// One step of the transformation `mu -> (mu - alpha + alpha(. + 1)) * pi_m`
/// on measures over `{0, 1, 2, ...}`, where `m = alpha(N)` and `pi_m` is
/// Poisson. Returns the drop in the n-weighted mean, which equals `m * delta`
/// for `delta = 1 - mu(total)`.
pub fn lemma_decay_check(mu: &[f64], alpha: &[f64]) -> Result<f64> {
    if mu.iter().chain(alpha).any(|x| !(*x >= 0.0) || !x.is_finite()) {
        return Err(Error::InvalidSpec("masses must be finite and nonnegative".into()));
    }
    if alpha.first().is_some_and(|&a| a > 0.0) {
        return Err(Error::InvalidSpec("alpha lives on n >= 1".into()));
    }
    for (k, &a) in alpha.iter().enumerate() {
        let m = mu.get(k).copied().unwrap_or(0.0);
        if a > m {
            return Err(Error::InvalidSpec(format!("alpha({k}) = {a} exceeds mu({k}) = {m}")));
        }
    }
    let total: f64 = mu.iter().sum();
    if total > 1.0 + 1e-12 {
        return Err(Error::InvalidSpec(format!("mu has mass {total} > 1")));
    }
    let m: f64 = alpha.iter().sum();
    let at = |v: &[f64], k: usize| v.get(k).copied().unwrap_or(0.0);

    let mut bar = vec![0.0; mu.len().max(1)];
    bar[0] = at(mu, 0) + at(alpha, 1);
    for n in 1..bar.len() {
        bar[n] = at(mu, n) - at(alpha, n) + at(alpha, n + 1);
    }
    let mut measure = StateMeasure::empty();
    for (n, &x) in bar.iter().enumerate() {
        if x > 0.0 {
            measure.add(n as u64, 0, x)?;
        }
    }
    let trunc = Truncation {
        prune: 0.0,
        poisson_tail: 1e-18,
    };
    let next = convolve_poisson(&measure, m.min(1.0 + 1e-9), &trunc)?;
    let before: f64 = mu.iter().enumerate().map(|(n, x)| n as f64 * x).sum();
    Ok(before - next.mean_queue())
}

/// First `t` in `[start, horizon]` with `lambda(t) < eps`, and the right end
/// of the maximal run with `lambda <= eps` starting there, capped at `horizon`.
pub fn find_t_in(trace: &RateTrace, start: usize, horizon: usize, eps: f64) -> Result<(usize, usize)> {
    if start == 0 || start >= horizon {
        return Err(Error::OutOfRange {
            what: "search window",
            value: format!("[{start}, {horizon}]"),
        });
    }
    let end = horizon.min(trace.len());
    let t_in = (start..=end)
        .find(|&t| trace.at(t) < eps)
        .ok_or_else(|| Error::NotFound(format!("no rate below {eps} in [{start}, {horizon}]")))?;
    let mut t_out = t_in;
    while t_out < end && trace.at(t_out + 1) <= eps {
        t_out += 1;
    }
    Ok((t_in, t_out))
}

/// What stands for the undefined offset `E_{k+1}` in `B_{k+1} - (C_k + E_{k+1})`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffsetRule {
    /// The layer width `F_{k+1}`.
    LayerWidth,
    Fixed(u64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransienceConfig {
    pub levels: usize,
    pub eps: f64,
    /// Only its first block is used.
    pub base: TypeBSpec,
    #[serde(rename = "F")]
    pub f: Vec<u64>,
    /// `G_k = C_k - B_k` for constructed blocks.
    pub gap: u64,
    pub offset: OffsetRule,
    pub b_growth: u64,
    pub b_max: u64,
    /// `d_k` candidates are `r (1 - 2^-j)` for `j = 1..=d_steps`.
    pub d_steps: u32,
    pub min_window: usize,
    pub budget: f64,
    /// Block start of the stand-in server used while `B_{k+1}` is unknown.
    pub probe_block: u64,
    pub max_steps: usize,
    pub stationary: StationaryOptions,
    pub engine: EngineConfig,
}

impl Default for TransienceConfig {
    fn default() -> Self {
        TransienceConfig {
            levels: 3,
            eps: 0.05,
            base: TypeBSpec::from_starts(&[1], true).expect("valid base"),
            f: Vec::new(),
            gap: 0,
            offset: OffsetRule::LayerWidth,
            b_growth: 2,
            b_max: 1 << 36,
            d_steps: 40,
            min_window: 5,
            budget: 0.01,
            probe_block: 1 << 50,
            max_steps: 20_000_000,
            stationary: StationaryOptions::default(),
            engine: EngineConfig::default(),
        }
    }
}

impl TransienceConfig {
    fn init(&self) -> InitSpec {
        InitSpec {
            n_bar: 1,
            f: self.f.clone(),
            kappas: Kappas::default(),
        }
    }

    fn offset(&self, k: usize) -> u64 {
        match self.offset {
            OffsetRule::LayerWidth => self.init().f(k),
            OffsetRule::Fixed(e) => e,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::OutOfRange {
                what: "levels",
                value: "0".into(),
            });
        }
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return Err(Error::OutOfRange {
                what: "eps",
                value: self.eps.to_string(),
            });
        }
        if self.b_growth < 2 || self.min_window == 0 || self.d_steps == 0 {
            return Err(Error::Config("b_growth >= 2, min_window >= 1 and d_steps >= 1 required".into()));
        }
        if self.f.first().is_some_and(|&f| f != 0) {
            return Err(Error::Config("F_1 must be 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub param: String,
    pub value: f64,
    pub pass: bool,
    pub note: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelRecord {
    pub k: usize,
    #[serde(rename = "B")]
    pub b: u64,
    #[serde(rename = "C")]
    pub c: u64,
    pub d: f64,
    pub t_in: Option<usize>,
    pub t_out: Option<usize>,
    pub t_bn: Option<usize>,
    #[serde(rename = "Lambda")]
    pub lambda: f64,
    pub rho: f64,
    pub rectangle: Rectangle,
    /// Mean queue on `tau < C_k` at `T_in`; reported, not gated on.
    pub low_band_mean: Option<f64>,
    pub search_log: Vec<Candidate>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub level: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub max_lambda: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HighPoint {
    pub level: usize,
    pub t: usize,
    pub lambda: f64,
    #[serde(rename = "Lambda")]
    pub stationary_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Continuity {
    pub level: usize,
    pub t_bn: usize,
    /// `max_{t <= T_bn} |lambda_full(t) - lambda_k(t)|`.
    pub max_rate_gap: f64,
    /// Worst cell ratio of the full state against `nu_k` on `I_k` at `T_bn`.
    pub state_ratio: Option<f64>,
    pub ok: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransienceCertificate {
    pub eps: f64,
    pub spec: TypeBSpec,
    pub weights: DeltaWeights,
    pub init: InitSpec,
    pub levels: Vec<LevelRecord>,
    pub low_windows: Vec<Window>,
    pub high_points: Vec<HighPoint>,
    pub continuity: Vec<Continuity>,
    pub events: Vec<Event>,
    pub horizon: usize,
    /// SHA-256 of the little-endian `f64` rates `lambda(1..=horizon)`.
    pub trace_hash: String,
    pub config: TransienceConfig,
}

pub fn trace_hash(lambda: &[f64]) -> String {
    let mut h = Sha256::new();
    for x in lambda {
        h.update(x.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Distribution and initial state of the server with blocks of `spec` and
/// weights `d` (the last weight may be omitted and is then the remainder).
fn server_parts(spec: &TypeBSpec, d: &[f64], init: &InitSpec) -> Result<(ServiceDistribution, StateMeasure)> {
    let mut w = d.to_vec();
    if w.len() < spec.block_count() {
        w.push(1.0 - d.iter().sum::<f64>());
    }
    let weights = DeltaWeights::new(w)?;
    let nu = build_nu_delta(init, spec, &weights)?;
    Ok((spec.build()?, nu))
}

/// Runs `steps` steps, keeping the states at `keep` times.
fn run_keeping(
    dist: &ServiceDistribution,
    nu: &StateMeasure,
    steps: usize,
    keep: &[usize],
    cfg: &EngineConfig,
) -> Result<(RateTrace, Vec<(usize, StateMeasure)>)> {
    let mut server = Server::new(nu.clone(), dist, *cfg);
    let mut trace = RateTrace::default();
    let mut kept = Vec::new();
    if keep.contains(&0) {
        kept.push((0, nu.clone()));
    }
    while server.t() < steps {
        trace.lambda.push(server.step()?.lambda_out);
        if keep.contains(&server.t()) {
            kept.push((server.t(), server.state().clone()));
        }
    }
    Ok((trace, kept))
}

struct Stage {
    spec: TypeBSpec,
    d: Vec<f64>,
    st: StationaryResult,
    t_bn: usize,
}

fn stationary_for(spec: &TypeBSpec, rho: f64, cfg: &TransienceConfig) -> Result<StationaryResult> {
    let dist = spec.build()?;
    let mut st = stationary_state(&dist, rho, &cfg.stationary, &cfg.engine)?;
    st.rectangle = core_rectangle(&st.state, cfg.budget)?;
    Ok(st)
}

/// Finds `d_k`: the smallest candidate for which the next-level server is
/// `2 eps`-close to `nu_k` at `T_k^bn`. Candidates run in parallel batches.
fn search_d(stage: &Stage, probe: &TypeBSpec, cfg: &TransienceConfig, log: &mut Vec<Candidate>) -> Result<f64> {
    let init = cfg.init();
    let r = 1.0 - stage.d.iter().sum::<f64>();
    let cands: Vec<f64> = (1..=cfg.d_steps)
        .map(|j| r * (1.0 - 0.5f64.powi(j as i32)))
        .collect();
    let batch = rayon::current_num_threads().max(1);
    let mut best_miss: Option<f64> = None;
    for chunk in cands.chunks(batch) {
        let results: Vec<Result<(f64, Option<f64>)>> = chunk
            .par_iter()
            .map(|&d| {
                if !(d < r) {
                    return Ok((d, None));
                }
                let mut w = stage.d.clone();
                w.push(d);
                let (dist, nu) = server_parts(probe, &w, &init)?;
                let (_, kept) = run_keeping(&dist, &nu, stage.t_bn, &[stage.t_bn], &cfg.engine)?;
                let state = &kept.last().expect("kept state").1;
                Ok((d, closeness_ratio(state, &stage.st.state, &stage.st.rectangle)))
            })
            .collect();
        for res in results {
            let (d, ratio) = res?;
            let pass = ratio.is_some_and(|x| x < 2.0 * cfg.eps) && d < r;
            log.push(Candidate {
                param: "d".into(),
                value: d,
                pass,
                note: match ratio {
                    _ if !(d < r) => "rejected: d must stay below the remaining weight".into(),
                    Some(x) => format!("ratio {x:.6} at T_bn = {}", stage.t_bn),
                    None => "support mismatch on the core rectangle".into(),
                },
            });
            if pass {
                return Ok(d);
            }
            if let Some(x) = ratio {
                best_miss = Some(best_miss.map_or(x, |b: f64| b.min(x)));
            }
        }
    }
    Err(Error::SearchExhausted {
        level: stage.spec.block_count(),
        detail: format!(
            "no d candidate within {} of nu_k; closest ratio {:?}",
            2.0 * cfg.eps,
            best_miss
        ),
    })
}

/// Hazards of the two laws agree on every atom below `limit`.
fn same_below(a: &ServiceDistribution, b: &ServiceDistribution, limit: u64) -> bool {
    let lo_a: Vec<_> = a.hazards().filter(|(t, _)| *t < limit).collect();
    let lo_b: Vec<_> = b.hazards().filter(|(t, _)| *t < limit).collect();
    lo_a == lo_b
}

struct BChoice {
    b: u64,
    t_in: usize,
}

/// Finds `B_{k+1}` on the doubling schedule. The trajectory before the cap
/// `B - (C_k + E)` does not depend on `B` once the hazard tables agree below
/// `B`, so one stand-in run serves all candidates; otherwise each candidate
/// runs on its own.
fn search_b(
    stage: &Stage,
    d_k: f64,
    probe: &TypeBSpec,
    cfg: &TransienceConfig,
    log: &mut Vec<Candidate>,
) -> Result<BChoice> {
    let k = stage.spec.block_count();
    let init = cfg.init();
    let c_k = stage.spec.end(k);
    let shift = c_k + cfg.offset(k + 1);
    let f_next = init.f(k + 1);
    let b_k = stage.spec.start(k);
    let b_first = (c_k + f_next + 1)
        .max(shift + b_k + 1)
        .max(stage.t_bn as u64 + shift + 1);

    let mut w = stage.d.clone();
    w.push(d_k);
    let (probe_dist, probe_nu) = server_parts(probe, &w, &init)?;
    let mut probe_server = Server::new(probe_nu, &probe_dist, cfg.engine);
    let mut probe_trace = RateTrace::default();

    let mut b = b_first;
    let mut closest: Option<f64> = None;
    while b <= cfg.b_max {
        let cap = (b - shift) as usize;
        let cand_spec = stage.spec.cutoff(k)?.push_block(b, b + cfg.gap, None, true);
        let cand_spec = match cand_spec {
            Ok(s) => s,
            Err(e) => {
                log.push(Candidate {
                    param: "B".into(),
                    value: b as f64,
                    pass: false,
                    note: format!("invalid block: {e}"),
                });
                b = b.saturating_mul(cfg.b_growth);
                continue;
            }
        };
        let violations = validate_geometry(&init, &cand_spec);
        let cand_dist = cand_spec.build()?;
        let outcome = if !violations.is_empty() {
            Err(format!("geometry: {}", violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")))
        } else if cap <= stage.t_bn {
            Err(format!("cap {cap} does not exceed T_bn {}", stage.t_bn))
        } else {
            let reuse = same_below(&cand_dist, &probe_dist, b);
            let trace = if reuse {
                while probe_server.t() < cap - 1 {
                    if probe_server.t() >= cfg.max_steps {
                        return Err(Error::SearchExhausted {
                            level: k,
                            detail: format!("step limit {} reached", cfg.max_steps),
                        });
                    }
                    probe_trace.lambda.push(probe_server.step()?.lambda_out);
                }
                RateTrace {
                    lambda: probe_trace.lambda[..cap - 1].to_vec(),
                    events: Vec::new(),
                }
            } else {
                let (_, nu) = server_parts(&cand_spec, &w, &init)?;
                run_keeping(&cand_dist, &nu, cap, &[], &cfg.engine)?.0
            };
            let how = if reuse { "stand-in prefix" } else { "own run" };
            match find_t_in(&trace, stage.t_bn, trace.len(), cfg.eps) {
                Ok((t_in, t_out)) => {
                    if t_out + 1 - t_in >= cfg.min_window {
                        Ok((t_in, t_out, how))
                    } else {
                        Err(format!("window [{t_in}, {t_out}] shorter than {} ({how})", cfg.min_window))
                    }
                }
                Err(_) => {
                    let low = trace.lambda[stage.t_bn - 1..].iter().copied().fold(f64::INFINITY, f64::min);
                    closest = Some(closest.map_or(low, |c: f64| c.min(low)));
                    Err(format!("min rate {low:.4e} on [T_bn, cap) ({how})"))
                }
            }
        };
        match outcome {
            Ok((t_in, t_out, how)) => {
                log.push(Candidate {
                    param: "B".into(),
                    value: b as f64,
                    pass: true,
                    note: format!("T_in {t_in}, window end {t_out}, cap {cap} ({how})"),
                });
                return Ok(BChoice { b, t_in });
            }
            Err(note) => log.push(Candidate {
                param: "B".into(),
                value: b as f64,
                pass: false,
                note,
            }),
        }
        b = match b.checked_mul(cfg.b_growth) {
            Some(x) => x,
            None => break,
        };
    }
    Err(Error::SearchExhausted {
        level: k,
        detail: format!("B schedule exhausted at {}; lowest rate seen {:?}", cfg.b_max, closest),
    })
}

/// Builds the `levels`-level server and certifies it with a final run.
pub fn construct(cfg: &TransienceConfig) -> Result<TransienceCertificate> {
    cfg.validate()?;
    let init = cfg.init();
    let base = cfg.base.cutoff(1)?;
    let eps = cfg.eps;
    let mut records: Vec<LevelRecord> = Vec::new();

    // level 1: plain relaxation of the first cutoff server
    let (dist1, nu1) = server_parts(&base, &[], &init)?;
    let rho = nu1.mean_queue();
    let st1 = stationary_for(&base, rho, cfg)?;
    let mut server = Server::new(nu1, &dist1, cfg.engine);
    let (t_bn1, _) = detect_t_bn_stepwise(&mut server, &st1.state, &st1.rectangle, eps, 1, cfg.max_steps)?;
    records.push(LevelRecord {
        k: 1,
        b: base.start(1),
        c: base.end(1),
        d: 1.0,
        t_in: None,
        t_out: None,
        t_bn: Some(t_bn1),
        lambda: st1.rate,
        rho,
        rectangle: st1.rectangle,
        low_band_mean: None,
        search_log: Vec::new(),
    });
    let mut stage = Stage {
        spec: base,
        d: Vec::new(),
        st: st1,
        t_bn: t_bn1,
    };

    for k in 1..cfg.levels {
        let mut log = Vec::new();
        let probe = stage
            .spec
            .push_block(cfg.probe_block, cfg.probe_block + cfg.gap, None, true)?;
        let d_k = search_d(&stage, &probe, cfg, &mut log)?;
        let choice = search_b(&stage, d_k, &probe, cfg, &mut log)?;

        // the next cutoff server, with the chosen block
        let next_spec = stage.spec.push_block(choice.b, choice.b + cfg.gap, None, true)?;
        let mut d_next = stage.d.clone();
        d_next.push(d_k);
        let (dist, nu) = server_parts(&next_spec, &d_next, &init)?;
        let shift = stage.spec.end(k) + cfg.offset(k + 1);
        let cap = (choice.b - shift) as usize;
        let (trace, kept) = run_keeping(&dist, &nu, cap, &[choice.t_in], &cfg.engine)?;
        let (t_in, t_out) = find_t_in(&trace, stage.t_bn, cap, eps)?;
        if t_in != choice.t_in || t_out + 1 - t_in < cfg.min_window {
            return Err(Error::SearchExhausted {
                level: k,
                detail: format!(
                    "chosen B = {} does not reproduce its window: [{t_in}, {t_out}] vs T_in {}",
                    choice.b, choice.t_in
                ),
            });
        }
        let low_band = kept
            .first()
            .map(|(_, s)| s.banded_mean_queue(0, Some(stage.spec.end(k).saturating_sub(1))));
        // weight of the previous level is now fixed
        records[k - 1].d = d_k;

        let st = stationary_for(&next_spec, rho, cfg)?;
        let last = k + 1 == cfg.levels;
        let t_bn = if last {
            None
        } else {
            let mut server = Server::new(nu.clone(), &dist, cfg.engine);
            let (t, _) = detect_t_bn_stepwise(&mut server, &st.state, &st.rectangle, eps, t_out + 1, cfg.max_steps)?;
            Some(t)
        };
        records.push(LevelRecord {
            k: k + 1,
            b: next_spec.start(k + 1),
            c: next_spec.end(k + 1),
            d: 1.0 - d_next.iter().sum::<f64>(),
            t_in: Some(t_in),
            t_out: Some(t_out),
            t_bn,
            lambda: st.rate,
            rho,
            rectangle: st.rectangle,
            low_band_mean: low_band,
            search_log: log,
        });
        if let Some(t_bn) = t_bn {
            stage = Stage {
                spec: next_spec,
                d: d_next,
                st,
                t_bn,
            };
        } else {
            stage.spec = next_spec;
            stage.d = d_next;
        }
    }

    let spec = stage.spec.clone();
    let mut w: Vec<f64> = records.iter().map(|r| r.d).collect();
    let head: f64 = w[..w.len() - 1].iter().sum();
    *w.last_mut().expect("at least one level") = 1.0 - head;
    let weights = DeltaWeights::new(w)?;
    certify(cfg, spec, weights, records)
}

fn level_events(records: &[LevelRecord]) -> Vec<Event> {
    let mut ev = Vec::new();
    for r in records {
        if let Some(t) = r.t_in {
            ev.push(Event { kind: EventKind::In, level: r.k, t });
        }
        if let Some(t) = r.t_out {
            ev.push(Event { kind: EventKind::Out, level: r.k, t });
        }
        if let Some(t) = r.t_bn {
            ev.push(Event { kind: EventKind::Bn, level: r.k, t });
        }
    }
    ev.sort_by_key(|e| (e.t, e.level));
    ev
}

fn certificate_horizon(records: &[LevelRecord]) -> usize {
    records
        .iter()
        .flat_map(|r| [r.t_in, r.t_out, r.t_bn])
        .flatten()
        .max()
        .unwrap_or(1)
        .max(1)
}

fn certify(
    cfg: &TransienceConfig,
    spec: TypeBSpec,
    weights: DeltaWeights,
    records: Vec<LevelRecord>,
) -> Result<TransienceCertificate> {
    let init = cfg.init();
    let horizon = certificate_horizon(&records);
    let (dist, nu) = server_parts(&spec, weights.as_slice(), &init)?;
    let bn_times: Vec<usize> = records.iter().filter_map(|r| r.t_bn).collect();
    let (trace, kept) = run_keeping(&dist, &nu, horizon, &bn_times, &cfg.engine)?;

    let mut low_windows = Vec::new();
    let mut high_points = Vec::new();
    for r in &records {
        if let (Some(a), Some(b)) = (r.t_in, r.t_out) {
            let max_lambda = trace.lambda[a - 1..b].iter().copied().fold(0.0, f64::max);
            low_windows.push(Window {
                level: r.k,
                t_in: a,
                t_out: b,
                max_lambda,
            });
        }
        if let Some(t) = r.t_bn {
            high_points.push(HighPoint {
                level: r.k,
                t,
                lambda: trace.at(t),
                stationary_rate: r.lambda,
            });
        }
    }

    // agreement with each cutoff server up to its T_bn
    let mut continuity = Vec::new();
    for r in records.iter().filter(|r| r.t_bn.is_some() && r.k < records.len()) {
        let t_bn = r.t_bn.expect("filtered");
        let cut = spec.cutoff(r.k)?;
        let folded = crate::initial::truncate_weights(&weights, r.k)?;
        let (cdist, cnu) = server_parts(&cut, folded.as_slice(), &init)?;
        let (ctrace, _) = run_keeping(&cdist, &cnu, t_bn, &[], &cfg.engine)?;
        let gap = ctrace
            .lambda
            .iter()
            .zip(&trace.lambda)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let st = stationary_for(&cut, nu.mean_queue(), cfg)?;
        let full_state = &kept.iter().find(|(t, _)| *t == t_bn).expect("kept T_bn state").1;
        let ratio = closeness_ratio(full_state, &st.state, &r.rectangle);
        continuity.push(Continuity {
            level: r.k,
            t_bn,
            max_rate_gap: gap,
            state_ratio: ratio,
            ok: gap <= 2.0 * cfg.eps && ratio.is_some_and(|x| x < 2.0 * cfg.eps),
        });
    }

    Ok(TransienceCertificate {
        eps: cfg.eps,
        events: level_events(&records),
        trace_hash: trace_hash(&trace.lambda),
        horizon,
        spec,
        weights,
        init,
        levels: records,
        low_windows,
        high_points,
        continuity,
        config: cfg.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub ok: bool,
    pub hash_matches: bool,
    pub failures: Vec<String>,
}

/// Re-runs the assembled server for `horizon` steps (at least the recorded
/// horizon) and re-checks every window, high point, and the trace hash of
/// the recorded prefix.
pub fn verify_certificate(cert: &TransienceCertificate, horizon: Option<usize>) -> Result<Verification> {
    let steps = horizon.unwrap_or(cert.horizon).max(cert.horizon);
    let (dist, nu) = server_parts(&cert.spec, cert.weights.as_slice(), &cert.init)?;
    let (trace, _) = run_keeping(&dist, &nu, steps, &[], &cert.config.engine)?;
    let mut failures = Vec::new();
    let eps = cert.eps;
    for w in &cert.low_windows {
        if w.t_in == 0 || w.t_in > w.t_out || w.t_out > steps {
            failures.push(format!("level {}: malformed window [{}, {}]", w.level, w.t_in, w.t_out));
            continue;
        }
        let m = trace.lambda[w.t_in - 1..w.t_out].iter().copied().fold(0.0, f64::max);
        if !(m <= eps) {
            failures.push(format!("level {}: max rate {m} on [{}, {}] exceeds {eps}", w.level, w.t_in, w.t_out));
        }
    }
    for h in &cert.high_points {
        if h.t == 0 || h.t > steps {
            failures.push(format!("level {}: high point {} outside the run", h.level, h.t));
            continue;
        }
        let l = trace.at(h.t);
        if !(l >= h.stationary_rate - eps) {
            failures.push(format!("level {}: rate {l} at {} below {} - {eps}", h.level, h.t, h.stationary_rate));
        }
    }
    let mut sorted: Vec<&Window> = cert.low_windows.iter().collect();
    sorted.sort_by_key(|w| w.t_in);
    for pair in sorted.windows(2) {
        if pair[0].t_out >= pair[1].t_in {
            failures.push(format!("windows of levels {} and {} overlap", pair[0].level, pair[1].level));
        }
    }
    let hash_matches = trace_hash(&trace.lambda[..cert.horizon]) == cert.trace_hash;
    if !hash_matches {
        failures.push("trace hash differs".into());
    }
    Ok(Verification {
        ok: failures.is_empty(),
        hash_matches,
        failures,
    })
}

/// Checks the event ordering `T_{k-1}^bn < T_k^in <= T_k^out < T_k^bn`.
pub fn ordering_holds(levels: &[LevelRecord]) -> bool {
    levels.windows(2).all(|p| {
        let (prev, cur) = (&p[0], &p[1]);
        match (prev.t_bn, cur.t_in, cur.t_out) {
            (Some(bn), Some(a), Some(b)) => bn < a && a <= b && cur.t_bn.map_or(true, |c| b < c),
            _ => false,
        }
    })
}

/// Rectangle membership helper for reports.
pub fn in_window(cert: &TransienceCertificate, t: usize) -> Option<usize> {
    cert.low_windows
        .iter()
        .find(|w| w.t_in <= t && t <= w.t_out)
        .map(|w| w.level)
}
