//! Finite closed network: `M` FIFO servers, `N` customers, uniform routing on
//! the complete graph. Each server owns a ChaCha8 substream (stream id =
//! server index + 1, stream 0 is reserved for initialization), so a
//! trajectory depends only on the seed, not on the thread count.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::measure::{poisson_pmf, Rectangle, StateMeasure};
use crate::service::ServiceDistribution;

/// Below this many servers the per-server work is done sequentially.
const PAR_THRESHOLD: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerState {
    pub n: u64,
    pub tau: u64,
}

impl ServerState {
    pub const IDLE: ServerState = ServerState { n: 0, tau: 0 };

    pub fn is_idle(&self) -> bool {
        self.n == 0
    }
}

/// One server's slot: stage A and B given the completion coin, then the
/// arrivals of stage C. Returns whether a customer departed.
pub fn server_transition(s: ServerState, completes: impl FnOnce(u64) -> bool) -> (ServerState, bool) {
    if s.n == 0 {
        return (s, false);
    }
    let tau = s.tau + 1;
    if completes(tau) {
        let n = s.n - 1;
        (ServerState { n, tau: 0 }, true)
    } else {
        (ServerState { n: s.n, tau }, false)
    }
}

/// Stage C for one server receiving `k` customers.
pub fn receive(s: ServerState, k: u64) -> ServerState {
    if k == 0 {
        return s;
    }
    ServerState {
        n: s.n + k,
        tau: if s.n == 0 { 0 } else { s.tau },
    }
}

#[derive(Clone, Debug)]
pub struct NetworkState {
    servers: Vec<ServerState>,
    rngs: Vec<ChaCha8Rng>,
    customers: u64,
    t: usize,
    seed: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitMode {
    /// Independent draws; `N` is whatever comes out.
    #[default]
    Iid,
    /// Independent draws conditioned on `N = round(rho * M)` by rejection.
    ExactN,
}

const MAX_REJECTIONS: usize = 1_000_000;

fn server_rngs(seed: u64, m: usize) -> Vec<ChaCha8Rng> {
    (0..m)
        .map(|i| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(i as u64 + 1);
            r
        })
        .collect()
}

/// Servers drawn i.i.d. from `nu` (normalized over its stored atoms).
pub fn init_network(nu: &StateMeasure, m: usize, seed: u64) -> Result<NetworkState> {
    init_network_with(nu, m, seed, InitMode::Iid)
}

pub fn init_network_with(nu: &StateMeasure, m: usize, seed: u64, mode: InitMode) -> Result<NetworkState> {
    if m == 0 {
        return Err(Error::OutOfRange {
            what: "M",
            value: "0".into(),
        });
    }
    let mut atoms: Vec<ServerState> = Vec::new();
    let mut weights: Vec<f64> = Vec::new();
    if nu.idle_mass() > 0.0 {
        atoms.push(ServerState::IDLE);
        weights.push(nu.idle_mass());
    }
    for (n, tau, w) in nu.atoms() {
        if w > 0.0 {
            atoms.push(ServerState { n, tau });
            weights.push(w);
        }
    }
    if atoms.is_empty() {
        return Err(Error::ZeroMass { what: "nu".into() });
    }
    let index = WeightedIndex::new(&weights).map_err(|e| Error::Weights(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    let draw = |rng: &mut ChaCha8Rng| -> Vec<ServerState> {
        (0..m).map(|_| atoms[index.sample(rng)]).collect()
    };
    let servers = match mode {
        InitMode::Iid => draw(&mut rng),
        InitMode::ExactN => {
            let target = (nu.mean_queue() / nu.stored_mass() * m as f64).round() as u64;
            let mut tries = 0;
            loop {
                let s = draw(&mut rng);
                if s.iter().map(|x| x.n).sum::<u64>() == target {
                    break s;
                }
                tries += 1;
                if tries >= MAX_REJECTIONS {
                    return Err(Error::NotConverged {
                        iterations: tries,
                        residual: f64::NAN,
                    });
                }
            }
        }
    };
    Ok(NetworkState::from_servers(servers, seed))
}

impl NetworkState {
    pub fn from_servers(servers: Vec<ServerState>, seed: u64) -> Self {
        let servers: Vec<ServerState> = servers
            .into_iter()
            .map(|s| if s.n == 0 { ServerState::IDLE } else { s })
            .collect();
        let customers = servers.iter().map(|s| s.n).sum();
        let rngs = server_rngs(seed, servers.len());
        NetworkState {
            servers,
            rngs,
            customers,
            t: 0,
            seed,
        }
    }

    pub fn servers(&self) -> &[ServerState] {
        &self.servers
    }

    pub fn m(&self) -> usize {
        self.servers.len()
    }

    pub fn customers(&self) -> u64 {
        self.customers
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Relabels servers: server `i` takes the state of server `perm[i]`.
    /// Random streams stay attached to positions.
    pub fn permute(&mut self, perm: &[usize]) -> Result<()> {
        let m = self.m();
        let mut seen = vec![false; m];
        if perm.len() != m || perm.iter().any(|&p| p >= m || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Parse("not a permutation".into()));
        }
        self.servers = perm.iter().map(|&p| self.servers[p]).collect();
        Ok(())
    }

    /// Expected departures in the next step given the current ages.
    pub fn expected_departures(&self, dist: &ServiceDistribution) -> f64 {
        self.servers
            .iter()
            .filter(|s| !s.is_idle())
            .map(|s| dist.hazard_unchecked(s.tau + 1))
            .sum()
    }
}

/// Per-step output of [`network_step`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepFlow {
    pub sigma: u64,
    /// Arrivals to each designated server, in the order requested.
    pub arrivals: Vec<u64>,
}

/// One slot. Completion coins and routing draws come from the departing
/// server's own stream; the tally is reduced in server order.
pub fn network_step(state: &mut NetworkState, dist: &ServiceDistribution, designated: &[usize]) -> StepFlow {
    let m = state.servers.len();
    let work = |(s, rng): (&mut ServerState, &mut ChaCha8Rng)| -> Option<usize> {
        let (next, left) = server_transition(*s, |tau| {
            let p = dist.hazard_unchecked(tau);
            p >= 1.0 || (p > 0.0 && rng.gen::<f64>() < p)
        });
        *s = next;
        left.then(|| rng.gen_range(0..m))
    };
    let dests: Vec<Option<usize>> = if m >= PAR_THRESHOLD {
        state
            .servers
            .par_iter_mut()
            .zip(state.rngs.par_iter_mut())
            .map(work)
            .collect()
    } else {
        state.servers.iter_mut().zip(state.rngs.iter_mut()).map(work).collect()
    };
    let mut inbox: BTreeMap<usize, u64> = BTreeMap::new();
    let mut sigma = 0;
    for d in dests.into_iter().flatten() {
        sigma += 1;
        *inbox.entry(d).or_default() += 1;
    }
    for (&j, &k) in &inbox {
        state.servers[j] = receive(state.servers[j], k);
    }
    state.t += 1;
    debug_assert_eq!(state.servers.iter().map(|s| s.n).sum::<u64>(), state.customers);
    StepFlow {
        sigma,
        arrivals: designated
            .iter()
            .map(|j| inbox.get(j).copied().unwrap_or(0))
            .collect(),
    }
}

/// Accumulated flow over a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FlowStats {
    pub designated: Vec<usize>,
    pub sigma: Vec<u64>,
    /// `per_server[i][t]`: arrivals to `designated[i]` at step `t`.
    pub per_server: Vec<Vec<u64>>,
}

impl FlowStats {
    pub fn new(designated: &[usize]) -> Self {
        FlowStats {
            designated: designated.to_vec(),
            sigma: Vec::new(),
            per_server: vec![Vec::new(); designated.len()],
        }
    }

    pub fn push(&mut self, f: &StepFlow) {
        self.sigma.push(f.sigma);
        for (v, &a) in self.per_server.iter_mut().zip(&f.arrivals) {
            v.push(a);
        }
    }

    pub fn len(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
    }

    /// Joint counts of the first two designated servers.
    pub fn pair_counts(&self) -> BTreeMap<(u64, u64), u64> {
        let mut out = BTreeMap::new();
        if self.per_server.len() >= 2 {
            for (&a, &b) in self.per_server[0].iter().zip(&self.per_server[1]) {
                *out.entry((a, b)).or_default() += 1;
            }
        }
        out
    }

    /// Steps `from..` only.
    pub fn window(&self, from: usize) -> FlowStats {
        let from = from.min(self.len());
        FlowStats {
            designated: self.designated.clone(),
            sigma: self.sigma[from..].to_vec(),
            per_server: self.per_server.iter().map(|v| v[from..].to_vec()).collect(),
        }
    }
}

/// Runs `steps` slots, recording flow.
pub fn simulate(state: &mut NetworkState, dist: &ServiceDistribution, steps: usize, designated: &[usize]) -> FlowStats {
    let mut stats = FlowStats::new(designated);
    for _ in 0..steps {
        stats.push(&network_step(state, dist, designated));
    }
    stats
}

pub fn empirical_projection(state: &NetworkState) -> StateMeasure {
    let mut counts: BTreeMap<(u64, u64), u64> = BTreeMap::new();
    for s in &state.servers {
        *counts.entry((s.n, s.tau)).or_default() += 1;
    }
    let m = state.m() as f64;
    let mut mu = StateMeasure::empty();
    for ((n, tau), c) in counts {
        // counts are positive and n, tau valid by construction
        mu.add(n, tau, c as f64 / m).expect("valid atom");
    }
    mu
}

fn cell_of(s: &ServerState, rect: &Rectangle) -> Option<(u64, u64)> {
    rect.contains(s.n, s.tau).then_some((s.n, s.tau))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChaosDistance {
    /// Renormalized marginal TV against the reference on the rectangle.
    pub marginal: f64,
    /// Disjoint pairs `(2i, 2i+1)` against the product of their marginals.
    pub pair: f64,
    pub reference_mass: f64,
}

pub fn chaos_distance(state: &NetworkState, reference: &StateMeasure, rect: &Rectangle) -> Result<ChaosDistance> {
    let reference_mass: f64 = rect.cells(reference).map(|c| c.2).sum();
    if reference_mass < 0.5 {
        return Err(Error::Degenerate(format!(
            "reference mass {reference_mass:.4} on rectangle below 0.5"
        )));
    }
    let mut emp: BTreeMap<(u64, u64), f64> = BTreeMap::new();
    let mut inside = 0usize;
    for c in state.servers.iter().filter_map(|s| cell_of(s, rect)) {
        *emp.entry(c).or_default() += 1.0;
        inside += 1;
    }
    let mut refm: BTreeMap<(u64, u64), f64> = BTreeMap::new();
    for (n, tau, w) in rect.cells(reference) {
        if w > 0.0 {
            *refm.entry((n, tau)).or_default() += w / reference_mass;
        }
    }
    let marginal = if inside == 0 {
        1.0
    } else {
        for v in emp.values_mut() {
            *v /= inside as f64;
        }
        tv(&emp, &refm)
    };

    let mut joint: BTreeMap<((u64, u64), (u64, u64)), f64> = BTreeMap::new();
    let mut pairs = 0usize;
    for ch in state.servers.chunks_exact(2) {
        if let (Some(a), Some(b)) = (cell_of(&ch[0], rect), cell_of(&ch[1], rect)) {
            *joint.entry((a, b)).or_default() += 1.0;
            pairs += 1;
        }
    }
    let pair = if pairs == 0 {
        1.0
    } else {
        let mut left: BTreeMap<(u64, u64), f64> = BTreeMap::new();
        let mut right: BTreeMap<(u64, u64), f64> = BTreeMap::new();
        for (&(a, b), &c) in &joint {
            *left.entry(a).or_default() += c / pairs as f64;
            *right.entry(b).or_default() += c / pairs as f64;
        }
        let mut s = 0.0;
        let mut covered = 0.0;
        for (a, pa) in &left {
            for (b, pb) in &right {
                let q = pa * pb;
                let p = joint.get(&(*a, *b)).map_or(0.0, |c| c / pairs as f64);
                s += (p - q).abs();
                covered += p;
            }
        }
        debug_assert!((covered - 1.0).abs() < 1e-9);
        0.5 * s
    };
    Ok(ChaosDistance {
        marginal,
        pair,
        reference_mass,
    })
}

/// Marginal part of [`chaos_distance`] for a stored empirical measure.
pub fn restricted_tv(mu: &StateMeasure, reference: &StateMeasure, rect: &Rectangle) -> Result<f64> {
    let reference_mass: f64 = rect.cells(reference).map(|c| c.2).sum();
    if reference_mass < 0.5 {
        return Err(Error::Degenerate(format!(
            "reference mass {reference_mass:.4} on rectangle below 0.5"
        )));
    }
    let restrict = |m: &StateMeasure| -> BTreeMap<(u64, u64), f64> {
        let mut out = BTreeMap::new();
        for (n, tau, w) in rect.cells(m) {
            if w > 0.0 {
                *out.entry((n, tau)).or_insert(0.0) += w;
            }
        }
        let total: f64 = out.values().sum();
        for v in out.values_mut() {
            *v /= total;
        }
        out
    };
    let p = restrict(mu);
    if p.is_empty() {
        return Ok(1.0);
    }
    Ok(tv(&p, &restrict(reference)))
}

fn tv<K: Ord + Copy>(p: &BTreeMap<K, f64>, q: &BTreeMap<K, f64>) -> f64 {
    let mut s = 0.0;
    for (k, a) in p {
        s += (a - q.get(k).copied().unwrap_or(0.0)).abs();
    }
    for (k, b) in q {
        if !p.contains_key(k) {
            s += b;
        }
    }
    0.5 * s
}

pub const MIN_WINDOW: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChiSquare {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    /// `(first k, last k or None for the tail, observed, expected)`
    pub bins: Vec<(u64, Option<u64>, u64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InflowReport {
    pub window: usize,
    pub mean_sigma: f64,
    pub mean_arrivals: f64,
    pub poisson: ChiSquare,
    pub cov: Option<f64>,
    pub cov_se: Option<f64>,
    /// `(k, count of n2 = k, TV of n1 | n2 = k vs n1)`
    pub conditional: Vec<(u64, usize, f64)>,
}

impl InflowReport {
    pub fn poisson_ok(&self, alpha: f64) -> bool {
        self.poisson.p_value > alpha
    }

    pub fn independence_ok(&self, z: f64) -> bool {
        match (self.cov, self.cov_se) {
            (Some(c), Some(se)) => c.abs() <= z * se,
            _ => false,
        }
    }
}

/// Chi-square fit of counts to Poisson with the sample mean. Bins are grown
/// from zero until each expects at least 5; the tail joins the last bin.
pub fn poisson_chi_square(counts: &[u64]) -> Result<ChiSquare> {
    let n = counts.len();
    if n == 0 {
        return Err(Error::Degenerate("empty sample".into()));
    }
    let mean = counts.iter().sum::<u64>() as f64 / n as f64;
    if mean <= 0.0 {
        return Err(Error::Degenerate("no arrivals in window".into()));
    }
    let max = *counts.iter().max().unwrap();
    let mut hist = vec![0u64; max as usize + 1];
    for &c in counts {
        hist[c as usize] += 1;
    }
    let nf = n as f64;
    let mut bins: Vec<(u64, Option<u64>, u64, f64)> = Vec::new();
    let (mut lo, mut obs, mut exp, mut cdf) = (0u64, 0u64, 0.0, 0.0);
    let mut k = 0u64;
    loop {
        let p = poisson_pmf(mean, k)?;
        cdf += p;
        obs += hist.get(k as usize).copied().unwrap_or(0);
        exp += nf * p;
        let tail = nf * (1.0 - cdf).max(0.0);
        if exp >= 5.0 && tail >= 5.0 {
            bins.push((lo, Some(k), obs, exp));
            lo = k + 1;
            obs = 0;
            exp = 0.0;
        } else if tail < 5.0 {
            let rest: u64 = hist.iter().skip(k as usize + 1).sum();
            let (o, e) = (obs + rest, exp + tail);
            if e >= 5.0 || bins.is_empty() {
                bins.push((lo, None, o, e));
            } else {
                let last = bins.last_mut().unwrap();
                last.1 = None;
                last.2 += o;
                last.3 += e;
            }
            break;
        }
        k += 1;
    }
    if bins.len() < 3 {
        return Err(Error::Degenerate(format!(
            "only {} chi-square bins at mean {mean:.4}",
            bins.len()
        )));
    }
    let statistic: f64 = bins.iter().map(|b| (b.2 as f64 - b.3).powi(2) / b.3).sum();
    let df = bins.len() - 2;
    let dist = ChiSquared::new(df as f64).map_err(|e| Error::Degenerate(e.to_string()))?;
    Ok(ChiSquare {
        statistic,
        df,
        p_value: 1.0 - dist.cdf(statistic),
        bins,
    })
}

/// Covariance and its standard error `sqrt(mean(dx^2 dy^2) / n)`.
pub fn covariance_with_se(x: &[u64], y: &[u64]) -> (f64, f64) {
    let n = x.len().min(y.len()) as f64;
    let mx = x.iter().sum::<u64>() as f64 / n;
    let my = y.iter().sum::<u64>() as f64 / n;
    let (mut c, mut c2) = (0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let p = (a as f64 - mx) * (b as f64 - my);
        c += p;
        c2 += p * p;
    }
    let cov = c / n;
    let se = ((c2 / n - cov * cov).max(0.0) / n).sqrt();
    (cov, se)
}

const COND_MIN_COUNT: usize = 30;

pub fn inflow_tests(stats: &FlowStats) -> Result<InflowReport> {
    let w = stats.len();
    if w < MIN_WINDOW {
        return Err(Error::OutOfRange {
            what: "inflow window",
            value: format!("{w} < {MIN_WINDOW}"),
        });
    }
    if stats.sigma.iter().all(|&s| s == 0) {
        return Err(Error::Degenerate("no departures in window".into()));
    }
    let first = stats
        .per_server
        .first()
        .ok_or_else(|| Error::Config("no designated server".into()))?;
    let poisson = poisson_chi_square(first)?;
    let mean_arrivals = first.iter().sum::<u64>() as f64 / w as f64;
    let (cov, cov_se, conditional) = match stats.per_server.get(1) {
        Some(second) => {
            let (c, se) = covariance_with_se(first, second);
            let mut uncond: BTreeMap<u64, f64> = BTreeMap::new();
            for &a in first {
                *uncond.entry(a).or_default() += 1.0 / w as f64;
            }
            let mut cond = Vec::new();
            for k in 0..=3u64 {
                let sel: Vec<u64> = first
                    .iter()
                    .zip(second)
                    .filter(|(_, &b)| b == k)
                    .map(|(&a, _)| a)
                    .collect();
                if sel.len() < COND_MIN_COUNT {
                    continue;
                }
                let mut law: BTreeMap<u64, f64> = BTreeMap::new();
                for &a in &sel {
                    *law.entry(a).or_default() += 1.0 / sel.len() as f64;
                }
                cond.push((k, sel.len(), tv(&law, &uncond)));
            }
            (Some(c), Some(se), cond)
        }
        None => (None, None, Vec::new()),
    };
    Ok(InflowReport {
        window: w,
        mean_sigma: stats.sigma.iter().sum::<u64>() as f64 / w as f64,
        mean_arrivals,
        poisson,
        cov,
        cov_se,
        conditional,
    })
}

/// Exact TV between Binomial(n, p) and Poisson(np).
pub fn binomial_poisson_tv(n: u64, p: f64) -> Result<f64> {
    use statrs::distribution::{Binomial, Discrete};
    let b = Binomial::new(p, n).map_err(|e| Error::Degenerate(e.to_string()))?;
    let lambda = n as f64 * p;
    let mut s = 0.0;
    let mut covered = 0.0;
    for k in 0..=n {
        let q = poisson_pmf(lambda, k)?;
        covered += q;
        s += (b.pmf(k) - q).abs();
    }
    Ok(0.5 * (s + (1.0 - covered).max(0.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{stage_exit, stage_vertical};
    use crate::measure::core_rectangle;

    fn dist(starts: &[u64]) -> ServiceDistribution {
        ServiceDistribution::from_support(starts).unwrap()
    }

    #[test]
    fn deterministic_init() {
        let s = init_network(&StateMeasure::point(1, 0), 5, 1).unwrap();
        assert_eq!(s.customers(), 5);
        assert!(s.servers().iter().all(|x| *x == ServerState { n: 1, tau: 0 }));
        let e = init_network(&StateMeasure::idle_point(), 4, 1).unwrap();
        assert_eq!(e.customers(), 0);
    }

    #[test]
    fn binomial_concentration() {
        let nu = StateMeasure::from_atoms([(0, 0, 0.5), (2, 0, 0.5)]).unwrap();
        let m = 10_000;
        let s = init_network(&nu, m, 7).unwrap();
        // n in {0, 2} with prob 1/2: var = 1
        let ratio = s.customers() as f64 / m as f64;
        assert!((ratio - 1.0).abs() <= 3.0 * (1.0 / m as f64).sqrt(), "{ratio}");
    }

    #[test]
    fn exact_n() {
        let nu = StateMeasure::from_atoms([(0, 0, 0.5), (2, 0, 0.5)]).unwrap();
        let s = init_network_with(&nu, 1000, 3, InitMode::ExactN).unwrap();
        assert_eq!(s.customers(), 1000);
    }

    #[test]
    fn forced_cycle() {
        let d = dist(&[1]);
        let mut s = init_network(&StateMeasure::point(1, 0), 1, 0).unwrap();
        for _ in 0..50 {
            let f = network_step(&mut s, &d, &[0]);
            assert_eq!(f.sigma, 1);
            assert_eq!(f.arrivals, vec![1]);
            assert_eq!(s.servers()[0], ServerState { n: 1, tau: 0 });
        }
    }

    #[test]
    fn empty_network_frozen() {
        let d = dist(&[1, 3]);
        let mut s = init_network(&StateMeasure::idle_point(), 2, 0).unwrap();
        let f = simulate(&mut s, &d, 20, &[0, 1]);
        assert!(f.sigma.iter().all(|&x| x == 0));
        assert!(s.servers().iter().all(|x| x.is_idle()));
        assert!(matches!(inflow_tests(&simulate(&mut s, &d, 1000, &[0, 1])), Err(Error::Degenerate(_))));
    }

    #[test]
    fn conservation_and_determinism() {
        let d = dist(&[1, 3, 7]);
        let nu = StateMeasure::from_atoms([(0, 0, 0.3), (1, 0, 0.3), (3, 2, 0.4)]).unwrap();
        let mut a = init_network(&nu, 300, 11).unwrap();
        let mut b = init_network(&nu, 300, 11).unwrap();
        let n0 = a.customers();
        for _ in 0..200 {
            let fa = network_step(&mut a, &d, &[0, 1]);
            let fb = network_step(&mut b, &d, &[0, 1]);
            assert_eq!(fa, fb);
            assert_eq!(a.servers().iter().map(|s| s.n).sum::<u64>(), n0);
            assert!(a.servers().iter().all(|s| s.n > 0 || s.tau == 0));
        }
        assert_eq!(a.servers(), b.servers());
    }

    #[test]
    fn parallel_path_matches_sequential() {
        // same per-server streams, so a large network is reproducible too
        let d = dist(&[1, 3]);
        let nu = StateMeasure::point(1, 0);
        let mut a = init_network(&nu, 5000, 4).unwrap();
        let mut b = a.clone();
        for _ in 0..10 {
            network_step(&mut a, &d, &[]);
        }
        for _ in 0..10 {
            let m = b.m();
            let dests: Vec<Option<usize>> = b
                .servers
                .iter_mut()
                .zip(b.rngs.iter_mut())
                .map(|(s, rng)| {
                    let (next, left) = server_transition(*s, |tau| {
                        let p = d.hazard_unchecked(tau);
                        p >= 1.0 || (p > 0.0 && rng.gen::<f64>() < p)
                    });
                    *s = next;
                    left.then(|| rng.gen_range(0..m))
                })
                .collect();
            for j in dests.into_iter().flatten() {
                b.servers[j] = receive(b.servers[j], 1);
            }
        }
        assert_eq!(a.servers(), b.servers());
    }

    #[test]
    fn projection() {
        let s = init_network(&StateMeasure::point(1, 0), 7, 0).unwrap();
        let mu = empirical_projection(&s);
        assert_eq!(mu.get(1, 0), 1.0);
        let mut servers = vec![ServerState::IDLE; 4];
        servers.extend([ServerState { n: 2, tau: 1 }; 4]);
        let s = NetworkState::from_servers(servers, 0);
        let mu = empirical_projection(&s);
        assert_eq!(mu.idle_mass(), 0.5);
        assert_eq!(mu.get(2, 1), 0.5);
        assert_eq!(mu.mean_queue(), s.customers() as f64 / s.m() as f64);
    }

    #[test]
    fn stage_consistency() {
        // per-server law given k arrivals vs the measure-level stages on a point
        let d = dist(&[1, 3, 4]);
        for n in 0..4u64 {
            for tau in 0..4u64 {
                if n == 0 && tau > 0 {
                    continue;
                }
                for k in 0..3u64 {
                    let start = if n == 0 {
                        StateMeasure::idle_point()
                    } else {
                        StateMeasure::point(n, tau)
                    };
                    let (psi, _) = stage_exit(&stage_vertical(&start), &d).unwrap();
                    let mut want: BTreeMap<(u64, u64), f64> = BTreeMap::new();
                    if psi.idle_mass() > 0.0 {
                        let s = receive(ServerState::IDLE, k);
                        *want.entry((s.n, s.tau)).or_default() += psi.idle_mass();
                    }
                    for (pn, pt, w) in psi.atoms() {
                        let s = receive(ServerState { n: pn, tau: pt }, k);
                        *want.entry((s.n, s.tau)).or_default() += w;
                    }
                    let s = ServerState { n, tau };
                    let p = d.hazard_unchecked(tau + 1);
                    let mut got: BTreeMap<(u64, u64), f64> = BTreeMap::new();
                    for (c, w) in [(true, p), (false, 1.0 - p)] {
                        if w > 0.0 {
                            let (x, _) = server_transition(s, |_| c);
                            let x = receive(x, k);
                            *got.entry((x.n, x.tau)).or_default() += w;
                        }
                    }
                    assert!(tv(&got, &want) < 1e-15, "n={n} tau={tau} k={k}");
                }
            }
        }
    }

    #[test]
    fn plug_in_departures() {
        let d = dist(&[1, 3]);
        let mut s = init_network(&StateMeasure::point(1, 0), 2000, 5).unwrap();
        simulate(&mut s, &d, 100, &[]);
        let (mut obs, mut exp) = (0.0, 0.0);
        let steps = 500;
        for _ in 0..steps {
            exp += s.expected_departures(&d);
            obs += network_step(&mut s, &d, &[]).sigma as f64;
        }
        // sum of Bernoulli variances is at most exp/steps... bound by the mean
        let sd = exp.sqrt();
        assert!((obs - exp).abs() <= 3.0 * sd, "{obs} vs {exp}");
    }

    #[test]
    fn exchangeable_under_relabeling() {
        let d = dist(&[1, 3]);
        let nu = StateMeasure::from_atoms([(0, 0, 0.4), (1, 0, 0.3), (2, 1, 0.3)]).unwrap();
        let (mut sa, mut sb) = (0.0, 0.0);
        let seeds = 10;
        for seed in 0..seeds {
            let mut a = init_network(&nu, 500, seed).unwrap();
            let mut b = a.clone();
            let perm: Vec<usize> = (0..500).rev().collect();
            b.permute(&perm).unwrap();
            sa += simulate(&mut a, &d, 200, &[]).sigma.iter().sum::<u64>() as f64;
            sb += simulate(&mut b, &d, 200, &[]).sigma.iter().sum::<u64>() as f64;
        }
        let rel = (sa - sb).abs() / sa;
        assert!(rel < 0.02, "{rel}");
    }

    #[test]
    fn chaos_self_reference_is_zero() {
        let nu = StateMeasure::from_atoms([(0, 0, 0.25), (1, 0, 0.25), (2, 1, 0.5)]).unwrap();
        let s = NetworkState::from_servers(
            vec![
                ServerState::IDLE,
                ServerState { n: 1, tau: 0 },
                ServerState { n: 2, tau: 1 },
                ServerState { n: 2, tau: 1 },
            ],
            0,
        );
        let rect = Rectangle::new(5, 0, 3).unwrap();
        let c = chaos_distance(&s, &empirical_projection(&s), &rect).unwrap();
        assert!(c.marginal < 1e-15);
        assert!(chaos_distance(&s, &nu, &rect).unwrap().marginal < 1e-15);
        assert!(restricted_tv(&empirical_projection(&s), &nu, &rect).unwrap() < 1e-15);
        let one = NetworkState::from_servers(vec![ServerState { n: 1, tau: 0 }], 0);
        let smooth = StateMeasure::from_atoms((1..=10).map(|n| (n, 0, 0.1))).unwrap();
        assert!(chaos_distance(&one, &smooth, &Rectangle::new(20, 0, 1).unwrap()).unwrap().marginal >= 0.9);
        let far = Rectangle::new(1, 5, 6).unwrap();
        assert!(chaos_distance(&s, &nu, &far).is_err());
    }

    #[test]
    fn chaos_shrinks_with_m() {
        let nu = StateMeasure::from_atoms([(0, 0, 0.3), (1, 0, 0.3), (2, 1, 0.2), (3, 2, 0.2)]).unwrap();
        let rect = core_rectangle(&nu, 0.01).unwrap();
        let avg = |m: usize| -> f64 {
            (0..20)
                .map(|seed| chaos_distance(&init_network(&nu, m, seed).unwrap(), &nu, &rect).unwrap().marginal)
                .sum::<f64>()
                / 20.0
        };
        let (a, b) = (avg(100), avg(10_000));
        assert!(b < a / 5.0, "{a} {b}");
    }

    #[test]
    fn chi_square_small_m_rejects() {
        // M = 2: inflow to a server is binomial(., 1/2), far from Poisson
        let d = dist(&[1]);
        let mut s = init_network(&StateMeasure::point(2, 0), 2, 9).unwrap();
        let f = simulate(&mut s, &d, 5000, &[0, 1]);
        let r = inflow_tests(&f).unwrap();
        assert!(r.poisson.p_value < 0.01, "{:?}", r.poisson);
        assert!(binomial_poisson_tv(2, 0.5).unwrap() > 0.05);
        assert!(binomial_poisson_tv(10_000, 1e-4).unwrap() < 1e-4);
    }

    #[test]
    fn chi_square_accepts_poisson() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let knuth = |rng: &mut ChaCha8Rng| {
            let (l, mut k, mut p) = ((-0.7f64).exp(), 0u64, 1.0);
            loop {
                p *= rng.gen::<f64>();
                if p <= l {
                    return k;
                }
                k += 1;
            }
        };
        let xs: Vec<u64> = (0..3000).map(|_| knuth(&mut rng)).collect();
        let c = poisson_chi_square(&xs).unwrap();
        assert!(c.p_value > 0.01, "{c:?}");
        assert_eq!(c.df, c.bins.len() - 2);
        assert!(c.bins.iter().all(|b| b.3 >= 5.0));
        assert_eq!(c.bins.iter().map(|b| b.2).sum::<u64>(), 3000);
    }

    #[test]
    fn short_window_rejected() {
        let f = FlowStats::new(&[0]);
        assert!(inflow_tests(&f).is_err());
    }
}
