//! Sub-probability measures on `{(n, tau): n >= 1, tau >= 0} ∪ {0}`.
//!
//! Storage is sparse in `tau` and dense in `n`: each occupied `tau` row keeps
//! a contiguous run of queue lengths. Rows are keyed by `tau - shift`, which
//! makes the vertical shift of the dynamics O(1).

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

/// Truncation knobs shared by every operation that can drop mass.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Truncation {
    /// Atoms lighter than this are removed and booked into `lost_mass`.
    pub prune: f64,
    /// Poisson kernels are cut once the remaining tail is below this.
    pub poisson_tail: f64,
}

impl Default for Truncation {
    fn default() -> Self {
        Truncation {
            prune: 1e-18,
            poisson_tail: 1e-20,
        }
    }
}

/// Contiguous run of masses at `n = first, first + 1, ...` within one row.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Row {
    first: u64,
    mass: Vec<f64>,
}

impl Row {
    pub fn first(&self) -> u64 {
        self.first
    }

    pub fn masses(&self) -> &[f64] {
        &self.mass
    }

    pub fn get(&self, n: u64) -> f64 {
        if n < self.first {
            return 0.0;
        }
        self.mass
            .get((n - self.first) as usize)
            .copied()
            .unwrap_or(0.0)
    }

    pub fn total(&self) -> f64 {
        self.mass.iter().sum()
    }

    pub fn weighted(&self) -> f64 {
        let mut s = 0.0;
        for (i, &m) in self.mass.iter().enumerate() {
            s += (self.first + i as u64) as f64 * m;
        }
        s
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, f64)> + '_ {
        self.mass
            .iter()
            .enumerate()
            .filter(|(_, &m)| m != 0.0)
            .map(move |(i, &m)| (self.first + i as u64, m))
    }

    fn add(&mut self, n: u64, m: f64) {
        debug_assert!(n >= 1);
        if self.mass.is_empty() {
            self.first = n;
            self.mass.push(m);
            return;
        }
        if n < self.first {
            let pad = (self.first - n) as usize;
            let mut v = vec![0.0; pad + self.mass.len()];
            v[pad..].copy_from_slice(&self.mass);
            self.mass = v;
            self.first = n;
        }
        let i = (n - self.first) as usize;
        if i >= self.mass.len() {
            self.mass.resize(i + 1, 0.0);
        }
        self.mass[i] += m;
    }

    fn scale(&mut self, f: f64) {
        self.mass.iter_mut().for_each(|m| *m *= f);
    }

    fn last(&self) -> u64 {
        self.first + self.mass.len() as u64 - 1
    }

    /// Drops entries below `threshold`; returns `(mass, n-weighted mass)` removed.
    fn prune(&mut self, threshold: f64) -> (f64, f64) {
        let mut lost = 0.0;
        let mut lost_w = 0.0;
        for (i, m) in self.mass.iter_mut().enumerate() {
            if *m != 0.0 && *m < threshold {
                lost += *m;
                lost_w += *m * (self.first + i as u64) as f64;
                *m = 0.0;
            }
        }
        let lead = self.mass.iter().take_while(|&&m| m == 0.0).count();
        if lead == self.mass.len() {
            self.mass.clear();
            return (lost, lost_w);
        }
        let trail = self.mass.iter().rev().take_while(|&&m| m == 0.0).count();
        self.mass.truncate(self.mass.len() - trail);
        if lead > 0 {
            self.mass.drain(..lead);
            self.first += lead as u64;
        }
        (lost, lost_w)
    }

    fn is_empty(&self) -> bool {
        self.mass.is_empty()
    }

    pub(crate) fn from_parts(first: u64, mass: Vec<f64>) -> Self {
        debug_assert!(first >= 1 || mass.is_empty());
        Row { first, mass }
    }

    /// Same row without leading or trailing zeros.
    pub(crate) fn trimmed(mut self) -> Self {
        self.prune(0.0);
        self
    }
}

/// State of a single server: a measure on queue length and elapsed service.
#[derive(Clone, Debug, Default)]
pub struct StateMeasure {
    rows: BTreeMap<i64, Row>,
    shift: i64,
    idle: f64,
    lost: f64,
    lost_weighted: f64,
}

impl PartialEq for StateMeasure {
    fn eq(&self, other: &Self) -> bool {
        self.idle == other.idle
            && self.lost == other.lost
            && self.rows.len() == other.rows.len()
            && self.rows().zip(other.rows()).all(|(a, b)| a == b)
    }
}

/// `sum n mu(n, tau)` over stored atoms, plus the n-weighted mass that was
/// truncated away (an estimate from where the mass was dropped).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanBracket {
    pub stored: f64,
    pub lost_weighted: f64,
}

impl MeanBracket {
    pub fn lower(&self) -> f64 {
        self.stored
    }

    pub fn upper(&self) -> f64 {
        self.stored + self.lost_weighted
    }
}

impl StateMeasure {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Unit mass at the idle point.
    pub fn idle_point() -> Self {
        StateMeasure {
            idle: 1.0,
            ..Self::default()
        }
    }

    /// Unit atom at `(n, tau)`; `(0, 0)` is the idle point.
    pub fn point(n: u64, tau: u64) -> Self {
        let mut m = Self::empty();
        m.add(n, tau, 1.0).expect("valid point");
        m
    }

    /// Builds a measure from `(n, tau, mass)` triples. `(0, 0)` adds to the idle point.
    pub fn from_atoms<I>(atoms: I) -> Result<Self>
    where
        I: IntoIterator<Item = (u64, u64, f64)>,
    {
        let mut m = Self::empty();
        for (n, tau, mass) in atoms {
            m.add(n, tau, mass)?;
        }
        Ok(m)
    }

    pub fn add(&mut self, n: u64, tau: u64, mass: f64) -> Result<()> {
        if !(mass >= 0.0) || !mass.is_finite() {
            return Err(Error::OutOfRange {
                what: "atom mass",
                value: mass.to_string(),
            });
        }
        if n == 0 {
            if tau != 0 {
                return Err(Error::OutOfRange {
                    what: "idle atom tau",
                    value: tau.to_string(),
                });
            }
            self.idle += mass;
            return Ok(());
        }
        if mass == 0.0 {
            return Ok(());
        }
        self.row_mut(tau).add(n, mass);
        Ok(())
    }

    fn key(&self, tau: u64) -> i64 {
        tau as i64 - self.shift
    }

    pub(crate) fn row_mut(&mut self, tau: u64) -> &mut Row {
        let k = self.key(tau);
        self.rows.entry(k).or_default()
    }

    pub fn row(&self, tau: u64) -> Option<&Row> {
        self.rows.get(&self.key(tau))
    }

    /// Occupied rows in increasing `tau`.
    pub fn rows(&self) -> impl Iterator<Item = (u64, &Row)> + '_ {
        let s = self.shift;
        self.rows
            .iter()
            .filter(|(_, r)| !r.is_empty())
            .map(move |(&k, r)| ((k + s) as u64, r))
    }

    pub fn row_count(&self) -> usize {
        self.rows.len()
    }

    /// Stored atoms `(n, tau, mass)` with `n >= 1`.
    pub fn atoms(&self) -> impl Iterator<Item = (u64, u64, f64)> + '_ {
        self.rows()
            .flat_map(|(tau, r)| r.iter().map(move |(n, m)| (n, tau, m)))
    }

    pub fn get(&self, n: u64, tau: u64) -> f64 {
        if n == 0 {
            return if tau == 0 { self.idle } else { 0.0 };
        }
        self.row(tau).map_or(0.0, |r| r.get(n))
    }

    pub fn idle_mass(&self) -> f64 {
        self.idle
    }

    pub fn lost_mass(&self) -> f64 {
        self.lost
    }

    pub fn lost_weighted(&self) -> f64 {
        self.lost_weighted
    }

    /// `(stored_mass, mean_queue)` in one pass.
    pub fn moments(&self) -> (f64, f64) {
        let (mut m, mut w) = (self.idle, 0.0);
        for r in self.rows.values() {
            m += r.total();
            w += r.weighted();
        }
        (m, w)
    }

    /// Stored mass, excluding `lost_mass`.
    pub fn stored_mass(&self) -> f64 {
        self.idle + self.rows.values().map(Row::total).sum::<f64>()
    }

    /// Stored plus lost mass; 1 for a probability state.
    pub fn total_mass(&self) -> f64 {
        self.stored_mass() + self.lost
    }

    pub fn busy_mass(&self) -> f64 {
        self.rows.values().map(Row::total).sum()
    }

    pub fn max_tau(&self) -> Option<u64> {
        self.rows().map(|(t, _)| t).last()
    }

    pub fn max_n(&self) -> u64 {
        self.rows().map(|(_, r)| r.last()).max().unwrap_or(0)
    }

    pub fn mean_queue(&self) -> f64 {
        self.rows.values().map(Row::weighted).sum()
    }

    pub fn mean_bracket(&self) -> MeanBracket {
        MeanBracket {
            stored: self.mean_queue(),
            lost_weighted: self.lost_weighted,
        }
    }

    /// `N_[a,b]`: n-weighted mass with `a <= tau <= b` (`b = None` is unbounded).
    pub fn banded_mean_queue(&self, a: u64, b: Option<u64>) -> f64 {
        self.rows()
            .filter(|(t, _)| *t >= a && b.map_or(true, |b| *t <= b))
            .map(|(_, r)| r.weighted())
            .sum()
    }

    /// Multiplies every stored mass (idle included); lost mass is scaled too.
    pub fn scale(&mut self, f: f64) {
        self.idle *= f;
        self.lost *= f;
        self.lost_weighted *= f;
        self.rows.values_mut().for_each(|r| r.scale(f));
    }

    /// `self += f * other`.
    pub fn add_scaled(&mut self, other: &StateMeasure, f: f64) {
        self.idle += f * other.idle;
        self.lost += f * other.lost;
        self.lost_weighted += f * other.lost_weighted;
        for (tau, r) in other.rows() {
            let row = self.row_mut(tau);
            for (n, m) in r.iter() {
                row.add(n, f * m);
            }
        }
    }

    pub(crate) fn book_loss(&mut self, mass: f64, weighted: f64) {
        self.lost += mass;
        self.lost_weighted += weighted;
    }

    /// Stage A of the dynamics: every row moves up by one in `tau`.
    pub(crate) fn shift_up(&mut self) {
        self.shift += 1;
    }

    pub(crate) fn take_rows(&mut self) -> Vec<(u64, Row)> {
        let s = self.shift;
        std::mem::take(&mut self.rows)
            .into_iter()
            .filter(|(_, r)| !r.is_empty())
            .map(|(k, r)| ((k + s) as u64, r))
            .collect()
    }

    pub(crate) fn put_row(&mut self, tau: u64, row: Row) {
        if !row.is_empty() {
            let k = self.key(tau);
            self.rows.insert(k, row);
        }
    }

    pub(crate) fn set_idle(&mut self, idle: f64) {
        self.idle = idle;
    }
}

/// Axis-aligned window `{(n, tau): n <= n_max, tau in [tau_lo, tau_hi]}`; the
/// idle point belongs to it when `tau_lo == 0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Rectangle {
    pub n_max: u64,
    pub tau_lo: u64,
    pub tau_hi: u64,
}

impl Rectangle {
    pub fn new(n_max: u64, tau_lo: u64, tau_hi: u64) -> Result<Self> {
        if n_max == 0 || tau_lo > tau_hi {
            return Err(Error::OutOfRange {
                what: "rectangle",
                value: format!("n_max={n_max}, tau=[{tau_lo},{tau_hi}]"),
            });
        }
        Ok(Rectangle {
            n_max,
            tau_lo,
            tau_hi,
        })
    }

    pub fn contains(&self, n: u64, tau: u64) -> bool {
        if n == 0 {
            return tau == 0 && self.tau_lo == 0;
        }
        n <= self.n_max && tau >= self.tau_lo && tau <= self.tau_hi
    }

    pub fn includes_idle(&self) -> bool {
        self.tau_lo == 0
    }

    /// Cells of `mu` inside the rectangle, idle point first when included.
    pub fn cells<'a>(&'a self, mu: &'a StateMeasure) -> impl Iterator<Item = (u64, u64, f64)> + 'a {
        let idle = self
            .includes_idle()
            .then(|| (0, 0, mu.idle_mass()))
            .into_iter();
        let rest = mu
            .rows()
            .filter(move |(t, _)| *t >= self.tau_lo && *t <= self.tau_hi)
            .flat_map(move |(t, r)| {
                r.iter()
                    .take_while(move |(n, _)| *n <= self.n_max)
                    .map(move |(n, m)| (n, t, m))
            });
        idle.chain(rest)
    }
}

/// Smallest rectangle `{n <= n_max, tau in [0, max_tau(nu)]}` leaving at most
/// `budget` of the n-weighted mass outside.
pub fn core_rectangle(nu: &StateMeasure, budget: f64) -> Result<Rectangle> {
    if !(budget > 0.0) {
        return Err(Error::OutOfRange {
            what: "budget",
            value: budget.to_string(),
        });
    }
    let mut by_n: BTreeMap<u64, f64> = BTreeMap::new();
    for (n, _, m) in nu.atoms() {
        *by_n.entry(n).or_default() += n as f64 * m;
    }
    let mut n_max = 1;
    let mut tail = 0.0;
    for (&n, &w) in by_n.iter().rev() {
        if tail + w > budget {
            n_max = n.max(1);
            break;
        }
        tail += w;
    }
    Rectangle::new(n_max, 0, nu.max_tau().unwrap_or(0))
}

/// Ratio closeness on every cell of `rect`: both `mu/nu` and `nu/mu` lie in
/// the open interval `(1 - eps, 1 + eps)`. Cells empty in both are skipped; a
/// cell empty in exactly one measure fails.
pub fn eps_close(mu: &StateMeasure, nu: &StateMeasure, rect: &Rectangle, eps: f64) -> bool {
    closeness_ratio(mu, nu, rect).map_or(false, |worst| worst < eps)
}

/// Largest `max(|mu/nu - 1|, |nu/mu - 1|)` over the cells of `rect`, or
/// `None` when some cell carries mass in only one of the measures.
pub fn closeness_ratio(mu: &StateMeasure, nu: &StateMeasure, rect: &Rectangle) -> Option<f64> {
    let mut worst: f64 = 0.0;
    let mut check = |a: f64, b: f64| -> bool {
        if a == 0.0 && b == 0.0 {
            return true;
        }
        if a == 0.0 || b == 0.0 {
            return false;
        }
        let r = a / b;
        worst = worst.max((r - 1.0).abs()).max((1.0 / r - 1.0).abs());
        true
    };
    if rect.includes_idle() && !check(mu.idle_mass(), nu.idle_mass()) {
        return None;
    }
    let mut taus: Vec<u64> = mu
        .rows()
        .chain(nu.rows())
        .map(|(t, _)| t)
        .filter(|t| *t >= rect.tau_lo && *t <= rect.tau_hi)
        .collect();
    taus.sort_unstable();
    taus.dedup();
    for tau in taus {
        let (ra, rb) = (mu.row(tau), nu.row(tau));
        let lo = [ra, rb]
            .iter()
            .flatten()
            .filter(|r| !r.is_empty())
            .map(|r| r.first())
            .min()
            .unwrap_or(1);
        let hi = [ra, rb]
            .iter()
            .flatten()
            .filter(|r| !r.is_empty())
            .map(|r| r.last())
            .max()
            .unwrap_or(0)
            .min(rect.n_max);
        for n in lo..=hi {
            let a = ra.map_or(0.0, |r| r.get(n));
            let b = rb.map_or(0.0, |r| r.get(n));
            if !check(a, b) {
                return None;
            }
        }
    }
    Some(worst)
}

/// `sup |mu - nu|` over the cells of `rect`.
pub fn sup_distance(mu: &StateMeasure, nu: &StateMeasure, rect: &Rectangle) -> f64 {
    let mut worst: f64 = 0.0;
    if rect.includes_idle() {
        worst = (mu.idle_mass() - nu.idle_mass()).abs();
    }
    for (n, tau, m) in rect.cells(mu) {
        if n > 0 {
            worst = worst.max((m - nu.get(n, tau)).abs());
        }
    }
    for (n, tau, m) in rect.cells(nu) {
        if n > 0 && mu.get(n, tau) == 0.0 {
            worst = worst.max(m);
        }
    }
    worst
}

/// `e^-lambda lambda^k / k!`, evaluated in log space.
pub fn poisson_pmf(lambda: f64, k: u64) -> Result<f64> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::OutOfRange {
            what: "poisson rate",
            value: lambda.to_string(),
        });
    }
    if lambda == 0.0 {
        return Ok(if k == 0 { 1.0 } else { 0.0 });
    }
    let k_f = k as f64;
    let log = -lambda + k_f * lambda.ln() - statrs::function::gamma::ln_gamma(k_f + 1.0);
    Ok(log.exp())
}

/// Poisson weights `pi(0..=K)` with `K` the smallest index whose tail
/// `sum_{k > K} pi(k)` is below `tol`.
#[derive(Clone, Debug)]
pub struct PoissonKernel {
    pub weights: Vec<f64>,
    pub tail: f64,
}

impl PoissonKernel {
    pub fn new(lambda: f64, tol: f64) -> Result<Self> {
        if lambda == 0.0 {
            return Ok(PoissonKernel {
                weights: vec![1.0],
                tail: 0.0,
            });
        }
        // Terms until they are negligible against any tolerance, then suffix sums.
        let mut terms = vec![poisson_pmf(lambda, 0)?];
        let mode = lambda.floor() as u64;
        let mut k = 0u64;
        loop {
            k += 1;
            let next = terms[k as usize - 1] * lambda / k as f64;
            terms.push(next);
            if k > mode && next < 1e-30 * tol.min(1.0) {
                break;
            }
        }
        let mut suffix = vec![0.0; terms.len() + 1];
        for i in (0..terms.len()).rev() {
            suffix[i] = suffix[i + 1] + terms[i];
        }
        let cut = (0..terms.len())
            .find(|&i| suffix[i + 1] < tol)
            .unwrap_or(terms.len() - 1);
        terms.truncate(cut + 1);
        let tail = suffix[cut + 1];
        // The recursion rounds with a bias; without this the stored mass
        // creeps by a few ulp per step.
        let scale = (1.0 - tail) / terms.iter().sum::<f64>();
        terms.iter_mut().for_each(|w| *w *= scale);
        Ok(PoissonKernel { weights: terms, tail })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// `out = src * w`, with `out.len() == src.len() + w.len() - 1`.
fn convolve_row(src: &[f64], w: &[f64], out: &mut [f64]) {
    let (l, k) = (src.len(), w.len());
    if l < k {
        for (i, &x) in src.iter().enumerate() {
            for (o, &wk) in out[i..i + k].iter_mut().zip(w) {
                *o += x * wk;
            }
        }
        return;
    }
    let wr: Vec<f64> = w.iter().rev().copied().collect();
    let edge = |j: usize| -> f64 {
        let lo = j.saturating_sub(l - 1);
        let hi = j.min(k - 1);
        (lo..=hi).map(|m| w[m] * src[j - m]).sum()
    };
    for (j, o) in out.iter_mut().enumerate().take(k - 1) {
        *o = edge(j);
    }
    for j in k - 1..l {
        let s = &src[j + 1 - k..=j];
        let mut acc = [0.0f64; 4];
        let mut ws = wr.chunks_exact(4);
        let mut ss = s.chunks_exact(4);
        for (a, b) in (&mut ws).zip(&mut ss) {
            acc[0] += a[0] * b[0];
            acc[1] += a[1] * b[1];
            acc[2] += a[2] * b[2];
            acc[3] += a[3] * b[3];
        }
        let mut t = (acc[0] + acc[1]) + (acc[2] + acc[3]);
        for (a, b) in ws.remainder().iter().zip(ss.remainder()) {
            t += a * b;
        }
        out[j] = t;
    }
    for j in l..l + k - 1 {
        out[j] = edge(j);
    }
}

/// Convolves every row with the Poisson kernel in place. The idle point
/// spreads onto the `tau = 0` row. Returns the mass booked as lost.
pub(crate) fn convolve_in_place(mu: &mut StateMeasure, kernel: &PoissonKernel, prune: f64) -> f64 {
    let w = &kernel.weights;
    let big_k = w.len() as u64 - 1;
    let tail = kernel.tail;
    let mut lost = 0.0;
    let mut lost_w = 0.0;

    let idle = mu.idle_mass();
    let rows = mu.take_rows();
    let mut saw_zero_row = false;
    let mut new_idle = idle;

    for (tau, row) in rows {
        // The tau = 0 row absorbs the idle point at n = 0.
        let (first, src): (u64, std::borrow::Cow<[f64]>) = if tau == 0 {
            saw_zero_row = true;
            let mut v = vec![0.0; row.first as usize];
            v[0] = idle;
            v.extend_from_slice(&row.mass);
            (0, v.into())
        } else {
            (row.first, row.mass.as_slice().into())
        };
        let mut out = vec![0.0; src.len() + w.len() - 1];
        convolve_row(&src, w, &mut out);
        if tail > 0.0 {
            let (m, mw) = src.iter().enumerate().fold((0.0, 0.0), |(a, b), (i, &x)| {
                (a + x, b + x * (first + i as u64 + big_k + 1) as f64)
            });
            lost += m * tail;
            lost_w += mw * tail;
        }
        if first == 0 {
            new_idle = out[0];
            out.remove(0);
        }
        let mut new_row = Row {
            first: first.max(1),
            mass: out,
        };
        let (l, lw) = new_row.prune(prune);
        lost += l;
        lost_w += lw;
        mu.put_row(tau, new_row);
    }

    if !saw_zero_row && idle > 0.0 {
        let mut out: Vec<f64> = w.iter().map(|&wk| idle * wk).collect();
        new_idle = out[0];
        if tail > 0.0 {
            lost += idle * tail;
            lost_w += idle * tail * (big_k + 1) as f64;
        }
        out.remove(0);
        let mut new_row = Row { first: 1, mass: out };
        let (l, lw) = new_row.prune(prune);
        lost += l;
        lost_w += lw;
        mu.put_row(0, new_row);
    }

    if new_idle != 0.0 && new_idle < prune {
        lost += new_idle;
        new_idle = 0.0;
    }
    mu.set_idle(new_idle);
    mu.book_loss(lost, lost_w);
    lost
}

/// Stage C: right-shift by an independent Poisson(`lambda`) number of arrivals.
pub fn convolve_poisson(psi: &StateMeasure, lambda: f64, trunc: &Truncation) -> Result<StateMeasure> {
    if !(0.0..=1.0 + 1e-9).contains(&lambda) {
        return Err(Error::OutOfRange {
            what: "arrival rate",
            value: lambda.to_string(),
        });
    }
    if !(trunc.poisson_tail > 0.0) {
        return Err(Error::OutOfRange {
            what: "poisson tail tolerance",
            value: trunc.poisson_tail.to_string(),
        });
    }
    let mut out = psi.clone();
    let kernel = PoissonKernel::new(lambda, trunc.poisson_tail)?;
    convolve_in_place(&mut out, &kernel, trunc.prune);
    Ok(out)
}

/// Writes `n,tau,mass` rows (idle point as `0,0`) and a trailing
/// `# lost_mass=` line. `header` lines are emitted first as `# ` comments.
pub fn write_snapshot<W: Write>(mu: &StateMeasure, header: &[String], mut out: W) -> Result<()> {
    let io = |e| Error::io("<snapshot>", e);
    for h in header {
        writeln!(out, "# {h}").map_err(io)?;
    }
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(["n", "tau", "mass"])?;
        w.write_record(["0", "0", &mu.idle_mass().to_string()])?;
        for (n, tau, m) in mu.atoms() {
            w.write_record([n.to_string(), tau.to_string(), m.to_string()])?;
        }
        w.flush().map_err(io)?;
    }
    writeln!(out, "# lost_mass={}", mu.lost_mass()).map_err(io)?;
    Ok(())
}

pub fn read_snapshot<R: BufRead>(input: R) -> Result<StateMeasure> {
    let mut body = String::new();
    let mut lost = 0.0;
    for line in input.lines() {
        let line = line.map_err(|e| Error::io("<snapshot>", e))?;
        if let Some(c) = line.strip_prefix('#') {
            if let Some(v) = c.trim().strip_prefix("lost_mass=") {
                lost = v
                    .trim()
                    .parse()
                    .map_err(|_| Error::Parse(format!("bad lost_mass '{v}'")))?;
            }
            continue;
        }
        body.push_str(&line);
        body.push('\n');
    }
    let mut rdr = csv::Reader::from_reader(body.as_bytes());
    let mut mu = StateMeasure::empty();
    for rec in rdr.deserialize() {
        let (n, tau, mass): (u64, u64, f64) = rec?;
        mu.add(n, tau, mass)?;
    }
    mu.book_loss(lost, 0.0);
    Ok(mu)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trunc() -> Truncation {
        Truncation::default()
    }

    #[test]
    fn mean_queue_examples() {
        assert_eq!(StateMeasure::point(3, 5).mean_queue(), 3.0);
        assert_eq!(StateMeasure::idle_point().mean_queue(), 0.0);
        let m = StateMeasure::from_atoms([(1, 0, 0.5), (3, 2, 0.5)]).unwrap();
        assert_eq!(m.mean_queue(), 2.0);
    }

    #[test]
    fn banded_mean_examples() {
        let m = StateMeasure::from_atoms([(2, 0, 0.5), (2, 10, 0.5)]).unwrap();
        assert_eq!(m.banded_mean_queue(0, Some(5)), 1.0);
        assert_eq!(m.banded_mean_queue(0, None), m.mean_queue());
        assert_eq!(m.banded_mean_queue(10, Some(10)), 1.0);
    }

    #[test]
    fn core_rectangle_single_atom_and_idle() {
        let r = core_rectangle(&StateMeasure::point(5, 0), 0.01).unwrap();
        assert_eq!(r.n_max, 5);
        let r = core_rectangle(&StateMeasure::idle_point(), 0.3).unwrap();
        assert_eq!(r.n_max, 1);
        assert!(core_rectangle(&StateMeasure::idle_point(), 0.0).is_err());
    }

    #[test]
    fn core_rectangle_geometric() {
        // P(n) = 2^-(n+1) on the tau = 0 row, idle mass 1/2
        let mut m = StateMeasure::idle_point();
        m.scale(0.5);
        for n in 1..80u64 {
            m.add(n, 0, 0.5f64.powi(n as i32 + 1)).unwrap();
        }
        // brute-force oracle: smallest m with sum_{n > m} n 2^-(n+1) <= 0.01
        let oracle = (1..80u64)
            .find(|&cut| {
                let tail: f64 = (cut + 1..200).map(|n| n as f64 * 0.5f64.powi(n as i32 + 1)).sum();
                tail <= 0.01
            })
            .unwrap();
        assert_eq!(oracle, 10);
        assert_eq!(core_rectangle(&m, 0.01).unwrap().n_max, 10);
    }

    #[test]
    fn eps_close_examples() {
        let nu = StateMeasure::from_atoms([(0, 0, 0.4), (1, 0, 0.3), (2, 1, 0.3)]).unwrap();
        let rect = Rectangle::new(3, 0, 1).unwrap();
        assert!(eps_close(&nu, &nu, &rect, 1e-9));

        let mut mu = nu.clone();
        mu.add(1, 0, 0.15).unwrap(); // 1.5x on one cell
        assert!(!eps_close(&mu, &nu, &rect, 0.1));

        let mut mu = nu.clone();
        mu.scale(1.0 + 0.05);
        assert!(eps_close(&mu, &nu, &rect, 0.1));

        // mass present in one measure only
        let mut mu = nu.clone();
        mu.add(3, 0, 0.01).unwrap();
        assert!(!eps_close(&mu, &nu, &rect, 10.0));
        // ... but outside the rectangle it does not matter
        let mut mu = nu.clone();
        mu.add(7, 0, 0.01).unwrap();
        assert!(eps_close(&mu, &nu, &rect, 0.01));
    }

    #[test]
    fn eps_close_open_boundary() {
        let nu = StateMeasure::point(1, 0);
        let mut mu = nu.clone();
        mu.scale(1.5);
        let rect = Rectangle::new(1, 0, 0).unwrap();
        assert!(!eps_close(&mu, &nu, &rect, 0.5));
        assert!(eps_close(&mu, &nu, &rect, 0.51));
    }

    #[test]
    fn poisson_pmf_examples() {
        assert_eq!(poisson_pmf(0.0, 0).unwrap(), 1.0);
        assert_eq!(poisson_pmf(0.0, 3).unwrap(), 0.0);
        assert!((poisson_pmf(1.0, 1).unwrap() - (-1.0f64).exp()).abs() < 1e-15);
        assert!(poisson_pmf(-0.1, 0).is_err());
        // far tail stays finite
        assert!(poisson_pmf(0.5, 400).unwrap() >= 0.0);
    }

    #[test]
    fn kernel_tail_below_tol() {
        for &lam in &[0.01, 0.3, 0.75, 1.0] {
            let k = PoissonKernel::new(lam, 1e-14).unwrap();
            assert!(k.tail < 1e-14);
            let s: f64 = k.weights.iter().sum();
            assert!((s + k.tail - 1.0).abs() < 1e-15);
            assert!(k.len() <= 25);
        }
    }

    #[test]
    fn convolve_zero_rate_is_identity() {
        let psi = StateMeasure::from_atoms([(0, 0, 0.2), (1, 0, 0.3), (4, 3, 0.5)]).unwrap();
        let out = convolve_poisson(&psi, 0.0, &trunc()).unwrap();
        assert_eq!(out, psi);
    }

    #[test]
    fn convolve_idle_point() {
        let out = convolve_poisson(&StateMeasure::idle_point(), 1.0, &trunc()).unwrap();
        let e = (-1.0f64).exp();
        assert!((out.idle_mass() - e).abs() < 1e-15);
        for k in 1..10u64 {
            let want = poisson_pmf(1.0, k).unwrap();
            assert!((out.get(k, 0) - want).abs() < 1e-15, "k={k}");
        }
    }

    #[test]
    fn convolve_mixture_by_hand() {
        let psi = StateMeasure::from_atoms([(0, 0, 0.75), (1, 1, 0.25)]).unwrap();
        let lam = 0.75;
        let out = convolve_poisson(&psi, lam, &trunc()).unwrap();
        let pi = |k| poisson_pmf(lam, k).unwrap();
        assert!((out.idle_mass() - 0.75 * pi(0)).abs() < 1e-15);
        for n in 1..12u64 {
            assert!((out.get(n, 0) - 0.75 * pi(n)).abs() < 1e-15);
            assert!((out.get(n, 1) - 0.25 * pi(n - 1)).abs() < 1e-15);
        }
        assert!((out.mean_queue() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn convolve_rejects_rate_above_one() {
        assert!(convolve_poisson(&StateMeasure::idle_point(), 1.5, &trunc()).is_err());
    }

    #[test]
    fn snapshot_round_trip() {
        let mut mu = StateMeasure::from_atoms([(0, 0, 0.25), (1, 0, 0.25), (3, 7, 0.5)]).unwrap();
        mu.book_loss(1e-12, 0.0);
        let mut buf = Vec::new();
        write_snapshot(&mu, &["config_hash=abc".into()], &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# config_hash=abc\nn,tau,mass\n0,0,0.25\n"));
        assert!(text.trim_end().ends_with("# lost_mass=0.000000000001"));
        let back = read_snapshot(buf.as_slice()).unwrap();
        assert_eq!(back, mu);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn measure() -> impl Strategy<Value = StateMeasure> {
            proptest::collection::vec((0u64..12, 0u64..6, 0.01f64..1.0), 1..12).prop_map(|atoms| {
                let total: f64 = atoms.iter().map(|a| a.2).sum();
                StateMeasure::from_atoms(
                    atoms
                        .into_iter()
                        .map(|(n, t, m)| if n == 0 { (0, 0, m / total) } else { (n, t, m / total) }),
                )
                .unwrap()
            })
        }

        proptest! {
            #[test]
            fn convolution_conserves_and_shifts_mean(mu in measure(), lam in 0.0f64..1.0) {
                let out = convolve_poisson(&mu, lam, &Truncation::default()).unwrap();
                prop_assert!((out.total_mass() - mu.total_mass()).abs() < 1e-12);
                let drift = out.mean_queue() - mu.mean_queue() - lam * mu.stored_mass();
                prop_assert!(drift.abs() < 1e-10 + out.lost_weighted());
            }

            #[test]
            fn eps_close_symmetric_reflexive(mu in measure(), nu in measure(), eps in 0.01f64..1.0) {
                let rect = Rectangle::new(8, 0, 5).unwrap();
                prop_assert!(eps_close(&mu, &mu, &rect, eps));
                prop_assert_eq!(eps_close(&mu, &nu, &rect, eps), eps_close(&nu, &mu, &rect, eps));
            }

            #[test]
            fn core_rectangle_monotone(mu in measure(), b1 in 0.001f64..0.5, b2 in 0.001f64..0.5) {
                let (small, large) = if b1 < b2 { (b1, b2) } else { (b2, b1) };
                let r_small = core_rectangle(&mu, small).unwrap();
                let r_large = core_rectangle(&mu, large).unwrap();
                prop_assert!(r_small.n_max >= r_large.n_max);
            }
        }
    }
}
