//! Acceptance criteria 1-11. Each test prints exactly one `criterion N: PASS`
//! or `criterion N: FAIL` line (plus optional `info` lines) straight to
//! stdout so the verdicts survive output capture.

use std::io::Write;
use std::sync::OnceLock;

use nmp_core::equilibrium::{pk_rate, pk_rate_in_system, stationary_from, stationary_state, uniqueness_probe, StationaryOptions};
use nmp_core::flow::{fixed_point_solve, gfp_run, nmp_trace, RunOptions, SnapshotSchedule};
use nmp_core::meanfield::{chaos_distance, init_network, inflow_tests, simulate};
use nmp_core::measure::core_rectangle;
use nmp_core::transience::{construct, lemma_decay_check, verify_certificate, TransienceCertificate, TransienceConfig};
use nmp_core::{nmp_run, EngineConfig, Server, ServiceDistribution, StateMeasure, TypeBSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn line(s: String) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{s}");
    let _ = out.flush();
}

fn verdict(n: u32, name: &str, pass: bool, detail: String) -> bool {
    line(format!(
        "criterion {n} ({name}): {} {detail}",
        if pass { "PASS" } else { "FAIL" }
    ));
    pass
}

fn info(n: u32, s: String) {
    line(format!("  info {n}: {s}"));
}

fn dist(starts: &[u64]) -> ServiceDistribution {
    TypeBSpec::from_starts(starts, true).unwrap().build().unwrap()
}

/// Support `{1}` plus up to three more atoms in `2..=20`.
fn random_dist(rng: &mut ChaCha8Rng) -> ServiceDistribution {
    let mut atoms = vec![1u64];
    for _ in 0..rng.gen_range(0..=3) {
        atoms.push(rng.gen_range(2..=20));
    }
    atoms.sort_unstable();
    atoms.dedup();
    ServiceDistribution::from_support(&atoms).unwrap()
}

/// Random probability state valid for `d`, with queue lengths in `n_lo..=n_hi`.
fn random_state(rng: &mut ChaCha8Rng, d: &ServiceDistribution, n_lo: u64, n_hi: u64) -> StateMeasure {
    let k = rng.gen_range(1..=5);
    let mut w: Vec<f64> = (0..=k).map(|_| rng.gen_range(0.05..1.0)).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    let mut nu = StateMeasure::empty();
    nu.add(0, 0, w[0]).unwrap();
    for &x in &w[1..] {
        let n = rng.gen_range(n_lo..=n_hi);
        let tau = rng.gen_range(0..d.max_service());
        nu.add(n, tau, x).unwrap();
    }
    nu
}

#[test]
fn criterion_01_02_conservation_and_rate_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let cfg = EngineConfig::default();
    let (mut worst, mut worst_excess) = (0.0f64, f64::NEG_INFINITY);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut ok1 = true;
    let mut steps = 0usize;
    for _ in 0..20 {
        let d = random_dist(&mut rng);
        let nu = random_state(&mut rng, &d, 1, 6);
        let n0 = nu.mean_queue();
        let mut s = Server::new(nu, &d, cfg);
        for t in 1..=10_000usize {
            let r = s.step().unwrap();
            lo = lo.min(r.lambda_out);
            hi = hi.max(r.lambda_out);
            let st = s.state();
            let dev = (st.mean_queue() - n0).abs();
            let bracket = st.lost_weighted() + t as f64 * st.lost_mass();
            worst = worst.max(dev);
            worst_excess = worst_excess.max(dev - bracket);
            if dev > 1e-8 + bracket {
                ok1 = false;
            }
            steps += 1;
        }
    }
    let ok2 = lo >= 0.0 && hi <= 1.0;
    let a = verdict(
        1,
        "conservation",
        ok1,
        format!("20 pairs x 1e4 steps, max |N(t) - N(0)| = {worst:.3e}, max excess over bracket = {worst_excess:.3e}"),
    );
    let b = verdict(2, "rate bound", ok2, format!("{steps} steps, lambda in [{lo:.6}, {hi:.6}]"));
    assert!(a && b);
}

fn tail_rate(starts: &[u64]) -> f64 {
    let d = dist(starts);
    let (trace, _) = nmp_trace(&StateMeasure::point(1, 0), &d, 500, &EngineConfig::default()).unwrap();
    trace.lambda[400..].iter().sum::<f64>() / 100.0
}

#[test]
fn criterion_03_pk_stationary_rate() {
    let r1 = tail_rate(&[1]);
    let r13 = tail_rate(&[1, 3]);
    let d13 = dist(&[1, 3]);
    let o1 = 3f64.sqrt() - 1.0;
    let o13 = pk_rate(1.0, d13.mean(), d13.second_moment()).unwrap();
    let e1 = (r1 - o1).abs();
    let e13 = (r13 - 0.45734).abs();
    let pass = e1 <= 1e-3 && e13 <= 2e-3;
    verdict(
        3,
        "PK stationary rate",
        pass,
        format!(
            "A={{1}}: {r1:.7} vs {o1:.7} (err {e1:.2e}, tol 1e-3); A={{1,3}}: {r13:.7} vs 0.45734 (err {e13:.2e}, tol 2e-3)"
        ),
    );
    info(3, format!("closed form at A={{1,3}} evaluates to {o13:.7}"));
    let c1 = pk_rate_in_system(1.0, 1.0, 1.0).unwrap();
    let c13 = pk_rate_in_system(1.0, d13.mean(), d13.second_moment()).unwrap();
    info(
        3,
        format!(
            "rate with rho read as mean number in system: {c1:.7} (err {:.2e}), {c13:.7} (err {:.2e})",
            (r1 - c1).abs(),
            (r13 - c13).abs()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_04_fixed_point_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let cfg = EngineConfig::default();
    let (mut res, mut gap) = (0.0f64, 0.0f64);
    for _ in 0..10 {
        let d = random_dist(&mut rng);
        let nu = random_state(&mut rng, &d, 1, 5);
        let (direct, _) = nmp_trace(&nu, &d, 200, &cfg).unwrap();
        let image = gfp_run(&nu, &d, &direct, &cfg).unwrap();
        res = res.max(image.sup_distance(&direct));
        let fp = fixed_point_solve(&nu, &d, 200, 1e-13, 1000, &cfg).unwrap();
        gap = gap.max(fp.trace.sup_distance(&direct));
    }
    let pass = res <= 1e-8 && gap <= 1e-10;
    verdict(
        4,
        "fixed-point equivalence",
        pass,
        format!("10 states, horizon 200: |A(nu, l) - l| = {res:.2e}, |fixed point - direct| = {gap:.2e}"),
    );
    assert!(pass);
}

#[test]
fn criterion_05_relaxation_and_uniqueness() {
    let d = dist(&[1, 3]);
    let a = StateMeasure::point(1, 0);
    let b = StateMeasure::from_atoms([(0, 0, 0.5), (2, 1, 0.5)]).unwrap();
    let opts = StationaryOptions::default();
    let cfg = EngineConfig::default();
    let r = uniqueness_probe(&d, &a, &b, 0.02, &opts, &cfg);
    let (pass, detail) = match &r {
        Ok(u) => (
            u.close,
            format!(
                "worst ratio {:?}, rates {:.9} / {:.9}, steps {:?}",
                u.worst_ratio, u.rate_a, u.rate_b, u.iterations
            ),
        ),
        Err(e) => (false, e.to_string()),
    };
    let both = stationary_from(&a, &d, &opts, &cfg).is_ok() && stationary_from(&b, &d, &opts, &cfg).is_ok();
    let pass = pass && both;
    verdict(5, "relaxation and uniqueness", pass, detail);
    assert!(pass);
}

#[test]
fn criterion_06_lower_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let cfg = EngineConfig::default();
    let mut floor = f64::INFINITY;
    let mut rhos = Vec::new();
    for _ in 0..10 {
        let d = random_dist(&mut rng);
        let raw = random_state(&mut rng, &d, 2, 6);
        let rho = rng.gen_range(0.1..2.0);
        // idle mixing sets the mean to rho; raw has mean >= 2 * busy mass
        let c = rho / raw.mean_queue();
        let mut nu = raw.clone();
        if c <= 1.0 {
            nu.scale(c);
            nu.add(0, 0, 1.0 - c).unwrap();
        } else {
            nu = nmp_core::equilibrium::simple_start(rho).unwrap();
        }
        rhos.push(nu.mean_queue());
        let (trace, _) = nmp_trace(&nu, &d, 2000, &cfg).unwrap();
        let from = d.max_service() as usize;
        let m = trace.lambda[from - 1..].iter().copied().fold(f64::INFINITY, f64::min);
        floor = floor.min(m);
    }
    let pass = floor > 0.0 && floor >= 1e-6 && rhos.iter().all(|r| (0.1 - 1e-9..=2.0).contains(r));
    verdict(6, "lower bound", pass, format!("10 states, horizon 2000, floor {floor:.4e}"));
    assert!(pass);
}

#[test]
fn criterion_07_lemma_decay_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let len = rng.gen_range(2..12);
        let delta = rng.gen_range(0.0..0.5);
        let mut mu: Vec<f64> = (0..len).map(|_| rng.gen_range(0.0..1.0)).collect();
        let s: f64 = mu.iter().sum();
        mu.iter_mut().for_each(|x| *x *= (1.0 - delta) / s);
        let mut alpha: Vec<f64> = mu.iter().map(|&x| x * rng.gen_range(0.0..1.0)).collect();
        alpha[0] = 0.0;
        let m: f64 = alpha.iter().sum();
        let total: f64 = mu.iter().sum();
        let want = m * (1.0 - total);
        let got = lemma_decay_check(&mu, &alpha).unwrap();
        worst = worst.max((got - want).abs());
    }
    let pass = worst <= 1e-12;
    verdict(7, "lemma decay identity", pass, format!("100 instances, max |drop - m delta| = {worst:.2e}"));
    assert!(pass);
}

fn certificate() -> &'static Result<(TransienceCertificate, f64), String> {
    static CERT: OnceLock<Result<(TransienceCertificate, f64), String>> = OnceLock::new();
    CERT.get_or_init(|| {
        let t0 = std::time::Instant::now();
        let cfg = TransienceConfig {
            levels: 3,
            eps: 0.05,
            ..TransienceConfig::default()
        };
        construct(&cfg)
            .map(|c| (c, t0.elapsed().as_secs_f64()))
            .map_err(|e| e.to_string())
    })
}

/// Cutoff-k distribution of a certificate.
fn level_dist(cert: &TransienceCertificate, k: usize) -> ServiceDistribution {
    cert.spec.cutoff(k).unwrap().build().unwrap()
}

#[test]
fn criterion_08_transience_certificate() {
    let (cert, secs) = match certificate() {
        Ok(c) => c,
        Err(e) => {
            verdict(8, "transience certificate", false, format!("construction failed: {e}"));
            panic!("{e}");
        }
    };
    let eps = 0.05;
    let mut fails = Vec::new();
    let windows = &cert.low_windows;
    if windows.len() < 2 {
        fails.push(format!("{} windows", windows.len()));
    }
    for w in windows {
        let len = w.t_out - w.t_in + 1;
        if len < 5 || w.max_lambda > eps {
            fails.push(format!("window {} [{}, {}] max {:.4}", w.level, w.t_in, w.t_out, w.max_lambda));
        }
    }
    if windows.windows(2).any(|p| p[0].t_out >= p[1].t_in) {
        fails.push("windows overlap".into());
    }
    let mut highs = Vec::new();
    for k in 1..=2usize {
        let Some(h) = cert.high_points.iter().find(|h| h.level == k) else {
            fails.push(format!("no high point for level {k}"));
            continue;
        };
        let lvl = &cert.levels[k - 1];
        let d = level_dist(cert, k);
        let oracle = pk_rate(lvl.rho, d.mean(), d.second_moment()).unwrap();
        let corrected = pk_rate_in_system(lvl.rho, d.mean(), d.second_moment()).unwrap();
        if h.lambda < oracle - eps {
            fails.push(format!("level {k}: lambda({}) = {:.4} < {:.4} - {eps}", h.t, h.lambda, oracle));
        }
        highs.push((k, h.t, h.lambda, oracle, corrected));
    }
    let t1 = std::time::Instant::now();
    let v = verify_certificate(cert, None).unwrap();
    let vsecs = t1.elapsed().as_secs_f64();
    if !(v.ok && v.hash_matches) {
        fails.push(format!("re-verification: {:?}", v.failures));
    }
    let pass = fails.is_empty();
    let ws: Vec<String> = windows
        .iter()
        .map(|w| format!("[{}, {}] max {:.4}", w.t_in, w.t_out, w.max_lambda))
        .collect();
    verdict(
        8,
        "transience certificate",
        pass,
        format!(
            "windows {}; built in {secs:.0}s, verified in {vsecs:.0}s (hash match {}){}",
            ws.join(", "),
            v.hash_matches,
            if pass { String::new() } else { format!("; failures: {}", fails.join("; ")) }
        ),
    );
    for (k, t, l, o, c) in highs {
        info(
            8,
            format!(
                "level {k}: lambda(T_bn = {t}) = {l:.4}; closed form {o:.4} (needs >= {:.4}); in-system rate {c:.4} (needs >= {:.4}, {})",
                o - eps,
                c - eps,
                if l >= c - eps { "met" } else { "missed" }
            ),
        );
    }
    assert!(pass);
}

#[test]
fn criterion_09_propagation_of_chaos() {
    let d = dist(&[1, 3]);
    let nu = StateMeasure::point(1, 0);
    let t = 50;
    let run = nmp_run(
        &nu,
        &d,
        t,
        &RunOptions {
            snapshots: SnapshotSchedule::none(),
            band: None,
        },
        &EngineConfig::default(),
    )
    .unwrap();
    let reference = run.final_state;
    let rect = core_rectangle(&reference, 0.01).unwrap();
    let ms = [100usize, 1000, 10_000];
    let seeds = 20u64;
    let mut marg = Vec::new();
    let mut pair = Vec::new();
    for &m in &ms {
        let (mut a, mut b) = (0.0, 0.0);
        for seed in 0..seeds {
            let mut s = init_network(&nu, m, seed).unwrap();
            simulate(&mut s, &d, t, &[]);
            let c = chaos_distance(&s, &reference, &rect).unwrap();
            a += c.marginal;
            b += c.pair;
        }
        marg.push(a / seeds as f64);
        pair.push(b / seeds as f64);
    }
    let xs: Vec<f64> = ms.iter().map(|&m| (m as f64).ln()).collect();
    let ys: Vec<f64> = marg.iter().map(|v| v.ln()).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / 3.0, ys.iter().sum::<f64>() / 3.0);
    let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    let dec = |v: &[f64]| v.windows(2).all(|p| p[1] < p[0]);
    let pass = dec(&marg) && dec(&pair) && (-0.8..=-0.2).contains(&slope);
    verdict(
        9,
        "propagation of chaos",
        pass,
        format!(
            "M = {ms:?}: marginal TV {:.4} / {:.4} / {:.4}, slope {slope:.3}; pair TV {:.4} / {:.4} / {:.4}",
            marg[0], marg[1], marg[2], pair[0], pair[1], pair[2]
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_10_poisson_inflow() {
    let d = dist(&[1, 3]);
    // servers drawn i.i.d. from the stationary state at rho = 1
    let nu = stationary_state(&d, 1.0, &StationaryOptions::default(), &EngineConfig::default())
        .unwrap()
        .state;
    let mut s = init_network(&nu, 10_000, 2024).unwrap();
    simulate(&mut s, &d, 500, &[0, 1]);
    let stats = simulate(&mut s, &d, 2000, &[0, 1]);
    let r = inflow_tests(&stats).unwrap();
    let pass = r.poisson_ok(0.01) && r.independence_ok(3.0);
    verdict(
        10,
        "Poisson inflow",
        pass,
        format!(
            "M = 1e4, stationary start, window 2000 after 500 warm-up: chi2 = {:.3} (df {}), p = {:.4}; cov = {:.2e}, SE = {:.2e}",
            r.poisson.statistic,
            r.poisson.df,
            r.poisson.p_value,
            r.cov.unwrap(),
            r.cov_se.unwrap()
        ),
    );
    let cond: Vec<String> = r.conditional.iter().map(|(k, n, tv)| format!("k={k}: TV {tv:.4} (n={n})")).collect();
    info(10, format!("mean arrivals {:.4}; n1 | n2 = k vs n1: {}", r.mean_arrivals, cond.join(", ")));
    assert!(pass);
}

#[test]
fn criterion_11_cutoff_continuity() {
    let (cert, _) = match certificate() {
        Ok(c) => c,
        Err(e) => {
            verdict(11, "cutoff continuity", false, format!("construction failed: {e}"));
            panic!("{e}");
        }
    };
    let mut parts = Vec::new();
    let mut pass = true;
    for k in 1..=2usize {
        match cert.continuity.iter().find(|c| c.level == k) {
            Some(c) => {
                pass &= c.ok && c.max_rate_gap <= 2.0 * cert.eps;
                parts.push(format!(
                    "level {k}: rate gap {:.2e} up to T_bn = {}, state ratio {:?}",
                    c.max_rate_gap, c.t_bn, c.state_ratio
                ));
            }
            None => {
                pass = false;
                parts.push(format!("level {k}: missing"));
            }
        }
    }
    verdict(11, "cutoff continuity", pass, parts.join("; "));
    assert!(pass);
}
