//! Acceptance suite. Runs every criterion at full scale and prints one
//! PASS/FAIL line each, followed by the measured values. Exits non-zero if
//! any criterion fails.

use std::collections::{BTreeMap, VecDeque};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use replisim_core::access::{propagate, AccessMode, LinkLayer, Query};
use replisim_core::config::SimConfig;
use replisim_core::engine::{run_batch, BatchResult};
use replisim_core::facility::{
    brute_force, local_search, FlInstance, Metric, Problem, BRUTE_FORCE_CAP,
};
use replisim_core::geometry::{build_graph, hop_distances, NetworkGraph};
use replisim_core::output::write_logs;
use replisim_core::replication::{decide, target_replica_count, Decision};
use replisim_core::scenarios;
use replisim_core::stats::{chi_square, Histogram, QueryOutcome};
use replisim_core::{NodeId, Position};

const SEEDS: [u64; 10] = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10];
const STEADY: (f64, f64) = (7000.0, 10000.0);

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn scenario(name: &str, overrides: &[(&str, &str)]) -> SimConfig {
    let ov: Vec<(String, String)> = overrides
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    scenarios::load(name, &ov).unwrap_or_else(|e| panic!("{name}: {e}"))
}

/// Sweep variants of a bundled scenario, keyed by label.
fn variants(name: &str, overrides: &[(&str, &str)]) -> Vec<(String, SimConfig)> {
    scenario(name, overrides).variants().expect("variants")
}

fn batch(cfg: &SimConfig) -> BatchResult {
    run_batch(cfg, &SEEDS).expect("batch")
}

fn rel(x: f64, target: f64) -> f64 {
    (x - target).abs() / target
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn post_warmup_workload(b: &BatchResult, warmup: f64) -> f64 {
    let xs: Vec<f64> = b
        .runs
        .iter()
        .flat_map(|r| r.workload.iter())
        .filter(|w| w.t > warmup)
        .map(|w| w.served as f64)
        .collect();
    mean(&xs)
}

struct Bootstrap {
    warmup: f64,
    by_mode: BTreeMap<String, BatchResult>,
}

fn bootstrap_runs() -> Bootstrap {
    let vs = variants("bootstrap", &[("output.chi2", "false"), ("output.hop_cdf", "false")]);
    let warmup = vs[0].1.warmup;
    let by_mode = vs
        .iter()
        .map(|(_, cfg)| (cfg.access.mode.label().to_string(), batch(cfg)))
        .collect();
    Bootstrap { warmup, by_mode }
}

fn criterion_1(b: &Bootstrap) -> Verdict {
    let target = target_replica_count(320, 0.01, 100.0, 10.0).unwrap();
    let steady = |m: &str| b.by_mode[m].mean_replicas(STEADY.0, STEADY.1).unwrap();
    let (p, s, f) = (steady("perfect"), steady("scan"), steady("flood"));
    let pass = rel(p, target) <= 0.05 && f > p && p < s && s < f;
    verdict(
        pass,
        format!(
            "steady |C|: perfect {p:.2} (target {target:.2}, err {:.1}%), scan {s:.2}, flood {f:.2}",
            100.0 * rel(p, target)
        ),
    )
}

fn criterion_2() -> Verdict {
    let cfg = scenario("demand_doubling", &[("output.chi2", "false"), ("output.hop_cdf", "false")]);
    let b = batch(&cfg);
    let t1 = target_replica_count(320, 0.01, 100.0, 10.0).unwrap();
    let t2 = target_replica_count(320, 0.02, 100.0, 10.0).unwrap();
    let before = b.mean_replicas(2000.0, 4999.0).unwrap();
    let after = b.mean_replicas(STEADY.0, STEADY.1).unwrap();
    let pass = rel(before, t1) <= 0.07 && rel(after, t2) <= 0.07;
    verdict(
        pass,
        format!(
            "|C| before {before:.2} (target {t1:.2}, err {:.1}%), after {after:.2} (target {t2:.2}, err {:.1}%)",
            100.0 * rel(before, t1),
            100.0 * rel(after, t2)
        ),
    )
}

fn criterion_3(b: &Bootstrap) -> Verdict {
    let s_ref = 10.0;
    let p = post_warmup_workload(&b.by_mode["perfect"], b.warmup);
    let f = post_warmup_workload(&b.by_mode["flood"], b.warmup);
    let pass = rel(p, s_ref) <= 0.05 && f >= s_ref && f <= 1.1 * s_ref;
    verdict(
        pass,
        format!(
            "mean served per period: perfect {p:.2} (err {:.1}%), flood {f:.2} ({:+.1}% vs s_R)",
            100.0 * rel(p, s_ref),
            100.0 * (f - s_ref) / s_ref
        ),
    )
}

struct AccessRuns {
    by_mode: BTreeMap<String, BatchResult>,
}

/// Handover-only |C|=30 runs for every access mechanism; the perfect one
/// also records hop-distance CDFs.
fn access_runs() -> AccessRuns {
    let by_mode = variants("access_modes", &[("output.hop_cdf", "true")])
        .iter()
        .map(|(_, cfg)| (cfg.access.mode.label().to_string(), batch(cfg)))
        .collect();
    AccessRuns { by_mode }
}

fn criterion_4(a: &AccessRuns) -> Verdict {
    let snaps: Vec<_> = a.by_mode["perfect"]
        .runs
        .iter()
        .flat_map(|r| r.snapshots.iter())
        .filter(|s| s.hop_cdf1.is_some())
        .collect();
    let c1 = mean(&snaps.iter().map(|s| s.hop_cdf1.unwrap()).collect::<Vec<_>>());
    let c2 = mean(&snaps.iter().map(|s| s.hop_cdf2.unwrap()).collect::<Vec<_>>());
    verdict(
        c1 >= 0.5 && c2 >= 0.9,
        format!("CDF(1) {c1:.4}, CDF(2) {c2:.4} over {} snapshots", snaps.len()),
    )
}

fn criterion_5() -> Verdict {
    let cfg = scenario("static_placement", &[("output.chi2_optimal", "false")]);
    let b = batch(&cfg);
    let pairs: Vec<(f64, f64)> = b
        .runs
        .iter()
        .flat_map(|r| r.snapshots.iter())
        .filter_map(|s| Some((s.chi2_vs_nodal?, s.chi2_vs_spatial?)))
        .collect();
    let better = pairs.iter().filter(|(n, s)| n < s).count();
    let frac = better as f64 / pairs.len().max(1) as f64;
    let nodal = mean(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
    let spatial = mean(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
    verdict(
        !pairs.is_empty() && frac >= 0.8,
        format!(
            "nodal fit better in {better}/{} snapshots ({:.1}%); mean chi2 nodal {nodal:.2}, spatial {spatial:.2}",
            pairs.len(),
            100.0 * frac
        ),
    )
}

fn criterion_6() -> Verdict {
    let cfg = scenario("demand_region", &[]);
    let switch = cfg
        .demand_profile()
        .phases
        .iter()
        .find(|p| p.region.is_some())
        .map(|p| p.start)
        .expect("region phase");
    let b = batch(&cfg);
    let post: Vec<_> = b
        .runs
        .iter()
        .flat_map(|r| r.snapshots.iter())
        .filter(|s| s.t > switch)
        .collect();
    // a snapshot with fewer than two replicas in the region has no region
    // statistic and counts against the criterion
    let pairs: Vec<(Option<f64>, f64)> = post
        .iter()
        .filter_map(|s| Some((s.chi2_vs_nodal_region, s.chi2_vs_nodal?)))
        .collect();
    let better = pairs.iter().filter(|(r, a)| r.is_some_and(|r| r < *a)).count();
    let frac = better as f64 / pairs.len().max(1) as f64;
    let rep: Vec<f64> = post.iter().filter_map(|s| s.replicas_in_region).collect();
    let nodes: Vec<f64> = post.iter().filter_map(|s| s.nodes_in_region).collect();
    let (rf, nf) = (mean(&rep), mean(&nodes));
    verdict(
        !pairs.is_empty() && frac >= 0.8 && rf > nf,
        format!(
            "region fit better in {better}/{} post-switch snapshots ({:.1}%); replicas in region {:.1}%, nodes in region {:.1}%",
            pairs.len(),
            100.0 * frac,
            100.0 * rf,
            100.0 * nf
        ),
    )
}

fn criterion_7(a: &AccessRuns) -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();
    for (mode, b) in &a.by_mode {
        let medians: Vec<f64> = b
            .runs
            .iter()
            .map(|r| r.access.window_solving_ratio.as_ref().and_then(|q| q.median()).unwrap_or(0.0))
            .collect();
        let worst = medians.iter().cloned().fold(f64::INFINITY, f64::min);
        ok &= worst >= 0.85;
        parts.push(format!("{mode} median solving ratio >= {worst:.3}"));
    }
    let replies = |m: &str| -> Vec<f64> {
        a.by_mode[m]
            .runs
            .iter()
            .flat_map(|r| r.queries.iter())
            .filter(|q| q.outcome == QueryOutcome::Solved)
            .map(|q| q.replies as f64)
            .collect()
    };
    let perfect = replies("perfect");
    let perfect_ok = perfect.iter().all(|&r| r == 1.0);
    let flood = replies("flood");
    let selective = replies("flood_selective");
    let flood_max = flood.iter().cloned().fold(0.0, f64::max);
    let (fm, sm) = (mean(&flood), mean(&selective));
    let cut = 1.0 - sm / fm;
    ok &= perfect_ok && flood_max >= 3.0 && cut >= 0.3;
    parts.push(format!(
        "perfect redundancy always 1: {perfect_ok}; flood max redundancy {flood_max}; mean redundancy flood {fm:.2} vs selective {sm:.2} (-{:.1}%)",
        100.0 * cut
    ));
    verdict(ok, parts.join("; "))
}

fn criterion_8() -> Verdict {
    let vs = variants("convergence_sweep", &[("output.chi2", "false"), ("output.hop_cdf", "false")]);
    let mut tau: Vec<(f64, Option<f64>)> = Vec::new();
    let mut eps: Vec<(f64, Option<f64>)> = Vec::new();
    let mut cache: Vec<(String, Option<f64>)> = Vec::new();
    for (label, cfg) in &vs {
        let key = cfg.to_toml_string();
        let conv = match cache.iter().find(|(k, _)| *k == key) {
            Some((_, c)) => *c,
            None => {
                let c = batch(cfg).convergence;
                cache.push((key, c));
                c
            }
        };
        if label.starts_with("replication.tau") {
            tau.push((cfg.replication.tau, conv));
        } else if label.starts_with("replication.epsilon") {
            eps.push((cfg.replication.epsilon, conv));
        }
    }
    tau.sort_by(|a, b| a.0.total_cmp(&b.0));
    eps.sort_by(|a, b| a.0.total_cmp(&b.0));
    // never converging ranks after every finite time
    let monotone = |xs: &[(f64, Option<f64>)]| {
        xs.windows(2)
            .all(|w| w[0].1.unwrap_or(f64::INFINITY) <= w[1].1.unwrap_or(f64::INFINITY))
    };
    let show = |xs: &[(f64, Option<f64>)]| {
        xs.iter()
            .map(|(p, c)| match c {
                Some(c) => format!("{p}:{c:.0}s"),
                None => format!("{p}:never"),
            })
            .collect::<Vec<_>>()
            .join(" ")
    };
    let pass = tau.len() == 5 && eps.len() == 3 && monotone(&tau) && monotone(&eps);
    verdict(pass, format!("tau {} | epsilon {}", show(&tau), show(&eps)))
}

fn random_connected_graph(rng: &mut ChaCha8Rng, n: usize, side: f64, range: f64) -> NetworkGraph {
    loop {
        let nodes: Vec<(NodeId, Position)> = (0..n)
            .map(|i| {
                let p = Position::new(rng.random::<f64>() * side, rng.random::<f64>() * side);
                (NodeId(i as u32), p)
            })
            .collect();
        let g = build_graph(&nodes, range).unwrap();
        if hop_distances(&g, &[NodeId(0)]).iter().all(|d| d.is_some()) {
            return g;
        }
    }
}

fn criterion_9() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let (mut worst_km, mut worst_ufl) = (1.0f64, 1.0f64);
    let mut invariant = true;
    for i in 0..50u64 {
        let n = rng.random_range(4..=12usize);
        assert!(n <= BRUTE_FORCE_CAP);
        let g = random_connected_graph(&mut rng, n, 60.0, 30.0);
        let metric = if i % 2 == 0 { Metric::HopCount } else { Metric::Euclidean };
        let demand: BTreeMap<NodeId, f64> =
            (0..n).map(|v| (NodeId(v as u32), rng.random_range(0.1..2.0))).collect();
        let costs: BTreeMap<NodeId, f64> =
            (0..n).map(|v| (NodeId(v as u32), rng.random_range(0.0..30.0))).collect();
        let inst = FlInstance::new(&g, metric)
            .with_demand(&demand)
            .unwrap()
            .with_costs(&costs)
            .unwrap();
        let k = rng.random_range(1..n);

        let km = Problem::KMedian { k };
        let opt = brute_force(&inst, km).unwrap();
        let ls = local_search(&inst, km, i, 1).unwrap();
        invariant &= opt.assignment_is_optimal(&inst) && ls.assignment_is_optimal(&inst);
        invariant &= ls.facilities.len() == k;
        if opt.cost > 0.0 {
            worst_km = worst_km.max(ls.cost / opt.cost);
        } else {
            invariant &= ls.cost == 0.0;
        }

        let opt = brute_force(&inst, Problem::Ufl).unwrap();
        let ls = local_search(&inst, Problem::Ufl, i, 1).unwrap();
        invariant &= opt.assignment_is_optimal(&inst) && ls.assignment_is_optimal(&inst);
        if opt.cost > 0.0 {
            worst_ufl = worst_ufl.max(ls.cost / opt.cost);
        } else {
            invariant &= ls.cost == 0.0;
        }
    }
    verdict(
        worst_km <= 5.0 && worst_ufl <= 3.05 && invariant,
        format!(
            "worst ratio k-median {worst_km:.3}, UFL {worst_ufl:.3}; assignment invariant held: {invariant}"
        ),
    )
}

fn logs_of(cfg: &SimConfig, seeds: &[u64]) -> Vec<(String, Vec<u8>)> {
    let dir = tempfile::tempdir().unwrap();
    let b = run_batch(cfg, seeds).unwrap();
    write_logs(dir.path(), &b.runs).unwrap();
    let mut files: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| {
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            (name, std::fs::read(&p).unwrap())
        })
        .collect()
}

fn criterion_10() -> Verdict {
    let mut checked = 0;
    let mut diffs = Vec::new();
    // every bundled scenario and sweep variant, shortened
    for (name, _) in scenarios::BUNDLED {
        for (label, cfg) in variants(name, &[("duration", "1500.0"), ("warmup", "300.0")]) {
            let a = logs_of(&cfg, &[11, 12]);
            let b = logs_of(&cfg, &[11, 12]);
            checked += 1;
            if a != b {
                diffs.push(format!("{name}[{label}]"));
            }
        }
    }
    // one full-length run
    let cfg = scenario("bootstrap", &[("access.mode", "\"scan\"")]);
    checked += 1;
    if logs_of(&cfg, &[1]) != logs_of(&cfg, &[1]) {
        diffs.push("bootstrap full length".into());
    }
    verdict(
        diffs.is_empty(),
        format!("{checked} configurations re-run; differing: {diffs:?}"),
    )
}

fn hist(counts: &[f64]) -> Histogram {
    let mut h = Histogram::equal_width(0.0, counts.len() as f64, counts.len());
    h.counts = counts.to_vec();
    h
}

/// Reference reachability: BFS where replicas absorb the query.
fn reach_oracle(g: &NetworkGraph, origin: usize, replicas: &[bool], h: u32) -> BTreeMap<NodeId, u32> {
    let mut dist = vec![u32::MAX; g.len()];
    let mut out = BTreeMap::new();
    let mut q = VecDeque::from([origin]);
    dist[origin] = 0;
    while let Some(u) = q.pop_front() {
        if dist[u] >= h {
            continue;
        }
        for v in 0..g.len() {
            if dist[v] != u32::MAX || !g.has_edge(g.id_at(u), g.id_at(v)) {
                continue;
            }
            dist[v] = dist[u] + 1;
            if replicas[v] {
                out.insert(g.id_at(v), dist[v]);
            } else {
                q.push_back(v);
            }
        }
    }
    out
}

fn criterion_11() -> Verdict {
    let mut fails = Vec::new();
    let table = [
        (13, Decision::Replicate),
        (10, Decision::Handover),
        (7, Decision::Drop),
        (12, Decision::Handover),
    ];
    for (s, want) in table {
        if decide(s, 10.0, 2.0) != want {
            fails.push(format!("decide({s})"));
        }
    }
    let round2 = |x: f64| (x * 100.0).round() / 100.0;
    if round2(target_replica_count(320, 0.01, 100.0, 10.0).unwrap()) != 29.09 {
        fails.push("target 29.09".into());
    }
    if round2(target_replica_count(320, 0.02, 100.0, 10.0).unwrap()) != 53.33 {
        fails.push("target 53.33".into());
    }
    let same = hist(&[10.0, 20.0, 7.0]);
    if chi_square(&same, &same).unwrap() != 0.0 {
        fails.push("chi2 0".into());
    }
    let third = chi_square(&hist(&[10.0, 20.0]), &hist(&[15.0, 15.0])).unwrap();
    if (third * 1000.0).round() / 1000.0 != 3.333 {
        fails.push(format!("chi2 3.333 got {third}"));
    }
    if chi_square(&hist(&[30.0, 0.0]), &hist(&[15.0, 15.0])).unwrap() != 30.0 {
        fails.push("chi2 30".into());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0xf100d);
    let mut graphs = 0;
    for i in 0..300u64 {
        let n = rng.random_range(2..=12usize);
        let nodes: Vec<(NodeId, Position)> = (0..n)
            .map(|v| {
                let p = Position::new(rng.random::<f64>() * 50.0, rng.random::<f64>() * 50.0);
                (NodeId(v as u32 * 3 + 1), p)
            })
            .collect();
        let g = build_graph(&nodes, 20.0).unwrap();
        let origin = rng.random_range(0..n);
        let replicas: Vec<bool> = (0..n).map(|v| v != origin && rng.random_bool(0.3)).collect();
        let h = rng.random_range(1..=5u32);
        for mode in [AccessMode::Flood, AccessMode::FloodSelective] {
            let q = Query::new(g.id_at(origin), i, mode, 0.0);
            let mut link = LinkLayer::new(0.005, 0.0, ChaCha8Rng::seed_from_u64(i)).unwrap();
            let is_rep = |v: NodeId| replicas[g.index_of(v).unwrap()];
            let got = propagate(&g, &is_rep, &q, h, &mut link);
            let got_map: BTreeMap<NodeId, u32> =
                got.reached.iter().map(|r| (r.replica, r.hops)).collect();
            let paths_ok = got.reached.iter().all(|r| {
                r.path.len() == r.hops as usize
                    && r.path.last() == Some(&r.replica)
                    && std::iter::once(g.id_at(origin))
                        .chain(r.path.iter().copied())
                        .collect::<Vec<_>>()
                        .windows(2)
                        .all(|w| g.has_edge(w[0], w[1]))
            });
            if got_map != reach_oracle(&g, origin, &replicas, h) || !paths_ok {
                fails.push(format!("flood reachability graph {i}"));
            }
        }
        graphs += 1;
    }
    verdict(
        fails.is_empty(),
        format!("decide table, target counts, chi2 hand cases, flood vs BFS on {graphs} graphs; failures: {fails:?}"),
    )
}

/// Shared batches are timed on their own; the criteria reading them report
/// only their own cost.
fn timed<T>(what: &str, f: impl FnOnce() -> T) -> T {
    let t = Instant::now();
    let v = f();
    println!("({what}: {:.0}s)", t.elapsed().as_secs_f64());
    v
}

fn main() {
    let started = Instant::now();
    let mut results: Vec<(u32, &str, Verdict)> = Vec::new();
    let mut record = |id: u32, name: &'static str, f: &mut dyn FnMut() -> Verdict| {
        let t = Instant::now();
        let v = f();
        println!(
            "criterion {id:>2} {} {name} [{:.0}s]\n    {}",
            if v.pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64(),
            v.detail
        );
        results.push((id, name, v));
    };

    record(11, "micro-oracles", &mut criterion_11);
    record(9, "solver guarantees", &mut criterion_9);
    let boot = timed("bootstrap runs, three access modes", bootstrap_runs);
    record(1, "target replica count", &mut || criterion_1(&boot));
    record(3, "load balancing", &mut || criterion_3(&boot));
    drop(boot);
    record(2, "demand doubling", &mut criterion_2);
    let access = timed("handover-only runs, four access modes", access_runs);
    record(4, "hop-distance CDF", &mut || criterion_4(&access));
    record(7, "access metrics", &mut || criterion_7(&access));
    drop(access);
    record(5, "placement fit", &mut criterion_5);
    record(6, "space-varying demand", &mut criterion_6);
    record(8, "convergence monotonicity", &mut criterion_8);
    record(10, "determinism", &mut criterion_10);

    results.sort_by_key(|r| r.0);
    println!("\nsummary ({:.0}s):", started.elapsed().as_secs_f64());
    for (id, name, v) in &results {
        println!("{} criterion {id}: {name}", if v.pass { "PASS" } else { "FAIL" });
    }
    let failed = results.iter().filter(|r| !r.2.pass).count();
    if failed > 0 {
        println!("{failed} of {} criteria failed", results.len());
        std::process::exit(1);
    }
}
