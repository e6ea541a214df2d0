//! Run artifacts: CSV logs, derived summaries and gnuplot-ready tables.
//!
//! Rows are ordered by seed, then time, then node id. Floats are written in
//! shortest round-trip form, so summaries recomputed from the files match
//! the in-memory values exactly.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::access::AccessMode;
use crate::engine::{RunResult, ACCESS_WINDOW};
use crate::error::{Error, Result};
use crate::geometry::NodeId;
use crate::replication::Decision;
use crate::stats::{
    access_metrics, convergence_time, workload_quantiles, AccessMetrics, DecisionRecord,
    QueryOutcome, QueryRecord, Quantiles, SnapshotMetrics, WorkloadRecord,
};

pub const SNAPSHOTS: &str = "snapshots.csv";
pub const ACCESS: &str = "access.csv";
pub const WORKLOAD: &str = "workload.csv";
pub const DECISIONS: &str = "decisions.csv";
pub const CONVERGENCE: &str = "convergence.json";
pub const SUMMARY: &str = "summary.json";

#[derive(Debug, Serialize, Deserialize)]
struct SnapshotRow {
    seed: u64,
    t: f64,
    replicas: usize,
    target: Option<f64>,
    chi2_nodal: Option<f64>,
    chi2_spatial: Option<f64>,
    chi2_optimal: Option<f64>,
    chi2_nodal_region: Option<f64>,
    hop_cdf1: Option<f64>,
    hop_cdf2: Option<f64>,
    replicas_in_region: Option<f64>,
    nodes_in_region: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct QueryRow {
    seed: u64,
    t_issue: f64,
    origin: u32,
    mode: String,
    outcome: String,
    latency: Option<f64>,
    replies: u32,
    hops: Option<u32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct WorkloadRow {
    seed: u64,
    t: f64,
    node: u32,
    served: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct DecisionRow {
    seed: u64,
    t: f64,
    node: u32,
    served: u64,
    decision: String,
    replicas_after: usize,
}

fn sorted_by_seed(runs: &[RunResult]) -> Vec<&RunResult> {
    let mut v: Vec<&RunResult> = runs.iter().collect();
    v.sort_by_key(|r| r.seed);
    v
}

fn writer(path: &Path) -> Result<csv::Writer<File>> {
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)?)
}

/// Writes snapshots, access, workload and decision logs into `dir`.
pub fn write_logs(dir: &Path, runs: &[RunResult]) -> Result<()> {
    let runs = sorted_by_seed(runs);

    let mut w = writer(&dir.join(SNAPSHOTS))?;
    for r in &runs {
        for s in &r.snapshots {
            w.serialize(SnapshotRow {
                seed: r.seed,
                t: s.t,
                replicas: s.replica_count,
                target: s.target,
                chi2_nodal: s.chi2_vs_nodal,
                chi2_spatial: s.chi2_vs_spatial,
                chi2_optimal: s.chi2_vs_optimal,
                chi2_nodal_region: s.chi2_vs_nodal_region,
                hop_cdf1: s.hop_cdf1,
                hop_cdf2: s.hop_cdf2,
                replicas_in_region: s.replicas_in_region,
                nodes_in_region: s.nodes_in_region,
            })?;
        }
    }
    w.flush()?;

    let mut w = writer(&dir.join(ACCESS))?;
    for r in &runs {
        for q in &r.queries {
            w.serialize(QueryRow {
                seed: r.seed,
                t_issue: q.t_issue,
                origin: q.origin.0,
                mode: q.mode.label().into(),
                outcome: q.outcome.label().into(),
                latency: q.latency,
                replies: q.replies,
                hops: q.hops,
            })?;
        }
    }
    w.flush()?;

    let mut w = writer(&dir.join(WORKLOAD))?;
    for r in &runs {
        let mut rows = r.workload.clone();
        rows.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.node.cmp(&b.node)));
        for x in rows {
            w.serialize(WorkloadRow {
                seed: r.seed,
                t: x.t,
                node: x.node.0,
                served: x.served,
            })?;
        }
    }
    w.flush()?;

    let mut w = writer(&dir.join(DECISIONS))?;
    for r in &runs {
        // stable sort keeps event order among same-time decisions
        let mut rows = r.decisions.clone();
        rows.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.node.cmp(&b.node)));
        for d in rows {
            w.serialize(DecisionRow {
                seed: r.seed,
                t: d.t,
                node: d.node.0,
                served: d.served,
                decision: d.decision.label().into(),
                replicas_after: d.replicas_after,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    Ok(csv::Reader::from_path(path)?)
}

fn bad_label(what: &str, value: &str) -> Error {
    Error::Parse {
        line: 0,
        msg: format!("unknown {what} `{value}`"),
    }
}

pub fn read_snapshots(path: &Path) -> Result<Vec<(u64, SnapshotMetrics)>> {
    let mut out = Vec::new();
    for row in reader(path)?.deserialize() {
        let r: SnapshotRow = row?;
        out.push((
            r.seed,
            SnapshotMetrics {
                t: r.t,
                replica_count: r.replicas,
                target: r.target,
                chi2_vs_nodal: r.chi2_nodal,
                chi2_vs_spatial: r.chi2_spatial,
                chi2_vs_optimal: r.chi2_optimal,
                chi2_vs_nodal_region: r.chi2_nodal_region,
                hop_cdf1: r.hop_cdf1,
                hop_cdf2: r.hop_cdf2,
                replicas_in_region: r.replicas_in_region,
                nodes_in_region: r.nodes_in_region,
            },
        ));
    }
    Ok(out)
}

pub fn read_queries(path: &Path) -> Result<Vec<(u64, QueryRecord)>> {
    let mut out = Vec::new();
    for row in reader(path)?.deserialize() {
        let r: QueryRow = row?;
        out.push((
            r.seed,
            QueryRecord {
                t_issue: r.t_issue,
                origin: NodeId(r.origin),
                mode: AccessMode::from_label(&r.mode).ok_or_else(|| bad_label("mode", &r.mode))?,
                outcome: QueryOutcome::from_label(&r.outcome)
                    .ok_or_else(|| bad_label("outcome", &r.outcome))?,
                latency: r.latency,
                replies: r.replies,
                hops: r.hops,
            },
        ));
    }
    Ok(out)
}

pub fn read_workload(path: &Path) -> Result<Vec<(u64, WorkloadRecord)>> {
    let mut out = Vec::new();
    for row in reader(path)?.deserialize() {
        let r: WorkloadRow = row?;
        out.push((
            r.seed,
            WorkloadRecord {
                t: r.t,
                node: NodeId(r.node),
                served: r.served,
            },
        ));
    }
    Ok(out)
}

pub fn read_decisions(path: &Path) -> Result<Vec<(u64, DecisionRecord)>> {
    let mut out = Vec::new();
    for row in reader(path)?.deserialize() {
        let r: DecisionRow = row?;
        out.push((
            r.seed,
            DecisionRecord {
                t: r.t,
                node: NodeId(r.node),
                served: r.served,
                decision: Decision::from_label(&r.decision)
                    .ok_or_else(|| bad_label("decision", &r.decision))?,
                replicas_after: r.replicas_after,
            },
        ));
    }
    Ok(out)
}

/// Settings that shape the derived metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryParams {
    pub warmup: f64,
    pub convergence_tol: f64,
    pub convergence_window: usize,
}

impl SummaryParams {
    pub fn from_config(cfg: &crate::config::SimConfig) -> Self {
        Self {
            warmup: cfg.warmup,
            convergence_tol: cfg.output.convergence_tol,
            convergence_window: cfg.output.convergence_window,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub access: AccessMetrics,
    pub workload: Option<Quantiles>,
    pub convergence: Option<f64>,
    /// Mean |C| over snapshots after warm-up.
    pub mean_replicas: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub params: SummaryParams,
    pub target: Option<f64>,
    pub seeds: Vec<SeedSummary>,
    pub mean_series: Vec<(f64, f64)>,
    pub convergence: Option<f64>,
    pub mean_solving_ratio: Option<f64>,
    pub mean_workload: Option<f64>,
    pub workload: Option<Quantiles>,
}

fn group<T: Clone>(rows: &[(u64, T)]) -> BTreeMap<u64, Vec<T>> {
    let mut m: BTreeMap<u64, Vec<T>> = BTreeMap::new();
    for (s, x) in rows {
        m.entry(*s).or_default().push(x.clone());
    }
    m
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Derived metrics from the raw logs.
pub fn summarize_logs(
    params: SummaryParams,
    snapshots: &[(u64, SnapshotMetrics)],
    queries: &[(u64, QueryRecord)],
    workload: &[(u64, WorkloadRecord)],
) -> Summary {
    let snaps = group(snapshots);
    let qs = group(queries);
    let wl = group(workload);
    let target = snapshots.first().and_then(|(_, s)| s.target);

    let mut seeds = Vec::new();
    for (&seed, series) in &snaps {
        let points: Vec<(f64, f64)> = series.iter().map(|s| (s.t, s.replica_count as f64)).collect();
        let convergence = target.and_then(|tg| {
            convergence_time(
                &points,
                tg,
                params.convergence_tol,
                params.convergence_window,
                params.warmup,
            )
        });
        let empty = Vec::new();
        let w = wl.get(&seed).unwrap_or(&empty);
        seeds.push(SeedSummary {
            seed,
            access: access_metrics(qs.get(&seed).map_or(&[][..], |v| &v[..]), ACCESS_WINDOW),
            workload: workload_quantiles(w),
            convergence,
            mean_replicas: mean(
                series
                    .iter()
                    .filter(|s| s.t > params.warmup)
                    .map(|s| s.replica_count as f64),
            ),
        });
    }

    let len = snaps.values().map(Vec::len).min().unwrap_or(0);
    let mean_series: Vec<(f64, f64)> = (0..len)
        .map(|i| {
            let t = snaps.values().next().expect("non-empty")[i].t;
            let c = snaps.values().map(|v| v[i].replica_count as f64).sum::<f64>()
                / snaps.len() as f64;
            (t, c)
        })
        .collect();
    let convergence = target.and_then(|tg| {
        convergence_time(
            &mean_series,
            tg,
            params.convergence_tol,
            params.convergence_window,
            params.warmup,
        )
    });
    let all_wl: Vec<WorkloadRecord> = workload.iter().map(|(_, w)| *w).collect();
    Summary {
        params,
        target,
        mean_solving_ratio: mean(seeds.iter().filter_map(|s| s.access.solving_ratio)),
        mean_workload: mean(all_wl.iter().map(|w| w.served as f64)),
        workload: workload_quantiles(&all_wl),
        seeds,
        mean_series,
        convergence,
    }
}

/// Summary straight from in-memory runs, identical to reading the logs back.
pub fn summarize_runs(params: SummaryParams, runs: &[RunResult]) -> Summary {
    let runs = sorted_by_seed(runs);
    let snaps: Vec<(u64, SnapshotMetrics)> = runs
        .iter()
        .flat_map(|r| r.snapshots.iter().map(|s| (r.seed, s.clone())))
        .collect();
    let qs: Vec<(u64, QueryRecord)> = runs
        .iter()
        .flat_map(|r| r.queries.iter().map(|q| (r.seed, q.clone())))
        .collect();
    let wl: Vec<(u64, WorkloadRecord)> = runs
        .iter()
        .flat_map(|r| {
            let mut v = r.workload.clone();
            v.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.node.cmp(&b.node)));
            v.into_iter().map(|w| (r.seed, w)).collect::<Vec<_>>()
        })
        .collect();
    summarize_logs(params, &snaps, &qs, &wl)
}

pub fn read_summary_inputs(
    dir: &Path,
) -> Result<(
    Vec<(u64, SnapshotMetrics)>,
    Vec<(u64, QueryRecord)>,
    Vec<(u64, WorkloadRecord)>,
)> {
    Ok((
        read_snapshots(&dir.join(SNAPSHOTS))?,
        read_queries(&dir.join(ACCESS))?,
        read_workload(&dir.join(WORKLOAD))?,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub target: Option<f64>,
    pub tolerance: f64,
    pub window: usize,
    pub per_seed: BTreeMap<u64, Option<f64>>,
    pub batch: Option<f64>,
}

impl From<&Summary> for ConvergenceReport {
    fn from(s: &Summary) -> Self {
        Self {
            target: s.target,
            tolerance: s.params.convergence_tol,
            window: s.params.convergence_window,
            per_seed: s.seeds.iter().map(|x| (x.seed, x.convergence)).collect(),
            batch: s.convergence,
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse {
        line: 0,
        msg: e.to_string(),
    })?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        msg: e.to_string(),
    })
}

/// Largest absolute difference between numbers at matching positions of two
/// JSON-serializable values; `None` if their shapes differ.
pub fn max_numeric_diff<T: Serialize>(a: &T, b: &T) -> Option<f64> {
    fn walk(a: &serde_json::Value, b: &serde_json::Value) -> Option<f64> {
        use serde_json::Value::*;
        match (a, b) {
            (Number(x), Number(y)) => Some((x.as_f64()? - y.as_f64()?).abs()),
            (Array(x), Array(y)) if x.len() == y.len() => x
                .iter()
                .zip(y)
                .try_fold(0.0f64, |m, (p, q)| Some(m.max(walk(p, q)?))),
            (Object(x), Object(y)) if x.len() == y.len() => {
                x.iter().try_fold(0.0f64, |m, (k, p)| Some(m.max(walk(p, y.get(k)?)?)))
            }
            _ if a == b => Some(0.0),
            _ => None,
        }
    }
    walk(&serde_json::to_value(a).ok()?, &serde_json::to_value(b).ok()?)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "NaN".to_string(), |v| v.to_string())
}

fn mean_by_time(
    snapshots: &[(u64, SnapshotMetrics)],
    pick: impl Fn(&SnapshotMetrics) -> Option<f64>,
) -> BTreeMap<u64, Option<f64>> {
    let mut acc: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for (_, s) in snapshots {
        let e = acc.entry(s.t.to_bits()).or_default();
        if let Some(v) = pick(s) {
            e.0 += v;
            e.1 += 1;
        }
    }
    acc.into_iter()
        .map(|(k, (s, n))| (k, (n > 0).then(|| s / n as f64)))
        .collect()
}

fn quantile_line(name: &str, q: &Option<Quantiles>) -> String {
    match q {
        Some(q) => format!(
            "{name} {} {} {} {} {} {}",
            q.min,
            q.values.first().copied().unwrap_or(f64::NAN),
            q.values.get(1).copied().unwrap_or(f64::NAN),
            q.values.get(2).copied().unwrap_or(f64::NAN),
            q.max,
            q.mean
        ),
        None => format!("{name} NaN NaN NaN NaN NaN NaN"),
    }
}

/// Whitespace-separated tables, one per figure family, written into `dir`.
pub fn write_figure_data(
    dir: &Path,
    summary: &Summary,
    snapshots: &[(u64, SnapshotMetrics)],
    decisions: &[(u64, DecisionRecord)],
) -> Result<Vec<String>> {
    let mut written = Vec::new();
    let mut emit = |name: &str, body: String| -> Result<()> {
        std::fs::write(dir.join(name), body)?;
        written.push(name.to_string());
        Ok(())
    };

    let targets = mean_by_time(snapshots, |s| s.target);
    let mut body = String::from("# t mean_replicas target\n");
    for (t, c) in &summary.mean_series {
        let tg = targets.get(&t.to_bits()).copied().flatten();
        body.push_str(&format!("{t} {c} {}\n", fmt_opt(tg)));
    }
    emit("replicas.dat", body)?;

    let cols: [(&str, fn(&SnapshotMetrics) -> Option<f64>); 8] = [
        ("chi2_nodal", |s| s.chi2_vs_nodal),
        ("chi2_spatial", |s| s.chi2_vs_spatial),
        ("chi2_optimal", |s| s.chi2_vs_optimal),
        ("chi2_nodal_region", |s| s.chi2_vs_nodal_region),
        ("hop_cdf1", |s| s.hop_cdf1),
        ("hop_cdf2", |s| s.hop_cdf2),
        ("replicas_in_region", |s| s.replicas_in_region),
        ("nodes_in_region", |s| s.nodes_in_region),
    ];
    let columns: Vec<BTreeMap<u64, Option<f64>>> =
        cols.iter().map(|(_, f)| mean_by_time(snapshots, f)).collect();
    let mut body = String::from("# t");
    for (name, _) in &cols {
        body.push(' ');
        body.push_str(name);
    }
    body.push('\n');
    for (bits, first) in &columns[0] {
        let t = f64::from_bits(*bits);
        if t <= summary.params.warmup {
            continue;
        }
        body.push_str(&t.to_string());
        body.push_str(&format!(" {}", fmt_opt(*first)));
        for col in &columns[1..] {
            body.push_str(&format!(" {}", fmt_opt(col.get(bits).copied().flatten())));
        }
        body.push('\n');
    }
    emit("placement.dat", body)?;

    let mut body = String::from("# seed metric min q25 q50 q75 max mean\n");
    for s in &summary.seeds {
        body.push_str(&format!("{} {}\n", s.seed, quantile_line("solving_ratio", &s.access.window_solving_ratio)));
        body.push_str(&format!("{} {}\n", s.seed, quantile_line("redundancy", &s.access.redundancy)));
        body.push_str(&format!("{} {}\n", s.seed, quantile_line("latency", &s.access.latency)));
    }
    emit("access.dat", body)?;

    let mut body = String::from("# metric min q25 q50 q75 max mean\n");
    body.push_str(&quantile_line("served", &summary.workload));
    body.push('\n');
    emit("workload.dat", body)?;

    // replicate/drop ratio per 1000 s, handovers omitted
    let mut bins: BTreeMap<i64, (usize, usize)> = BTreeMap::new();
    for (_, d) in decisions {
        let e = bins.entry((d.t / 1000.0).floor() as i64).or_default();
        match d.decision {
            Decision::Replicate => e.0 += 1,
            Decision::Drop => e.1 += 1,
            Decision::Handover => {}
        }
    }
    let mut body = String::from("# t_start replicate drop ratio\n");
    for (k, (r, d)) in bins {
        let ratio = if d > 0 { (r as f64 / d as f64).to_string() } else { "NaN".into() };
        body.push_str(&format!("{} {r} {d} {ratio}\n", k * 1000));
    }
    emit("repdrop.dat", body)?;

    Ok(written)
}

/// Everything a run directory holds besides the manifest.
pub fn write_run_dir(dir: &Path, params: SummaryParams, runs: &[RunResult]) -> Result<Summary> {
    std::fs::create_dir_all(dir)?;
    write_logs(dir, runs)?;
    let summary = summarize_runs(params, runs);
    write_json(&dir.join(SUMMARY), &summary)?;
    write_json(&dir.join(CONVERGENCE), &ConvergenceReport::from(&summary))?;
    Ok(summary)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}
