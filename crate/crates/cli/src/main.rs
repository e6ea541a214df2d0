use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use sha2::{Digest, Sha256};

use replisim_core::config::{parse_override, SimConfig};
use replisim_core::engine::run_batch;
use replisim_core::facility::{
    brute_force, degree_proportional_costs, local_search, FacilitySolution, FlInstance, Metric,
    Problem, BRUTE_FORCE_CAP,
};
use replisim_core::geometry::parse_edge_list;
use replisim_core::output::{
    self, max_numeric_diff, read_json, read_summary_inputs, summarize_logs, write_figure_data,
    write_json, write_run_dir, Summary, SummaryParams,
};
use replisim_core::scenarios;
use replisim_core::Error;

const MANIFEST: &str = "manifest.json";
const IDEMPOTENCE_TOL: f64 = 1e-9;

#[derive(Parser)]
#[command(name = "replisim", version, about = "Content replication simulator and facility-location solver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario over several seeds and write the logs.
    Run {
        /// Scenario file, or the name of a bundled scenario.
        #[arg(long)]
        scenario: String,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        /// First seed; defaults to the scenario seed (or REPLISIM_SEED).
        #[arg(long)]
        seed_base: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// KEY=VAL, e.g. replication.s_R=12. Repeatable.
        #[arg(long = "override", value_name = "KEY=VAL")]
        overrides: Vec<String>,
        /// Worker threads (default: all cores).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Solve k-median or facility location on a graph file; JSON to stdout.
    Solve {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long, value_enum)]
        problem: ProblemArg,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, value_enum, default_value_t = MetricArg::Hop)]
        metric: MetricArg,
        /// Exhaustive search (small instances only).
        #[arg(long)]
        exact: bool,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        restarts: usize,
    },
    /// Recompute derived metrics from a run directory and emit plot data.
    Stats { run_dir: PathBuf },
    /// List the bundled scenarios.
    ScenarioList,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProblemArg {
    Kmedian,
    Ufl,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Hop,
    Euclidean,
}

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn config(msg: impl ToString) -> Self {
        Self { code: 2, msg: msg.to_string() }
    }

    fn runtime(msg: impl ToString) -> Self {
        Self { code: 1, msg: msg.to_string() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } | Error::Parse { .. } | Error::InvalidParameter { .. } => {
                Failure::config(e)
            }
            Error::InstanceTooLarge { .. } => Failure { code: 3, msg: e.to_string() },
            other => Failure::runtime(other),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            scenario,
            seeds,
            seed_base,
            out,
            overrides,
            jobs,
        } => cmd_run(&scenario, seeds, seed_base, &out, &overrides, jobs),
        Command::Solve {
            graph,
            problem,
            k,
            metric,
            exact,
            seed,
            restarts,
        } => cmd_solve(&graph, problem, k, metric, exact, seed, restarts),
        Command::Stats { run_dir } => cmd_stats(&run_dir),
        Command::ScenarioList => {
            for (name, text) in scenarios::BUNDLED {
                println!("{name:<20} {}", scenarios::description(text));
            }
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn config_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn cmd_run(
    scenario: &str,
    n_seeds: u64,
    seed_base: Option<u64>,
    out: &Path,
    raw_overrides: &[String],
    jobs: Option<usize>,
) -> Result<(), Failure> {
    let overrides = raw_overrides
        .iter()
        .map(|s| parse_override(s))
        .collect::<Result<Vec<_>, _>>()?;
    let mut cfg = scenarios::load(scenario, &overrides)?;
    cfg.apply_env_seed()?;
    if n_seeds == 0 {
        return Err(Failure::config("--seeds must be at least 1"));
    }
    let base = seed_base.unwrap_or(cfg.seed);
    let seeds: Vec<u64> = (base..base + n_seeds).collect();
    let variants = cfg.variants()?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(Failure::runtime)?;

    for (label, variant) in &variants {
        let dir = if label.is_empty() { out.to_path_buf() } else { out.join(label) };
        let batch = pool.install(|| run_batch(variant, &seeds))?;
        let summary = write_run_dir(&dir, SummaryParams::from_config(variant), &batch.runs)
            .map_err(Failure::runtime)?;
        write_manifest(&dir, scenario, label, variant, &seeds, raw_overrides)?;
        report(label, &summary);
    }
    Ok(())
}

fn write_manifest(
    dir: &Path,
    scenario: &str,
    label: &str,
    cfg: &SimConfig,
    seeds: &[u64],
    overrides: &[String],
) -> Result<(), Failure> {
    let text = cfg.to_toml_string();
    let manifest = json!({
        "name": cfg.name,
        "scenario": scenario,
        "variant": label,
        "config_sha256": config_hash(&text),
        "config": text,
        "seeds": seeds,
        "overrides": overrides,
        "versions": {
            "replisim": env!("CARGO_PKG_VERSION"),
        },
    });
    write_json(&dir.join(MANIFEST), &manifest).map_err(Failure::runtime)
}

fn fmt(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

fn report(label: &str, s: &Summary) {
    let last = s.mean_series.last().map(|(_, c)| *c);
    let steady = {
        let tail: Vec<f64> = s
            .seeds
            .iter()
            .filter_map(|x| x.mean_replicas)
            .collect();
        (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64)
    };
    println!(
        "{}final_replicas={} mean_replicas={} target={} solving_ratio={} mean_workload={} convergence={}",
        if label.is_empty() { String::new() } else { format!("[{label}] ") },
        fmt(last),
        fmt(steady),
        fmt(s.target),
        fmt(s.mean_solving_ratio),
        fmt(s.mean_workload),
        fmt(s.convergence),
    );
}

fn cmd_stats(dir: &Path) -> Result<(), Failure> {
    if !dir.is_dir() {
        return Err(Failure::config(format!("no such run directory: {}", dir.display())));
    }
    let mut targets = Vec::new();
    if dir.join(MANIFEST).exists() {
        targets.push(dir.to_path_buf());
    } else {
        let mut subs: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(Failure::runtime)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(MANIFEST).exists())
            .collect();
        subs.sort();
        targets.extend(subs);
    }
    if targets.is_empty() {
        return Err(Failure::config(format!("{} holds no run artifacts", dir.display())));
    }
    for t in targets {
        stats_one(&t)?;
    }
    Ok(())
}

fn stats_one(dir: &Path) -> Result<(), Failure> {
    for f in [output::SNAPSHOTS, output::ACCESS, output::WORKLOAD, output::DECISIONS, output::SUMMARY] {
        if !dir.join(f).exists() {
            return Err(Failure::config(format!("missing {} in {}", f, dir.display())));
        }
    }
    let stored: Summary = read_json(&dir.join(output::SUMMARY))?;
    let (snaps, queries, workload) = read_summary_inputs(dir)?;
    let again = summarize_logs(stored.params, &snaps, &queries, &workload);
    match max_numeric_diff(&stored, &again) {
        Some(d) if d <= IDEMPOTENCE_TOL => {}
        Some(d) => {
            return Err(Failure::runtime(format!(
                "{}: recomputed metrics differ from stored ones by {d}",
                dir.display()
            )))
        }
        None => {
            return Err(Failure::runtime(format!(
                "{}: recomputed metrics do not match the stored layout",
                dir.display()
            )))
        }
    }
    let decisions = output::read_decisions(&dir.join(output::DECISIONS))?;
    let fig_dir = dir.join("figures");
    std::fs::create_dir_all(&fig_dir).map_err(Failure::runtime)?;
    let written = write_figure_data(&fig_dir, &again, &snaps, &decisions)?;

    println!("{}", dir.display());
    println!("  solving ratio: {}", fmt(again.mean_solving_ratio));
    match &again.workload {
        Some(q) => println!(
            "  workload: min {} q25 {} q50 {} q75 {} max {} mean {:.4}",
            q.min, q.values[0], q.values[1], q.values[2], q.max, q.mean
        ),
        None => println!("  workload: n/a"),
    }
    println!("  convergence: {}", fmt(again.convergence));
    println!("  figure data: {}", written.join(", "));
    Ok(())
}

fn cmd_solve(
    graph: &Path,
    problem: ProblemArg,
    k: Option<usize>,
    metric: MetricArg,
    exact: bool,
    seed: u64,
    restarts: usize,
) -> Result<(), Failure> {
    let text = std::fs::read_to_string(graph)
        .map_err(|e| Failure::config(format!("{}: {e}", graph.display())))?;
    let file = parse_edge_list(&text)?;
    let metric = match metric {
        MetricArg::Hop => Metric::HopCount,
        MetricArg::Euclidean => Metric::Euclidean,
    };
    let problem = match problem {
        ProblemArg::Kmedian => Problem::KMedian {
            k: k.ok_or_else(|| Failure::config("--k is required for kmedian"))?,
        },
        ProblemArg::Ufl => Problem::Ufl,
    };
    let mut inst = FlInstance::new(&file.graph, metric).with_demand(&file.demand)?;
    if problem == Problem::Ufl {
        let costs = if file.costs.is_empty() {
            degree_proportional_costs(&file.graph, 1.0)?
        } else {
            file.costs.clone()
        };
        inst = inst.with_costs(&costs)?;
    }
    if exact && inst.len() > BRUTE_FORCE_CAP {
        return Err(Error::InstanceTooLarge {
            nodes: inst.len(),
            cap: BRUTE_FORCE_CAP,
        }
        .into());
    }
    let sol: FacilitySolution = if exact {
        brute_force(&inst, problem)?
    } else {
        local_search(&inst, problem, seed, restarts)?
    };
    let out = json!({
        "problem": problem,
        "metric": metric,
        "exact": exact,
        "facilities": sol.facilities,
        "assignment": sol.assignment,
        "cost": sol.cost,
    });
    println!("{}", serde_json::to_string_pretty(&out).map_err(Failure::runtime)?);
    Ok(())
}
