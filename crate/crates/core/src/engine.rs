//! Discrete-event loop tying mobility, access and replication together.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;

use crate::access::{
    backtrack_reply, closest_replica, propagate, retry_controller, scan_schedule,
    selective_reply_probability, AccessMode, AttemptOutcome, BacktrackOutcome, LinkLayer, Query,
    Reply, RetryAction, ScanStep,
};
use crate::config::{DemandProfile, MobilityModel, SimConfig};
use crate::error::Result;
use crate::facility::{local_search, FlInstance, Metric, Problem};
use crate::geometry::{build_graph, Area, NetworkGraph, NodeId, Position, Region};
use crate::mobility::{generate_trace, MobilityTrace, PositionSource};
use crate::replication::{decide, on_period_expiry, target_replica_count, Decision, ReplicaSet};
use crate::rng::{stream_rng, sub_seed, Stream};
use crate::stats::{
    access_metrics, chi_square, convergence_time, hop_cdf, interdistance_samples,
    nodal_uniform_reference, spatial_uniform_reference, AccessMetrics, DecisionRecord, Histogram,
    QueryOutcome, QueryRecord, SnapshotMetrics, WorkloadRecord,
};

/// Event kinds in tie-break priority order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EventKind {
    PeriodExpiry,
    DemandSwitch,
    QueryIssue,
    HopForward,
    ReplyHop,
    SectorTimeout,
    AttemptTimeout,
    Snapshot,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    PeriodExpiry { node: NodeId, epoch: u64 },
    DemandSwitch { phase: usize },
    QueryIssue { node: NodeId },
    /// Query arrives at a replica.
    HopForward {
        tx: u64,
        seq: u64,
        replica: NodeId,
        hops: u32,
        path: Vec<NodeId>,
    },
    /// Reply reaches the consumer.
    ReplyHop { tx: u64, replica: NodeId, hops: u32 },
    SectorTimeout { tx: u64, step: usize },
    AttemptTimeout { tx: u64, attempt: usize },
    Snapshot,
}

impl Payload {
    pub fn kind(&self) -> EventKind {
        match self {
            Payload::PeriodExpiry { .. } => EventKind::PeriodExpiry,
            Payload::DemandSwitch { .. } => EventKind::DemandSwitch,
            Payload::QueryIssue { .. } => EventKind::QueryIssue,
            Payload::HopForward { .. } => EventKind::HopForward,
            Payload::ReplyHop { .. } => EventKind::ReplyHop,
            Payload::SectorTimeout { .. } => EventKind::SectorTimeout,
            Payload::AttemptTimeout { .. } => EventKind::AttemptTimeout,
            Payload::Snapshot => EventKind::Snapshot,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Event {
    pub time: f64,
    pub seq: u64,
    pub payload: Payload,
}

impl Event {
    fn order_key(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then(self.payload.kind().cmp(&other.payload.kind()))
            .then(self.seq.cmp(&other.seq))
    }
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.order_key(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        other.order_key(self)
    }
}

/// Min-queue on (time, kind priority, insertion order).
#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<Event>,
    next_seq: u64,
}

impl EventQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, time: f64, payload: Payload) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Event { time, seq, payload });
    }

    pub fn pop(&mut self) -> Option<Event> {
        self.heap.pop()
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

/// Aggregate Poisson arrivals over `candidates`, each picked uniformly,
/// which is the superposition of per-node processes at the phase rate.
pub struct DemandGenerator {
    profile: DemandProfile,
    candidates: Vec<NodeId>,
    rng: ChaCha8Rng,
    t: f64,
    duration: f64,
}

impl DemandGenerator {
    pub fn new(profile: DemandProfile, candidates: Vec<NodeId>, duration: f64, seed: u64) -> Self {
        Self {
            profile,
            candidates,
            rng: stream_rng(seed, Stream::Demand),
            t: 0.0,
            duration,
        }
    }

    pub fn next_arrival(&mut self) -> Option<(f64, NodeId)> {
        if self.candidates.is_empty() {
            return None;
        }
        loop {
            if self.t > self.duration {
                return None;
            }
            let idx = self.profile.phase_index_at(self.t);
            let rate = self.profile.phases[idx].rate * self.candidates.len() as f64;
            let next_start = self.profile.phases.get(idx + 1).map(|p| p.start);
            if rate <= 0.0 {
                match next_start {
                    Some(s) => {
                        self.t = s;
                        continue;
                    }
                    None => return None,
                }
            }
            let gap = Exp::new(rate).expect("positive rate").sample(&mut self.rng);
            let at = self.t + gap;
            if let Some(s) = next_start {
                if at >= s {
                    // memoryless: restart the clock at the phase boundary
                    self.t = s;
                    continue;
                }
            }
            self.t = at;
            if at > self.duration {
                return None;
            }
            let node = self.candidates[self.rng.random_range(0..self.candidates.len())];
            return Some((at, node));
        }
    }
}

/// All query issue times over `[0, duration]` for `consumers`, honoring the
/// region of each phase with the given positions.
pub fn generate_demand(
    profile: &DemandProfile,
    consumers: &[NodeId],
    positions: &dyn PositionSource,
    duration: f64,
    seed: u64,
) -> Vec<(f64, NodeId)> {
    let mut gen = DemandGenerator::new(profile.clone(), consumers.to_vec(), duration, seed);
    let mut out = Vec::new();
    while let Some((t, node)) = gen.next_arrival() {
        if let Some(region) = profile.phase_at(t).region {
            if !region.contains(positions.locate(node, t)) {
                continue;
            }
        }
        out.push((t, node));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub seed: u64,
    pub snapshots: Vec<SnapshotMetrics>,
    pub queries: Vec<QueryRecord>,
    pub workload: Vec<WorkloadRecord>,
    pub decisions: Vec<DecisionRecord>,
    pub access: AccessMetrics,
    pub convergence: Option<f64>,
    pub initial_target: f64,
    pub events: u64,
    /// Largest number of rebroadcasts seen in a single attempt.
    pub max_transmissions: usize,
}

impl RunResult {
    /// Mean |C| over snapshots with `t` in `[from, to]`.
    pub fn mean_replicas(&self, from: f64, to: f64) -> Option<f64> {
        mean(
            self.snapshots
                .iter()
                .filter(|s| s.t >= from && s.t <= to)
                .map(|s| s.replica_count as f64),
        )
    }

    pub fn replica_series(&self) -> Vec<(f64, f64)> {
        self.snapshots
            .iter()
            .map(|s| (s.t, s.replica_count as f64))
            .collect()
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchResult {
    pub runs: Vec<RunResult>,
    /// Seed-averaged |C| per snapshot time.
    pub mean_series: Vec<(f64, f64)>,
    pub convergence: Option<f64>,
    pub mean_solving_ratio: Option<f64>,
    pub mean_workload: Option<f64>,
}

impl BatchResult {
    /// Variance across runs of the per-run mean |C| over `[from, to]`.
    pub fn replica_variance(&self, from: f64, to: f64) -> Option<f64> {
        let ms: Vec<f64> = self.runs.iter().filter_map(|r| r.mean_replicas(from, to)).collect();
        let m = mean(ms.iter().copied())?;
        Some(ms.iter().map(|x| (x - m).powi(2)).sum::<f64>() / ms.len() as f64)
    }

    pub fn mean_replicas(&self, from: f64, to: f64) -> Option<f64> {
        mean(
            self.mean_series
                .iter()
                .filter(|(t, _)| *t >= from && *t <= to)
                .map(|(_, c)| *c),
        )
    }
}

pub fn run_batch(cfg: &SimConfig, seeds: &[u64]) -> Result<BatchResult> {
    let runs: Vec<RunResult> = seeds
        .par_iter()
        .map(|&s| run(cfg, s))
        .collect::<Result<_>>()?;
    Ok(summarize(cfg, runs))
}

pub fn summarize(cfg: &SimConfig, runs: Vec<RunResult>) -> BatchResult {
    let len = runs.iter().map(|r| r.snapshots.len()).min().unwrap_or(0);
    let mean_series: Vec<(f64, f64)> = (0..len)
        .map(|i| {
            let t = runs[0].snapshots[i].t;
            let c = runs.iter().map(|r| r.snapshots[i].replica_count as f64).sum::<f64>()
                / runs.len() as f64;
            (t, c)
        })
        .collect();
    let convergence = runs.first().and_then(|r| {
        convergence_time(
            &mean_series,
            r.initial_target,
            cfg.output.convergence_tol,
            cfg.output.convergence_window,
            cfg.warmup,
        )
    });
    let mean_solving_ratio = mean(runs.iter().filter_map(|r| r.access.solving_ratio));
    let mean_workload = mean(
        runs.iter()
            .flat_map(|r| r.workload.iter().map(|w| w.served as f64)),
    );
    BatchResult {
        runs,
        mean_series,
        convergence,
        mean_solving_ratio,
        mean_workload,
    }
}

/// Solving-ratio window length in seconds.
pub const ACCESS_WINDOW: f64 = 100.0;

pub fn run(cfg: &SimConfig, seed: u64) -> Result<RunResult> {
    cfg.validate()?;
    Sim::new(cfg, seed)?.execute()
}

struct Topology {
    at: Option<f64>,
    graph: Option<NetworkGraph>,
    frozen: bool,
    range: f64,
}

impl Topology {
    fn get(&mut self, t: f64, trace: &MobilityTrace) -> &NetworkGraph {
        let fresh = self.graph.is_some() && (self.frozen || self.at == Some(t));
        if !fresh {
            let nodes: Vec<(NodeId, Position)> = trace
                .snapshot(t)
                .into_iter()
                .enumerate()
                .map(|(i, p)| (NodeId(i as u32), p))
                .collect();
            self.graph = Some(build_graph(&nodes, self.range).expect("distinct ids"));
            self.at = Some(t);
        }
        self.graph.as_ref().expect("built above")
    }
}

struct Tx {
    origin: NodeId,
    t_first: f64,
    attempts: Vec<AttemptOutcome>,
    step: usize,
    first_reply: Option<(f64, u32)>,
    repliers: BTreeSet<NodeId>,
    record: bool,
}

struct Sim<'c> {
    cfg: &'c SimConfig,
    seed: u64,
    n: usize,
    area: Area,
    trace: MobilityTrace,
    topo: Topology,
    replicas: ReplicaSet,
    queue: EventQueue,
    demand: DemandGenerator,
    profile: DemandProfile,
    phase: usize,
    link: LinkLayer,
    rwd_rng: ChaCha8Rng,
    sel_rng: ChaCha8Rng,
    ref_rng: ChaCha8Rng,
    schedule: Vec<ScanStep>,
    txs: BTreeMap<u64, Tx>,
    next_tx: u64,
    next_seq: Vec<u64>,
    queries: Vec<QueryRecord>,
    workload: Vec<WorkloadRecord>,
    decisions: Vec<DecisionRecord>,
    snapshots: Vec<SnapshotMetrics>,
    max_transmissions: usize,
    optimal_cache: Option<(usize, Vec<NodeId>)>,
    events: u64,
}

impl<'c> Sim<'c> {
    fn new(cfg: &'c SimConfig, seed: u64) -> Result<Self> {
        let area = cfg.area()?;
        let n = cfg.network.nodes;
        let trace = match cfg.mobility.model {
            MobilityModel::RandomWaypoint => generate_trace(
                area,
                n,
                cfg.mobility.speed,
                cfg.mobility.pause,
                cfg.duration,
                seed,
            )?,
            MobilityModel::Static => {
                let mut rng = stream_rng(seed, Stream::Mobility);
                let pts: Vec<Position> = (0..n)
                    .map(|_| {
                        Position::new(
                            rng.random::<f64>() * area.width,
                            rng.random::<f64>() * area.height,
                        )
                    })
                    .collect();
                MobilityTrace::stationary(area, &pts, cfg.duration)
            }
        };
        let frozen = trace.is_static();
        let profile = cfg.demand_profile();
        let all: Vec<NodeId> = (0..n as u32).map(NodeId).collect();
        let a = &cfg.access;
        Ok(Self {
            cfg,
            seed,
            n,
            area,
            topo: Topology {
                at: None,
                graph: None,
                frozen,
                range: cfg.network.range,
            },
            trace,
            replicas: ReplicaSet::new(n),
            queue: EventQueue::new(),
            demand: DemandGenerator::new(profile.clone(), all, cfg.duration, seed),
            profile,
            phase: 0,
            link: LinkLayer::new(a.per_hop_delay, a.per_hop_loss, stream_rng(seed, Stream::Link))?,
            rwd_rng: stream_rng(seed, Stream::Rwd),
            sel_rng: stream_rng(seed, Stream::SelectiveReply),
            ref_rng: stream_rng(seed, Stream::Reference),
            schedule: scan_schedule(a.sectors, a.sector_timeout, a.scan_rounds, a.scan_start_angle),
            txs: BTreeMap::new(),
            next_tx: 0,
            next_seq: vec![0; n],
            queries: Vec::new(),
            workload: Vec::new(),
            decisions: Vec::new(),
            snapshots: Vec::new(),
            max_transmissions: 0,
            optimal_cache: None,
            events: 0,
        })
    }

    fn execute(mut self) -> Result<RunResult> {
        let mut placement = stream_rng(self.seed, Stream::Placement);
        let k = self.cfg.replication.initial_replicas.min(self.n);
        let mut initial: Vec<usize> = sample(&mut placement, self.n, k).into_vec();
        initial.sort_unstable();
        for i in initial {
            self.open_replica(NodeId(i as u32), 0.0);
        }
        for (i, p) in self.profile.phases.iter().enumerate().skip(1) {
            if p.start <= self.cfg.duration {
                self.queue.push(p.start, Payload::DemandSwitch { phase: i });
            }
        }
        self.schedule_next_demand();
        self.queue.push(0.0, Payload::Snapshot);

        while let Some(ev) = self.queue.pop() {
            if ev.time > self.cfg.duration {
                break;
            }
            self.events += 1;
            let t = ev.time;
            match ev.payload {
                Payload::PeriodExpiry { node, epoch } => self.on_expiry(t, node, epoch),
                Payload::DemandSwitch { phase } => self.phase = phase,
                Payload::QueryIssue { node } => {
                    self.schedule_next_demand();
                    self.on_issue(t, node);
                }
                Payload::HopForward {
                    tx,
                    seq,
                    replica,
                    hops,
                    path,
                } => self.on_arrival(t, tx, seq, replica, hops, &path),
                Payload::ReplyHop { tx, replica, hops } => self.on_reply(t, tx, replica, hops),
                Payload::SectorTimeout { tx, step } => self.on_sector_timeout(t, tx, step),
                Payload::AttemptTimeout { tx, attempt } => self.on_attempt_timeout(t, tx, attempt),
                Payload::Snapshot => {
                    self.on_snapshot(t);
                    self.queue.push(t + self.cfg.replication.tau, Payload::Snapshot);
                }
            }
        }
        // queries still pending at the end are not reported
        self.queries
            .sort_by(|a, b| a.t_issue.total_cmp(&b.t_issue).then(a.origin.cmp(&b.origin)));
        let access = access_metrics(&self.queries, ACCESS_WINDOW);
        let initial_target = self.target_at(0.0);
        let series: Vec<(f64, f64)> = self
            .snapshots
            .iter()
            .map(|s| (s.t, s.replica_count as f64))
            .collect();
        let convergence = convergence_time(
            &series,
            initial_target,
            self.cfg.output.convergence_tol,
            self.cfg.output.convergence_window,
            self.cfg.warmup,
        );
        Ok(RunResult {
            seed: self.seed,
            snapshots: self.snapshots,
            queries: self.queries,
            workload: self.workload,
            decisions: self.decisions,
            access,
            convergence,
            initial_target,
            events: self.events,
            max_transmissions: self.max_transmissions,
        })
    }

    fn after_warmup(&self, t: f64) -> bool {
        t > self.cfg.warmup
    }

    fn schedule_next_demand(&mut self) {
        if let Some((t, node)) = self.demand.next_arrival() {
            self.queue.push(t, Payload::QueryIssue { node });
        }
    }

    fn open_replica(&mut self, node: NodeId, t: f64) {
        if let Some(state) = self.replicas.open(node, t) {
            self.queue.push(
                t + self.cfg.replication.tau,
                Payload::PeriodExpiry {
                    node,
                    epoch: state.epoch,
                },
            );
            self.cancel_queries_of(node, t);
        }
    }

    fn cancel_queries_of(&mut self, node: NodeId, _t: f64) {
        let ids: Vec<u64> = self
            .txs
            .iter()
            .filter(|(_, tx)| tx.origin == node)
            .map(|(id, _)| *id)
            .collect();
        for id in ids {
            let solved = self.txs[&id].first_reply.is_some();
            let outcome = if solved {
                QueryOutcome::Solved
            } else {
                QueryOutcome::Cancelled
            };
            self.finalize(id, outcome);
        }
    }

    fn finalize(&mut self, id: u64, outcome: QueryOutcome) {
        let Some(tx) = self.txs.remove(&id) else {
            return;
        };
        if tx.record {
            let solved = outcome == QueryOutcome::Solved;
            self.queries.push(QueryRecord {
                t_issue: tx.t_first,
                origin: tx.origin,
                mode: self.cfg.access.mode,
                outcome,
                latency: tx.first_reply.filter(|_| solved).map(|(at, _)| at - tx.t_first),
                replies: if solved { tx.repliers.len() as u32 } else { 0 },
                hops: tx.first_reply.filter(|_| solved).map(|(_, h)| h),
            });
        }
    }

    fn target_at(&self, t: f64) -> f64 {
        let phase = self.profile.phase_at(t);
        let n_active = match phase.region {
            None => self.n,
            Some(r) => self.trace.snapshot(t).iter().filter(|p| r.contains(**p)).count(),
        };
        let r = &self.cfg.replication;
        target_replica_count(n_active, phase.rate, r.tau, r.s_ref).unwrap_or(0.0)
    }

    fn on_issue(&mut self, t: f64, node: NodeId) {
        if self.replicas.contains(node) {
            return;
        }
        if let Some(region) = self.profile.phases[self.phase].region {
            if !region.contains(self.trace.locate(node, t)) {
                return;
            }
        }
        let id = self.next_tx;
        self.next_tx += 1;
        self.txs.insert(
            id,
            Tx {
                origin: node,
                t_first: t,
                attempts: Vec::new(),
                step: 0,
                first_reply: None,
                repliers: BTreeSet::new(),
                record: self.after_warmup(t),
            },
        );
        self.send(t, id);
    }

    /// Sends the next attempt (or scan sector) of transaction `id`.
    fn send(&mut self, t: f64, id: u64) {
        let mode = self.cfg.access.mode;
        let origin = self.txs[&id].origin;
        let seq = self.next_seq[origin.index()];
        self.next_seq[origin.index()] += 1;

        let mut q = Query::new(origin, seq, mode, t);
        match mode {
            AccessMode::Perfect => {
                let here = self.trace.locate(origin, t);
                let located = self
                    .replicas
                    .iter()
                    .map(|s| (s.node, self.trace.locate(s.node, t)));
                match closest_replica(here, located) {
                    Ok(target) => q = q.with_target(target),
                    Err(_) => {
                        // nothing to discover: go straight to the server
                        self.give_up(t, id);
                        return;
                    }
                }
            }
            AccessMode::Scan => {
                let step = self.txs[&id].step;
                let here = self.trace.locate(origin, t);
                q = q.with_sector(self.schedule[step].sector(here));
            }
            AccessMode::Flood | AccessMode::FloodSelective => {}
        }

        let g = self.topo.get(t, &self.trace);
        let replicas = &self.replicas;
        let prop = propagate(
            g,
            &|v| replicas.contains(v),
            &q,
            self.cfg.access.hops,
            &mut self.link,
        );
        self.max_transmissions = self.max_transmissions.max(prop.transmissions);
        for r in prop.reached {
            self.queue.push(
                r.arrival,
                Payload::HopForward {
                    tx: id,
                    seq,
                    replica: r.replica,
                    hops: r.hops,
                    path: r.path,
                },
            );
        }
        let tx = self.txs.get_mut(&id).expect("live transaction");
        match mode {
            AccessMode::Scan => {
                self.queue.push(
                    t + self.cfg.access.sector_timeout,
                    Payload::SectorTimeout { tx: id, step: tx.step },
                );
            }
            _ => {
                let attempt = tx.attempts.len();
                self.queue.push(
                    t + self.cfg.access.attempt_timeout,
                    Payload::AttemptTimeout { tx: id, attempt },
                );
            }
        }
    }

    fn on_arrival(&mut self, t: f64, id: u64, seq: u64, replica: NodeId, hops: u32, path: &[NodeId]) {
        if !self.replicas.contains(replica) {
            return;
        }
        if self.cfg.access.mode == AccessMode::FloodSelective {
            let p = selective_reply_probability(hops).expect("replica is at least one hop away");
            if self.sel_rng.random::<f64>() >= p {
                return;
            }
        }
        if let Some(state) = self.replicas.get_mut(replica) {
            state.served += 1;
        }
        let Some(origin) = self.txs.get(&id).map(|tx| tx.origin) else {
            // the consumer stopped listening; the replica still did the work
            return;
        };
        let reply = Reply::for_query(origin, seq, path, t);
        if let BacktrackOutcome::Delivered { at } =
            backtrack_reply(&self.trace, self.cfg.network.range, &reply, &mut self.link)
        {
            if at <= self.cfg.duration {
                self.queue.push(at, Payload::ReplyHop { tx: id, replica, hops });
            }
        }
    }

    fn on_reply(&mut self, t: f64, id: u64, replica: NodeId, hops: u32) {
        if let Some(tx) = self.txs.get_mut(&id) {
            if tx.first_reply.is_none() {
                tx.first_reply = Some((t, hops));
            }
            tx.repliers.insert(replica);
        }
    }

    fn on_sector_timeout(&mut self, t: f64, id: u64, step: usize) {
        let Some(tx) = self.txs.get_mut(&id) else {
            return;
        };
        if tx.step != step {
            return;
        }
        if tx.first_reply.is_some() {
            self.finalize(id, QueryOutcome::Solved);
            return;
        }
        if step + 1 < self.schedule.len() {
            tx.step += 1;
            self.send(t, id);
        } else {
            tx.attempts.push(AttemptOutcome::Unsolved);
            self.give_up(t, id);
        }
    }

    fn on_attempt_timeout(&mut self, t: f64, id: u64, attempt: usize) {
        let Some(tx) = self.txs.get_mut(&id) else {
            return;
        };
        if tx.attempts.len() != attempt {
            return;
        }
        tx.attempts.push(if tx.first_reply.is_some() {
            AttemptOutcome::Solved
        } else {
            AttemptOutcome::Unsolved
        });
        match retry_controller(self.cfg.access.mode, &tx.attempts, self.cfg.access.max_attempts) {
            RetryAction::Done => self.finalize(id, QueryOutcome::Solved),
            RetryAction::Retry => self.send(t, id),
            RetryAction::GiveUp => self.give_up(t, id),
        }
    }

    /// Unsolved after every attempt: fetch from the server and become a
    /// replica. Handover-only runs keep |C| fixed and skip the fetch.
    fn give_up(&mut self, t: f64, id: u64) {
        let origin = self.txs[&id].origin;
        self.finalize(id, QueryOutcome::Unsolved);
        if self.cfg.replication.adaptive {
            self.open_replica(origin, t);
        }
    }

    fn on_expiry(&mut self, t: f64, node: NodeId, epoch: u64) {
        let Some(state) = self.replicas.get(node).copied() else {
            return;
        };
        if state.epoch != epoch {
            return;
        }
        let r = &self.cfg.replication;
        let decision = if r.adaptive {
            decide(state.served, r.s_ref, r.epsilon)
        } else {
            Decision::Handover
        };
        if self.after_warmup(t) {
            self.workload.push(WorkloadRecord {
                t,
                node,
                served: state.served,
            });
        }
        let eligible: Vec<NodeId> = {
            let g = self.topo.get(t, &self.trace);
            let replicas = &self.replicas;
            g.neighbors(node)
                .into_iter()
                .filter(|v| !replicas.contains(*v))
                .collect()
        };
        let outcome = on_period_expiry(&state, &eligible, decision, &mut self.rwd_rng);
        self.replicas.close(node);
        for holder in outcome.new_holders {
            self.open_replica(holder, t);
        }
        self.decisions.push(DecisionRecord {
            t,
            node,
            served: state.served,
            decision,
            replicas_after: self.replicas.len(),
        });
    }

    fn on_snapshot(&mut self, t: f64) {
        let count = self.replicas.len();
        let mut snap = SnapshotMetrics::bare(t, count);
        snap.target = Some(self.target_at(t));
        if self.after_warmup(t) {
            self.measure(t, &mut snap);
        }
        self.snapshots.push(snap);
    }

    fn measure(&mut self, t: f64, snap: &mut SnapshotMetrics) {
        let out = &self.cfg.output;
        let positions = self.trace.snapshot(t);
        let replicas = self.replicas.nodes();
        let edges = Histogram::equal_width(0.0, self.area.diagonal(), out.bins).edges;
        let observed = Histogram::from_samples(&edges, &interdistance_samples(&positions, &replicas));
        let all: Vec<NodeId> = (0..self.n as u32).map(NodeId).collect();

        if out.chi2 && replicas.len() >= 2 {
            let nodal = nodal_uniform_reference(
                &positions,
                &all,
                replicas.len(),
                out.reference_draws,
                &mut self.ref_rng,
                &edges,
            );
            snap.chi2_vs_nodal = chi_square(&observed, &nodal).ok();
            let spatial = spatial_uniform_reference(
                self.area.as_region(),
                replicas.len(),
                out.reference_draws,
                &mut self.ref_rng,
                &edges,
            );
            snap.chi2_vs_spatial = chi_square(&observed, &spatial).ok();
        }
        if out.chi2_optimal && replicas.len() >= 2 {
            let placement = self.optimal_placement(t, replicas.len());
            let expected =
                Histogram::from_samples(&edges, &interdistance_samples(&positions, &placement));
            snap.chi2_vs_optimal = chi_square(&observed, &expected).ok();
        }
        if let Some(region) = self.tracked_region() {
            let inside: Vec<NodeId> = all
                .iter()
                .copied()
                .filter(|v| region.contains(positions[v.index()]))
                .collect();
            let rep_inside: Vec<NodeId> = replicas
                .iter()
                .copied()
                .filter(|v| region.contains(positions[v.index()]))
                .collect();
            snap.nodes_in_region = Some(inside.len() as f64 / self.n as f64);
            if !replicas.is_empty() {
                snap.replicas_in_region = Some(rep_inside.len() as f64 / replicas.len() as f64);
            }
            // both sides restricted to the region: replicas inside it against
            // nodal uniformity over the nodes inside it
            if out.chi2 && rep_inside.len() >= 2 && inside.len() >= 2 {
                let edges = Histogram::equal_width(0.0, region.diagonal(), out.bins).edges;
                let observed =
                    Histogram::from_samples(&edges, &interdistance_samples(&positions, &rep_inside));
                let local = nodal_uniform_reference(
                    &positions,
                    &inside,
                    rep_inside.len(),
                    out.reference_draws,
                    &mut self.ref_rng,
                    &edges,
                );
                snap.chi2_vs_nodal_region = chi_square(&observed, &local).ok();
            }
        }
        if out.hop_cdf && !replicas.is_empty() {
            let g = self.topo.get(t, &self.trace);
            let cdf = hop_cdf(g, &replicas);
            snap.hop_cdf1 = Some(cdf.at(1));
            snap.hop_cdf2 = Some(cdf.at(2));
        }
    }

    fn tracked_region(&self) -> Option<Region> {
        self.cfg
            .tracked_region()
            .or_else(|| self.profile.phases.iter().find_map(|p| p.region))
    }

    fn optimal_placement(&mut self, t: f64, k: usize) -> Vec<NodeId> {
        if self.topo.frozen {
            if let Some((ck, p)) = &self.optimal_cache {
                if *ck == k {
                    return p.clone();
                }
            }
        }
        let g = self.topo.get(t, &self.trace);
        let inst = FlInstance::new(g, Metric::HopCount);
        let seed = sub_seed(self.seed, Stream::Solver) ^ (t.to_bits());
        let facilities = local_search(&inst, Problem::KMedian { k }, seed, 1)
            .map(|s| s.facilities)
            .unwrap_or_default();
        self.optimal_cache = Some((k, facilities.clone()));
        facilities
    }
}
