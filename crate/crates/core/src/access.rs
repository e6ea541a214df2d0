//! Content access: how queries travel from a consumer towards replicas and
//! how replies find their way back.
//!
//! Propagation is computed over a topology snapshot taken when the query is
//! issued. With a constant per-hop delay the breadth-first order is also the
//! arrival-time order, so hop `h` is reached at `issued_at + h * delay`.
//! Replies are walked hop by hop against the live positions, which is where
//! mobility can break a path.

use std::collections::{HashSet, VecDeque};
use std::f64::consts::TAU;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{euclidean_distance, in_sector, NetworkGraph, NodeId, Position, Sector};
use crate::mobility::PositionSource;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessMode {
    Flood,
    FloodSelective,
    Scan,
    Perfect,
}

impl AccessMode {
    pub fn label(self) -> &'static str {
        match self {
            AccessMode::Flood => "flood",
            AccessMode::FloodSelective => "flood_selective",
            AccessMode::Scan => "scan",
            AccessMode::Perfect => "perfect",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        match s {
            "flood" => Some(AccessMode::Flood),
            "flood_selective" => Some(AccessMode::FloodSelective),
            "scan" => Some(AccessMode::Scan),
            "perfect" => Some(AccessMode::Perfect),
            _ => None,
        }
    }
}

/// Query message. `relay_path` lists every node that handled the query
/// after the origin, so its length is the number of hops traversed.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub origin: NodeId,
    pub seq: u64,
    pub hops_traversed: u32,
    pub relay_path: Vec<NodeId>,
    pub mode: AccessMode,
    pub sector: Option<Sector>,
    pub target_replica: Option<NodeId>,
    pub issued_at: f64,
}

impl Query {
    pub fn new(origin: NodeId, seq: u64, mode: AccessMode, issued_at: f64) -> Self {
        Self {
            origin,
            seq,
            hops_traversed: 0,
            relay_path: Vec::new(),
            mode,
            sector: None,
            target_replica: None,
            issued_at,
        }
    }

    pub fn with_sector(mut self, sector: Sector) -> Self {
        self.sector = Some(sector);
        self
    }

    pub fn with_target(mut self, target: NodeId) -> Self {
        self.target_replica = Some(target);
        self
    }

    pub fn key(&self) -> (NodeId, u64) {
        (self.origin, self.seq)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reply {
    pub query_ref: (NodeId, u64),
    pub replica: NodeId,
    /// Replica first, origin last.
    pub reverse_path: Vec<NodeId>,
    pub served_at: f64,
}

impl Reply {
    pub fn for_query(origin: NodeId, seq: u64, relay_path: &[NodeId], served_at: f64) -> Self {
        let mut reverse_path: Vec<NodeId> = relay_path.iter().rev().copied().collect();
        reverse_path.push(origin);
        Self {
            query_ref: (origin, seq),
            replica: reverse_path[0],
            reverse_path,
            served_at,
        }
    }
}

/// Abstract link layer: fixed per-hop delay, independent per-reception loss.
#[derive(Debug, Clone)]
pub struct LinkLayer {
    pub per_hop_delay: f64,
    pub per_hop_loss: f64,
    rng: ChaCha8Rng,
}

impl LinkLayer {
    pub fn new(per_hop_delay: f64, per_hop_loss: f64, rng: ChaCha8Rng) -> Result<Self> {
        if !(per_hop_delay > 0.0) {
            return Err(Error::invalid("access.per_hop_delay", "must be positive"));
        }
        if !(0.0..=1.0).contains(&per_hop_loss) {
            return Err(Error::invalid("access.per_hop_loss", "must lie in [0, 1]"));
        }
        Ok(Self {
            per_hop_delay,
            per_hop_loss,
            rng,
        })
    }

    /// Draws whether one reception survives.
    pub fn survives(&mut self) -> bool {
        if self.per_hop_loss <= 0.0 {
            return true;
        }
        self.rng.random::<f64>() >= self.per_hop_loss
    }
}

/// Per-node memory of `(origin, seq)` pairs already handled. One cache
/// covers one propagation.
#[derive(Debug, Default)]
pub struct DedupCache {
    seen: HashSet<(NodeId, (NodeId, u64))>,
}

impl DedupCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// True the first time `node` sees `key`.
    pub fn first_sighting(&mut self, node: NodeId, key: (NodeId, u64)) -> bool {
        self.seen.insert((node, key))
    }

    pub fn handled_by(&self, node: NodeId) -> usize {
        self.seen.iter().filter(|(n, _)| *n == node).count()
    }
}

/// A replica that received the query.
#[derive(Debug, Clone, PartialEq)]
pub struct Reached {
    pub replica: NodeId,
    pub hops: u32,
    /// Relay path ending at the replica.
    pub path: Vec<NodeId>,
    pub arrival: f64,
}

#[derive(Debug, Clone, Default)]
pub struct Propagation {
    pub reached: Vec<Reached>,
    /// Number of rebroadcasts, origin included.
    pub transmissions: usize,
}

/// Scoped broadcast shared by every access mode.
///
/// A replica that serves stops the query; for `Perfect` only the named
/// target serves, other replicas relay like ordinary nodes. With a sector
/// set, nodes outside it discard the message.
pub fn propagate(
    g: &NetworkGraph,
    is_replica: &dyn Fn(NodeId) -> bool,
    q: &Query,
    max_hops: u32,
    link: &mut LinkLayer,
) -> Propagation {
    let mut out = Propagation::default();
    let Some(origin_idx) = g.index_of(q.origin) else {
        return out;
    };
    // one propagation carries one (origin, seq) key, so per-slot flags
    // are an exact stand-in for a DedupCache
    let mut seen = vec![false; g.len()];
    seen[origin_idx] = true;
    // (node index, hops, parent slot in `paths`)
    let mut paths: Vec<(usize, Option<usize>)> = vec![(origin_idx, None)];
    let mut queue = VecDeque::new();
    queue.push_back((origin_idx, 0u32, 0usize));

    while let Some((u, hops, slot)) = queue.pop_front() {
        if hops >= max_hops {
            continue;
        }
        out.transmissions += 1;
        for &v in g.neighbor_indices(u) {
            if seen[v] {
                continue;
            }
            if !link.survives() {
                continue;
            }
            seen[v] = true;
            let vid = g.id_at(v);
            if let Some(sector) = &q.sector {
                if !in_sector(sector, g.position_at_index(v)) {
                    continue;
                }
            }
            let h = hops + 1;
            paths.push((v, Some(slot)));
            let my_slot = paths.len() - 1;
            let serves = match q.mode {
                AccessMode::Perfect => q.target_replica == Some(vid),
                _ => is_replica(vid),
            };
            if serves {
                out.reached.push(Reached {
                    replica: vid,
                    hops: h,
                    path: unwind(g, &paths, my_slot),
                    arrival: q.issued_at + h as f64 * link.per_hop_delay,
                });
            } else {
                queue.push_back((v, h, my_slot));
            }
        }
    }
    out
}

fn unwind(g: &NetworkGraph, paths: &[(usize, Option<usize>)], mut slot: usize) -> Vec<NodeId> {
    let mut rev = Vec::new();
    while let (node, Some(parent)) = paths[slot] {
        rev.push(g.id_at(node));
        slot = parent;
    }
    rev.reverse();
    rev
}

/// Scoped flooding: every replica within `max_hops` that hears the query.
pub fn flood_query(
    g: &NetworkGraph,
    is_replica: &dyn Fn(NodeId) -> bool,
    q: &Query,
    max_hops: u32,
    link: &mut LinkLayer,
) -> Vec<Reached> {
    debug_assert!(matches!(q.mode, AccessMode::Flood | AccessMode::FloodSelective));
    propagate(g, is_replica, q, max_hops, link).reached
}

/// Reply probability for selective reply: `1 / hop_count`.
pub fn selective_reply_probability(hop_count: u32) -> Result<f64> {
    if hop_count == 0 {
        return Err(Error::ZeroHopReply);
    }
    Ok(1.0 / hop_count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanStep {
    pub start_angle: f64,
    pub width: f64,
    /// Offset from the start of the scan at which this sector times out.
    pub deadline: f64,
}

impl ScanStep {
    pub fn sector(&self, origin: Position) -> Sector {
        Sector {
            origin,
            start_angle: self.start_angle,
            width: self.width,
        }
    }
}

/// Round-robin visit of `sectors` equal sectors, `max_rounds` times.
pub fn scan_schedule(
    sectors: u32,
    sector_timeout: f64,
    max_rounds: u32,
    start_angle: f64,
) -> Vec<ScanStep> {
    let width = TAU / sectors.max(1) as f64;
    let mut out = Vec::with_capacity((sectors * max_rounds) as usize);
    for round in 0..max_rounds {
        for s in 0..sectors {
            let k = round * sectors + s;
            out.push(ScanStep {
                start_angle: (start_angle + s as f64 * width).rem_euclid(TAU),
                width,
                deadline: (k + 1) as f64 * sector_timeout,
            });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScanOutcome {
    Solved { replica: NodeId, latency: f64 },
    Unsolved,
}

/// Runs a full scan on a fixed topology. Sector `k` is issued at the
/// previous sector's deadline and the scan stops at the first delivered
/// reply.
pub fn scan_query(
    g: &NetworkGraph,
    is_replica: &dyn Fn(NodeId) -> bool,
    consumer: NodeId,
    schedule: &[ScanStep],
    max_hops: u32,
    link: &mut LinkLayer,
) -> ScanOutcome {
    let Some(origin) = g.position(consumer) else {
        return ScanOutcome::Unsolved;
    };
    let positions = crate::mobility::StaticPositions(g.positions().to_vec());
    let mut issue = 0.0;
    for (k, step) in schedule.iter().enumerate() {
        let q = Query::new(consumer, k as u64, AccessMode::Scan, issue)
            .with_sector(step.sector(origin));
        let mut best: Option<(f64, NodeId)> = None;
        for r in propagate(g, is_replica, &q, max_hops, link).reached {
            let reply = Reply::for_query(consumer, q.seq, &r.path, r.arrival);
            if let BacktrackOutcome::Delivered { at } =
                backtrack_reply(&positions, g.range(), &reply, link)
            {
                if best.is_none_or(|(t, _)| at < t) {
                    best = Some((at, r.replica));
                }
            }
        }
        if let Some((at, replica)) = best {
            if at <= step.deadline {
                return ScanOutcome::Solved {
                    replica,
                    latency: at,
                };
            }
        }
        issue = step.deadline;
    }
    ScanOutcome::Unsolved
}

/// Euclidean-closest replica, ties to the smallest id.
pub fn closest_replica(
    consumer_pos: Position,
    replicas: impl IntoIterator<Item = (NodeId, Position)>,
) -> Result<NodeId> {
    let mut best: Option<(f64, NodeId)> = None;
    for (id, p) in replicas {
        let d = euclidean_distance(consumer_pos, p);
        let better = match best {
            None => true,
            Some((bd, bid)) => d < bd || (d == bd && id < bid),
        };
        if better {
            best = Some((d, id));
        }
    }
    best.map(|(_, id)| id).ok_or(Error::NoReplicaExists)
}

pub fn perfect_discovery_target(
    g: &NetworkGraph,
    replicas: &[NodeId],
    consumer: NodeId,
) -> Result<NodeId> {
    let origin = g.position(consumer).ok_or(Error::UnknownNode(consumer))?;
    let mut located = Vec::with_capacity(replicas.len());
    for r in replicas {
        located.push((*r, g.position(*r).ok_or(Error::UnknownNode(*r))?));
    }
    closest_replica(origin, located)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BacktrackOutcome {
    /// Absolute delivery time at the origin.
    Delivered { at: f64 },
    Lost,
}

/// Walks the reply along its reverse path. Hop `k` leaves at
/// `served_at + k * delay`; the two endpoints must be within `range` at that
/// instant and the reception must survive the link.
pub fn backtrack_reply(
    positions: &dyn PositionSource,
    range: f64,
    reply: &Reply,
    link: &mut LinkLayer,
) -> BacktrackOutcome {
    let mut t = reply.served_at;
    for pair in reply.reverse_path.windows(2) {
        let a = positions.locate(pair[0], t);
        let b = positions.locate(pair[1], t);
        if euclidean_distance(a, b) > range || !link.survives() {
            return BacktrackOutcome::Lost;
        }
        t += link.per_hop_delay;
    }
    BacktrackOutcome::Delivered { at: t }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttemptOutcome {
    Solved,
    Unsolved,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetryAction {
    /// A reply arrived; nothing more to do.
    Done,
    Retry,
    GiveUp,
}

/// Flood and Perfect retry up to `max_attempts` total; one scan attempt
/// already walks every sector round, so scanning never retries.
pub fn retry_controller(
    mode: AccessMode,
    attempt_outcomes: &[AttemptOutcome],
    max_attempts: u32,
) -> RetryAction {
    if attempt_outcomes.contains(&AttemptOutcome::Solved) {
        return RetryAction::Done;
    }
    let limit = match mode {
        AccessMode::Scan => 1,
        _ => max_attempts as usize,
    };
    if attempt_outcomes.len() < limit {
        RetryAction::Retry
    } else {
        RetryAction::GiveUp
    }
}
