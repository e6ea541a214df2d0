//! Workload-driven replication: each replica counts the queries it serves
//! during its storage period and, when the period ends, replicates, drops or
//! hands the content over to a random neighbor.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplicationParams {
    /// Storage time τ, seconds.
    pub tau: f64,
    /// Reference workload, queries per storage period.
    pub s_ref: f64,
    /// Tolerance band around `s_ref`.
    pub epsilon: f64,
}

impl ReplicationParams {
    pub fn new(tau: f64, s_ref: f64, epsilon: f64) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::invalid("replication.tau", "must be positive"));
        }
        if !(s_ref >= 0.0) {
            return Err(Error::invalid("replication.s_R", "must be non-negative"));
        }
        if !(epsilon >= 0.0) {
            return Err(Error::invalid("replication.epsilon", "must be non-negative"));
        }
        Ok(Self { tau, s_ref, epsilon })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Replicate,
    Drop,
    Handover,
}

impl Decision {
    pub fn label(self) -> &'static str {
        match self {
            Decision::Replicate => "replicate",
            Decision::Drop => "drop",
            Decision::Handover => "handover",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        match s {
            "replicate" => Some(Decision::Replicate),
            "drop" => Some(Decision::Drop),
            "handover" => Some(Decision::Handover),
            _ => None,
        }
    }
}

pub fn decide(served: u64, s_ref: f64, epsilon: f64) -> Decision {
    let gap = served as f64 - s_ref;
    if gap > epsilon {
        Decision::Replicate
    } else if gap < -epsilon {
        Decision::Drop
    } else {
        Decision::Handover
    }
}

/// Cost of keeping a replica open: distance of its workload from the reference.
pub fn opening_cost(served: f64, s_ref: f64) -> f64 {
    (served - s_ref).abs()
}

/// Replica count at which every replica sees exactly `s_ref` queries per
/// period: `N λ τ / (λ τ + s_ref)`.
pub fn target_replica_count(n: usize, lambda: f64, tau: f64, s_ref: f64) -> Result<f64> {
    if lambda < 0.0 {
        return Err(Error::invalid("lambda", "must be non-negative"));
    }
    let denom = lambda * tau + s_ref;
    if !(denom > 0.0) {
        return Err(Error::invalid("lambda*tau + s_R", "must be positive"));
    }
    Ok(n as f64 * lambda * tau / denom)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RwdTarget {
    Neighbor(NodeId),
    NoNeighbor,
}

/// Random-walk diffusion step: a uniformly chosen entry of `candidates`.
pub fn rwd_target<R: Rng + ?Sized>(candidates: &[NodeId], rng: &mut R) -> RwdTarget {
    match candidates.choose(rng) {
        Some(n) => RwdTarget::Neighbor(*n),
        None => RwdTarget::NoNeighbor,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplicaState {
    pub node: NodeId,
    pub period_start: f64,
    pub served: u64,
    /// Unique per storage period; lets stale timers be recognized.
    pub epoch: u64,
}

/// Replica set `C(t)`, at most one replica per node.
#[derive(Debug, Clone)]
pub struct ReplicaSet {
    slots: Vec<Option<ReplicaState>>,
    count: usize,
    next_epoch: u64,
}

impl ReplicaSet {
    pub fn new(n_nodes: usize) -> Self {
        Self {
            slots: vec![None; n_nodes],
            count: 0,
            next_epoch: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn contains(&self, node: NodeId) -> bool {
        self.slots.get(node.index()).is_some_and(Option::is_some)
    }

    pub fn get(&self, node: NodeId) -> Option<&ReplicaState> {
        self.slots.get(node.index()).and_then(Option::as_ref)
    }

    pub fn get_mut(&mut self, node: NodeId) -> Option<&mut ReplicaState> {
        self.slots.get_mut(node.index()).and_then(Option::as_mut)
    }

    /// Starts a fresh storage period at `node`. Returns `None` if the node
    /// already holds a copy.
    pub fn open(&mut self, node: NodeId, now: f64) -> Option<ReplicaState> {
        let slot = &mut self.slots[node.index()];
        if slot.is_some() {
            return None;
        }
        let state = ReplicaState {
            node,
            period_start: now,
            served: 0,
            epoch: self.next_epoch,
        };
        self.next_epoch += 1;
        *slot = Some(state);
        self.count += 1;
        Some(state)
    }

    pub fn close(&mut self, node: NodeId) -> Option<ReplicaState> {
        let taken = self.slots[node.index()].take();
        if taken.is_some() {
            self.count -= 1;
        }
        taken
    }

    /// Replicas in increasing node order.
    pub fn iter(&self) -> impl Iterator<Item = &ReplicaState> {
        self.slots.iter().flatten()
    }

    pub fn nodes(&self) -> Vec<NodeId> {
        self.iter().map(|s| s.node).collect()
    }
}

/// What happens to the content when a storage period ends.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpiryOutcome {
    pub decision: Decision,
    /// Nodes that start a new storage period now (possibly the old holder).
    pub new_holders: Vec<NodeId>,
    /// Whether the old holder gives up its copy.
    pub releases: bool,
}

/// Applies the end-of-period rule for the replica at `state.node`.
///
/// `eligible` are the neighbors able to take a copy (in range and not
/// already holding one). Replicate hands one copy each to two distinct
/// neighbors, or to one neighbor while keeping the other copy when only one
/// is available. With nobody to hand to, the holder keeps its copy unless
/// the decision is Drop.
pub fn on_period_expiry<R: Rng + ?Sized>(
    state: &ReplicaState,
    eligible: &[NodeId],
    decision: Decision,
    rng: &mut R,
) -> ExpiryOutcome {
    let keep = |decision| ExpiryOutcome {
        decision,
        new_holders: vec![state.node],
        releases: true,
    };
    match decision {
        Decision::Drop => ExpiryOutcome {
            decision,
            new_holders: Vec::new(),
            releases: true,
        },
        Decision::Handover => match rwd_target(eligible, rng) {
            RwdTarget::Neighbor(n) => ExpiryOutcome {
                decision,
                new_holders: vec![n],
                releases: true,
            },
            RwdTarget::NoNeighbor => keep(decision),
        },
        Decision::Replicate => {
            let picks: Vec<NodeId> = eligible.choose_multiple(rng, 2).copied().collect();
            match picks.len() {
                0 => keep(decision),
                1 => ExpiryOutcome {
                    decision,
                    new_holders: vec![state.node, picks[0]],
                    releases: true,
                },
                _ => ExpiryOutcome {
                    decision,
                    new_holders: picks,
                    releases: true,
                },
            }
        }
    }
}

/// Server-fetch path after a consumer gives up: it becomes a replica.
pub fn on_query_miss(set: &mut ReplicaSet, consumer: NodeId, now: f64) -> Option<ReplicaState> {
    let opened = set.open(consumer, now);
    debug_assert!(opened.is_some(), "consumer {consumer} already holds a replica");
    opened
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use proptest::prelude::*;

    #[test]
    fn decision_truth_table() {
        assert_eq!(decide(13, 10.0, 2.0), Decision::Replicate);
        assert_eq!(decide(10, 10.0, 2.0), Decision::Handover);
        assert_eq!(decide(7, 10.0, 2.0), Decision::Drop);
        assert_eq!(decide(12, 10.0, 2.0), Decision::Handover);
        assert_eq!(decide(8, 10.0, 2.0), Decision::Handover);
    }

    #[test]
    fn target_count_values() {
        let a = target_replica_count(320, 0.01, 100.0, 10.0).unwrap();
        assert!((a - 29.0909).abs() < 1e-3);
        let b = target_replica_count(320, 0.02, 100.0, 10.0).unwrap();
        assert!((b - 53.3333).abs() < 1e-3);
        assert_eq!(target_replica_count(320, 0.0, 100.0, 10.0).unwrap(), 0.0);
        assert!(target_replica_count(320, -0.1, 100.0, 10.0).is_err());
    }

    #[test]
    fn target_count_balances_workload() {
        // at |C*| each replica serves exactly s_R per period
        let (n, lambda, tau, s_ref) = (320usize, 0.01, 100.0, 10.0);
        let c = target_replica_count(n, lambda, tau, s_ref).unwrap();
        let per_replica = (n as f64 - c) * lambda * tau / c;
        assert!((per_replica - s_ref).abs() < 1e-9);
    }

    #[test]
    fn opening_cost_examples() {
        assert_eq!(opening_cost(10.0, 10.0), 0.0);
        assert_eq!(opening_cost(13.0, 10.0), 3.0);
        assert_eq!(opening_cost(0.0, 10.0), 10.0);
    }

    #[test]
    fn rwd_examples() {
        let mut rng = stream_rng(3, Stream::Rwd);
        assert_eq!(rwd_target(&[NodeId(5)], &mut rng), RwdTarget::Neighbor(NodeId(5)));
        assert_eq!(rwd_target(&[], &mut rng), RwdTarget::NoNeighbor);
    }

    #[test]
    fn rwd_is_uniform_over_neighbors() {
        let mut rng = stream_rng(11, Stream::Rwd);
        let cands = [NodeId(1), NodeId(2), NodeId(3)];
        let mut counts = [0u32; 3];
        let draws = 10_000;
        for _ in 0..draws {
            if let RwdTarget::Neighbor(n) = rwd_target(&cands, &mut rng) {
                counts[(n.0 - 1) as usize] += 1;
            }
        }
        let e = draws as f64 / 3.0;
        let chi2: f64 = counts.iter().map(|&o| (o as f64 - e).powi(2) / e).sum();
        // 95% quantile of chi-square with 2 degrees of freedom
        assert!(chi2 < 5.991, "chi2 = {chi2}, counts = {counts:?}");
    }

    fn state() -> ReplicaState {
        ReplicaState {
            node: NodeId(0),
            period_start: 0.0,
            served: 0,
            epoch: 0,
        }
    }

    #[test]
    fn expiry_actions() {
        let mut rng = stream_rng(1, Stream::Rwd);
        let nb = [NodeId(1), NodeId(2), NodeId(3)];
        let rep = on_period_expiry(&state(), &nb, Decision::Replicate, &mut rng);
        assert_eq!(rep.new_holders.len(), 2);
        assert_ne!(rep.new_holders[0], rep.new_holders[1]);
        assert!(!rep.new_holders.contains(&NodeId(0)));

        let one = on_period_expiry(&state(), &nb[..1], Decision::Replicate, &mut rng);
        assert_eq!(one.new_holders, vec![NodeId(0), NodeId(1)]);

        let hand = on_period_expiry(&state(), &nb, Decision::Handover, &mut rng);
        assert_eq!(hand.new_holders.len(), 1);
        assert_ne!(hand.new_holders[0], NodeId(0));

        let drop = on_period_expiry(&state(), &nb, Decision::Drop, &mut rng);
        assert!(drop.new_holders.is_empty());

        let isolated = on_period_expiry(&state(), &[], Decision::Handover, &mut rng);
        assert_eq!(isolated.new_holders, vec![NodeId(0)]);
        let isolated = on_period_expiry(&state(), &[], Decision::Replicate, &mut rng);
        assert_eq!(isolated.new_holders, vec![NodeId(0)]);
        let isolated = on_period_expiry(&state(), &[], Decision::Drop, &mut rng);
        assert!(isolated.new_holders.is_empty());
    }

    #[test]
    fn replica_set_bookkeeping() {
        let mut set = ReplicaSet::new(4);
        assert!(on_query_miss(&mut set, NodeId(2), 5.0).is_some());
        assert_eq!(set.len(), 1);
        assert!(set.open(NodeId(2), 6.0).is_none());
        on_query_miss(&mut set, NodeId(0), 5.0);
        assert_eq!(set.nodes(), vec![NodeId(0), NodeId(2)]);
        let a = set.get(NodeId(0)).unwrap().epoch;
        let b = set.get(NodeId(2)).unwrap().epoch;
        assert_ne!(a, b);
        set.close(NodeId(0));
        assert_eq!(set.len(), 1);
        assert!(!set.contains(NodeId(0)));
    }

    proptest! {
        #[test]
        fn decide_is_monotone(s in 0u64..100, s_ref in 0.0f64..50.0, eps in 0.0f64..10.0) {
            let rank = |d| match d {
                Decision::Drop => 0,
                Decision::Handover => 1,
                Decision::Replicate => 2,
            };
            prop_assert!(rank(decide(s + 1, s_ref, eps)) >= rank(decide(s, s_ref, eps)));
        }
    }
}
