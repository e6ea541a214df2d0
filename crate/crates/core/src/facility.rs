//! Centralized facility-location oracle: uncapacitated k-median and
//! uncapacitated facility location, solved exactly by enumeration on small
//! graphs and approximately by single-move local search.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{euclidean_distance, hop_distances, NetworkGraph, NodeId};

/// Largest instance `brute_force` accepts.
pub const BRUTE_FORCE_CAP: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    HopCount,
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "problem")]
pub enum Problem {
    KMedian { k: usize },
    Ufl,
}

#[derive(Debug, Clone)]
pub struct FlInstance {
    ids: Vec<NodeId>,
    demand: Vec<f64>,
    opening: Vec<f64>,
    dist: Vec<Vec<f64>>,
}

impl FlInstance {
    /// Unit demand everywhere, zero opening costs.
    pub fn new(g: &NetworkGraph, metric: Metric) -> Self {
        let n = g.len();
        let dist = match metric {
            Metric::HopCount => (0..n)
                .map(|i| {
                    hop_distances(g, &[g.id_at(i)])
                        .into_iter()
                        .map(|d| d.map_or(f64::INFINITY, f64::from))
                        .collect()
                })
                .collect(),
            Metric::Euclidean => (0..n)
                .map(|i| {
                    (0..n)
                        .map(|j| euclidean_distance(g.position_at_index(i), g.position_at_index(j)))
                        .collect()
                })
                .collect(),
        };
        Self {
            ids: g.node_ids().to_vec(),
            demand: vec![1.0; n],
            opening: vec![0.0; n],
            dist,
        }
    }

    pub fn with_demand(mut self, demand: &BTreeMap<NodeId, f64>) -> Result<Self> {
        for (id, d) in demand {
            let i = self.slot(*id)?;
            if !(*d >= 0.0) {
                return Err(Error::invalid("demand", format!("negative demand at {id}")));
            }
            self.demand[i] = *d;
        }
        Ok(self)
    }

    pub fn with_uniform_demand(mut self, d: f64) -> Self {
        self.demand.iter_mut().for_each(|x| *x = d);
        self
    }

    pub fn with_costs(mut self, costs: &BTreeMap<NodeId, f64>) -> Result<Self> {
        for (id, c) in costs {
            let i = self.slot(*id)?;
            self.opening[i] = *c;
        }
        Ok(self)
    }

    fn slot(&self, id: NodeId) -> Result<usize> {
        self.ids
            .iter()
            .position(|x| *x == id)
            .ok_or(Error::UnknownNode(id))
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn distance(&self, a: NodeId, b: NodeId) -> Result<f64> {
        Ok(self.dist[self.slot(a)?][self.slot(b)?])
    }

    fn slots(&self, facilities: &[NodeId]) -> Result<Vec<usize>> {
        facilities.iter().map(|f| self.slot(*f)).collect()
    }

    fn service_cost_slots(&self, open: &[usize]) -> f64 {
        if open.is_empty() {
            return f64::INFINITY;
        }
        (0..self.len())
            .map(|v| {
                let d = open.iter().map(|&f| self.dist[v][f]).fold(f64::INFINITY, f64::min);
                weighted(self.demand[v], d)
            })
            .sum()
    }

    fn opening_cost_slots(&self, open: &[usize]) -> f64 {
        open.iter().map(|&f| self.opening[f]).sum()
    }

    fn cost_slots(&self, problem: Problem, open: &[usize]) -> f64 {
        match problem {
            Problem::KMedian { .. } => self.service_cost_slots(open),
            Problem::Ufl => self.opening_cost_slots(open) + self.service_cost_slots(open),
        }
    }

    fn solution(&self, problem: Problem, mut open: Vec<usize>) -> FacilitySolution {
        open.sort_unstable();
        let assignment = (0..self.len())
            .map(|v| {
                // smallest slot wins ties; slots follow id order for generated graphs
                let best = open
                    .iter()
                    .copied()
                    .min_by(|&a, &b| {
                        self.dist[v][a]
                            .total_cmp(&self.dist[v][b])
                            .then(self.ids[a].cmp(&self.ids[b]))
                    })
                    .expect("non-empty facility set");
                (self.ids[v], self.ids[best])
            })
            .collect();
        let mut facilities: Vec<NodeId> = open.iter().map(|&i| self.ids[i]).collect();
        facilities.sort_unstable();
        FacilitySolution {
            facilities,
            assignment,
            cost: self.cost_slots(problem, &open),
        }
    }
}

fn weighted(demand: f64, d: f64) -> f64 {
    if demand == 0.0 {
        0.0
    } else {
        demand * d
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FacilitySolution {
    pub facilities: Vec<NodeId>,
    pub assignment: BTreeMap<NodeId, NodeId>,
    pub cost: f64,
}

impl FacilitySolution {
    /// Every node is assigned to one of its nearest open facilities.
    pub fn assignment_is_optimal(&self, inst: &FlInstance) -> bool {
        self.assignment.iter().all(|(v, m)| {
            let dm = inst.distance(*v, *m).unwrap_or(f64::INFINITY);
            self.facilities.contains(m)
                && self
                    .facilities
                    .iter()
                    .all(|f| dm <= inst.distance(*v, *f).unwrap_or(f64::INFINITY))
        })
    }
}

pub fn kmedian_cost(inst: &FlInstance, facilities: &[NodeId]) -> Result<f64> {
    Ok(inst.service_cost_slots(&inst.slots(facilities)?))
}

pub fn ufl_cost(inst: &FlInstance, facilities: &[NodeId]) -> Result<f64> {
    let open = inst.slots(facilities)?;
    Ok(inst.opening_cost_slots(&open) + inst.service_cost_slots(&open))
}

/// `base * degree(v)` for every node.
pub fn degree_proportional_costs(g: &NetworkGraph, base: f64) -> Result<BTreeMap<NodeId, f64>> {
    if !(base > 0.0) {
        return Err(Error::invalid("base", "must be positive"));
    }
    Ok(g.node_ids()
        .iter()
        .map(|id| (*id, base * g.degree(*id) as f64))
        .collect())
}

/// Exact optimum by enumeration.
pub fn brute_force(inst: &FlInstance, problem: Problem) -> Result<FacilitySolution> {
    let n = inst.len();
    if n > BRUTE_FORCE_CAP {
        return Err(Error::InstanceTooLarge {
            nodes: n,
            cap: BRUTE_FORCE_CAP,
        });
    }
    if n == 0 {
        return Err(Error::invalid("instance", "no nodes"));
    }
    if let Problem::KMedian { k } = problem {
        check_k(k, n)?;
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for mask in 1u32..(1u32 << n) {
        let size = mask.count_ones() as usize;
        if let Problem::KMedian { k } = problem {
            if size != k {
                continue;
            }
        }
        let open: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let c = inst.cost_slots(problem, &open);
        if best.as_ref().is_none_or(|(bc, _)| c < *bc) {
            best = Some((c, open));
        }
    }
    let (_, open) = best.expect("at least one subset");
    Ok(inst.solution(problem, open))
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(Error::invalid("k", format!("must lie in [1, {n}]")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Move {
    Add(usize),
    Drop(usize),
    Swap { out: usize, inn: usize },
}

/// Incremental cost evaluation: each client keeps its nearest and
/// second-nearest open facility, so a candidate move costs O(N).
struct Evaluator<'a> {
    inst: &'a FlInstance,
    problem: Problem,
    open: Vec<bool>,
    nearest: Vec<(f64, usize)>,
    second: Vec<f64>,
    cost: f64,
}

impl<'a> Evaluator<'a> {
    fn new(inst: &'a FlInstance, problem: Problem, start: &[usize]) -> Self {
        let mut open = vec![false; inst.len()];
        for &f in start {
            open[f] = true;
        }
        let mut ev = Self {
            inst,
            problem,
            open,
            nearest: Vec::new(),
            second: Vec::new(),
            cost: 0.0,
        };
        ev.refresh();
        ev
    }

    fn open_list(&self) -> Vec<usize> {
        (0..self.inst.len()).filter(|&i| self.open[i]).collect()
    }

    fn refresh(&mut self) {
        let open = self.open_list();
        self.nearest.clear();
        self.second.clear();
        for v in 0..self.inst.len() {
            let mut d1 = (f64::INFINITY, usize::MAX);
            let mut d2 = f64::INFINITY;
            for &f in &open {
                let d = self.inst.dist[v][f];
                if d < d1.0 || (d == d1.0 && f < d1.1) {
                    d2 = d2.min(d1.0);
                    d1 = (d, f);
                } else {
                    d2 = d2.min(d);
                }
            }
            self.nearest.push(d1);
            self.second.push(d2);
        }
        self.cost = self.inst.cost_slots(self.problem, &open);
    }

    fn evaluate(&self, mv: Move) -> f64 {
        let inst = self.inst;
        let (opening_delta, out, inn) = match mv {
            Move::Add(i) => (inst.opening[i], None, Some(i)),
            Move::Drop(o) => (-inst.opening[o], Some(o), None),
            Move::Swap { out, inn } => (inst.opening[inn] - inst.opening[out], Some(out), Some(inn)),
        };
        let mut service = 0.0;
        for v in 0..inst.len() {
            let (d1, f1) = self.nearest[v];
            let mut d = if Some(f1) == out { self.second[v] } else { d1 };
            if let Some(i) = inn {
                d = d.min(inst.dist[v][i]);
            }
            service += weighted(inst.demand[v], d);
        }
        match self.problem {
            Problem::KMedian { .. } => service,
            Problem::Ufl => {
                let open_cost: f64 = self.open_list().iter().map(|&f| inst.opening[f]).sum();
                open_cost + opening_delta + service
            }
        }
    }

    fn apply(&mut self, mv: Move) {
        match mv {
            Move::Add(i) => self.open[i] = true,
            Move::Drop(o) => self.open[o] = false,
            Move::Swap { out, inn } => {
                self.open[out] = false;
                self.open[inn] = true;
            }
        }
        self.refresh();
    }

    /// First improving move in fixed slot order.
    fn first_improvement(&self) -> Option<(Move, f64)> {
        let n = self.inst.len();
        let open = self.open_list();
        let closed: Vec<usize> = (0..n).filter(|&i| !self.open[i]).collect();
        let try_move = |mv: Move| {
            let c = self.evaluate(mv);
            improves(c, self.cost).then_some((mv, c))
        };
        if self.problem == Problem::Ufl {
            for &i in &closed {
                if let Some(hit) = try_move(Move::Add(i)) {
                    return Some(hit);
                }
            }
            if open.len() > 1 {
                for &o in &open {
                    if let Some(hit) = try_move(Move::Drop(o)) {
                        return Some(hit);
                    }
                }
            }
        }
        for &out in &open {
            for &inn in &closed {
                if let Some(hit) = try_move(Move::Swap { out, inn }) {
                    return Some(hit);
                }
            }
        }
        None
    }
}

fn improves(new: f64, current: f64) -> bool {
    if !(new < current) {
        return false;
    }
    current.is_infinite() || current - new > 1e-9 * current.abs().max(1.0)
}

/// Single-move local search from random starts; `restarts` independent
/// descents, best kept. Deterministic for a given seed.
pub fn local_search(
    inst: &FlInstance,
    problem: Problem,
    seed: u64,
    restarts: usize,
) -> Result<FacilitySolution> {
    let n = inst.len();
    if n == 0 {
        return Err(Error::invalid("instance", "no nodes"));
    }
    if let Problem::KMedian { k } = problem {
        check_k(k, n)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..restarts.max(1) {
        let size = match problem {
            Problem::KMedian { k } => k,
            Problem::Ufl => rng.random_range(1..=n),
        };
        let start = sample(&mut rng, n, size).into_vec();
        let open = descend(inst, problem, &start);
        let c = inst.cost_slots(problem, &open);
        if best.as_ref().is_none_or(|(bc, _)| c < *bc) {
            best = Some((c, open));
        }
    }
    let (_, open) = best.expect("at least one restart");
    Ok(inst.solution(problem, open))
}

/// Runs moves until none improves; returns the final open set.
fn descend(inst: &FlInstance, problem: Problem, start: &[usize]) -> Vec<usize> {
    let mut ev = Evaluator::new(inst, problem, start);
    while let Some((mv, _)) = ev.first_improvement() {
        ev.apply(mv);
    }
    ev.open_list()
}

/// Cost trace of one descent, for checking monotonicity.
pub fn local_search_trace(inst: &FlInstance, problem: Problem, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = inst.len();
    let size = match problem {
        Problem::KMedian { k } => k.min(n),
        Problem::Ufl => rng.random_range(1..=n),
    };
    let start = sample(&mut rng, n, size).into_vec();
    let mut ev = Evaluator::new(inst, problem, &start);
    let mut trace = vec![ev.cost];
    while let Some((mv, _)) = ev.first_improvement() {
        ev.apply(mv);
        trace.push(ev.cost);
    }
    trace
}
